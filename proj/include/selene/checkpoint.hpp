#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "selene/routing.hpp"
#include "selene/tensor.hpp"

namespace selene {

// Versioned binary container: magic "SELN", format version, the RoutingConfig,
// then named parameter tensors as (name length, name, rank, extents, 64-bit
// little-endian floats). Round-trips are bit-exact.
struct Checkpoint {
    RoutingConfig config;
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add(std::string name, const Tensor& t) { tensors.emplace_back(std::move(name), t); }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace detail {

constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is, const char* what) {
    const std::uint64_t bits = get_u64(is, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
    os.write("SELN", 4);
    detail::put_u32(os, detail::kCheckpointVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(ckpt.config.num_layers));
    detail::put_u32(os, static_cast<std::uint32_t>(ckpt.config.num_levels));
    detail::put_u32(os, static_cast<std::uint32_t>(ckpt.config.base_channels));
    detail::put_u32(os, static_cast<std::uint32_t>(ckpt.config.num_classes));
    detail::put_u32(os, static_cast<std::uint32_t>(ckpt.config.num_permutations));
    detail::put_f64(os, ckpt.config.gate_threshold);
    detail::put_u64(os, ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) detail::put_u64(os, static_cast<std::uint64_t>(t.dim(i)));
        for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64(os, t[i]);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "SELN", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    const std::uint32_t version = detail::get_u32(is, "version");
    if (version != detail::kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.config.num_layers = static_cast<int>(detail::get_u32(is, "num_layers"));
    ckpt.config.num_levels = static_cast<int>(detail::get_u32(is, "num_levels"));
    ckpt.config.base_channels = static_cast<int>(detail::get_u32(is, "base_channels"));
    ckpt.config.num_classes = static_cast<int>(detail::get_u32(is, "num_classes"));
    ckpt.config.num_permutations = static_cast<int>(detail::get_u32(is, "num_permutations"));
    ckpt.config.gate_threshold = detail::get_f64(is, "gate_threshold");
    const std::uint64_t count = detail::get_u64(is, "tensor count");
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(is, "name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated tensor name");
        const std::uint32_t rank = detail::get_u32(is, "rank");
        Shape shape(rank);
        for (std::uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int>(detail::get_u64(is, "extent"));
        Tensor t(shape);
        double* v = t.data_mut();
        for (std::size_t e = 0; e < t.size(); ++e) v[e] = detail::get_f64(is, "tensor data");
        ckpt.add(std::move(name), t);
    }
    return ckpt;
}

// --- RoutingNet convenience wrappers ---

inline void add_net_params(Checkpoint& ckpt, RoutingNet& net, const std::string& prefix) {
    net.visit_params([&](const std::string& name, Tensor& t) { ckpt.add(prefix + name, t); });
}

// Copies values from the checkpoint into an existing net, in place, so that
// optimizer/EMA aliases stay valid. Missing or mis-shaped entries throw.
inline void load_net_params(const Checkpoint& ckpt, RoutingNet& net, const std::string& prefix) {
    net.visit_params([&](const std::string& name, Tensor& t) {
        const Tensor* src = ckpt.find(prefix + name);
        if (!src) throw std::runtime_error("checkpoint: missing tensor " + prefix + name);
        if (src->shape() != t.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + prefix + name + ": " +
                                     shape_str(src->shape()) + " vs " + shape_str(t.shape()));
        std::memcpy(t.data_mut(), src->data(), t.size() * sizeof(double));
    });
}

// Builds a fresh net from a checkpoint's config and weights.
inline RoutingNet net_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
    Rng rng(0);
    RoutingNet net(ckpt.config, rng);
    load_net_params(ckpt, net, prefix);
    return net;
}

}  // namespace selene
