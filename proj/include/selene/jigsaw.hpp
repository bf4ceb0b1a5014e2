#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "selene/losses.hpp"
#include "selene/rng.hpp"
#include "selene/routing.hpp"
#include "selene/tensor.hpp"

namespace selene {

using JigsawPerm = std::array<int, 9>;

constexpr int kGridSlots = 9;
constexpr std::uint64_t kMaxPermutations = 362880;  // 9!

// Fixed set of 3x3-grid permutations; the pretext classification targets are
// indices into this set.
struct PermutationSet {
    int k = 0;
    std::uint64_t seed = 0;
    std::vector<JigsawPerm> perms;
};

inline int hamming_distance(const JigsawPerm& a, const JigsawPerm& b) {
    int d = 0;
    for (int i = 0; i < kGridSlots; ++i) d += a[i] != b[i];
    return d;
}

inline JigsawPerm inverse_permutation(const JigsawPerm& p) {
    JigsawPerm inv{};
    for (int i = 0; i < kGridSlots; ++i) inv[static_cast<std::size_t>(p[i])] = i;
    return inv;
}

inline int min_pairwise_hamming(const PermutationSet& pset) {
    int best = kGridSlots + 1;
    for (std::size_t i = 0; i < pset.perms.size(); ++i)
        for (std::size_t j = i + 1; j < pset.perms.size(); ++j)
            best = std::min(best, hamming_distance(pset.perms[i], pset.perms[j]));
    return best;
}

// Greedy max-min-Hamming selection: start from one seeded random permutation,
// then repeatedly draw a pool of 10,000 seeded candidates and keep the one
// whose minimum distance to the chosen set is largest (first winner on ties,
// exact duplicates excluded). Deterministic in (k, seed).
inline PermutationSet generate_permutation_set(int k, std::uint64_t seed) {
    if (k < 1 || static_cast<std::uint64_t>(k) > kMaxPermutations)
        throw std::invalid_argument("generate_permutation_set: k must lie in [1, 9!]");
    constexpr int kPoolSize = 10000;
    Rng rng(seed);

    auto random_perm = [&rng] {
        std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8};
        rng.shuffle(v);
        JigsawPerm p{};
        std::copy(v.begin(), v.end(), p.begin());
        return p;
    };

    PermutationSet pset;
    pset.k = k;
    pset.seed = seed;
    pset.perms.push_back(random_perm());
    std::set<JigsawPerm> chosen(pset.perms.begin(), pset.perms.end());

    while (static_cast<int>(pset.perms.size()) < k) {
        JigsawPerm best{};
        int best_dist = -1;
        for (int retry = 0; best_dist < 0 && retry < 100; ++retry) {
            for (int c = 0; c < kPoolSize; ++c) {
                const JigsawPerm cand = random_perm();
                if (chosen.count(cand)) continue;
                int dmin = kGridSlots + 1;
                for (const JigsawPerm& p : pset.perms) dmin = std::min(dmin, hamming_distance(cand, p));
                if (dmin > best_dist) {
                    best_dist = dmin;
                    best = cand;
                }
            }
        }
        if (best_dist < 0)
            throw std::runtime_error("generate_permutation_set: candidate pool exhausted near k = " +
                                     std::to_string(pset.perms.size()));
        pset.perms.push_back(best);
        chosen.insert(best);
    }
    return pset;
}

namespace detail {

template <typename T>
void relocate_patches(const T* in, T* out, int h, int w, const JigsawPerm& perm) {
    const int ph = h / 3, pw = w / 3;
    for (int slot = 0; slot < kGridSlots; ++slot) {
        const int src = perm[static_cast<std::size_t>(slot)];
        const int oy = (slot / 3) * ph, ox = (slot % 3) * pw;
        const int iy = (src / 3) * ph, ix = (src % 3) * pw;
        for (int y = 0; y < ph; ++y) {
            const T* s = in + static_cast<std::size_t>(iy + y) * w + ix;
            T* d = out + static_cast<std::size_t>(oy + y) * w + ox;
            for (int x = 0; x < pw; ++x) d[x] = s[x];
        }
    }
}

inline void check_divisible_by_3(int h, int w, const char* op) {
    if (h % 3 != 0 || w % 3 != 0)
        throw std::invalid_argument(std::string(op) + ": spatial size " + std::to_string(h) + "x" +
                                    std::to_string(w) + " must be divisible by 3");
}

}  // namespace detail

// Cuts each image of [B,C,H,W] into a 3x3 patch grid and relocates patches:
// output slot i holds input patch perm[i]. Pure relocation.
inline Tensor apply_jigsaw(const Tensor& image, const JigsawPerm& perm) {
    detail::check_rank(image, 4, "apply_jigsaw", "image");
    const int b = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
    detail::check_divisible_by_3(h, w, "apply_jigsaw");
    Tensor out(image.shape());
    const double* in = image.data();
    double* o = out.data_mut();
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(b) * c; ++p)
        detail::relocate_patches(in + p * h * w, o + p * h * w, h, w, perm);
    return out;
}

// Same relocation for a label map [H,W].
inline IntTensor apply_jigsaw(const IntTensor& mask, const JigsawPerm& perm) {
    if (mask.shape.size() != 2) throw std::invalid_argument("apply_jigsaw: mask must be rank 2");
    const int h = mask.dim(0), w = mask.dim(1);
    detail::check_divisible_by_3(h, w, "apply_jigsaw");
    IntTensor out(mask.shape);
    detail::relocate_patches(mask.v.data(), out.v.data(), h, w, perm);
    return out;
}

// One uniformly drawn permutation per image; returns the shuffled batch and
// the permutation indices as pretext targets. Images whose spatial size is
// not a multiple of 3 are center-cropped to the largest multiple first.
inline std::pair<Tensor, IntTensor> make_pretext_batch(const Tensor& batch, const PermutationSet& pset, Rng& rng) {
    detail::check_rank(batch, 4, "make_pretext_batch", "batch");
    const int b = batch.dim(0), c = batch.dim(1);
    int h = batch.dim(2), w = batch.dim(3);
    const int h3 = (h / 3) * 3, w3 = (w / 3) * 3;
    if (h3 == 0 || w3 == 0) throw std::invalid_argument("make_pretext_batch: image too small for a 3x3 grid");

    Tensor cropped = batch;
    if (h3 != h || w3 != w) {
        const int oy = (h - h3) / 2, ox = (w - w3) / 2;
        cropped = Tensor(Shape{b, c, h3, w3});
        const double* in = batch.data();
        double* o = cropped.data_mut();
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(b) * c; ++p)
            for (int y = 0; y < h3; ++y)
                for (int x = 0; x < w3; ++x)
                    o[(p * h3 + y) * w3 + x] = in[(p * h + oy + y) * w + ox + x];
        h = h3;
        w = w3;
    }

    Tensor out(cropped.shape());
    IntTensor targets(Shape{b});
    const double* in = cropped.data();
    double* o = out.data_mut();
    for (int i = 0; i < b; ++i) {
        const int jig = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(pset.k)));
        targets[static_cast<std::size_t>(i)] = jig;
        const JigsawPerm& perm = pset.perms[static_cast<std::size_t>(jig)];
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * h * w;
            detail::relocate_patches(in + off, o + off, h, w, perm);
        }
    }
    return {out, targets};
}

// Self-supervised regularizer: pretext cross-entropy on a jigsawed labeled
// batch plus the same on an unlabeled batch, each term batch-averaged. An
// empty batch contributes nothing. One permutation is sampled per image per
// call, an unbiased estimator of the average over the whole set.
inline Tensor ssl_loss(const RoutingNet& net, const PermutationSet& pset, const Tensor& labeled,
                       const Tensor& unlabeled, Rng& rng) {
    auto term = [&](const Tensor& images) -> Tensor {
        auto [jigsawed, targets] = make_pretext_batch(images, pset, rng);
        return softmax_cross_entropy(net.pretext_forward(jigsawed), targets);
    };
    const bool has_l = labeled.defined() && labeled.dim(0) > 0;
    const bool has_u = unlabeled.defined() && unlabeled.dim(0) > 0;
    if (has_l && has_u) return add(term(labeled), term(unlabeled));
    if (has_l) return term(labeled);
    if (has_u) return term(unlabeled);
    return Tensor::scalar(0.0);
}

// --- plain-text exchange format: first line "k seed", then one permutation
// per line as 9 space-separated indices ---

inline void write_permutation_set(std::ostream& os, const PermutationSet& pset) {
    os << pset.k << ' ' << pset.seed << '\n';
    for (const JigsawPerm& p : pset.perms) {
        for (int i = 0; i < kGridSlots; ++i) os << (i ? " " : "") << p[static_cast<std::size_t>(i)];
        os << '\n';
    }
}

inline void write_permutation_set(const std::filesystem::path& path, const PermutationSet& pset) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_permutation_set: cannot open " + path.string());
    write_permutation_set(os, pset);
}

inline PermutationSet read_permutation_set(std::istream& is) {
    PermutationSet pset;
    if (!(is >> pset.k >> pset.seed)) throw std::runtime_error("read_permutation_set: bad header line");
    if (pset.k < 1) throw std::runtime_error("read_permutation_set: invalid k");
    pset.perms.resize(static_cast<std::size_t>(pset.k));
    std::set<JigsawPerm> seen;
    for (int i = 0; i < pset.k; ++i) {
        std::array<bool, kGridSlots> used{};
        for (int j = 0; j < kGridSlots; ++j) {
            int v;
            if (!(is >> v) || v < 0 || v >= kGridSlots)
                throw std::runtime_error("read_permutation_set: invalid entry in permutation " + std::to_string(i));
            if (used[static_cast<std::size_t>(v)])
                throw std::runtime_error("read_permutation_set: repeated index in permutation " + std::to_string(i));
            used[static_cast<std::size_t>(v)] = true;
            pset.perms[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v;
        }
        if (!seen.insert(pset.perms[static_cast<std::size_t>(i)]).second)
            throw std::runtime_error("read_permutation_set: duplicate permutation " + std::to_string(i));
    }
    return pset;
}

inline PermutationSet read_permutation_set(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_permutation_set: cannot open " + path.string());
    return read_permutation_set(is);
}

}  // namespace selene
