#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "selene/nn_ops.hpp"
#include "selene/rng.hpp"
#include "selene/tensor.hpp"

namespace selene {

struct RoutingConfig {
    int num_layers = 4;        // L; the reference setting is 16
    int num_levels = 4;        // fixed by the architecture
    int base_channels = 8;     // C0, channels at the shallowest level
    int num_classes = 4;
    int num_permutations = 100;  // k, pretext classification arity
    double gate_threshold = 0.0; // tau, used by FLOPs reports

    void validate() const {
        if (num_layers < 1) throw std::invalid_argument("RoutingConfig: num_layers must be >= 1");
        if (num_levels != 4) throw std::invalid_argument("RoutingConfig: num_levels is fixed at 4");
        if (base_channels < 1) throw std::invalid_argument("RoutingConfig: base_channels must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("RoutingConfig: num_classes must be >= 2");
        if (num_permutations < 1) throw std::invalid_argument("RoutingConfig: num_permutations must be >= 1");
        if (gate_threshold < 0.0 || gate_threshold >= 1.0)
            throw std::invalid_argument("RoutingConfig: gate_threshold must lie in [0,1)");
    }

    int level_channels(int level) const { return base_channels << level; }
};

enum class PathDir { Up, Keep, Down };

// Depthwise 3x3 + pointwise 1x1, group-normalized with a learned
// per-channel affine (gw scale, pb shift).
struct SepConvParams {
    Tensor dw;  // [C,1,3,3]
    Tensor pw;  // [Cout,C,1,1]
    Tensor gw;  // [Cout] norm scale
    Tensor pb;  // [Cout] norm shift
};

// One grid node: a gated mix of {separable conv 3x3, identity}, plus gated
// outgoing transitions to the adjacent levels.
struct Cell {
    int level = 0;
    SepConvParams conv;          // C -> C, stride 1
    Tensor op_gate;              // [2] logits over {sep_conv3x3, identity}
    std::vector<PathDir> dirs;   // existing outgoing directions, [Up,] Keep[, Down]
    Tensor path_gate;            // [dirs.size()] logits
    Tensor up_w, up_g, up_b;     // 1x1, C -> C/2, followed by x2 upsample
    Tensor down_w, down_g, down_b;  // 1x1 stride 2, C -> 2C
};

namespace detail {

inline Tensor kaiming_conv(Rng& rng, int cout, int cin, int kh, int kw) {
    Tensor t(Shape{cout, cin, kh, kw});
    const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * kh * kw));
    double* v = t.data_mut();
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = rng.normal(0.0, stddev);
    return t;
}

inline Tensor kaiming_depthwise(Rng& rng, int c, int k) {
    Tensor t(Shape{c, 1, k, k});
    const double stddev = std::sqrt(2.0 / (static_cast<double>(k) * k));
    double* v = t.data_mut();
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = rng.normal(0.0, stddev);
    return t;
}

inline Tensor kaiming_linear(Rng& rng, int k, int d) {
    Tensor t(Shape{k, d});
    const double stddev = std::sqrt(2.0 / static_cast<double>(d));
    double* v = t.data_mut();
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = rng.normal(0.0, stddev);
    return t;
}

}  // namespace detail

// The 4-level x L-layer dynamic routing network: fixed STEM down to 1/4
// resolution, a gated cell grid whose levels halve resolution and double
// channels, a bottom-up additive decoder with a 1x1 classifier, and a
// global-pool + linear pretext head reading the deepest level.
//
// The grid is triangular: the cell at (layer j, level l) exists when l <= j,
// which is exactly the set of nodes a signal entering at level 0 can reach.
// Each layer's cell outputs are split by the path gates and summed at the
// receiving levels; the per-level sums after the last layer are the grid
// features.
class RoutingNet {
public:
    RoutingConfig cfg;
    std::vector<SepConvParams> stem;        // 3 layers, strides 2,2,1
    std::vector<std::vector<Cell>> grid;    // grid[j] holds levels 0..min(j,3)
    std::vector<Tensor> dec_w, dec_g, dec_b;  // level 3->2, 2->1, 1->0
    Tensor cls_w, cls_b;                    // C0 -> num_classes
    Tensor fc_w, fc_b;                      // level-3 channels -> k

    RoutingNet(const RoutingConfig& config, Rng& rng) : cfg(config) {
        cfg.validate();
        const int c0 = cfg.base_channels;
        const int cs = (c0 + 1) / 2;  // stem mid-width

        stem.push_back(make_sepconv(rng, 3, cs));
        stem.push_back(make_sepconv(rng, cs, c0));
        stem.push_back(make_sepconv(rng, c0, c0));

        grid.resize(static_cast<std::size_t>(cfg.num_layers));
        for (int j = 0; j < cfg.num_layers; ++j) {
            const int top = std::min(j, cfg.num_levels - 1);
            for (int l = 0; l <= top; ++l) grid[static_cast<std::size_t>(j)].push_back(make_cell(rng, l));
        }

        for (int l = cfg.num_levels - 1; l >= 1; --l) {
            dec_w.push_back(detail::kaiming_conv(rng, cfg.level_channels(l - 1), cfg.level_channels(l), 1, 1));
            dec_g.push_back(Tensor::full({cfg.level_channels(l - 1)}, 1.0));
            dec_b.push_back(Tensor(Shape{cfg.level_channels(l - 1)}));
        }
        cls_w = detail::kaiming_conv(rng, cfg.num_classes, c0, 1, 1);
        cls_b = Tensor(Shape{cfg.num_classes});
        fc_w = detail::kaiming_linear(rng, cfg.num_permutations, cfg.level_channels(cfg.num_levels - 1));
        fc_b = Tensor(Shape{cfg.num_permutations});

        visit_params([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
    }

    // Deterministic traversal; the checkpoint format and the optimizer both
    // rely on this order.
    void visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
        for (std::size_t i = 0; i < stem.size(); ++i) {
            const std::string p = "stem." + std::to_string(i);
            fn(p + ".dw", stem[i].dw);
            fn(p + ".pw", stem[i].pw);
            fn(p + ".gw", stem[i].gw);
            fn(p + ".pb", stem[i].pb);
        }
        for (std::size_t j = 0; j < grid.size(); ++j)
            for (std::size_t l = 0; l < grid[j].size(); ++l) {
                Cell& c = grid[j][l];
                const std::string p = "grid." + std::to_string(j) + "." + std::to_string(l);
                fn(p + ".dw", c.conv.dw);
                fn(p + ".pw", c.conv.pw);
                fn(p + ".gw", c.conv.gw);
                fn(p + ".pb", c.conv.pb);
                fn(p + ".op_gate", c.op_gate);
                fn(p + ".path_gate", c.path_gate);
                if (c.up_w.defined()) {
                    fn(p + ".up.w", c.up_w);
                    fn(p + ".up.g", c.up_g);
                    fn(p + ".up.b", c.up_b);
                }
                if (c.down_w.defined()) {
                    fn(p + ".down.w", c.down_w);
                    fn(p + ".down.g", c.down_g);
                    fn(p + ".down.b", c.down_b);
                }
            }
        for (std::size_t i = 0; i < dec_w.size(); ++i) {
            fn("dec." + std::to_string(i) + ".w", dec_w[i]);
            fn("dec." + std::to_string(i) + ".g", dec_g[i]);
            fn("dec." + std::to_string(i) + ".b", dec_b[i]);
        }
        fn("cls.w", cls_w);
        fn("cls.b", cls_b);
        fn("pretext.w", fc_w);
        fn("pretext.b", fc_b);
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        visit_params([&](const std::string&, Tensor& t) { out.push_back(&t); });
        return out;
    }

    // Structural copy with fresh storage and no gradient buffers; the shape
    // a mean-teacher shadow or any frozen evaluator wants.
    RoutingNet clone_detached() const {
        RoutingNet copy = *this;
        auto strip = [](Tensor& t) {
            if (t.defined()) {
                t = t.clone();
                t.set_requires_grad(false);
            }
        };
        for (auto& s : copy.stem) {
            strip(s.dw);
            strip(s.pw);
            strip(s.gw);
            strip(s.pb);
        }
        for (auto& layer : copy.grid)
            for (auto& c : layer) {
                strip(c.conv.dw);
                strip(c.conv.pw);
                strip(c.conv.gw);
                strip(c.conv.pb);
                strip(c.op_gate);
                strip(c.path_gate);
                strip(c.up_w);
                strip(c.up_g);
                strip(c.up_b);
                strip(c.down_w);
                strip(c.down_g);
                strip(c.down_b);
            }
        for (auto& t : copy.dec_w) strip(t);
        for (auto& t : copy.dec_g) strip(t);
        for (auto& t : copy.dec_b) strip(t);
        strip(copy.cls_w);
        strip(copy.cls_b);
        strip(copy.fc_w);
        strip(copy.fc_b);
        return copy;
    }

    // --- forward passes ---

    Tensor stem_forward(const Tensor& image) const {
        detail::check_rank(image, 4, "stem_forward", "image");
        if (image.dim(1) != 3)
            throw std::invalid_argument("stem_forward: expected 3 input channels, got " + shape_str(image.shape()));
        if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
            throw std::invalid_argument("stem_forward: spatial size " + shape_str(image.shape()) +
                                        " must be divisible by 32 so every level has an integral extent");
        // [0,1] pixel values carry a std of ~0.2; rescaling to unit order
        // keeps the fan-in initialization variance-preserving
        Tensor x = scale(image, 4.0);
        const int strides[3] = {2, 2, 1};
        for (int i = 0; i < 3; ++i)
            x = relu(group_norm(separable_conv3x3(x, stem[i].dw, stem[i].pw, strides[i]), stem[i].gw, stem[i].pb,
                                norm_groups_for(stem[i].gw.dim(0))));
        return x;
    }

    static Tensor cell_forward(const Cell& cell, const Tensor& x) {
        Tensor g = softmax1d(cell.op_gate);
        Tensor conv = relu(group_norm(separable_conv3x3(x, cell.conv.dw, cell.conv.pw, 1), cell.conv.gw,
                                      cell.conv.pb, norm_groups_for(cell.conv.gw.dim(0))));
        return add(scale_by_entry(conv, g, 0), scale_by_entry(x, g, 1));
    }

    std::vector<Tensor> grid_forward(const Tensor& stem_out) const {
        const int levels = cfg.num_levels;
        std::vector<Tensor> arrive(static_cast<std::size_t>(levels));
        arrive[0] = stem_out;
        for (const auto& layer : grid) {
            std::vector<Tensor> next(static_cast<std::size_t>(levels));
            for (std::size_t l = 0; l < layer.size(); ++l) {
                if (!arrive[l].defined()) continue;
                const Cell& cell = layer[l];
                Tensor y = cell_forward(cell, arrive[l]);
                Tensor gp = softmax1d(cell.path_gate);
                for (std::size_t d = 0; d < cell.dirs.size(); ++d) {
                    Tensor part = scale_by_entry(y, gp, static_cast<int>(d));
                    int dest = static_cast<int>(l);
                    switch (cell.dirs[d]) {
                        case PathDir::Keep:
                            break;
                        case PathDir::Down:
                            part = relu(group_norm(conv2d(part, cell.down_w, 2, 0), cell.down_g, cell.down_b,
                                                   norm_groups_for(cell.down_g.dim(0))));
                            dest = static_cast<int>(l) + 1;
                            break;
                        case PathDir::Up:
                            part = bilinear_upsample2x(relu(group_norm(conv2d(part, cell.up_w, 1, 0), cell.up_g,
                                                                       cell.up_b, norm_groups_for(cell.up_g.dim(0)))));
                            dest = static_cast<int>(l) - 1;
                            break;
                    }
                    auto& slot = next[static_cast<std::size_t>(dest)];
                    slot = slot.defined() ? add(slot, part) : part;
                }
            }
            arrive = std::move(next);
        }
        // Levels the signal never reached (L < 4) materialize as zeros.
        const int sh = stem_out.dim(2), sw = stem_out.dim(3), b = stem_out.dim(0);
        for (int l = 0; l < levels; ++l)
            if (!arrive[static_cast<std::size_t>(l)].defined())
                arrive[static_cast<std::size_t>(l)] =
                    Tensor(Shape{b, cfg.level_channels(l), sh >> l, sw >> l});
        return arrive;
    }

    Tensor decoder_forward(const std::vector<Tensor>& features) const {
        Tensor x = features[static_cast<std::size_t>(cfg.num_levels - 1)];
        for (std::size_t i = 0; i < dec_w.size(); ++i) {
            x = relu(group_norm(conv2d(x, dec_w[i], 1, 0), dec_g[i], dec_b[i], norm_groups_for(dec_g[i].dim(0))));
            x = bilinear_upsample2x(x);
            x = add(x, features[dec_w.size() - 1 - i]);
        }
        Tensor logits = add_channel_bias(conv2d(x, cls_w, 1, 0), cls_b);
        return bilinear_upsample2x(bilinear_upsample2x(logits));
    }

    // Full segmentation pass: [B,3,H,W] -> [B,num_classes,H,W].
    Tensor forward(const Tensor& image) const { return decoder_forward(grid_forward(stem_forward(image))); }

    // Pretext pass: deepest-level feature -> global average pool -> k logits.
    Tensor pretext_forward(const Tensor& image) const {
        auto feats = grid_forward(stem_forward(image));
        Tensor pooled = global_avg_pool(feats[static_cast<std::size_t>(cfg.num_levels - 1)]);
        return linear(pooled, fc_w, fc_b);
    }

private:
    SepConvParams make_sepconv(Rng& rng, int cin, int cout) {
        SepConvParams p;
        p.dw = detail::kaiming_depthwise(rng, cin, 3);
        p.pw = detail::kaiming_conv(rng, cout, cin, 1, 1);
        p.gw = Tensor::full({cout}, 1.0);
        p.pb = Tensor(Shape{cout});
        return p;
    }

    Cell make_cell(Rng& rng, int level) {
        Cell c;
        c.level = level;
        const int ch = cfg.level_channels(level);
        c.conv = make_sepconv(rng, ch, ch);
        c.op_gate = Tensor(Shape{2});
        if (level > 0) c.dirs.push_back(PathDir::Up);
        c.dirs.push_back(PathDir::Keep);
        if (level < cfg.num_levels - 1) c.dirs.push_back(PathDir::Down);
        c.path_gate = Tensor(Shape{static_cast<int>(c.dirs.size())});
        if (level > 0) {
            c.up_w = detail::kaiming_conv(rng, ch / 2, ch, 1, 1);
            c.up_g = Tensor::full({ch / 2}, 1.0);
            c.up_b = Tensor(Shape{ch / 2});
        }
        if (level < cfg.num_levels - 1) {
            c.down_w = detail::kaiming_conv(rng, ch * 2, ch, 1, 1);
            c.down_g = Tensor::full({ch * 2}, 1.0);
            c.down_b = Tensor(Shape{ch * 2});
        }
        return c;
    }
};

// Multiply-add count of one forward pass at the given input shape. Counts
// convolution and linear kernels only (interpolation, pooling, bias and
// activation work is not a multiply-add in this accounting). STEM, decoder
// and heads always count; a cell's conv and its outgoing transitions count
// only while their normalized gate weight exceeds tau.
inline std::uint64_t count_flops(const RoutingNet& net, const Shape& input_shape, double tau) {
    if (tau < 0.0 || tau >= 1.0) throw std::invalid_argument("count_flops: tau must lie in [0,1)");
    if (input_shape.size() != 4 || input_shape[1] != 3)
        throw std::invalid_argument("count_flops: input shape must be [B,3,H,W]");
    const std::uint64_t b = static_cast<std::uint64_t>(input_shape[0]);
    const int h = input_shape[2], w = input_shape[3];
    if (h % 32 != 0 || w % 32 != 0) throw std::invalid_argument("count_flops: spatial size must be divisible by 32");
    const RoutingConfig& cfg = net.cfg;

    auto sep_macs = [b](int cin, int cout, int ho, int wo) {
        const std::uint64_t hw = static_cast<std::uint64_t>(ho) * wo;
        return b * (static_cast<std::uint64_t>(cin) * 9 * hw + static_cast<std::uint64_t>(cin) * cout * hw);
    };
    auto conv1x1_macs = [b](int cin, int cout, int ho, int wo) {
        return b * static_cast<std::uint64_t>(cin) * cout * ho * wo;
    };

    std::uint64_t total = 0;
    const int cs = (cfg.base_channels + 1) / 2;
    total += sep_macs(3, cs, h / 2, w / 2);
    total += sep_macs(cs, cfg.base_channels, h / 4, w / 4);
    total += sep_macs(cfg.base_channels, cfg.base_channels, h / 4, w / 4);

    NoGradScope ng;
    const int sh = h / 4, sw = w / 4;
    for (const auto& layer : net.grid)
        for (const Cell& cell : layer) {
            const int ch = cfg.level_channels(cell.level);
            const int lh = sh >> cell.level, lw = sw >> cell.level;
            Tensor og = softmax1d(cell.op_gate);
            if (og[0] > tau) total += sep_macs(ch, ch, lh, lw);
            Tensor pg = softmax1d(cell.path_gate);
            for (std::size_t d = 0; d < cell.dirs.size(); ++d) {
                if (!(pg[d] > tau)) continue;
                if (cell.dirs[d] == PathDir::Down) total += conv1x1_macs(ch, ch * 2, lh / 2, lw / 2);
                if (cell.dirs[d] == PathDir::Up) total += conv1x1_macs(ch, ch / 2, lh, lw);
            }
        }

    for (int l = cfg.num_levels - 1; l >= 1; --l)
        total += conv1x1_macs(cfg.level_channels(l), cfg.level_channels(l - 1), sh >> l, sw >> l);
    total += conv1x1_macs(cfg.base_channels, cfg.num_classes, sh, sw);
    total += b * static_cast<std::uint64_t>(cfg.num_permutations) * cfg.level_channels(cfg.num_levels - 1);
    return total;
}

}  // namespace selene
