#pragma once

#include <vector>

#include "selene/gradcheck.hpp"
#include "selene/losses.hpp"
#include "selene/nn_ops.hpp"
#include "selene/rng.hpp"
#include "selene/routing.hpp"

namespace selene {

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    double* v = t.data_mut();
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = rng.normal(0.0, scale);
    return t;
}

inline Tensor as_param(Tensor t) {
    t.set_requires_grad(true);
    return t;
}

// Fixed random projection turning an op output into a scalar, so every output
// element's gradient enters the check. The projector is drawn once per case;
// the finite-difference sweep then re-evaluates one and the same functional.
inline Tensor project(const Tensor& out, const Tensor& projector) { return sum(mul(out, projector)); }

}  // namespace detail

// Finite-difference verification of every differentiable operation, on small
// seeded tensors. ReLU inputs are nudged away from the kink and OHEM cases
// use clear selection margins, so the checks sit on smooth ground.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed, double tol = 1e-4) {
    std::vector<GradCheckResult> results;
    Rng rng(seed);

    auto projected_case = [&](const std::string& name, const std::function<Tensor()>& op,
                              std::vector<Tensor*> params, std::size_t max_elems = 0) {
        Rng prj = rng.fork(std::hash<std::string>{}(name));
        const Tensor proto = op();
        const Tensor projector = detail::random_tensor(prj, proto.shape());
        results.push_back(gradcheck(
            name, [op, projector] { return detail::project(op(), projector); }, params, 1e-4, tol, max_elems));
    };

    {
        Tensor x, y;
        x = detail::as_param(detail::random_tensor(rng, {2, 3}));
        y = detail::as_param(detail::random_tensor(rng, {2, 3}));
        projected_case("add/mul/scale/sub", [&] { return add(scale(mul(x, y), 0.7), sub(x, y)); }, {&x, &y});
    }
    {
        Tensor x;
        x = detail::as_param(detail::random_tensor(rng, {3, 4}));
        projected_case("relu", [&] { return relu(x); }, {&x});
    }
    {
        Tensor logits;
        logits = detail::as_param(detail::random_tensor(rng, {5}));
        projected_case("softmax1d", [&] { return softmax1d(logits); }, {&logits});
    }
    {
        Tensor x = detail::as_param(detail::random_tensor(rng, {2, 2, 4, 4}));
        Tensor y = detail::as_param(detail::random_tensor(rng, {2, 2, 4, 4}));
        Tensor w = detail::as_param(detail::random_tensor(rng, {2}));
        projected_case(
            "scale_by_entry",
            [&] {
                Tensor g = softmax1d(w);
                return add(scale_by_entry(x, g, 0), scale_by_entry(y, g, 1));
            },
            {&x, &y, &w});
    }
    {
        Tensor x, k;
        x = detail::as_param(detail::random_tensor(rng, {2, 3, 5, 5}));
        k = detail::as_param(detail::random_tensor(rng, {4, 3, 3, 3}, 0.5));
        projected_case("conv2d s1p1", [&] { return conv2d(x, k, 1, 1); }, {&x, &k});
    }
    {
        Tensor x, k;
        x = detail::as_param(detail::random_tensor(rng, {1, 2, 6, 6}));
        k = detail::as_param(detail::random_tensor(rng, {3, 2, 3, 3}, 0.5));
        projected_case("conv2d s2p1", [&] { return conv2d(x, k, 2, 1); }, {&x, &k});
    }
    {
        Tensor x, k;
        x = detail::as_param(detail::random_tensor(rng, {2, 3, 4, 4}));
        k = detail::as_param(detail::random_tensor(rng, {3, 1, 3, 3}, 0.5));
        projected_case("depthwise_conv", [&] { return depthwise_conv(x, k, 1, 1); }, {&x, &k});
    }
    {
        Tensor x, dw, pw;
        x = detail::as_param(detail::random_tensor(rng, {1, 2, 5, 5}));
        dw = detail::as_param(detail::random_tensor(rng, {2, 1, 3, 3}, 0.5));
        pw = detail::as_param(detail::random_tensor(rng, {3, 2, 1, 1}, 0.5));
        projected_case("separable_conv3x3", [&] { return separable_conv3x3(x, dw, pw, 1); }, {&x, &dw, &pw});
    }
    {
        Tensor x;
        x = detail::as_param(detail::random_tensor(rng, {1, 2, 3, 4}));
        projected_case("bilinear_upsample2x", [&] { return bilinear_upsample2x(x); }, {&x});
    }
    {
        Tensor x;
        x = detail::as_param(detail::random_tensor(rng, {2, 3, 4, 4}));
        projected_case("global_avg_pool", [&] { return global_avg_pool(x); }, {&x});
    }
    {
        Tensor x, w, b;
        x = detail::as_param(detail::random_tensor(rng, {3, 4}));
        w = detail::as_param(detail::random_tensor(rng, {5, 4}, 0.5));
        b = detail::as_param(detail::random_tensor(rng, {5}, 0.5));
        projected_case("linear", [&] { return linear(x, w, b); }, {&x, &w, &b});
    }
    {
        Tensor x, b;
        x = detail::as_param(detail::random_tensor(rng, {1, 3, 3, 3}));
        b = detail::as_param(detail::random_tensor(rng, {3}));
        projected_case("add_channel_bias", [&] { return add_channel_bias(x, b); }, {&x, &b});
    }
    {
        Tensor x;
        x = detail::as_param(detail::random_tensor(rng, {2, 4, 3, 3}));
        projected_case("channel_softmax", [&] { return channel_softmax(x); }, {&x});
    }
    {
        Tensor x = detail::as_param(detail::random_tensor(rng, {2, 4, 3, 3}));
        Tensor gm = detail::as_param(detail::random_tensor(rng, {4}, 0.3));
        Tensor bt = detail::as_param(detail::random_tensor(rng, {4}, 0.3));
        projected_case("group_norm", [&] { return group_norm(x, gm, bt, 2); }, {&x, &gm, &bt});
    }
    {
        Tensor logits = detail::as_param(detail::random_tensor(rng, {2, 4, 3, 3}));
        IntTensor target(Shape{2, 3, 3});
        for (std::size_t i = 0; i < target.size(); ++i)
            target[i] = i % 5 == 4 ? kIgnoreIndex : static_cast<std::int32_t>(rng.uniform_int(4));
        results.push_back(gradcheck(
            "softmax_cross_entropy",
            [&logits, target] { return softmax_cross_entropy(logits, target, kIgnoreIndex); }, {&logits}, 1e-4,
            tol));
    }
    {
        Tensor a = detail::as_param(detail::random_tensor(rng, {2, 3, 4, 4}));
        Tensor b = detail::as_param(detail::random_tensor(rng, {2, 3, 4, 4}));
        results.push_back(gradcheck("mse_loss", [&] { return mse_loss(a, b); }, {&a, &b}, 1e-4, tol));
    }
    {
        // margins keep the kept set stable under the fd perturbation
        Tensor logits = detail::as_param(detail::random_tensor(rng, {1, 3, 4, 4}, 2.0));
        IntTensor target(Shape{1, 4, 4});
        for (std::size_t i = 0; i < target.size(); ++i) target[i] = static_cast<std::int32_t>(rng.uniform_int(3));
        results.push_back(gradcheck(
            "ohem_cross_entropy",
            [&logits, target] { return ohem_cross_entropy(logits, target, kIgnoreIndex, 0.7, 4); }, {&logits},
            1e-4, tol));
    }
    {
        RoutingConfig cfg;
        cfg.num_layers = 2;
        cfg.base_channels = 4;
        cfg.num_classes = 3;
        cfg.num_permutations = 5;
        Rng net_rng = rng.fork(14);
        RoutingNet net(cfg, net_rng);
        Cell& cell = net.grid[1][1];
        Tensor x = detail::as_param(detail::random_tensor(rng, {1, cfg.level_channels(1), 4, 4}));
        projected_case("cell gating", [&] { return RoutingNet::cell_forward(cell, x); },
                       {&x, &cell.op_gate, &cell.conv.dw, &cell.conv.pw, &cell.conv.pb});
    }
    {
        RoutingConfig cfg;
        cfg.num_layers = 2;
        cfg.base_channels = 2;
        cfg.num_classes = 3;
        cfg.num_permutations = 4;
        Rng net_rng = rng.fork(16);
        RoutingNet net(cfg, net_rng);
        Tensor image = detail::random_tensor(rng, {1, 3, 32, 32}, 0.5);
        IntTensor target(Shape{1, 32, 32});
        for (std::size_t i = 0; i < target.size(); ++i) target[i] = static_cast<std::int32_t>(rng.uniform_int(3));
        // spot-check through the whole network: gate logits, a depthwise
        // kernel and the classifier bias, against the segmentation loss
        Cell& cell = net.grid[1][0];
        results.push_back(gradcheck(
            "full network",
            [&] { return softmax_cross_entropy(net.forward(image), target, kIgnoreIndex); },
            {&cell.op_gate, &cell.path_gate, &cell.conv.dw, &net.cls_b}, 1e-4, tol, 24));
    }
    return results;
}

}  // namespace selene
