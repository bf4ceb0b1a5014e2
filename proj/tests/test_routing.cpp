#include <catch2/catch_amalgamated.hpp>

#include "selene/gradcheck.hpp"
#include "selene/losses.hpp"
#include "selene/rng.hpp"
#include "selene/routing.hpp"

using namespace selene;

namespace {

RoutingNet make_net(int layers = 4, int c0 = 4, int classes = 3, int k = 5, std::uint64_t seed = 11) {
    RoutingConfig cfg;
    cfg.num_layers = layers;
    cfg.base_channels = c0;
    cfg.num_classes = classes;
    cfg.num_permutations = k;
    Rng rng(seed);
    return RoutingNet(cfg, rng);
}

Tensor rand_image(Rng& rng, int b, int hw) {
    Tensor t(Shape{b, 3, hw, hw});
    for (std::size_t i = 0; i < t.size(); ++i) t.data_mut()[i] = rng.uniform01();
    return t;
}

void saturate(Tensor& gate, std::size_t hot) {
    for (std::size_t i = 0; i < gate.size(); ++i) gate.data_mut()[i] = i == hot ? 80.0 : -80.0;
}

// op gate -> identity, path gate -> keep, for every cell
void make_transparent(RoutingNet& net) {
    for (auto& layer : net.grid)
        for (Cell& c : layer) {
            saturate(c.op_gate, 1);
            std::size_t keep = 0;
            for (std::size_t d = 0; d < c.dirs.size(); ++d)
                if (c.dirs[d] == PathDir::Keep) keep = d;
            saturate(c.path_gate, keep);
        }
}

}  // namespace

TEST_CASE("routing config validation") {
    RoutingConfig cfg;
    cfg.num_layers = 0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.num_levels = 3;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.gate_threshold = 1.0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("stem reduces resolution to a quarter") {
    RoutingNet net = make_net(1, 8);
    Rng rng(1);
    Tensor img96 = rand_image(rng, 1, 96);
    Tensor out = net.stem_forward(img96);
    REQUIRE(out.shape() == Shape{1, 8, 24, 24});

    Tensor img64 = rand_image(rng, 2, 64);
    REQUIRE(net.stem_forward(img64).shape() == Shape{2, 8, 16, 16});

    SECTION("indivisible input rejected with divisibility diagnostic") {
        Tensor bad = rand_image(rng, 1, 96);
        Tensor odd(Shape{1, 3, 50, 50});
        REQUIRE_THROWS_WITH(net.stem_forward(odd), Catch::Matchers::ContainsSubstring("divisible by 32"));
        (void)bad;
    }

    SECTION("zero image with zero biases gives zero output") {
        Tensor zero = Tensor::zeros({1, 3, 32, 32});
        Tensor res = net.stem_forward(zero);  // biases initialize to zero
        for (std::size_t i = 0; i < res.size(); ++i) REQUIRE(res[i] == 0.0);
    }
}

TEST_CASE("cell gating") {
    RoutingNet net = make_net(1, 4);
    Cell& cell = net.grid[0][0];
    Rng rng(2);
    Tensor x(Shape{1, 4, 8, 8});
    for (std::size_t i = 0; i < x.size(); ++i) x.data_mut()[i] = rng.normal(0, 1);

    SECTION("saturated identity gate passes the input through") {
        saturate(cell.op_gate, 1);
        Tensor y = RoutingNet::cell_forward(cell, x);
        for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(y[i] == Catch::Approx(x[i]).margin(1e-12));
    }

    SECTION("saturated conv gate with zero weights gives zero") {
        saturate(cell.op_gate, 0);
        cell.conv.dw = Tensor::zeros(cell.conv.dw.shape());
        cell.conv.pw = Tensor::zeros(cell.conv.pw.shape());
        cell.conv.pb = Tensor::zeros(cell.conv.pb.shape());
        Tensor y = RoutingNet::cell_forward(cell, x);
        for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == Catch::Approx(0.0).margin(1e-12));
    }

    SECTION("equal gates give the midpoint of conv path and identity") {
        cell.op_gate = Tensor::zeros({2});
        Tensor conv_path = relu(group_norm(separable_conv3x3(x, cell.conv.dw, cell.conv.pw, 1), cell.conv.gw,
                                           cell.conv.pb, norm_groups_for(cell.conv.gw.dim(0))));
        Tensor y = RoutingNet::cell_forward(cell, x);
        for (std::size_t i = 0; i < y.size(); ++i)
            REQUIRE(y[i] == Catch::Approx(0.5 * conv_path[i] + 0.5 * x[i]).margin(1e-12));
    }
}

TEST_CASE("grid forward") {
    Rng rng(3);

    SECTION("shape ladder across levels") {
        RoutingNet net = make_net(4, 4);
        Tensor img = rand_image(rng, 2, 96);
        auto feats = net.grid_forward(net.stem_forward(img));
        REQUIRE(feats.size() == 4);
        for (int l = 0; l < 4; ++l)
            REQUIRE(feats[static_cast<std::size_t>(l)].shape() == Shape{2, 4 << l, 24 >> l, 24 >> l});
    }

    SECTION("keep-saturated gates disconnect the levels") {
        RoutingNet net = make_net(3, 4);
        make_transparent(net);
        // keep the conv op in play on level 0 so the chain is nontrivial
        for (auto& layer : net.grid) saturate(layer[0].op_gate, 0);
        Tensor img = rand_image(rng, 1, 96);
        auto before = net.grid_forward(net.stem_forward(img));

        // perturbing deep-level weights must not move the level-0 output
        for (auto& layer : net.grid)
            for (std::size_t l = 1; l < layer.size(); ++l) {
                for (std::size_t i = 0; i < layer[l].conv.dw.size(); ++i) layer[l].conv.dw.data_mut()[i] += 0.37;
                for (std::size_t i = 0; i < layer[l].conv.pb.size(); ++i) layer[l].conv.pb.data_mut()[i] -= 0.21;
            }
        auto after = net.grid_forward(net.stem_forward(img));
        for (std::size_t i = 0; i < before[0].size(); ++i)
            REQUIRE(before[0][i] == Catch::Approx(after[0][i]).margin(1e-12));
    }

    SECTION("transparent cells leave the stem output untouched at level 0") {
        RoutingNet net = make_net(4, 4);
        make_transparent(net);
        Tensor img = rand_image(rng, 1, 64);
        Tensor stem = net.stem_forward(img);
        auto feats = net.grid_forward(stem);
        for (std::size_t i = 0; i < stem.size(); ++i)
            REQUIRE(feats[0][i] == Catch::Approx(stem[i]).margin(1e-12));
    }

    SECTION("single-layer trace: level 1 is the gated down transition") {
        RoutingNet net = make_net(1, 4);
        // all gates stay at their equal-weight initialization
        Tensor img = rand_image(rng, 1, 64);
        Tensor stem = net.stem_forward(img);
        auto feats = net.grid_forward(stem);

        const Cell& cell = net.grid[0][0];
        Tensor y = RoutingNet::cell_forward(cell, stem);
        Tensor gp = softmax1d(cell.path_gate);
        REQUIRE(gp.size() == 2);  // level 0: keep, down
        Tensor keep_part = scale_by_entry(y, gp, 0);
        Tensor down_part = relu(group_norm(conv2d(scale_by_entry(y, gp, 1), cell.down_w, 2, 0), cell.down_g,
                                           cell.down_b, norm_groups_for(cell.down_g.dim(0))));

        for (std::size_t i = 0; i < feats[0].size(); ++i)
            REQUIRE(feats[0][i] == Catch::Approx(keep_part[i]).margin(1e-12));
        for (std::size_t i = 0; i < feats[1].size(); ++i)
            REQUIRE(feats[1][i] == Catch::Approx(down_part[i]).margin(1e-12));
        // unreachable levels materialize as zeros of the right shape
        for (std::size_t i = 0; i < feats[2].size(); ++i) REQUIRE(feats[2][i] == 0.0);
        for (std::size_t i = 0; i < feats[3].size(); ++i) REQUIRE(feats[3][i] == 0.0);
    }
}

TEST_CASE("decoder forward") {
    RoutingNet net = make_net(2, 4, 5);
    Rng rng(4);

    SECTION("zero features broadcast the classifier bias") {
        for (std::size_t i = 0; i < net.cls_b.size(); ++i) net.cls_b.data_mut()[i] = 0.1 * (1.0 + i);
        std::vector<Tensor> feats;
        for (int l = 0; l < 4; ++l) feats.push_back(Tensor::zeros({1, 4 << l, 8 >> l, 8 >> l}));
        Tensor logits = net.decoder_forward(feats);
        REQUIRE(logits.shape() == Shape{1, 5, 32, 32});
        for (int k = 0; k < 5; ++k)
            for (int i = 0; i < 32 * 32; ++i)
                REQUIRE(logits[static_cast<std::size_t>(k) * 32 * 32 + i] ==
                        Catch::Approx(0.1 * (1.0 + k)).margin(1e-12));
    }

    SECTION("output shape covers the input resolution") {
        Tensor img = rand_image(rng, 2, 64);
        REQUIRE(net.forward(img).shape() == Shape{2, 5, 64, 64});
    }

    SECTION("single nonzero level traces through the declared path") {
        std::vector<Tensor> feats;
        for (int l = 0; l < 4; ++l) feats.push_back(Tensor::zeros({1, 4 << l, 8 >> l, 8 >> l}));
        Tensor f2(Shape{1, 16, 2, 2});
        for (std::size_t i = 0; i < f2.size(); ++i) f2.data_mut()[i] = rng.normal(0, 1);
        feats[2] = f2;

        auto dec_block = [&](const Tensor& in, std::size_t i) {
            return relu(group_norm(conv2d(in, net.dec_w[i], 1, 0), net.dec_g[i], net.dec_b[i],
                                   norm_groups_for(net.dec_g[i].dim(0))));
        };
        Tensor x = dec_block(feats[3], 0);
        x = add(bilinear_upsample2x(x), feats[2]);
        x = dec_block(x, 1);
        x = add(bilinear_upsample2x(x), feats[1]);
        x = dec_block(x, 2);
        x = add(bilinear_upsample2x(x), feats[0]);
        Tensor expect = bilinear_upsample2x(bilinear_upsample2x(add_channel_bias(conv2d(x, net.cls_w, 1, 0), net.cls_b)));

        Tensor got = net.decoder_forward(feats);
        REQUIRE(got.shape() == expect.shape());
        for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(got[i] == Catch::Approx(expect[i]).margin(1e-12));
    }
}

TEST_CASE("pretext head") {
    RoutingNet net = make_net(2, 4, 3, 7);
    Rng rng(5);
    Tensor img = rand_image(rng, 2, 64);
    Tensor logits = net.pretext_forward(img);
    REQUIRE(logits.shape() == Shape{2, 7});

    SECTION("pooling a constant plane reduces to the linear map of constants") {
        auto feats = net.grid_forward(net.stem_forward(img));
        Tensor deep = feats[3];
        Tensor constant = Tensor::full(deep.shape(), 0.4);
        Tensor pooled = global_avg_pool(constant);
        Tensor expect = linear(pooled, net.fc_w, net.fc_b);
        // every logit equals bias + 0.4 * sum of that row's weights
        for (int k = 0; k < 7; ++k) {
            double acc = net.fc_b[static_cast<std::size_t>(k)];
            for (int d = 0; d < deep.dim(1); ++d) acc += 0.4 * net.fc_w[static_cast<std::size_t>(k) * deep.dim(1) + d];
            REQUIRE(expect[k] == Catch::Approx(acc).margin(1e-12));
        }
    }

    SECTION("composition matches pooling + linear applied manually") {
        auto feats = net.grid_forward(net.stem_forward(img));
        Tensor expect = linear(global_avg_pool(feats[3]), net.fc_w, net.fc_b);
        for (std::size_t i = 0; i < expect.size(); ++i)
            REQUIRE(logits[i] == Catch::Approx(expect[i]).margin(1e-12));
    }
}

TEST_CASE("gates stay normalized during training") {
    RoutingNet net = make_net(2, 4);
    Rng rng(6);
    // nudge the logits arbitrarily; the normalized weights must still sum to 1
    for (auto& layer : net.grid)
        for (Cell& c : layer) {
            for (std::size_t i = 0; i < c.op_gate.size(); ++i) c.op_gate.data_mut()[i] = rng.normal(0, 3);
            for (std::size_t i = 0; i < c.path_gate.size(); ++i) c.path_gate.data_mut()[i] = rng.normal(0, 3);
            Tensor og = softmax1d(c.op_gate);
            Tensor pg = softmax1d(c.path_gate);
            double so = 0, sp = 0;
            for (std::size_t i = 0; i < og.size(); ++i) {
                REQUIRE(og[i] >= 0.0);
                so += og[i];
            }
            for (std::size_t i = 0; i < pg.size(); ++i) {
                REQUIRE(pg[i] >= 0.0);
                sp += pg[i];
            }
            REQUIRE(so == Catch::Approx(1.0).margin(1e-12));
            REQUIRE(sp == Catch::Approx(1.0).margin(1e-12));
        }
}

TEST_CASE("network is differentiable end to end") {
    RoutingConfig cfg;
    cfg.num_layers = 2;
    cfg.base_channels = 2;
    cfg.num_classes = 3;
    cfg.num_permutations = 4;
    Rng rng(7);
    RoutingNet net(cfg, rng);
    Tensor img = rand_image(rng, 1, 32);
    IntTensor target(Shape{1, 32, 32});
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = static_cast<std::int32_t>(rng.uniform_int(3));

    Cell& cell = net.grid[1][1];
    auto build = [&] { return softmax_cross_entropy(net.forward(img), target, 255); };
    auto r1 = gradcheck("gate logit", build, {&cell.op_gate, &cell.path_gate});
    INFO(r1.max_rel_err);
    CHECK(r1.pass);
    auto r2 = gradcheck("depthwise weight", build, {&cell.conv.dw}, 1e-4, 1e-4, 8);
    INFO(r2.max_rel_err);
    CHECK(r2.pass);
}

TEST_CASE("flops counting") {
    SECTION("hand count for the one-cell network") {
        RoutingNet net = make_net(1, 2, 2, 3);
        // stem: sep(3->1 @16) + sep(1->2 @8) + sep(2->2 @8)
        const std::uint64_t stem = (3 * 9 * 256 + 3 * 1 * 256) + (1 * 9 * 64 + 1 * 2 * 64) + (2 * 9 * 64 + 2 * 2 * 64);
        const std::uint64_t cell_conv = 2 * 9 * 64 + 2 * 2 * 64;
        const std::uint64_t down = 2 * 4 * 16;
        const std::uint64_t dec = 16 * 8 * 1 + 8 * 4 * 4 + 4 * 2 * 16;
        const std::uint64_t cls = 2 * 2 * 64;
        const std::uint64_t pretext = 3 * 16;
        REQUIRE(count_flops(net, {1, 3, 32, 32}, 0.0) == stem + cell_conv + down + dec + cls + pretext);

        SECTION("identity-saturated op gates drop the cell conv at tau=0.5") {
            for (auto& layer : net.grid)
                for (Cell& c : layer) saturate(c.op_gate, 1);
            // route everything down so the transition stays countable
            saturate(net.grid[0][0].path_gate, 1);
            REQUIRE(count_flops(net, {1, 3, 32, 32}, 0.5) == stem + down + dec + cls + pretext);
        }
    }

    SECTION("tau=0 count ignores gate values; count is non-increasing in tau") {
        RoutingNet net = make_net(3, 4);
        const std::uint64_t base = count_flops(net, {1, 3, 32, 32}, 0.0);
        Rng rng(8);
        for (int trial = 0; trial < 10; ++trial) {
            for (auto& layer : net.grid)
                for (Cell& c : layer) {
                    for (std::size_t i = 0; i < c.op_gate.size(); ++i) c.op_gate.data_mut()[i] = rng.normal(0, 2);
                    for (std::size_t i = 0; i < c.path_gate.size(); ++i) c.path_gate.data_mut()[i] = rng.normal(0, 2);
                }
            REQUIRE(count_flops(net, {1, 3, 32, 32}, 0.0) == base);
            std::uint64_t prev = base;
            for (double tau : {0.1, 0.3, 0.5, 0.7, 0.9}) {
                const std::uint64_t c = count_flops(net, {1, 3, 32, 32}, tau);
                REQUIRE(c <= prev);
                prev = c;
            }
        }
    }

    SECTION("deterministic for fixed gates") {
        RoutingNet net = make_net(2, 4);
        REQUIRE(count_flops(net, {2, 3, 64, 64}, 0.3) == count_flops(net, {2, 3, 64, 64}, 0.3));
    }
}
