#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "selene/metrics.hpp"
#include "selene/rng.hpp"

using namespace selene;

TEST_CASE("confusion matrix updates") {
    ConfusionMatrix cm(4);

    SECTION("correct pixels land on the diagonal") {
        IntTensor pred(Shape{10});
        IntTensor truth(Shape{10});
        for (int i = 0; i < 10; ++i) pred[static_cast<std::size_t>(i)] = truth[static_cast<std::size_t>(i)] = 2;
        cm.update(pred, truth);
        CHECK(cm.at(2, 2) == 10);
        CHECK(cm.total() == 10);
    }
    SECTION("all-ignore truth leaves the matrix untouched") {
        IntTensor pred(Shape{5});
        IntTensor truth(Shape{5});
        std::fill(truth.v.begin(), truth.v.end(), kIgnoreIndex);
        cm.update(pred, truth);
        CHECK(cm.total() == 0);
    }
    SECTION("out-of-range prediction rejected") {
        IntTensor pred(Shape{1}, {4});
        IntTensor truth(Shape{1}, {0});
        REQUIRE_THROWS_AS(cm.update(pred, truth), std::invalid_argument);
    }
    SECTION("random maps match a per-pixel counting oracle") {
        Rng rng(1);
        IntTensor pred(Shape{8, 8});
        IntTensor truth(Shape{8, 8});
        for (std::size_t i = 0; i < pred.size(); ++i) {
            pred[i] = static_cast<std::int32_t>(rng.uniform_int(4));
            truth[i] = rng.uniform01() < 0.1 ? kIgnoreIndex : static_cast<std::int32_t>(rng.uniform_int(4));
        }
        cm.update(pred, truth);
        CHECK(miou(cm) == Catch::Approx(oracle::miou_naive(pred, truth, 4, kIgnoreIndex)).margin(1e-12));
    }
    SECTION("updates are additive over batches") {
        Rng rng(2);
        ConfusionMatrix a(3), b(3), joint(3);
        IntTensor p1(Shape{16}), t1(Shape{16}), p2(Shape{16}), t2(Shape{16});
        for (std::size_t i = 0; i < 16; ++i) {
            p1[i] = static_cast<std::int32_t>(rng.uniform_int(3));
            t1[i] = static_cast<std::int32_t>(rng.uniform_int(3));
            p2[i] = static_cast<std::int32_t>(rng.uniform_int(3));
            t2[i] = static_cast<std::int32_t>(rng.uniform_int(3));
        }
        a.update(p1, t1);
        b.update(p2, t2);
        joint.update(p1, t1);
        joint.update(p2, t2);
        a += b;
        for (int t = 0; t < 3; ++t)
            for (int p = 0; p < 3; ++p) REQUIRE(a.at(t, p) == joint.at(t, p));
    }
}

TEST_CASE("miou") {
    SECTION("perfect prediction scores 1") {
        ConfusionMatrix cm(3);
        cm.at(0, 0) = 5;
        cm.at(1, 1) = 9;
        cm.at(2, 2) = 1;
        CHECK(miou(cm) == 1.0);
        CHECK(pixel_accuracy(cm) == 1.0);
    }
    SECTION("class with 1 TP, 1 FP, 1 FN scores 1/3") {
        ConfusionMatrix cm(3);
        cm.at(0, 0) = 4;  // class 0: IoU 1
        cm.at(1, 1) = 1;  // class 1: one true positive
        cm.at(1, 2) = 1;  // one miss (truth 1 predicted 2)
        cm.at(2, 1) = 1;  // one false alarm (truth 2 predicted 1)
        // class 1: 1/3; class 2: union 2, intersection 0
        CHECK(miou(cm) == Catch::Approx((1.0 + 1.0 / 3.0 + 0.0) / 3.0).margin(1e-12));
    }
    SECTION("mean over two participating classes") {
        // both classes score 2/3: intersection 2, union 3 each
        ConfusionMatrix cm(3);
        cm.at(0, 0) = 2;
        cm.at(1, 1) = 2;
        cm.at(0, 1) = 1;
        CHECK(miou(cm) == Catch::Approx(2.0 / 3.0).margin(1e-12));
    }
    SECTION("classes with zero union are excluded from the mean") {
        ConfusionMatrix cm(5);
        cm.at(0, 0) = 7;
        CHECK(miou(cm) == 1.0);  // only class 0 participates
    }
    SECTION("all-wrong prediction scores 0 accuracy") {
        ConfusionMatrix cm(2);
        cm.at(0, 1) = 3;
        cm.at(1, 0) = 3;
        CHECK(pixel_accuracy(cm) == 0.0);
        CHECK(miou(cm) == 0.0);
    }
    SECTION("invariant under simultaneous class relabeling") {
        Rng rng(3);
        IntTensor pred(Shape{64}), truth(Shape{64});
        for (std::size_t i = 0; i < 64; ++i) {
            pred[i] = static_cast<std::int32_t>(rng.uniform_int(4));
            truth[i] = static_cast<std::int32_t>(rng.uniform_int(4));
        }
        ConfusionMatrix cm(4);
        cm.update(pred, truth);
        const int perm[4] = {2, 0, 3, 1};
        IntTensor pred2 = pred, truth2 = truth;
        for (std::size_t i = 0; i < 64; ++i) {
            pred2[i] = perm[pred[i]];
            truth2[i] = perm[truth[i]];
        }
        ConfusionMatrix cm2(4);
        cm2.update(pred2, truth2);
        CHECK(miou(cm) == Catch::Approx(miou(cm2)).margin(1e-12));
    }
    SECTION("miou always lies in [0,1]") {
        Rng rng(4);
        for (int trial = 0; trial < 50; ++trial) {
            ConfusionMatrix cm(3);
            IntTensor pred(Shape{32}), truth(Shape{32});
            for (std::size_t i = 0; i < 32; ++i) {
                pred[i] = static_cast<std::int32_t>(rng.uniform_int(3));
                truth[i] = static_cast<std::int32_t>(rng.uniform_int(3));
            }
            cm.update(pred, truth);
            const double m = miou(cm);
            REQUIRE(m >= 0.0);
            REQUIRE(m <= 1.0);
        }
    }
}

TEST_CASE("evaluate") {
    RoutingConfig cfg;
    cfg.num_layers = 1;
    cfg.base_channels = 2;
    cfg.num_classes = 4;
    cfg.num_permutations = 3;
    Rng rng(5);
    RoutingNet net(cfg, rng);
    auto data = gen_shapes_dataset(2, 4, 96, 17);

    SECTION("empty dataset rejected") {
        REQUIRE_THROWS_AS(evaluate(net, {}), std::invalid_argument);
    }
    SECTION("deterministic across repeated calls") {
        EvalResult a = evaluate(net, data);
        EvalResult b = evaluate(net, data);
        CHECK(a.miou == b.miou);
        CHECK(a.pixel_acc == b.pixel_acc);
    }
}
