#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <sstream>

#include "selene/gradcheck.hpp"
#include "selene/jigsaw.hpp"
#include "selene/rng.hpp"

using namespace selene;

namespace {

Tensor rand_image(Rng& rng, int b, int c, int h, int w) {
    Tensor t(Shape{b, c, h, w});
    for (std::size_t i = 0; i < t.size(); ++i) t.data_mut()[i] = rng.uniform01();
    return t;
}

}  // namespace

TEST_CASE("permutation set generation") {
    SECTION("k=1 yields a single permutation") {
        PermutationSet p = generate_permutation_set(1, 3);
        REQUIRE(p.perms.size() == 1);
    }
    SECTION("k=2 attains the maximal Hamming distance of 9") {
        for (std::uint64_t seed : {1ull, 7ull, 99ull}) {
            PermutationSet p = generate_permutation_set(2, seed);
            REQUIRE(hamming_distance(p.perms[0], p.perms[1]) == 9);
        }
    }
    SECTION("deterministic in (k, seed)") {
        PermutationSet a = generate_permutation_set(24, 11);
        PermutationSet b = generate_permutation_set(24, 11);
        REQUIRE(a.perms == b.perms);
        PermutationSet c = generate_permutation_set(24, 12);
        REQUIRE(a.perms != c.perms);
    }
    SECTION("all permutations distinct") {
        PermutationSet p = generate_permutation_set(40, 5);
        std::set<JigsawPerm> uniq(p.perms.begin(), p.perms.end());
        REQUIRE(uniq.size() == p.perms.size());
    }
    SECTION("k out of range rejected") {
        REQUIRE_THROWS_AS(generate_permutation_set(0, 1), std::invalid_argument);
        REQUIRE_THROWS_AS(generate_permutation_set(362881, 1), std::invalid_argument);
    }
}

TEST_CASE("apply_jigsaw is a pure relocation") {
    Rng rng(2);
    Tensor img = rand_image(rng, 2, 3, 9, 9);

    SECTION("identity permutation is a no-op") {
        JigsawPerm id{0, 1, 2, 3, 4, 5, 6, 7, 8};
        Tensor out = apply_jigsaw(img, id);
        for (std::size_t i = 0; i < img.size(); ++i) REQUIRE(out[i] == img[i]);
    }

    SECTION("applying the inverse undoes the shuffle bitwise") {
        PermutationSet pset = generate_permutation_set(10, 4);
        for (const JigsawPerm& p : pset.perms) {
            Tensor mixed = apply_jigsaw(img, p);
            Tensor restored = apply_jigsaw(mixed, inverse_permutation(p));
            for (std::size_t i = 0; i < img.size(); ++i) REQUIRE(restored[i] == img[i]);
        }
    }

    SECTION("multiset of pixel values is preserved") {
        JigsawPerm p{4, 2, 0, 8, 6, 1, 3, 7, 5};
        Tensor out = apply_jigsaw(img, p);
        std::multiset<double> a(img.data(), img.data() + img.size());
        std::multiset<double> b(out.data(), out.data() + out.size());
        REQUIRE(a == b);
    }

    SECTION("corner swap moves exactly the two corner patches") {
        Tensor tiny(Shape{1, 1, 3, 3});
        for (int i = 0; i < 9; ++i) tiny.data_mut()[i] = i;  // distinct values, 1x1 patches
        JigsawPerm swap{8, 1, 2, 3, 4, 5, 6, 7, 0};
        Tensor out = apply_jigsaw(tiny, swap);
        CHECK(out[0] == 8.0);
        CHECK(out[8] == 0.0);
        for (int i = 1; i < 8; ++i) CHECK(out[static_cast<std::size_t>(i)] == tiny[static_cast<std::size_t>(i)]);
    }

    SECTION("mask overload relocates labels identically") {
        IntTensor mask(Shape{3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8});
        JigsawPerm p{1, 0, 2, 3, 4, 5, 6, 7, 8};
        IntTensor out = apply_jigsaw(mask, p);
        CHECK(out[0] == 1);
        CHECK(out[1] == 0);
    }

    SECTION("indivisible spatial size rejected") {
        Tensor bad = rand_image(rng, 1, 1, 8, 9);
        REQUIRE_THROWS_WITH(apply_jigsaw(bad, JigsawPerm{0, 1, 2, 3, 4, 5, 6, 7, 8}),
                            Catch::Matchers::ContainsSubstring("divisible by 3"));
    }
}

TEST_CASE("make_pretext_batch") {
    Rng data_rng(3);
    PermutationSet pset = generate_permutation_set(12, 9);

    SECTION("seeded draws are reproducible and targets lie in range") {
        Tensor batch = rand_image(data_rng, 6, 3, 9, 9);
        Rng r1(5), r2(5);
        auto [img1, t1] = make_pretext_batch(batch, pset, r1);
        auto [img2, t2] = make_pretext_batch(batch, pset, r2);
        for (std::size_t i = 0; i < t1.size(); ++i) {
            REQUIRE(t1[i] == t2[i]);
            REQUIRE(t1[i] >= 0);
            REQUIRE(t1[i] < 12);
        }
        for (std::size_t i = 0; i < img1.size(); ++i) REQUIRE(img1[i] == img2[i]);
    }

    SECTION("non-divisible images are center-cropped to a multiple of 3") {
        Tensor batch = rand_image(data_rng, 1, 3, 10, 11);
        Rng r(7);
        auto [img, targets] = make_pretext_batch(batch, pset, r);
        REQUIRE(img.shape() == Shape{1, 3, 9, 9});
    }

    SECTION("jig frequency is uniform within 3 sigma over 1e5 draws") {
        PermutationSet small = generate_permutation_set(4, 2);
        Tensor batch = rand_image(data_rng, 1, 1, 3, 3);
        Rng r(123);
        const int draws = 100000;
        std::map<int, int> freq;
        for (int i = 0; i < draws; ++i) {
            auto [img, t] = make_pretext_batch(batch, small, r);
            ++freq[t[0]];
        }
        const double expect = draws / 4.0;
        const double sigma = std::sqrt(draws * 0.25 * 0.75);
        for (const auto& [jig, count] : freq) REQUIRE(std::abs(count - expect) < 3.0 * sigma);
    }
}

TEST_CASE("ssl loss") {
    RoutingConfig cfg;
    cfg.num_layers = 1;
    cfg.base_channels = 2;
    cfg.num_classes = 2;
    cfg.num_permutations = 8;
    Rng net_rng(4);
    RoutingNet net(cfg, net_rng);
    PermutationSet pset = generate_permutation_set(8, 6);
    Rng data_rng(5);
    Tensor labeled = rand_image(data_rng, 2, 3, 96, 96);
    Tensor unlabeled = rand_image(data_rng, 3, 3, 96, 96);

    SECTION("zero classifier weights give ln k per term") {
        net.fc_w = Tensor::zeros(net.fc_w.shape());
        net.fc_b = Tensor::zeros(net.fc_b.shape());
        Rng r(1);
        const double loss = ssl_loss(net, pset, labeled, unlabeled, r).item();
        CHECK(loss == Catch::Approx(2.0 * std::log(8.0)).margin(1e-12));
    }

    SECTION("empty unlabeled batch leaves the labeled term alone") {
        Rng r1(2), r2(2);
        const double both = ssl_loss(net, pset, labeled, Tensor(), r1).item();
        auto [jl, tl] = make_pretext_batch(labeled, pset, r2);
        const double direct = softmax_cross_entropy(net.pretext_forward(jl), tl).item();
        CHECK(both == Catch::Approx(direct).margin(1e-12));
    }

    SECTION("differentiable with respect to the pretext head") {
        Rng r(3);
        auto build = [&] {
            Rng fixed(17);  // same jig draws on every evaluation
            return ssl_loss(net, pset, labeled, unlabeled, fixed);
        };
        auto res = gradcheck("ssl pretext head", build, {&net.fc_w, &net.fc_b}, 1e-4, 1e-4, 16);
        INFO(res.max_rel_err);
        CHECK(res.pass);
    }
}

TEST_CASE("permutation set text format round-trips") {
    PermutationSet pset = generate_permutation_set(15, 21);
    std::stringstream ss;
    write_permutation_set(ss, pset);
    PermutationSet back = read_permutation_set(ss);
    REQUIRE(back.k == pset.k);
    REQUIRE(back.seed == pset.seed);
    REQUIRE(back.perms == pset.perms);

    SECTION("malformed text rejected") {
        std::stringstream bad("2 5\n0 1 2 3 4 5 6 7 8\n0 0 2 3 4 5 6 7 8\n");
        REQUIRE_THROWS_WITH(read_permutation_set(bad), Catch::Matchers::ContainsSubstring("repeated index"));
        std::stringstream dup("2 5\n0 1 2 3 4 5 6 7 8\n0 1 2 3 4 5 6 7 8\n");
        REQUIRE_THROWS_WITH(read_permutation_set(dup), Catch::Matchers::ContainsSubstring("duplicate"));
    }
}
