#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "selene/gradcheck.hpp"
#include "selene/nn_ops.hpp"
#include "selene/rng.hpp"

using namespace selene;

namespace {

Tensor randt(Rng& rng, Shape shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.data_mut()[i] = rng.normal(0.0, scale);
    return t;
}

void check_close(const Tensor& a, const Tensor& b, double tol = 1e-12) {
    REQUIRE(a.shape() == b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == Catch::Approx(b[i]).margin(tol));
}

}  // namespace

TEST_CASE("conv2d scalar scaling and identity kernel") {
    Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor k = Tensor::from({1, 1, 1, 1}, {2.0});
    Tensor out = conv2d(ones, k, 1, 0);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 2.0);

    Rng rng(1);
    Tensor x = randt(rng, {1, 1, 3, 3});
    Tensor onehot = Tensor::zeros({1, 1, 3, 3});
    onehot.data_mut()[4] = 1.0;  // center tap
    check_close(conv2d(x, onehot, 1, 1), x);
}

TEST_CASE("conv2d matches the naive loop oracle") {
    Rng rng(2);
    Tensor x = randt(rng, {1, 2, 4, 4});
    Tensor k = randt(rng, {3, 2, 3, 3});
    check_close(conv2d(x, k, 2, 1), oracle::conv2d_naive(x, k, 2, 1), 1e-12);
}

TEST_CASE("conv2d direct and im2col paths agree") {
    Rng rng(3);
    // large enough to cross the im2col work threshold
    Tensor x = randt(rng, {2, 8, 16, 16});
    Tensor k = randt(rng, {8, 8, 3, 3});
    check_close(conv2d(x, k, 1, 1), oracle::conv2d_naive(x, k, 1, 1), 1e-10);
    check_close(conv2d(x, k, 2, 1), oracle::conv2d_naive(x, k, 2, 1), 1e-10);
}

TEST_CASE("conv2d is bilinear in its arguments") {
    Rng rng(4);
    Tensor x = randt(rng, {1, 2, 5, 5});
    Tensor y = randt(rng, {1, 2, 5, 5});
    Tensor k = randt(rng, {2, 2, 3, 3});
    const double a = 1.7, b = -0.4;
    Tensor lhs = conv2d(add(scale(x, a), scale(y, b)), k, 1, 1);
    Tensor rhs = add(scale(conv2d(x, k, 1, 1), a), scale(conv2d(y, k, 1, 1), b));
    check_close(lhs, rhs, 1e-10);
}

TEST_CASE("conv2d diagnostics") {
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor k = Tensor::zeros({1, 3, 3, 3});
    REQUIRE_THROWS_WITH(conv2d(x, k, 1, 1),
                        Catch::Matchers::ContainsSubstring("[1x2x4x4]") &&
                            Catch::Matchers::ContainsSubstring("[1x3x3x3]"));
    REQUIRE_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 2, 2}), 1, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 3, 3}), 3, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 3, 3}), 1, -1), std::invalid_argument);
}

TEST_CASE("separable conv equals composition of oracles") {
    Rng rng(5);
    Tensor x = randt(rng, {2, 3, 6, 6});
    Tensor dw = randt(rng, {3, 1, 3, 3});
    Tensor pw = randt(rng, {4, 3, 1, 1});
    const Tensor expect = oracle::conv2d_naive(oracle::depthwise_naive(x, dw, 1, 1), pw, 1, 0);
    check_close(separable_conv3x3(x, dw, pw, 1), expect, 1e-12);

    SECTION("zero depthwise annihilates") {
        Tensor zdw = Tensor::zeros({3, 1, 3, 3});
        Tensor out = separable_conv3x3(x, zdw, pw, 1);
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
    }

    SECTION("identity depthwise + identity pointwise is identity") {
        Tensor idw = Tensor::zeros({3, 1, 3, 3});
        for (int c = 0; c < 3; ++c) idw.data_mut()[c * 9 + 4] = 1.0;
        Tensor ipw = Tensor::zeros({3, 3, 1, 1});
        for (int c = 0; c < 3; ++c) ipw.data_mut()[c * 3 + c] = 1.0;
        check_close(separable_conv3x3(x, idw, ipw, 1), x);
    }

    SECTION("channel mismatch diagnostic") {
        REQUIRE_THROWS_AS(separable_conv3x3(x, Tensor::zeros({2, 1, 3, 3}), pw, 1), std::invalid_argument);
    }
}

TEST_CASE("bilinear upsample") {
    SECTION("constant maps to constant") {
        Tensor c = Tensor::full({1, 2, 3, 5}, 3.25);
        Tensor out = bilinear_upsample2x(c);
        REQUIRE(out.shape() == Shape{1, 2, 6, 10});
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == Catch::Approx(3.25).margin(1e-15));
    }
    SECTION("hand-evaluated 1x2 row") {
        Tensor x = Tensor::from({1, 1, 1, 2}, {0.0, 1.0});
        Tensor out = bilinear_upsample2x(x);
        REQUIRE(out.shape() == Shape{1, 1, 2, 4});
        CHECK(out[0] == Catch::Approx(0.0));
        CHECK(out[1] == Catch::Approx(0.25));
        CHECK(out[2] == Catch::Approx(0.75));
        CHECK(out[3] == Catch::Approx(1.0));
    }
    SECTION("2x2 matches scalar reference") {
        Rng rng(6);
        Tensor x = randt(rng, {1, 1, 2, 2});
        check_close(bilinear_upsample2x(x), oracle::bilinear_naive(x, 4, 4), 1e-12);
    }
    SECTION("random case matches scalar reference") {
        Rng rng(7);
        Tensor x = randt(rng, {2, 3, 5, 4});
        check_close(bilinear_upsample2x(x), oracle::bilinear_naive(x, 10, 8), 1e-12);
    }
}

TEST_CASE("global average pool") {
    Tensor c = Tensor::full({2, 3, 4, 4}, 1.5);
    Tensor out = global_avg_pool(c);
    REQUIRE(out.shape() == Shape{2, 3});
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == Catch::Approx(1.5));

    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(global_avg_pool(x)[0] == Catch::Approx(2.5));

    // linearity: pooling the sum of two halves equals the mean of means
    Rng rng(8);
    Tensor a = randt(rng, {1, 1, 2, 4});
    double left = 0, right = 0;
    for (int y = 0; y < 2; ++y)
        for (int x2 = 0; x2 < 2; ++x2) {
            left += a[y * 4 + x2];
            right += a[y * 4 + 2 + x2];
        }
    CHECK(global_avg_pool(a)[0] == Catch::Approx((left / 4 + right / 4) / 2).margin(1e-12));
}

TEST_CASE("linear layer") {
    Rng rng(9);
    Tensor x = randt(rng, {2, 3});

    SECTION("identity weight, zero bias") {
        Tensor w = Tensor::zeros({3, 3});
        for (int i = 0; i < 3; ++i) w.data_mut()[i * 3 + i] = 1.0;
        check_close(linear(x, w, Tensor::zeros({3})), x);
    }
    SECTION("zero weight broadcasts the bias") {
        Tensor b = Tensor::from({4}, {1, 2, 3, 4});
        Tensor out = linear(x, Tensor::zeros({4, 3}), b);
        for (int r = 0; r < 2; ++r)
            for (int k = 0; k < 4; ++k) CHECK(out[r * 4 + k] == Catch::Approx(b[k]));
    }
    SECTION("random case vs dot product oracle") {
        Tensor w = randt(rng, {4, 3});
        Tensor b = randt(rng, {4});
        Tensor out = linear(x, w, b);
        for (int r = 0; r < 2; ++r)
            for (int k = 0; k < 4; ++k) {
                double acc = b[k];
                for (int d = 0; d < 3; ++d) acc += x[r * 3 + d] * w[k * 3 + d];
                CHECK(out[r * 4 + k] == Catch::Approx(acc).margin(1e-12));
            }
    }
    SECTION("dimension mismatch") {
        REQUIRE_THROWS_AS(linear(x, Tensor::zeros({4, 5}), Tensor::zeros({4})), std::invalid_argument);
        REQUIRE_THROWS_AS(linear(x, Tensor::zeros({4, 3}), Tensor::zeros({5})), std::invalid_argument);
    }
}

TEST_CASE("channel softmax sums to one and argmax breaks ties low") {
    Rng rng(10);
    Tensor x = randt(rng, {2, 4, 3, 3});
    Tensor p = channel_softmax(x);
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 9; ++i) {
            double s = 0;
            for (int k = 0; k < 4; ++k) s += p[(b * 4 + k) * 9 + i];
            REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
        }

    Tensor tie = Tensor::from({1, 3}, {2.0, 2.0, 1.0});
    CHECK(argmax_channel(tie)[0] == 0);
}

TEST_CASE("parallel conv2d is bit-identical across thread counts") {
    Rng rng(11);
    Tensor x = randt(rng, {4, 8, 16, 16});
    Tensor k = randt(rng, {8, 8, 3, 3});
    set_num_threads(1);
    Tensor a = conv2d(x, k, 1, 1);
    set_num_threads(2);
    Tensor b = conv2d(x, k, 1, 1);
    set_num_threads(1);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
}
