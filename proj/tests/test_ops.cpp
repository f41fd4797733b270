#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "mbt/ops.hpp"
#include "mbt/rng.hpp"
#include "test_util.hpp"

using namespace mbt;
using test::check_gradients;
using test::random_tensor;

namespace {

// Every differentiable primitive vs finite differences: 20 seeded random
// cases, float64, max relative error < 1e-6.
constexpr int kFdCases = 20;
constexpr double kFdTol = 1e-6;

template <typename Fn>
void fd_cases(const char* name, Fn&& make_case) {
    for (int seed = 0; seed < kFdCases; ++seed) {
        Rng rng(1000 + seed);
        const double err = make_case(rng);
        INFO(name << " seed " << seed << " err " << err);
        CHECK(err < kFdTol);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise + activation gradients
// ---------------------------------------------------------------------------

TEST_CASE("fd: add/sub/mul/mul_scalar") {
    fd_cases("add", [](Rng& rng) {
        auto a = random_tensor<double>({2, 3, 4}, rng);
        auto b = random_tensor<double>({2, 3, 4}, rng);
        auto w = random_tensor<double>({2, 3, 4}, rng);
        return check_gradients([&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(add(in[0], in[1]), w)); },
                               {a, b});
    });
    fd_cases("sub", [](Rng& rng) {
        auto a = random_tensor<double>({2, 3, 4}, rng);
        auto b = random_tensor<double>({2, 3, 4}, rng);
        auto w = random_tensor<double>({2, 3, 4}, rng);
        return check_gradients([&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(sub(in[0], in[1]), w)); },
                               {a, b});
    });
    fd_cases("mul", [](Rng& rng) {
        auto a = random_tensor<double>({2, 3, 4}, rng);
        auto b = random_tensor<double>({2, 3, 4}, rng);
        return check_gradients([](const std::vector<Tensor<double>>& in) { return sum_all(mul(in[0], in[1])); }, {a, b});
    });
    fd_cases("mul_scalar", [](Rng& rng) {
        auto a = random_tensor<double>({3, 5}, rng);
        return check_gradients([](const std::vector<Tensor<double>>& in) { return sum_all(mul_scalar(in[0], 1.7)); }, {a});
    });
}

TEST_CASE("fd: gelu/sigmoid/log") {
    fd_cases("gelu", [](Rng& rng) {
        auto a = random_tensor<double>({4, 6}, rng, 2.0);
        auto w = random_tensor<double>({4, 6}, rng);
        return check_gradients([&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(gelu(in[0]), w)); }, {a});
    });
    fd_cases("sigmoid", [](Rng& rng) {
        auto a = random_tensor<double>({4, 6}, rng, 3.0);
        auto w = random_tensor<double>({4, 6}, rng);
        return check_gradients([&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(sigmoid(in[0]), w)); },
                               {a});
    });
    fd_cases("log", [](Rng& rng) {
        Tensor<double> a({3, 4});
        for (i64 i = 0; i < a.numel(); ++i) a.data()[i] = 0.5 + rng.uniform() * 2.0;
        auto w = random_tensor<double>({3, 4}, rng);
        return check_gradients([&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(log_op(in[0]), w)); },
                               {a});
    });
}

TEST_CASE("gelu derivative at 0.5 matches the analytic value") {
    auto x = Tensor<double>::from_data({1}, {0.5});
    auto fd = finite_diff_grad<double>([](const Tensor<double>& t) { return sum_all(gelu(t)); }, x, 1e-5);
    // Phi(0.5) + 0.5 * phi(0.5)
    const double analytic = 0.8674951246561629;
    CHECK(std::fabs(fd.data()[0] - analytic) / analytic < 1e-8);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

TEST_CASE("fd: reshape/permute/concat/split") {
    fd_cases("reshape", [](Rng& rng) {
        auto a = random_tensor<double>({2, 6}, rng);
        auto w = random_tensor<double>({3, 4}, rng);
        return check_gradients(
            [&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(reshape(in[0], {3, 4}), w)); }, {a});
    });
    fd_cases("permute", [](Rng& rng) {
        auto a = random_tensor<double>({2, 3, 4}, rng);
        auto w = random_tensor<double>({4, 2, 3}, rng);
        return check_gradients(
            [&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(permute(in[0], {2, 0, 1}), w)); }, {a});
    });
    fd_cases("concat", [](Rng& rng) {
        auto a = random_tensor<double>({2, 2, 3}, rng);
        auto b = random_tensor<double>({2, 3, 3}, rng);
        auto w = random_tensor<double>({2, 5, 3}, rng);
        return check_gradients(
            [&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(concat<double>({in[0], in[1]}, 1), w)); },
            {a, b});
    });
    fd_cases("split", [](Rng& rng) {
        auto a = random_tensor<double>({2, 5, 3}, rng);
        auto w = random_tensor<double>({2, 2, 3}, rng);
        return check_gradients(
            [&w](const std::vector<Tensor<double>>& in) {
                auto parts = split(in[0], 1, {2, 3});
                return add(sum_all(mul(parts[0], w)), mul_scalar(sum_all(parts[1]), 0.3));
            },
            {a});
    });
}

TEST_CASE("reshape/split reject inconsistent sizes") {
    auto a = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
    CHECK_THROWS_AS(split(a, 1, {2, 2}), ShapeError);
    CHECK_THROWS_AS(split(a, 2, {3}), ShapeError);
    CHECK_THROWS_AS(concat<double>({a, Tensor<double>({3, 4})}, 0), ShapeError);
}

TEST_CASE("pixel_shuffle: r=2 on [a,b,c,d] gives [[a,b],[c,d]]") {
    auto x = Tensor<double>::from_data({1, 4, 1, 1}, {1.0, 2.0, 3.0, 4.0});
    auto y = pixel_shuffle(x, 2);
    CHECK(y.shape() == std::vector<i64>{1, 1, 2, 2});
    CHECK(y.data()[0] == 1.0);
    CHECK(y.data()[1] == 2.0);
    CHECK(y.data()[2] == 3.0);
    CHECK(y.data()[3] == 4.0);
}

TEST_CASE("pixel_shuffle then its inverse is the identity") {
    Rng rng(5);
    auto x = random_tensor<double>({2, 12, 3, 5}, rng);
    auto y = pixel_unshuffle(pixel_shuffle(x, 2), 2);
    CHECK(std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<size_t>(x.numel())) == 0);
}

TEST_CASE("fd: pixel_shuffle/pixel_unshuffle") {
    fd_cases("pixel_shuffle", [](Rng& rng) {
        auto a = random_tensor<double>({1, 8, 2, 3}, rng);
        auto w = random_tensor<double>({1, 2, 4, 6}, rng);
        return check_gradients(
            [&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(pixel_shuffle(in[0], 2), w)); }, {a});
    });
    fd_cases("pixel_unshuffle", [](Rng& rng) {
        auto a = random_tensor<double>({1, 2, 4, 6}, rng);
        auto w = random_tensor<double>({1, 8, 2, 3}, rng);
        return check_gradients(
            [&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(pixel_unshuffle(in[0], 2), w)); }, {a});
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

TEST_CASE("fd: linear with and without bias") {
    fd_cases("linear", [](Rng& rng) {
        auto x = random_tensor<double>({2, 3, 4}, rng);
        auto w = random_tensor<double>({5, 4}, rng);
        auto b = random_tensor<double>({5}, rng);
        auto r = random_tensor<double>({2, 3, 5}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(linear(in[0], in[1], in[2]), r)); },
            {x, w, b});
    });
    fd_cases("linear_nobias", [](Rng& rng) {
        auto x = random_tensor<double>({3, 4}, rng);
        auto w = random_tensor<double>({2, 4}, rng);
        auto r = random_tensor<double>({3, 2}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(linear(in[0], in[1]), r)); }, {x, w});
    });
}

TEST_CASE("fd: matmul plain and transposed") {
    fd_cases("matmul_nn", [](Rng& rng) {
        auto a = random_tensor<double>({2, 3, 4}, rng);
        auto b = random_tensor<double>({2, 4, 5}, rng);
        auto r = random_tensor<double>({2, 3, 5}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(matmul(in[0], in[1]), r)); }, {a, b});
    });
    fd_cases("matmul_nt", [](Rng& rng) {
        auto a = random_tensor<double>({2, 3, 4}, rng);
        auto b = random_tensor<double>({2, 5, 4}, rng);
        auto r = random_tensor<double>({2, 3, 5}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(matmul(in[0], in[1], true), r)); }, {a, b});
    });
}

TEST_CASE("matmul rejects mismatched shapes") {
    Tensor<double> a({2, 3, 4}), b({2, 5, 6}), c({3, 4, 2});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, c), ShapeError);
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

TEST_CASE("softmax rows sum to one") {
    Rng rng(11);
    auto x = random_tensor<double>({3, 4, 7}, rng, 30.0);
    auto p = softmax_lastdim(x);
    for (i64 r = 0; r < 12; ++r) {
        double s = 0;
        for (i64 i = 0; i < 7; ++i) s += p.data()[r * 7 + i];
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("fd: softmax") {
    fd_cases("softmax", [](Rng& rng) {
        auto a = random_tensor<double>({2, 3, 5}, rng, 2.0);
        auto w = random_tensor<double>({2, 3, 5}, rng);
        return check_gradients(
            [&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(softmax_lastdim(in[0]), w)); }, {a});
    });
}

TEST_CASE("layer_norm: constant channel vector maps to zeros before scale/shift") {
    auto x = Tensor<double>::full({1, 6, 2, 2}, 3.25);
    auto gamma = Tensor<double>::full({6}, 1.0);
    auto beta = Tensor<double>({6});
    auto y = layer_norm(x, gamma, beta);
    for (i64 i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(0.0));
}

TEST_CASE("fd: layer_norm") {
    fd_cases("layer_norm", [](Rng& rng) {
        auto x = random_tensor<double>({2, 5, 2, 3}, rng);
        auto gamma = random_tensor<double>({5}, rng);
        auto beta = random_tensor<double>({5}, rng);
        auto w = random_tensor<double>({2, 5, 2, 3}, rng);
        return check_gradients(
            [&w](const std::vector<Tensor<double>>& in) { return sum_all(mul(layer_norm(in[0], in[1], in[2]), w)); },
            {x, gamma, beta});
    });
}

// ---------------------------------------------------------------------------
// Convolution, padding, pooling
// ---------------------------------------------------------------------------

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
    auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto w = Tensor<double>::from_data({1, 1, 1, 1}, {1.0});
    auto y = conv2d(x, w);
    CHECK(y.shape() == x.shape());
    for (i64 i = 0; i < 4; ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d: channel-sum kernel") {
    auto x = Tensor<double>::from_data({1, 2, 1, 1}, {2.5, -1.0});
    auto w = Tensor<double>::from_data({1, 2, 1, 1}, {1.0, 1.0});
    auto y = conv2d(x, w);
    CHECK(y.numel() == 1);
    CHECK(y.data()[0] == doctest::Approx(1.5));
}

TEST_CASE("conv2d: rejects non-integral output and channel mismatch") {
    Tensor<double> x({1, 2, 5, 5}), w({3, 2, 2, 2}), w_bad({3, 4, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w, Tensor<double>(), 2), ShapeError);  // (5-2)%2 != 0
    CHECK_THROWS_AS(conv2d(x, w_bad), ShapeError);
    CHECK_THROWS_AS(conv2d(x, w, Tensor<double>::from_data({2}, {0.0, 0.0})), ShapeError);
}

TEST_CASE("fd: conv2d zero pad, reflect pad, stride") {
    fd_cases("conv3x3_zero", [](Rng& rng) {
        auto x = random_tensor<double>({1, 2, 5, 4}, rng);
        auto w = random_tensor<double>({3, 2, 3, 3}, rng);
        auto b = random_tensor<double>({3}, rng);
        auto r = random_tensor<double>({1, 3, 5, 4}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) {
                return sum_all(mul(conv2d(in[0], in[1], in[2], 1, PadMode::Zero, 1), r));
            },
            {x, w, b});
    });
    fd_cases("conv3x3_reflect", [](Rng& rng) {
        auto x = random_tensor<double>({1, 3, 8, 8}, rng);
        auto w = random_tensor<double>({2, 3, 3, 3}, rng);
        auto r = random_tensor<double>({1, 2, 8, 8}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) {
                return sum_all(mul(conv2d(in[0], in[1], Tensor<double>(), 1, PadMode::Reflect, 1), r));
            },
            {x, w});
    });
    fd_cases("conv_stride2", [](Rng& rng) {
        auto x = random_tensor<double>({2, 2, 6, 6}, rng);
        auto w = random_tensor<double>({3, 2, 2, 2}, rng);
        auto r = random_tensor<double>({2, 3, 3, 3}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(conv2d(in[0], in[1], Tensor<double>(), 2), r)); },
            {x, w});
    });
}

TEST_CASE("fd: pad2d zero and reflect") {
    fd_cases("pad_zero", [](Rng& rng) {
        auto x = random_tensor<double>({1, 2, 3, 4}, rng);
        auto r = random_tensor<double>({1, 2, 6, 7}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(pad2d(in[0], 1, 2, 1, 2, PadMode::Zero), r)); },
            {x});
    });
    fd_cases("pad_reflect", [](Rng& rng) {
        auto x = random_tensor<double>({1, 2, 4, 5}, rng);
        auto r = random_tensor<double>({1, 2, 8, 9}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) {
                return sum_all(mul(pad2d(in[0], 2, 2, 2, 2, PadMode::Reflect), r));
            },
            {x});
    });
}

TEST_CASE("pool2d: window mean and maximum examples") {
    auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(pool2d(x, PoolMode::Avg, 2).data()[0] == doctest::Approx(2.5));
    CHECK(pool2d(x, PoolMode::Max, 2).data()[0] == doctest::Approx(4.0));
    CHECK_THROWS_AS(pool2d(Tensor<double>({1, 1, 3, 3}), PoolMode::Avg, 2), ShapeError);
}

TEST_CASE("pool2d: constant image stays constant for both modes") {
    for (i64 s : {1, 2, 4}) {
        auto x = Tensor<double>::full({1, 2, 8, 8}, 7.5);
        for (PoolMode m : {PoolMode::Avg, PoolMode::Max}) {
            auto y = pool2d(x, m, s);
            CHECK(y.dim(2) == 8 / s);
            for (i64 i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(7.5));
        }
    }
}

TEST_CASE("pool2d(avg) + broadcast upsample is a projection") {
    // Bit-exact for s=2 (power-of-two divisor); within one rounding step for
    // other ratios.
    for (i64 s : {2, 3, 4}) {
        Rng rng(17);
        auto x = random_tensor<double>({1, 2, 12, 12}, rng);
        auto project = [s](const Tensor<double>& t) {
            auto pooled = pool2d(t, PoolMode::Avg, s);
            Tensor<double> up(t.shape());
            const i64 c = t.dim(1), oh = pooled.dim(2), ow = pooled.dim(3);
            for (i64 pc = 0; pc < c; ++pc)
                for (i64 y = 0; y < oh * s; ++y)
                    for (i64 xw = 0; xw < ow * s; ++xw)
                        up.data()[(pc * oh * s + y) * ow * s + xw] = pooled.data()[(pc * oh + y / s) * ow + xw / s];
            return up;
        };
        auto once = project(x);
        auto twice = project(once);
        if (s == 2) {
            CHECK(std::memcmp(once.data(), twice.data(), sizeof(double) * static_cast<size_t>(once.numel())) == 0);
        } else {
            for (i64 i = 0; i < once.numel(); ++i)
                CHECK(std::fabs(once.data()[i] - twice.data()[i]) < 1e-15);
        }
    }
}

TEST_CASE("fd: pool2d avg and max") {
    fd_cases("pool_avg", [](Rng& rng) {
        auto x = random_tensor<double>({1, 2, 4, 4}, rng);
        auto r = random_tensor<double>({1, 2, 2, 2}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(pool2d(in[0], PoolMode::Avg, 2), r)); }, {x});
    });
    fd_cases("pool_max", [](Rng& rng) {
        auto x = random_tensor<double>({1, 2, 4, 4}, rng);
        auto r = random_tensor<double>({1, 2, 2, 2}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(pool2d(in[0], PoolMode::Max, 2), r)); }, {x});
    });
}

TEST_CASE("pool2d(max) backward routes ties to the first row-major element") {
    auto x = Tensor<double>::full({1, 1, 2, 2}, 4.0, true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        tape.backward(sum_all(pool2d(x, PoolMode::Max, 2)));
    }
    CHECK(x.grad_buffer()[0] == 1.0);
    CHECK(x.grad_buffer()[1] == 0.0);
    CHECK(x.grad_buffer()[2] == 0.0);
    CHECK(x.grad_buffer()[3] == 0.0);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

TEST_CASE("attention: single key broadcasts V over all query rows") {
    Rng rng(3);
    auto q = random_tensor<double>({1, 2, 3, 4}, rng);
    auto k = random_tensor<double>({1, 2, 1, 4}, rng);
    auto v = random_tensor<double>({1, 2, 1, 4}, rng);
    auto o = attention(q, k, v);
    for (i64 h = 0; h < 2; ++h)
        for (i64 t = 0; t < 3; ++t)
            for (i64 d = 0; d < 4; ++d)
                CHECK(o.data()[(h * 3 + t) * 4 + d] == doctest::Approx(v.data()[h * 4 + d]));
}

TEST_CASE("attention: zero queries give the uniform average of V") {
    Rng rng(4);
    auto q = Tensor<double>({1, 1, 2, 3});
    auto k = random_tensor<double>({1, 1, 5, 3}, rng);
    auto v = random_tensor<double>({1, 1, 5, 3}, rng);
    auto o = attention(q, k, v);
    for (i64 t = 0; t < 2; ++t)
        for (i64 d = 0; d < 3; ++d) {
            double mean = 0;
            for (i64 j = 0; j < 5; ++j) mean += v.data()[j * 3 + d];
            mean /= 5.0;
            CHECK(o.data()[t * 3 + d] == doctest::Approx(mean));
        }
}

TEST_CASE("attention: rows of the probability matrix sum to one") {
    Rng rng(6);
    auto q = random_tensor<double>({2, 2, 3, 4}, rng, 5.0);
    auto k = random_tensor<double>({2, 2, 6, 4}, rng, 5.0);
    auto v = random_tensor<double>({2, 2, 6, 4}, rng);
    Tensor<double> probs;
    attention(q, k, v, &probs);
    const i64 rows = probs.numel() / probs.dim(3);
    for (i64 r = 0; r < rows; ++r) {
        double s = 0;
        for (i64 i = 0; i < probs.dim(3); ++i) s += probs.data()[r * probs.dim(3) + i];
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("fd: attention h=2 d=4 Lq=3 Lkv=5") {
    fd_cases("attention", [](Rng& rng) {
        auto q = random_tensor<double>({1, 2, 3, 4}, rng);
        auto k = random_tensor<double>({1, 2, 5, 4}, rng);
        auto v = random_tensor<double>({1, 2, 5, 4}, rng);
        auto r = random_tensor<double>({1, 2, 3, 4}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(attention(in[0], in[1], in[2]), r)); },
            {q, k, v});
    });
}

TEST_CASE("attention rejects bad shapes") {
    Tensor<double> q({1, 2, 3, 4}), k({1, 2, 5, 3}), v({1, 2, 5, 4});
    CHECK_THROWS_AS(attention(q, k, v), ShapeError);
    Tensor<double> k2({1, 2, 5, 4}), v2({1, 2, 4, 4});
    CHECK_THROWS_AS(attention(q, k2, v2), ShapeError);
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

TEST_CASE("resample: constants map to constants (both modes)") {
    auto x = Tensor<double>::full({1, 3, 4, 6}, 7.0);
    for (auto dims : {std::pair<i64, i64>{8, 12}, {2, 3}, {5, 9}}) {
        auto yb = resample_bilinear(x, dims.first, dims.second);
        auto yc = resample_bicubic(x, dims.first, dims.second);
        for (i64 i = 0; i < yb.numel(); ++i) CHECK(yb.data()[i] == doctest::Approx(7.0));
        for (i64 i = 0; i < yc.numel(); ++i) CHECK(yc.data()[i] == doctest::Approx(7.0));
    }
}

TEST_CASE("resample: bilinear up then down restores a constant exactly") {
    auto x = Tensor<double>::full({1, 1, 4, 4}, 0.625);
    auto y = resample_bilinear(resample_bilinear(x, 8, 8), 4, 4);
    for (i64 i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.625);
}

TEST_CASE("resample: bilinear x2 matches the hand-evaluated half-pixel table") {
    // Input rows are [0,1]; half-pixel centers with clamped edges give
    // [0, 0.25, 0.75, 1] in x and no variation in y.
    auto x = Tensor<double>::from_data({1, 1, 2, 2}, {0.0, 1.0, 0.0, 1.0});
    auto y = resample_bilinear(x, 4, 4);
    const double expected[4] = {0.0, 0.25, 0.75, 1.0};
    for (i64 row = 0; row < 4; ++row)
        for (i64 col = 0; col < 4; ++col)
            CHECK(y.data()[row * 4 + col] == doctest::Approx(expected[col]).epsilon(1e-12));
}

TEST_CASE("resample: rejects non-positive sizes; bicubic refuses recording") {
    Tensor<double> x({1, 1, 4, 4});
    CHECK_THROWS_AS(resample_bilinear(x, 0, 4), ShapeError);
    CHECK_THROWS_AS(resample_bicubic(x, 4, -1), ShapeError);
    x.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    CHECK_THROWS_AS(resample_bicubic(x, 8, 8), ValueError);
}

TEST_CASE("fd: resample_bilinear up and down") {
    fd_cases("bilinear_up", [](Rng& rng) {
        auto x = random_tensor<double>({1, 2, 3, 4}, rng);
        auto r = random_tensor<double>({1, 2, 6, 8}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(resample_bilinear(in[0], 6, 8), r)); }, {x});
    });
    fd_cases("bilinear_down", [](Rng& rng) {
        auto x = random_tensor<double>({1, 2, 6, 8}, rng);
        auto r = random_tensor<double>({1, 2, 3, 4}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(resample_bilinear(in[0], 3, 4), r)); }, {x});
    });
}

// ---------------------------------------------------------------------------
// Gates, losses, reductions
// ---------------------------------------------------------------------------

TEST_CASE("fd: global_avg_pool and mul_channel_gate") {
    fd_cases("global_avg_pool", [](Rng& rng) {
        auto x = random_tensor<double>({2, 3, 4, 4}, rng);
        auto r = random_tensor<double>({2, 3, 1, 1}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(global_avg_pool(in[0]), r)); }, {x});
    });
    fd_cases("mul_channel_gate", [](Rng& rng) {
        auto x = random_tensor<double>({2, 3, 4, 4}, rng);
        auto g = random_tensor<double>({2, 3, 1, 1}, rng);
        auto r = random_tensor<double>({2, 3, 4, 4}, rng);
        return check_gradients(
            [&r](const std::vector<Tensor<double>>& in) { return sum_all(mul(mul_channel_gate(in[0], in[1]), r)); },
            {x, g});
    });
}

TEST_CASE("l1_loss examples") {
    auto a = Tensor<double>::from_data({2}, {0.0, 0.0});
    auto b = Tensor<double>::from_data({2}, {1.0, 3.0});
    CHECK(l1_loss(a, b).item() == doctest::Approx(2.0));
    CHECK(l1_loss(b, b).item() == 0.0);
    CHECK_THROWS_AS(l1_loss(a, Tensor<double>({3})), ShapeError);
}

TEST_CASE("fd: l1_loss away from ties") {
    fd_cases("l1_loss", [](Rng& rng) {
        auto a = random_tensor<double>({3, 4}, rng);
        auto b = random_tensor<double>({3, 4}, rng);
        return check_gradients([](const std::vector<Tensor<double>>& in) { return l1_loss(in[0], in[1]); }, {a, b});
    });
}

// ---------------------------------------------------------------------------
// Purity
// ---------------------------------------------------------------------------

TEST_CASE("primitives are pure: identical inputs give bit-identical outputs") {
    Rng rng(31);
    auto x = random_tensor<double>({1, 4, 8, 8}, rng);
    auto w = random_tensor<double>({4, 4, 3, 3}, rng);
    auto run = [&]() {
        auto c = conv2d(x, w, Tensor<double>(), 1, PadMode::Reflect, 1);
        auto p = pool2d(c, PoolMode::Avg, 2);
        auto s = softmax_lastdim(reshape(p, {4, 16}));
        return resample_bilinear(gelu(reshape(s, {1, 4, 4, 4})), 7, 5);
    };
    auto y1 = run();
    auto y2 = run();
    CHECK(std::memcmp(y1.data(), y2.data(), sizeof(double) * static_cast<size_t>(y1.numel())) == 0);
}
