#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "s4m/gradcheck.hpp"
#include "s4m/ops.hpp"
#include "s4m/tensor.hpp"

namespace {

namespace gradcheck = s4m::gradcheck;

using namespace s4m;
using gradcheck::random_tensor;

Tensor vec(std::vector<double> v)
{
    const std::size_t n = v.size();
    return Tensor({1, 1, n}, std::move(v));
}

std::vector<double> as_vector(const Var& v)
{
    auto s = v.value().values();
    return {s.begin(), s.end()};
}

TEST(Tensor, ShapeMustMatchValues)
{
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), s4m::invalid_argument);
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.dim(1), 3u);
}

TEST(Conv1d, AdjacentPairSums)
{
    Tape tape(false);
    auto x = tape.constant(vec({1, 2, 3}));
    auto w = tape.constant(vec({1, 1}));
    EXPECT_EQ(as_vector(ops::conv1d(x, w, std::nullopt)), (std::vector<double>{3, 5}));
}

TEST(Conv1d, DilatedPairs)
{
    Tape tape(false);
    auto x = tape.constant(vec({1, 2, 3, 4, 5}));
    auto w = tape.constant(vec({1, 1}));
    EXPECT_EQ(as_vector(ops::conv1d(x, w, std::nullopt, 1, 2, 0)), (std::vector<double>{4, 6, 8}));
}

TEST(Conv1d, StridePaddingGroups)
{
    // Stride 2, dilation 2, kernel 5, padding 4 halves an even length exactly.
    EXPECT_EQ(ops::conv1d_output_length(2000, 5, 2, 2, 4), 1000u);
    EXPECT_EQ(ops::conv1d_output_length(16024, 32, 8, 1, 0), 2000u);
    Tape tape(false);
    auto x = tape.constant(Tensor({1, 2, 3}, std::vector<double>{1, 2, 3, 10, 20, 30}));
    auto w = tape.constant(Tensor({2, 1, 1}, std::vector<double>{2, -1}));
    EXPECT_EQ(as_vector(ops::conv1d(x, w, std::nullopt, 1, 1, 0, 2)),
              (std::vector<double>{2, 4, 6, -10, -20, -30}));
}

TEST(Conv1d, RejectsEmptyOutputAndBadShapes)
{
    Tape tape(false);
    auto x = tape.constant(vec({1, 2}));
    auto w = tape.constant(vec({1, 1, 1}));
    EXPECT_THROW(ops::conv1d(x, w, std::nullopt), s4m::invalid_argument);
    auto w2 = tape.constant(Tensor({1, 2, 1}, 1.0));
    EXPECT_THROW(ops::conv1d(x, w2, std::nullopt), s4m::invalid_argument);
}

TEST(Conv1d, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(1);
    struct Case {
        shape_t x, w;
        std::size_t stride, dilation, padding, groups;
    };
    const std::vector<Case> cases{
        {{2, 3, 8}, {4, 3, 3}, 1, 1, 0, 1},
        {{2, 3, 8}, {3, 3, 2}, 2, 1, 1, 1},
        {{1, 4, 12}, {4, 1, 5}, 2, 2, 4, 4},
        {{2, 2, 9}, {2, 2, 1}, 1, 1, 0, 1},
        {{3, 2, 10}, {4, 1, 3}, 1, 3, 3, 2},
    };
    for (const auto& c : cases) {
        auto build = [&](Tape&, const std::vector<Var>& in) {
            return ops::conv1d(in[0], in[1], in[2], c.stride, c.dilation, c.padding, c.groups);
        };
        auto errs = gradcheck::max_rel_errors(build,
                                              {random_tensor(c.x, rng), random_tensor(c.w, rng),
                                               random_tensor({c.w[0]}, rng)},
                                              7);
        for (double e : errs) {
            EXPECT_LT(e, 1e-6);
        }
    }
}

TEST(Conv1dTransposed, SingleTapAndOverlapAdd)
{
    Tape tape(false);
    auto y = ops::conv1d_transposed(tape.constant(vec({1})), tape.constant(vec({1, 2, 3})), std::nullopt, 1);
    EXPECT_EQ(as_vector(y), (std::vector<double>{1, 2, 3}));
    auto z = ops::conv1d_transposed(tape.constant(vec({1, 1})), tape.constant(vec({1, 1, 1, 1})), std::nullopt, 2);
    EXPECT_EQ(as_vector(z), (std::vector<double>{1, 1, 2, 2, 1, 1}));
}

TEST(Conv1dTransposed, AdjointOfConv1d)
{
    std::mt19937_64 rng(12);
    for (std::size_t stride : {1u, 2u, 8u}) {
        const std::size_t k = 2 * stride + 3;
        const Tensor x = random_tensor({2, 3, 40}, rng);
        const Tensor w = random_tensor({5, 3, k}, rng);
        const std::size_t out_len = ops::conv1d_output_length(40, k, stride, 1, 0);
        const Tensor u = random_tensor({2, 5, out_len}, rng);
        Tape tape(false);
        const auto cx = ops::conv1d(tape.constant(x), tape.constant(w), std::nullopt, stride);
        const auto tu = ops::conv1d_transposed(tape.constant(u), tape.constant(w), std::nullopt, stride);
        double lhs = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            lhs += cx.value()[i] * u[i];
        }
        double rhs = 0.0;
        // The transposed output can be longer than x when (L - k) % stride != 0.
        const std::size_t tl = tu.dim(2);
        for (std::size_t r = 0; r < 6; ++r) {
            for (std::size_t t = 0; t < 40 && t < tl; ++t) {
                rhs += x[r * 40 + t] * tu.value()[r * tl + t];
            }
        }
        EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs)));
    }
}

TEST(Conv1dTransposed, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(2);
    for (auto [cin, cout, k, stride] : std::vector<std::tuple<int, int, int, int>>{
             {2, 3, 4, 2}, {1, 1, 3, 1}, {3, 2, 8, 4}, {2, 2, 2, 2}, {4, 1, 5, 3}}) {
        auto build = [&](Tape&, const std::vector<Var>& in) {
            return ops::conv1d_transposed(in[0], in[1], in[2], static_cast<std::size_t>(stride));
        };
        auto errs = gradcheck::max_rel_errors(
            build,
            {random_tensor({2, static_cast<std::size_t>(cin), 6}, rng),
             random_tensor({static_cast<std::size_t>(cin), static_cast<std::size_t>(cout), static_cast<std::size_t>(k)}, rng),
             random_tensor({static_cast<std::size_t>(cout)}, rng)},
            3);
        for (double e : errs) {
            EXPECT_LT(e, 1e-6);
        }
    }
}

TEST(Activations, GeluAndSigmoidAtZero)
{
    EXPECT_DOUBLE_EQ(ops::gelu_value(0.0), 0.0);
    EXPECT_DOUBLE_EQ(ops::gelu_slope(0.0), 0.5);
    Tape tape;
    auto x = tape.leaf("x", Tensor({1}, 0.0, true));
    auto grads = tape.backward(ops::sigmoid(x));
    EXPECT_DOUBLE_EQ(grads.at("x")[0], 0.25);
}

TEST(Activations, SquareGradient)
{
    Tape tape;
    auto x = tape.leaf("x", Tensor({1}, 3.0, true));
    EXPECT_DOUBLE_EQ(tape.backward(ops::mul(x, x)).at("x")[0], 6.0);
}

TEST(Activations, GradientsMatchFiniteDifferences)
{
    std::mt19937_64 rng(4);
    const std::vector<shape_t> shapes{{1, 1, 5}, {2, 3, 4}, {3, 2, 7}, {1, 4, 9}, {2, 2, 2}};
    for (const auto& shape : shapes) {
        for (auto op : {&ops::gelu, &ops::sigmoid, &ops::relu}) {
            auto build = [op](Tape&, const std::vector<Var>& in) { return op(in[0]); };
            EXPECT_LT(gradcheck::max_rel_errors(build, {random_tensor(shape, rng)}, 5)[0], 1e-6);
        }
        auto binary = [](Tape&, const std::vector<Var>& in) {
            return ops::scale(ops::sub(ops::mul(in[0], in[1]), ops::add(in[0], in[1])), 0.7);
        };
        for (double e : gradcheck::max_rel_errors(binary, {random_tensor(shape, rng), random_tensor(shape, rng)}, 6)) {
            EXPECT_LT(e, 1e-6);
        }
    }
}

TEST(Linear, LastAxisAffineMap)
{
    Tape tape(false);
    auto x = tape.constant(Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}));
    auto w = tape.constant(Tensor({1, 2}, std::vector<double>{1, -1}));
    auto b = tape.constant(Tensor({1}, 10.0));
    EXPECT_EQ(as_vector(ops::linear(x, w, b)), (std::vector<double>{9, 9}));
    EXPECT_THROW(ops::linear(x, tape.constant(Tensor({1, 3}, 1.0)), std::nullopt), s4m::invalid_argument);
}

TEST(Linear, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(5);
    for (auto [rows, din, dout] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>{
             {1, 1, 1}, {3, 4, 2}, {5, 2, 6}, {2, 8, 3}, {4, 3, 3}}) {
        auto build = [](Tape&, const std::vector<Var>& in) { return ops::linear(in[0], in[1], in[2]); };
        for (double e : gradcheck::max_rel_errors(
                 build, {random_tensor({2, rows, din}, rng), random_tensor({dout, din}, rng), random_tensor({dout}, rng)},
                 8)) {
            EXPECT_LT(e, 1e-6);
        }
    }
}

TEST(Pooling, AverageAndNearest)
{
    Tape tape(false);
    EXPECT_EQ(as_vector(ops::avg_pool1d(tape.constant(vec({1, 3, 2, 4})), 2, 2)), (std::vector<double>{2, 3}));
    EXPECT_EQ(as_vector(ops::nearest_upsample(tape.constant(vec({1, 2})), 2)), (std::vector<double>{1, 1, 2, 2}));
}

TEST(Pooling, GradientsMatchFiniteDifferences)
{
    std::mt19937_64 rng(9);
    for (std::size_t f : {1u, 2u, 4u, 8u, 3u}) {
        auto pool = [f](Tape&, const std::vector<Var>& in) { return ops::avg_pool1d(in[0], f, f); };
        auto up = [f](Tape&, const std::vector<Var>& in) { return ops::nearest_upsample(in[0], f); };
        EXPECT_LT(gradcheck::max_rel_errors(pool, {random_tensor({2, 3, 8 * f}, rng)}, 1)[0], 1e-6);
        EXPECT_LT(gradcheck::max_rel_errors(up, {random_tensor({2, 3, 5}, rng)}, 1)[0], 1e-6);
    }
}

TEST(GlobalNorm, StandardizesEachFeatureMap)
{
    std::mt19937_64 rng(10);
    Tensor x = random_tensor({3, 4, 50}, rng, 3.0);
    for (double& v : x.values()) {
        v += 2.0;
    }
    Tape tape(false);
    auto y = ops::global_norm(tape.constant(x), tape.constant(Tensor({4}, 1.0)), tape.constant(Tensor({4}, 0.0)));
    for (std::size_t b = 0; b < 3; ++b) {
        double mean = 0.0;
        double sq = 0.0;
        for (std::size_t i = 0; i < 200; ++i) {
            mean += y.value()[b * 200 + i];
        }
        mean /= 200.0;
        for (std::size_t i = 0; i < 200; ++i) {
            sq += (y.value()[b * 200 + i] - mean) * (y.value()[b * 200 + i] - mean);
        }
        EXPECT_NEAR(mean, 0.0, 1e-6);
        EXPECT_NEAR(sq / 200.0, 1.0, 1e-6);
    }
}

TEST(GlobalNorm, ZeroInputGivesBias)
{
    Tape tape(false);
    auto y = ops::global_norm(tape.constant(Tensor({1, 2, 3}, 0.0)), tape.constant(Tensor({2}, 5.0)),
                              tape.constant(Tensor({2}, std::vector<double>{0.5, -1.0})));
    EXPECT_EQ(as_vector(y), (std::vector<double>{0.5, 0.5, 0.5, -1, -1, -1}));
}

TEST(GlobalNorm, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(11);
    for (const auto& shape : std::vector<shape_t>{{1, 1, 6}, {2, 3, 5}, {3, 2, 4}, {1, 4, 8}, {2, 5, 3}}) {
        auto build = [](Tape&, const std::vector<Var>& in) { return ops::global_norm(in[0], in[1], in[2]); };
        for (double e : gradcheck::max_rel_errors(
                 build, {random_tensor(shape, rng), random_tensor({shape[1]}, rng), random_tensor({shape[1]}, rng)}, 2)) {
            EXPECT_LT(e, 1e-6);
        }
    }
}

TEST(FftConv, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(13);
    for (const auto& shape : std::vector<shape_t>{{1, 1, 4}, {2, 3, 16}, {1, 2, 33}, {3, 1, 7}, {2, 2, 64}}) {
        auto build = [](Tape&, const std::vector<Var>& in) { return ops::fft_conv(in[0], in[1], in[2]); };
        for (double e : gradcheck::max_rel_errors(build,
                                                  {random_tensor(shape, rng), random_tensor({shape[1], shape[2]}, rng),
                                                   random_tensor({shape[1]}, rng)},
                                                  4)) {
            EXPECT_LT(e, 1e-6);
        }
    }
}

TEST(ShapeOps, GradientsMatchFiniteDifferences)
{
    std::mt19937_64 rng(14);
    for (std::size_t n : {1u, 2u, 3u, 4u, 5u}) {
        auto build = [n](Tape&, const std::vector<Var>& in) {
            auto padded = ops::pad_time(in[0], n, 2);
            auto cropped = ops::crop_time(padded, 1, n + 3);
            auto a = ops::channel_slice(cropped, 1, 1);
            return ops::concat_channels({a, cropped, ops::scale(a, 2.0)});
        };
        EXPECT_LT(gradcheck::max_rel_errors(build, {random_tensor({2, 2, n + 2}, rng)}, 1)[0], 1e-6);
        auto reduce = [](Tape&, const std::vector<Var>& in) { return ops::mean(ops::mul(in[0], in[0])); };
        EXPECT_LT(gradcheck::max_rel_errors(reduce, {random_tensor({2, n, 3}, rng)}, 1)[0], 1e-6);
    }
}

TEST(ShapeOps, MismatchNamesBothShapes)
{
    Tape tape(false);
    try {
        ops::add(tape.constant(Tensor({1, 2, 3})), tape.constant(Tensor({1, 3, 2})));
        FAIL();
    } catch (const s4m::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("[1,2,3]"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[1,3,2]"), std::string::npos);
    }
}

TEST(Backward, NonScalarLossRejected)
{
    Tape tape;
    auto x = tape.leaf("x", Tensor({2}, 1.0, true));
    EXPECT_THROW(tape.backward(ops::scale(x, 2.0)), s4m::invalid_argument);
}

TEST(Backward, UnreachedLeavesGetZeros)
{
    Tape tape;
    auto x = tape.leaf("x", Tensor({1}, 2.0, true));
    auto y = tape.leaf("y", Tensor({3}, 1.0, true));
    auto grads = tape.backward(ops::mul(x, x));
    ASSERT_TRUE(grads.count("y"));
    EXPECT_EQ(grads.at("y"), Tensor({3}, 0.0));
    (void)y;
}

TEST(Backward, DeterministicAcrossRuns)
{
    auto run = [] {
        std::mt19937_64 rng(21);
        Tape tape;
        auto x = tape.leaf("x", random_tensor({2, 3, 32}, rng));
        auto w = tape.leaf("w", [&] {
            Tensor t = random_tensor({3, 3, 3}, rng);
            t.set_requires_grad(true);
            return t;
        }());
        auto k = tape.leaf("k", [&] {
            Tensor t = random_tensor({3, 32}, rng);
            t.set_requires_grad(true);
            return t;
        }());
        auto d = tape.constant(Tensor({3}, 0.5));
        auto y = ops::gelu(ops::fft_conv(ops::conv1d(x, w, std::nullopt, 1, 1, 1), k, d));
        return tape.backward(ops::mean(ops::mul(y, y)));
    };
    EXPECT_EQ(run(), run());
}

TEST(ClipGradNorm, ScalesOnlyAboveThreshold)
{
    Gradients g{{"a", Tensor({2}, std::vector<double>{6, 0})}, {"b", Tensor({1}, 8.0)}};
    EXPECT_DOUBLE_EQ(clip_grad_norm(g, 5.0), 10.0);
    EXPECT_DOUBLE_EQ(g.at("a")[0], 3.0);
    EXPECT_DOUBLE_EQ(g.at("b")[0], 4.0);
    EXPECT_NEAR(global_norm_of(g), 5.0, 1e-12);

    Gradients small{{"a", Tensor({1}, 3.0)}};
    clip_grad_norm(small, 5.0);
    EXPECT_DOUBLE_EQ(small.at("a")[0], 3.0);

    Gradients zero{{"a", Tensor({4}, 0.0)}};
    EXPECT_DOUBLE_EQ(clip_grad_norm(zero, 5.0), 0.0);
    EXPECT_EQ(zero.at("a"), Tensor({4}, 0.0));
}

} // namespace
