#include <gtest/gtest.h>

#include <cmath>

#include "dit4sr/ops.hpp"
#include "dit4sr/rng.hpp"

using namespace dit4sr;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed) {
    CounterRng rng(seed, 0, 0);
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = rng.normal();
    return Tensor<double>(std::move(s), std::move(v));
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
    Tensor<float> t({2, 3}, std::vector<float>(6, 1.f));
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rank(), 2u);
}

TEST(Tensor, OnlyLeavesAreWritable) {
    Tensor<double> a({2}, {1.0, 2.0});
    Tensor<double> b = add(a, a);
    EXPECT_NO_THROW(a.mutable_data()[0] = 3.0);
    a.set_requires_grad(true);
    Tensor<double> c = add(a, a);
    EXPECT_THROW(c.mutable_data(), ContractError);
    EXPECT_THROW(c.set_requires_grad(true), ContractError);
}

TEST(Backward, SumGivesOnes) {
    auto x = random_tensor({3, 4}, 1);
    x.set_requires_grad(true);
    backward(sum(x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwoX) {
    auto x = random_tensor({5}, 2);
    x.set_requires_grad(true);
    backward(sum(mul(x, x)));
    const auto g = x.grad();
    for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(g[i], 2.0 * x[i]);
}

TEST(Backward, NonScalarLossIsAContractError) {
    auto x = random_tensor({2, 2}, 3);
    x.set_requires_grad(true);
    EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, ValueUsedTwiceAccumulatesBothPaths) {
    Tensor<double> x({1}, {3.0});
    x.set_requires_grad(true);
    auto y = scale(x, 2.0);
    // loss = y*y + y = 4x^2 + 2x -> 8x + 2
    backward(sum(add(mul(y, y), y)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0 * 3.0 + 2.0);
}

TEST(Backward, RepeatedCallsAddIntoLeafGrad) {
    Tensor<double> x({2}, {1.0, -2.0});
    x.set_requires_grad(true);
    backward(sum(x));
    backward(sum(scale(x, 3.0)));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 4.0);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());
}

TEST(Backward, DiamondGraphVisitsInReverseTopologicalOrder) {
    auto x = random_tensor({4}, 4);
    x.set_requires_grad(true);
    auto a = gelu(x);
    auto b = mul(a, x);
    auto c = add(a, b);  // a reaches c directly and through b
    backward(sum(c));
    auto f = [&] { return sum(add(gelu(x), mul(gelu(x), x))); };
    const auto fd = finite_diff_grad(f, x, 1e-6);
    const auto g = x.grad();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], fd[i], 1e-8);
}

TEST(NoGrad, SuppressesRecording) {
    auto x = random_tensor({3}, 5);
    x.set_requires_grad(true);
    Tensor<double> y;
    {
        NoGradGuard g;
        y = mul(x, x);
    }
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(grad_enabled());
}

TEST(FiniteDiff, SumIsAllOnes) {
    auto x = random_tensor({6}, 6);
    const auto fd = finite_diff_grad([&] { return sum(x); }, x, 1e-5);
    for (double g : fd) EXPECT_NEAR(g, 1.0, 1e-9);
}

TEST(FiniteDiff, HalfSquaredNormIsIdentity) {
    auto x = random_tensor({6}, 7);
    const auto fd = finite_diff_grad([&] { return scale(sum(square(x)), 0.5); }, x, 1e-5);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(fd[i], x[i], 1e-9);
}

TEST(Forward, BitwiseDeterministic) {
    auto a = random_tensor({7, 5}, 8), b = random_tensor({5, 3}, 9);
    auto y1 = softmax(matmul(a, b)), y2 = softmax(matmul(a, b));
    for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(Forward, FloatIsDefaultPrecision) {
    static_assert(std::is_same_v<Tensor<float>::value_type, float>);
    Tensor<float> t({2}, {1.f, 2.f});
    EXPECT_FLOAT_EQ(sum(t).item(), 3.f);
}
