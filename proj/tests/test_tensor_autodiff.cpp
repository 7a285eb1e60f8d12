#include <gtest/gtest.h>

#include <cmath>

#include "hye/ops.hpp"
#include "test_util.hpp"

using namespace hye;
using hye::testing::grad_check;
using hye::testing::project;
using hye::testing::random_tensor;

using hye::testing::conv_reference;

TEST(Conv2d, IdentityKernelReturnsInput) {
    Rng rng(1);
    auto x = random_tensor<float>({1, 1, 3, 3}, rng);
    Tensor k({1, 1, 1, 1}, 1.0f);
    auto y = conv2d(x, k, 1, 0);
    ASSERT_EQ(y.shape(), x.shape());
    for (int i = 0; i < 9; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, ConstantCaseStrideTwo) {
    auto y = conv2d(Tensor::ones({1, 1, 4, 4}), Tensor::ones({1, 1, 2, 2}), 2, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y[i], 4.0f);
}

TEST(Conv2d, MatchesNestedLoopReference) {
    Rng rng(7);
    auto x = random_tensor<float>({2, 3, 8, 8}, rng);
    auto k = random_tensor<float>({4, 3, 3, 3}, rng);
    for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 1}}) {
        auto y = conv2d(x, k, stride, pad);
        auto ref = conv_reference(x, k, stride, pad);
        ASSERT_EQ(y.numel(), static_cast<std::int64_t>(ref.size()));
        const int h = (8 + 2 * pad - 3) / stride + 1;
        EXPECT_EQ(y.dim(2), h);
        for (std::size_t i = 0; i < ref.size(); ++i)
            EXPECT_NEAR(y[i], ref[i], 1e-5 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST(Conv2d, ChannelMismatchIsDimensionError) {
    EXPECT_THROW(conv2d(Tensor::ones({1, 2, 4, 4}), Tensor::ones({1, 3, 3, 3}), 1, 0), DimensionError);
    EXPECT_THROW(conv2d(Tensor::ones({1, 1, 2, 2}), Tensor::ones({1, 1, 5, 5}), 1, 0), DimensionError);
}

TEST(Linear, IdentityAndBiasOnly) {
    Rng rng(3);
    auto x = random_tensor<float>({2, 4}, rng);
    Tensor eye({4, 4}, 0.0f);
    for (int i = 0; i < 4; ++i) eye.mutable_data()[i * 5] = 1.0f;
    auto y = linear(x, eye, Tensor::zeros({4}));
    for (int i = 0; i < 8; ++i) EXPECT_EQ(y[i], x[i]);

    Tensor b({3}, std::vector<float>{1.5f, -2.0f, 0.25f});
    auto z = linear(x, Tensor::zeros({3, 4}), b);
    for (int r = 0; r < 2; ++r)
        for (int j = 0; j < 3; ++j) EXPECT_EQ(z[r * 3 + j], b[j]);
}

TEST(Linear, MatchesTripleLoop) {
    Rng rng(11);
    auto x = random_tensor<float>({2, 5}, rng);
    auto w = random_tensor<float>({3, 5}, rng);
    auto y = linear(x, w);
    for (int n = 0; n < 2; ++n)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int i = 0; i < 5; ++i) acc += double(x[n * 5 + i]) * double(w[j * 5 + i]);
            EXPECT_NEAR(y[n * 3 + j], acc, 1e-6);
        }
    EXPECT_THROW(linear(x, random_tensor<float>({3, 4}, rng)), DimensionError);
}

TEST(Elementwise, AddZeroSiluZeroGroupNormConstant) {
    Rng rng(5);
    auto x = random_tensor<float>({2, 3}, rng);
    auto y = elementwise(ElementwiseOp::add, x, Tensor::zeros({2, 3}));
    for (int i = 0; i < 6; ++i) EXPECT_EQ(y[i], x[i]);
    EXPECT_EQ(silu(Tensor::zeros({1}))[0], 0.0f);

    Tensor c({1, 4, 2, 2}, 3.0f);
    auto gn = group_norm(c, 2, Tensor::ones({4}), Tensor::zeros({4}));
    for (int i = 0; i < gn.numel(); ++i) EXPECT_EQ(gn[i], 0.0f);
    EXPECT_THROW(group_norm(c, 2, Tensor::ones({4}), Tensor::zeros({4}), 0.0f), NumericError);
}

TEST(Elementwise, BroadcastRules) {
    Tensor a({2, 3, 2}, 1.0f);
    Tensor b({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    auto y = add(a, b);
    EXPECT_EQ(y.shape(), a.shape());
    EXPECT_EQ(y[0], 2.0f);
    EXPECT_EQ(y[1], 2.0f);
    EXPECT_EQ(y[11], 7.0f);
    EXPECT_EQ(mul(a, Tensor::scalar(2.0f))[5], 2.0f);
    EXPECT_THROW(add(a, Tensor::ones({3, 2})), DimensionError);
}

TEST(Backward, SumOfSquares) {
    Tensor x({3}, std::vector<float>{1, 2, 3});
    x.set_requires_grad(true);
    sum(square(x)).backward();
    EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
    EXPECT_FLOAT_EQ(x.grad()[1], 4.0f);
    EXPECT_FLOAT_EQ(x.grad()[2], 6.0f);
}

TEST(Backward, RepeatedCallsAccumulateAndZeroGradResets) {
    Tensor x({3}, std::vector<float>{1, 2, 3});
    x.set_requires_grad(true);
    auto loss = sum(square(x));
    loss.backward();
    loss.backward();
    EXPECT_FLOAT_EQ(x.grad()[2], 12.0f);
    x.zero_grad();
    EXPECT_FLOAT_EQ(x.grad()[2], 0.0f);
}

TEST(Backward, IndependentParameterGetsZeroGradient) {
    Tensor x({2}, 1.0f), p({2}, 5.0f);
    x.set_requires_grad(true);
    p.set_requires_grad(true);
    auto loss = add(sum(square(x)), scale(sum(p), 0.0f));
    loss.backward();
    EXPECT_EQ(p.grad()[0], 0.0f);
    EXPECT_EQ(p.grad()[1], 0.0f);
}

TEST(Backward, MultiElementWithoutSeedIsUsageError) {
    Tensor x({3}, 1.0f);
    x.set_requires_grad(true);
    auto y = scale(x, 2.0f);
    EXPECT_THROW(y.backward(), UsageError);
    y.backward({1.0f, 1.0f, 1.0f});
    EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
    EXPECT_THROW(Tensor::scalar(1.0f).backward(), UsageError);
}

TEST(Backward, MeanConvMatchesFiniteDifferencesInFloat) {
    Rng rng(99);
    auto x = random_tensor<float>({1, 2, 5, 5}, rng);
    auto k = random_tensor<float>({3, 2, 3, 3}, rng);
    auto r = grad_check<float>([](const auto& in) { return mean(conv2d(in[0], in[1], 1, 1)); }, {x, k});
    EXPECT_TRUE(r.ok) << r.detail;
}

// Every differentiable op against central finite differences, 20 seeds each.
// The sweep runs on the double instantiation of the same templates so the
// finite-difference side is not limited by float round-off.
class GradientSweep : public ::testing::TestWithParam<int> {};

TEST_P(GradientSweep, AllOpsMatchFiniteDifferences) {
    using D = double;
    const std::uint64_t seed = 1000 + GetParam();
    Rng rng(seed);
    using Fn = std::function<BasicTensor<D>(const std::vector<BasicTensor<D>>&)>;
    struct Case {
        const char* name;
        Fn f;
        std::vector<BasicTensor<D>> inputs;
    };
    std::vector<Case> cases;
    cases.push_back({"conv2d", [&](const auto& in) { return project(conv2d(in[0], in[1], in[2], 1, 1), seed); },
                     {random_tensor<D>({2, 2, 5, 5}, rng), random_tensor<D>({3, 2, 3, 3}, rng),
                      random_tensor<D>({3}, rng)}});
    cases.push_back({"conv2d_stride2", [&](const auto& in) { return project(conv2d(in[0], in[1], 2, 1), seed); },
                     {random_tensor<D>({1, 2, 6, 6}, rng), random_tensor<D>({2, 2, 3, 3}, rng)}});
    cases.push_back({"linear", [&](const auto& in) { return project(linear(in[0], in[1], in[2]), seed); },
                     {random_tensor<D>({3, 4}, rng), random_tensor<D>({5, 4}, rng), random_tensor<D>({5}, rng)}});
    cases.push_back({"add_broadcast", [&](const auto& in) { return project(add(in[0], in[1]), seed); },
                     {random_tensor<D>({2, 3, 4}, rng), random_tensor<D>({2, 3}, rng)}});
    cases.push_back({"sub", [&](const auto& in) { return project(sub(in[0], in[1]), seed); },
                     {random_tensor<D>({2, 3}, rng), random_tensor<D>({1}, rng)}});
    cases.push_back({"mul_broadcast", [&](const auto& in) { return project(mul(in[0], in[1]), seed); },
                     {random_tensor<D>({2, 3, 2}, rng), random_tensor<D>({2}, rng)}});
    cases.push_back({"scale", [&](const auto& in) { return project(scale(in[0], 1.7), seed); },
                     {random_tensor<D>({4}, rng)}});
    cases.push_back({"add_scalar", [&](const auto& in) { return project(square(add_scalar(in[0], 0.3)), seed); },
                     {random_tensor<D>({4}, rng)}});
    cases.push_back({"silu", [&](const auto& in) { return project(silu(in[0]), seed); },
                     {random_tensor<D>({10}, rng, 2.0)}});
    cases.push_back({"group_norm",
                     [&](const auto& in) { return project(group_norm(in[0], 2, in[1], in[2]), seed); },
                     {random_tensor<D>({2, 4, 3, 3}, rng), random_tensor<D>({4}, rng), random_tensor<D>({4}, rng)}});
    cases.push_back({"softmax", [&](const auto& in) { return project(softmax_last(in[0]), seed); },
                     {random_tensor<D>({3, 5}, rng)}});
    cases.push_back({"bmm", [&](const auto& in) { return project(bmm(in[0], in[1]), seed); },
                     {random_tensor<D>({2, 3, 4}, rng), random_tensor<D>({2, 4, 2}, rng)}});
    cases.push_back({"transpose", [&](const auto& in) { return project(transpose_last2(in[0]), seed); },
                     {random_tensor<D>({2, 3, 4}, rng)}});
    cases.push_back({"reshape", [&](const auto& in) { return project(reshape(in[0], {6, 2}), seed); },
                     {random_tensor<D>({3, 4}, rng)}});
    cases.push_back({"concat", [&](const auto& in) { return project(concat_channels(in[0], in[1]), seed); },
                     {random_tensor<D>({2, 1, 3}, rng), random_tensor<D>({2, 2, 3}, rng)}});
    cases.push_back({"upsample", [&](const auto& in) { return project(upsample_nearest2x(in[0]), seed); },
                     {random_tensor<D>({1, 2, 2, 3}, rng)}});
    cases.push_back({"sum", [&](const auto& in) { return sum(square(in[0])); }, {random_tensor<D>({5}, rng)}});
    cases.push_back({"mean", [&](const auto& in) { return mean(square(in[0])); }, {random_tensor<D>({5}, rng)}});
    cases.push_back({"mean_per_sample", [&](const auto& in) { return project(mean_per_sample(in[0]), seed); },
                     {random_tensor<D>({3, 2, 2}, rng)}});
    cases.push_back({"mean_spatial", [&](const auto& in) { return project(mean_spatial(in[0]), seed); },
                     {random_tensor<D>({2, 3, 2, 2}, rng)}});
    cases.push_back({"cross_entropy", [&](const auto& in) { return cross_entropy(in[0], {0, 2, 1}); },
                     {random_tensor<D>({3, 3}, rng)}});
    for (auto& c : cases) {
        auto r = grad_check<D>(c.f, c.inputs);
        EXPECT_TRUE(r.ok) << c.name << " seed " << seed << ": " << r.detail;
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradientSweep, ::testing::Range(0, 20));

TEST(Properties, BackwardIsLinearInTheLoss) {
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = random_tensor<double>({1, 2, 4, 4}, rng);
        auto k = random_tensor<double>({2, 2, 3, 3}, rng);
        k.set_requires_grad(true);
        const double a = rng.normal(), b = rng.normal();
        auto l1 = [&] { return mean(square(conv2d(x, k, 1, 1))); };
        auto l2 = [&] { return sum(silu(conv2d(x, k, 1, 0))); };
        l1().backward();
        std::vector<double> g1(k.grad().begin(), k.grad().end());
        k.zero_grad();
        l2().backward();
        std::vector<double> g2(k.grad().begin(), k.grad().end());
        k.zero_grad();
        add(scale(l1(), a), scale(l2(), b)).backward();
        for (std::size_t i = 0; i < g1.size(); ++i)
            EXPECT_NEAR(k.grad()[i], a * g1[i] + b * g2[i], 1e-6 * (1.0 + std::abs(a * g1[i] + b * g2[i])));
    }
}

TEST(Properties, GradientShapeMatchesParameter) {
    Rng rng(8);
    auto w = random_tensor<float>({4, 3, 3, 3}, rng);
    auto b = random_tensor<float>({4}, rng);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    mean(conv2d(random_tensor<float>({2, 3, 6, 6}, rng), w, b, 1, 1)).backward();
    EXPECT_EQ(w.grad().size(), static_cast<std::size_t>(w.numel()));
    EXPECT_EQ(b.grad().size(), static_cast<std::size_t>(b.numel()));
}

TEST(Tape, NoGradGuardSkipsRecording) {
    Tensor x({2}, 1.0f);
    x.set_requires_grad(true);
    NoGradGuard guard;
    auto y = scale(x, 3.0f);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, NonFiniteResultIsNumericError) {
    Tensor x({1}, 3e38f);
    EXPECT_THROW(scale(x, 10.0f), NumericError);
}

// Results must not depend on where an element sits in its buffer, otherwise
// identical forward passes can differ in the last bit.
TEST(Determinism, SiluAndSoftmaxArePositionInvariant) {
    Rng rng(21);
    auto x = random_tensor<float>({37}, rng, 3.0);
    auto y = silu(x);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        EXPECT_EQ(y.data()[i], silu(Tensor({1}, {x.data()[i]})).item()) << i;

    // Row 1 of a [2, 23] input starts at an offset that is not a multiple of
    // any vector width.
    auto row = random_tensor<float>({1, 23}, rng);
    std::vector<float> two(46, 0.0f);
    std::copy(row.data().begin(), row.data().end(), two.begin() + 23);
    auto alone = softmax_last(row);
    auto pair = softmax_last(Tensor({2, 23}, two));
    for (int j = 0; j < 23; ++j) EXPECT_EQ(alone.data()[j], pair.data()[23 + j]) << j;
}

TEST(Determinism, ConvIsRepeatable) {
    Rng rng(22);
    auto x = random_tensor<float>({2, 5, 9, 9}, rng);
    auto k = random_tensor<float>({4, 5, 3, 3}, rng);
    auto first = conv2d(x, k, 1, 1);
    conv2d(random_tensor<float>({3, 5, 17, 17}, rng), k, 1, 1);
    EXPECT_EQ(first.values(), conv2d(x, k, 1, 1).values());
}
