#include <gtest/gtest.h>

#include "support.hpp"

using namespace vsr;
using namespace vsr::testing;

TEST(Conv2d, PointwiseKernelScales)
{
    auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto w = Tensor<float>::full({1, 1, 1, 1}, 2.0f);
    auto y = conv2d(x, w, Tensor<float>::zeros({1}));
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    for (float v : y.data()) EXPECT_EQ(v, 2.0f);
}

TEST(Conv2d, IsCrossCorrelationWithZeroPadding)
{
    Tensor<float> x({1, 1, 1, 3}, {1, 2, 3});
    Tensor<float> w({1, 1, 1, 3}, {1, 0, -1});
    auto y = conv2d(x, w, Tensor<float>{}, 1, 1);
    // Padding applies on both axes; the middle output row is the 1-D result.
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    EXPECT_EQ(y[3], -2.0f);
    EXPECT_EQ(y[4], -2.0f);
    EXPECT_EQ(y[5], 2.0f);
}

TEST(Conv2d, ShapeErrors)
{
    EXPECT_THROW(conv2d(Tensor<float>::zeros({1, 3, 4, 4}), Tensor<float>::zeros({2, 4, 3, 3}), Tensor<float>{}),
                 ShapeError);
    // (5 + 2 - 3) / 2 is an integer; (6 + 2 - 3) / 2 is not.
    EXPECT_NO_THROW(conv2d(Tensor<float>::zeros({1, 1, 5, 5}), Tensor<float>::zeros({1, 1, 3, 3}), Tensor<float>{}, 2, 1));
    EXPECT_THROW(conv2d(Tensor<float>::zeros({1, 1, 6, 6}), Tensor<float>::zeros({1, 1, 3, 3}), Tensor<float>{}, 2, 1),
                 ShapeError);
}

TEST(Conv2d, OutputShapeFormula)
{
    Rng rng(5);
    std::uniform_int_distribution<std::size_t> d(1, 4);
    for (int i = 0; i < 20; ++i) {
        const std::size_t k = d(rng), pad = d(rng) - 1, stride = d(rng) % 2 + 1;
        std::size_t h = k + stride * d(rng) - 2 * std::min(pad, k / 2);
        if ((h + 2 * pad - k) % stride) ++h;
        if ((h + 2 * pad - k) % stride) continue;
        auto y = conv2d(Tensor<float>::zeros({2, 3, h, h}), Tensor<float>::zeros({4, 3, k, k}), Tensor<float>{}, stride,
                        pad);
        const std::size_t out = (h + 2 * pad - k) / stride + 1;
        EXPECT_EQ(y.shape(), (Shape{2, 4, out, out}));
    }
}

TEST(Conv2d, LinearInInputWithoutBias)
{
    Rng rng(9);
    auto x = random_tensor<double>({1, 2, 5, 5}, rng, -1, 1, false);
    auto y = random_tensor<double>({1, 2, 5, 5}, rng, -1, 1, false);
    auto w = random_tensor<double>({3, 2, 3, 3}, rng, -1, 1, false);
    const double a = 0.7, b = -1.3;
    auto lhs = conv2d(add(scale(x, a), scale(y, b)), w, Tensor<double>{}, 1, 1);
    auto rhs = add(scale(conv2d(x, w, Tensor<double>{}, 1, 1), a), scale(conv2d(y, w, Tensor<double>{}, 1, 1), b));
    for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-5);
}

TEST(BatchNorm, NormalisesNormalisedDataToItself)
{
    Tensor<double> x({4, 1, 1, 1}, {-1.0, 1.0, -1.0, 1.0});
    Tensor<double> rm, rv;
    auto y = batchnorm2d(x, Tensor<double>::full({1}, 1.0), Tensor<double>::zeros({1}), rm, rv, Mode::train, 1e-5);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, UsesPopulationVariance)
{
    Tensor<double> x({2, 1, 1, 1}, {1.0, 3.0});
    Tensor<double> rm, rv;
    auto y = batchnorm2d(x, Tensor<double>::full({1}, 1.0), Tensor<double>::zeros({1}), rm, rv, Mode::train, 0.0);
    EXPECT_DOUBLE_EQ(y[0], -1.0);
    EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(BatchNorm, EvalWithIdentityStatsIsIdentity)
{
    Rng rng(1);
    auto x = random_tensor<double>({2, 3, 2, 2}, rng, -1, 1, false);
    auto rm = Tensor<double>::zeros({3}), rv = Tensor<double>::full({3}, 1.0);
    auto y = batchnorm2d(x, Tensor<double>::full({3}, 1.0), Tensor<double>::zeros({3}), rm, rv, Mode::eval, 0.0);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(BatchNorm, EvalNeedsRunningStats)
{
    Tensor<double> rm, rv;
    EXPECT_THROW(batchnorm2d(Tensor<double>::zeros({1, 1, 1, 1}), Tensor<double>::full({1}, 1.0),
                             Tensor<double>::zeros({1}), rm, rv, Mode::eval),
                 StateError);
}

TEST(BatchNorm, TrainUpdatesRunningStatsWithMomentum)
{
    Tensor<double> x({2, 1, 1, 1}, {1.0, 3.0});
    auto rm = Tensor<double>::zeros({1}), rv = Tensor<double>::full({1}, 1.0);
    batchnorm2d(x, Tensor<double>::full({1}, 1.0), Tensor<double>::zeros({1}), rm, rv, Mode::train);
    EXPECT_NEAR(rm[0], 0.2, 1e-12);            // 0.9*0 + 0.1*2
    EXPECT_NEAR(rv[0], 0.9 + 0.1 * 2.0, 1e-12); // unbiased batch variance 2
}

TEST(Prelu, Branches)
{
    auto a = Tensor<double>::full({1}, 0.25, true);
    Tensor<double> x({2}, {-2.0, 3.0}, true);
    auto y = prelu(reshape(x, {1, 2}), a);
    EXPECT_DOUBLE_EQ(y[0], -0.5);
    EXPECT_DOUBLE_EQ(y[1], 3.0);
    backward(y.rank() ? sum(narrow(y, 1, 0, 1)) : y);
    EXPECT_DOUBLE_EQ(a.grad()[0], -2.0);
}

TEST(LeakyRelu, BranchesAndGradient)
{
    Tensor<double> x({2}, {-1.0, 5.0}, true);
    auto y = leaky_relu(x, 0.2);
    EXPECT_DOUBLE_EQ(y[0], -0.2);
    EXPECT_DOUBLE_EQ(y[1], 5.0);
    backward(sum(y));
    EXPECT_NEAR(x.grad()[0], 0.2, 1e-12);
    EXPECT_THROW(leaky_relu(x, 1.5), ContractError);
}

TEST(Linear, HandComputedAndIdentity)
{
    Tensor<float> x({1, 2}, {1, 2});
    Tensor<float> w({1, 2}, {3, 4});
    Tensor<float> b({1}, {5});
    EXPECT_EQ(linear(x, w, b)[0], 16.0f);

    Tensor<float> eye({2, 2}, {1, 0, 0, 1});
    auto y = linear(x, eye, Tensor<float>::zeros({2}));
    EXPECT_EQ(y[0], 1.0f);
    EXPECT_EQ(y[1], 2.0f);
    EXPECT_THROW(linear(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({5, 4}), Tensor<float>{}), ShapeError);
}

namespace {
double sigm(double v) { return 1.0 / (1.0 + std::exp(-v)); }
} // namespace

TEST(Lstm, ZeroWeightsGiveZeroOutput)
{
    Rng rng(2);
    auto x = random_tensor<float>({2, 3, 5}, rng, -1, 1, false);
    LstmWeights<float> p{Tensor<float>::zeros({8, 5}), Tensor<float>::zeros({8, 2}), Tensor<float>::zeros({8}),
                         Tensor<float>::zeros({8})};
    const auto y = lstm_sequence(x, p);
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Lstm, ScalarRecurrenceOracle)
{
    // N = H = 1 over two steps; gate order i, f, g, o.
    const double wi[4] = {0.3, -0.2, 0.5, 0.1}, wh[4] = {0.4, 0.25, -0.3, 0.2};
    const double bi[4] = {0.05, 0.1, -0.05, 0.0}, bh[4] = {0.0, 0.2, 0.1, -0.1};
    const double xs[2] = {0.7, -0.4};
    LstmWeights<double> p{Tensor<double>({4, 1}, {wi[0], wi[1], wi[2], wi[3]}),
                          Tensor<double>({4, 1}, {wh[0], wh[1], wh[2], wh[3]}),
                          Tensor<double>({4}, {bi[0], bi[1], bi[2], bi[3]}), Tensor<double>({4}, {bh[0], bh[1], bh[2], bh[3]})};
    auto y = lstm_sequence(Tensor<double>({1, 2, 1}, {xs[0], xs[1]}), p);
    double h = 0, c = 0;
    for (int t = 0; t < 2; ++t) {
        double z[4];
        for (int k = 0; k < 4; ++k) z[k] = wi[k] * xs[t] + bi[k] + wh[k] * h + bh[k];
        c = sigm(z[1]) * c + sigm(z[0]) * std::tanh(z[2]);
        h = sigm(z[3]) * std::tanh(c);
        EXPECT_NEAR(y[t], h, 1e-6);
    }
}

TEST(Lstm, LaterStepsDependOnEarlierInputs)
{
    Rng rng(4);
    auto x = random_tensor<double>({1, 3, 4}, rng);
    LstmWeights<double> p{random_tensor<double>({12, 4}, rng), random_tensor<double>({12, 3}, rng),
                          random_tensor<double>({12}, rng), random_tensor<double>({12}, rng)};
    auto h = lstm_sequence(x, p);
    backward(sum(narrow(h, 1, 2, 1)));
    double g0 = 0;
    for (std::size_t i = 0; i < 4; ++i) g0 += std::abs(x.grad()[i]);
    EXPECT_GT(g0, 0.0);
}

TEST(Lstm, EmptySequenceRejected)
{
    LstmWeights<float> p{Tensor<float>::zeros({4, 1}), Tensor<float>::zeros({4, 1}), Tensor<float>::zeros({4}),
                         Tensor<float>::zeros({4})};
    // A zero-length time axis cannot even be constructed, which is the same contract.
    EXPECT_THROW(lstm_sequence(Tensor<float>({1, 0, 1}, {}), p), ShapeError);
}

TEST(PixelShuffle, Rearrangement)
{
    Tensor<float> x({1, 4, 1, 1}, {1, 2, 3, 4});
    auto y = pixel_shuffle(x, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{1, 2, 3, 4}));
    auto id = pixel_shuffle(x, 1);
    EXPECT_EQ(id.shape(), x.shape());
    EXPECT_THROW(pixel_shuffle(Tensor<float>::zeros({1, 6, 2, 2}), 2), ShapeError);
}

TEST(PixelShuffle, InverseRoundTrip)
{
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        auto x = random_tensor<float>({2, 12, 3, 2}, rng, -1, 1, false);
        for (std::size_t r : {1u, 2u}) {
            auto y = pixel_unshuffle(pixel_shuffle(x, r), r);
            ASSERT_EQ(y.shape(), x.shape());
            for (std::size_t k = 0; k < x.numel(); ++k) ASSERT_EQ(y[k], x[k]);
        }
    }
}

TEST(Pointwise, Examples)
{
    Tensor<float> a({2}, {0, 0}), b({2}, {1, 3});
    EXPECT_EQ(mse(a, a).item(), 0.0f);
    EXPECT_EQ(mse(a, b).item(), 5.0f);
    auto h = scale(add_scalar(tanh(Tensor<float>::zeros({1})), 1.0), 0.5);
    EXPECT_EQ(h[0], 0.5f);
    EXPECT_THROW(add(a, Tensor<float>::zeros({3})), ShapeError);
}

TEST(Dropout, EvalIsIdentityAndTrainIsInverted)
{
    Rng rng(0);
    auto x = Tensor<float>::full({1000}, 1.0f);
    auto e = dropout(x, 0.5, Mode::eval, rng);
    for (float v : e.data()) EXPECT_EQ(v, 1.0f);
    auto t = dropout(x, 0.5, Mode::train, rng);
    for (float v : t.data()) EXPECT_TRUE(v == 0.0f || v == 2.0f);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs)
{
    for (int rep = 0; rep < 2; ++rep) {
        Rng a(21), b(21);
        auto x1 = random_tensor<float>({1, 2, 6, 6}, a), x2 = random_tensor<float>({1, 2, 6, 6}, b);
        auto w1 = random_tensor<float>({3, 2, 3, 3}, a), w2 = random_tensor<float>({3, 2, 3, 3}, b);
        auto y1 = conv2d(x1, w1, Tensor<float>{}, 1, 1), y2 = conv2d(x2, w2, Tensor<float>{}, 1, 1);
        EXPECT_TRUE(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
    }
}

TEST(GradientSuite, CompositeConvPreluMean)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        auto make = [](auto tag) {
            using T = decltype(tag);
            return TensorFn<T>([](const std::vector<Tensor<T>>& in) {
                return mean(prelu(conv2d(in[0], in[1], in[2], 1, 1), in[3]));
            });
        };
        std::vector<Tensor<float>> in{random_tensor<float>({1, 2, 4, 4}, rng), random_tensor<float>({3, 2, 3, 3}, rng),
                                      random_tensor<float>({3}, rng), random_tensor<float>({1}, rng, 0.1, 0.4)};
        EXPECT_LT(check_gradients<float>(make(0.0f), make(0.0), in, rng).worst, 1e-3);
    }
}

// Every op and loss in the catalogue, 20 seeded draws each, both precisions.
template <typename T>
class GradientCatalogue : public ::testing::Test {};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(GradientCatalogue, Precisions);

TYPED_TEST(GradientCatalogue, AllCasesPass)
{
    using T = TypeParam;
    const auto cases = gradient_cases<T>();
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const double worst = run_case<T>(i, 20);
        EXPECT_LT(worst, grad_tolerance<T>()) << cases[i].name;
    }
}
