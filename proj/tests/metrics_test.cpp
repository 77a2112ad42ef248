#include <gtest/gtest.h>

#include "support.hpp"

using namespace vsr;
using namespace vsr::testing;

namespace {

Image filled(std::size_t c, std::size_t h, std::size_t w, float v) { return Image(c, h, w, v); }

Image add_noise(const Image& img, double amplitude, std::uint64_t seed)
{
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    Image out = img;
    for (auto& v : out.data) v = float(v + amplitude * u(rng));
    return out;
}

} // namespace

TEST(Psnr, Examples)
{
    auto a = filled(3, 8, 8, 0.25f);
    EXPECT_TRUE(std::isinf(psnr(a, a)));
    EXPECT_NEAR(psnr_from_mse(0.01), 20.0, 1e-12);
    EXPECT_NEAR(psnr(filled(3, 8, 8, 0.0f), filled(3, 8, 8, 0.5f)), 6.0206, 1e-4);
    EXPECT_THROW(psnr(a, filled(3, 8, 4, 0.0f)), ShapeError);
}

TEST(Psnr, MatchesScalarLoop)
{
    Rng rng(1);
    for (int i = 0; i < 10; ++i) {
        auto a = random_image<float>(3, 32, 32, rng), b = random_image<float>(3, 32, 32, rng);
        EXPECT_NEAR(psnr(a, b), naive_psnr(a, b), 1e-6);
    }
}

TEST(Psnr, DecreasesWithNoiseAmplitude)
{
    Rng rng(2);
    auto a = random_image<float>(3, 32, 32, rng);
    double last = std::numeric_limits<double>::infinity();
    for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
        const double p = psnr(a, add_noise(a, amp, 7));
        EXPECT_LT(p, last);
        last = p;
    }
}

TEST(Ssim, IdentityAndConstantClosedForm)
{
    Rng rng(3);
    auto a = random_image<float>(3, 32, 32, rng);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-9);
    const double c1 = 1e-4;
    EXPECT_NEAR(ssim(filled(3, 16, 16, 0.0f), filled(3, 16, 16, 1.0f)), c1 / (1 + c1), 1e-7);
    EXPECT_THROW(ssim(filled(3, 10, 10, 0.0f), filled(3, 10, 10, 0.0f)), ShapeError);
}

TEST(Ssim, MatchesScalarLoopSymmetricAndBounded)
{
    Rng rng(4);
    for (int i = 0; i < 5; ++i) {
        auto a = random_image<float>(3, 32, 32, rng), b = add_noise(a, 0.2, i);
        const double s = ssim(a, b);
        EXPECT_NEAR(s, naive_ssim(a, b), 1e-6);
        EXPECT_NEAR(s, ssim(b, a), 1e-9);
        EXPECT_LT(s, 1.0);
    }
}

TEST(TemporalInconsistency, Examples)
{
    FrameSequence target, still;
    for (int t = 0; t < 4; ++t) {
        target.frames.push_back(filled(3, 4, 4, 0.1f * float(t)));
        still.frames.push_back(filled(3, 4, 4, 0.5f));
    }
    EXPECT_EQ(temporal_inconsistency(target, target), 0.0);
    EXPECT_NEAR(temporal_inconsistency(still, target), 0.01, 1e-8);
    FrameSequence one;
    one.frames = {still[0]};
    EXPECT_THROW(temporal_inconsistency(one, one), ContractError);
}

TEST(TemporalInconsistency, EqualsMeanOfPairLosses)
{
    Rng rng(5);
    FrameSequence o, g;
    for (int t = 0; t < 3; ++t) {
        o.frames.push_back(random_image<float>(3, 4, 4, rng));
        g.frames.push_back(random_image<float>(3, 4, 4, rng));
    }
    double acc = 0;
    for (std::size_t t = 1; t < 3; ++t)
        acc += temporal_consistency_loss(image_to_tensor<double>(o[t]), image_to_tensor<double>(o[t - 1]),
                                         image_to_tensor<double>(g[t]), image_to_tensor<double>(g[t - 1]))
                   .item();
    EXPECT_NEAR(temporal_inconsistency(o, g), acc / 2, 1e-12);
}

TEST(RelativeImprovement, ReportedRows)
{
    EXPECT_NEAR(relative_improvement(25.63, 22.89), 11.97, 0.01);
    EXPECT_NEAR(relative_improvement(0.81, 0.75), 8.00, 0.01);
    EXPECT_EQ(relative_improvement(3.0, 3.0), 0.0);
    EXPECT_THROW(relative_improvement(1.0, 0.0), ContractError);
}

TEST(EvaluateSequence, IdenticalSingleAndMean)
{
    Rng rng(6);
    FrameSequence a;
    for (int t = 0; t < 2; ++t) a.frames.push_back(random_image<float>(3, 16, 16, rng));
    auto r = evaluate_sequence(a, a);
    EXPECT_TRUE(r.all_psnr_infinite);
    EXPECT_NEAR(r.ssim, 1.0, 1e-9);

    FrameSequence one, other;
    one.frames = {a[0]};
    other.frames = {a[1]};
    auto s = evaluate_sequence(one, other);
    EXPECT_EQ(s.psnr_db, psnr(a[0], a[1]));
    EXPECT_EQ(s.ssim, ssim(a[0], a[1]));

    // Frames at exactly 20 and 30 dB: uniform errors 0.1 and 0.1/sqrt(10).
    FrameSequence gt, pred;
    gt.frames = {filled(3, 16, 16, 0.5f), filled(3, 16, 16, 0.5f)};
    pred.frames = {filled(3, 16, 16, 0.6f), filled(3, 16, 16, float(0.5 + 0.1 / std::sqrt(10.0)))};
    auto m = evaluate_sequence(pred, gt);
    EXPECT_NEAR(m.per_frame_psnr[0], 20.0, 1e-4);
    EXPECT_NEAR(m.per_frame_psnr[1], 30.0, 1e-4);
    EXPECT_NEAR(m.psnr_db, 25.0, 1e-4);
}

TEST(EvaluateSequence, InfiniteFramesExcludedAndCounted)
{
    FrameSequence gt, pred;
    gt.frames = {filled(3, 16, 16, 0.5f), filled(3, 16, 16, 0.5f)};
    pred.frames = {filled(3, 16, 16, 0.5f), filled(3, 16, 16, 0.6f)};
    auto r = evaluate_sequence(pred, gt);
    EXPECT_EQ(r.infinite_frames, 1u);
    EXPECT_FALSE(r.all_psnr_infinite);
    EXPECT_NEAR(r.psnr_db, 20.0, 1e-4);
}

TEST(EvaluateSequence, LengthMismatchNamesCounts)
{
    FrameSequence a, b;
    a.frames = {filled(3, 16, 16, 0)};
    b.frames = {filled(3, 16, 16, 0), filled(3, 16, 16, 0)};
    try {
        evaluate_sequence(a, b);
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find('1'), std::string::npos);
        EXPECT_NE(std::string(e.what()).find('2'), std::string::npos);
    }
}
