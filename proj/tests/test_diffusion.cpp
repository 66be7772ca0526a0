#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "poselift/diffusion.hpp"
#include "testutil.hpp"

using namespace poselift;
using diffusion::DiffusionSchedule;

TEST(Schedule, AlphaBarStartsAtOneAndDecreases) {
    auto sched = diffusion::build_cosine_schedule(999);
    EXPECT_DOUBLE_EQ(sched.alpha_bar[0], 1.0);
    for (long t = 1; t <= 999; ++t) {
        EXPECT_LT(sched.alpha_bar[t], sched.alpha_bar[t - 1]) << "t=" << t;
        EXPECT_GT(sched.alpha_bar[t], 0.0);
        EXPECT_GT(sched.beta[t], 0.0);
        EXPECT_LE(sched.beta[t], 0.999);
    }
}

TEST(Schedule, FinalAlphaBarMatchesIndependentEvaluation) {
    // Independent long-double evaluation of the closed form
    // f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), alpha_bar = f(T)/f(0).
    auto sched = diffusion::build_cosine_schedule(999);
    const long double s = 0.008L;
    const long double pi = std::acos(-1.0L);
    auto f = [&](long double t) {
        const long double c = std::cos((t / 999.0L + s) / (1.0L + s) * pi / 2.0L);
        return c * c;
    };
    const long double expected = f(999.0L) / f(0.0L);
    EXPECT_NEAR(sched.alpha_bar[999], static_cast<double>(expected), 1e-12);
    // spot checks along the curve
    for (long t : {1L, 100L, 500L, 998L})
        EXPECT_NEAR(sched.alpha_bar[t], static_cast<double>(f(static_cast<long double>(t)) / f(0.0L)), 1e-12);
}

TEST(Schedule, RejectsBadArguments) {
    EXPECT_THROW(diffusion::build_cosine_schedule(0), std::invalid_argument);
    EXPECT_THROW(diffusion::build_cosine_schedule(10, -0.5), std::invalid_argument);
}

TEST(Schedule, SigmaSquaredIsEtaTimesBeta) {
    auto sched = diffusion::build_cosine_schedule(100, 0.7);
    for (long t : {1L, 50L, 100L}) EXPECT_DOUBLE_EQ(sched.sigma2(t), 0.7 * sched.beta[t]);
}

TEST(ForwardDiffuse, IdentityAtTZero) {
    auto sched = diffusion::build_cosine_schedule(50);
    std::mt19937_64 eng(5);
    PoseSeq3D y0(2, 3, testutil::uniform_vec(eng, 18, -100, 100));
    auto eps = testutil::uniform_vec(eng, 18, -1, 1);
    auto out = diffusion::forward_diffuse(y0, 0, eps, sched);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_DOUBLE_EQ(out[i], y0.coords[i]);
}

TEST(ForwardDiffuse, NoiseTermVanishesWithZeroEps) {
    auto sched = diffusion::build_cosine_schedule(50);
    std::mt19937_64 eng(6);
    PoseSeq3D y0(2, 3, testutil::uniform_vec(eng, 18, -10, 10));
    std::vector<double> eps(18, 0.0);
    const long t = 25;
    auto out = diffusion::forward_diffuse(y0, t, eps, sched);
    const double a = std::sqrt(sched.alpha_bar[t]);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_DOUBLE_EQ(out[i], a * y0.coords[i]);
}

TEST(ForwardDiffuse, HandArithmeticAtAlphaBar036) {
    // sqrt(1 - 0.36) = 0.8, so zero pose + unit noise lands at 0.8 everywhere.
    DiffusionSchedule sched;
    sched.T = 1;
    sched.alpha_bar = {1.0, 0.36};
    sched.beta = {0.0, 1.0 - 0.36};
    PoseSeq3D y0(1, 2);  // zeros
    std::vector<double> eps(6, 1.0);
    auto out = diffusion::forward_diffuse(y0, 1, eps, sched);
    for (double v : out) EXPECT_NEAR(v, 0.8, 1e-15);
}

TEST(ForwardDiffuse, RejectsOutOfRangeT) {
    auto sched = diffusion::build_cosine_schedule(10);
    PoseSeq3D y0(1, 1);
    std::vector<double> eps(3, 0.0);
    EXPECT_THROW(diffusion::forward_diffuse(y0, -1, eps, sched), std::invalid_argument);
    EXPECT_THROW(diffusion::forward_diffuse(y0, 11, eps, sched), std::invalid_argument);
}

TEST(ForwardDiffuse, LinearInPoseAndNoise) {
    auto sched = diffusion::build_cosine_schedule(64);
    std::mt19937_64 eng(7);
    PoseSeq3D y0(2, 2, testutil::uniform_vec(eng, 12, -5, 5));
    auto eps = testutil::uniform_vec(eng, 12, -1, 1);
    const double a = 3.25;
    PoseSeq3D ya(2, 2, y0.coords);
    for (auto& v : ya.coords) v *= a;
    auto eps_a = eps;
    for (auto& v : eps_a) v *= a;
    for (long t : {1L, 17L, 64L}) {
        auto lhs = diffusion::forward_diffuse(ya, t, eps_a, sched);
        auto rhs = diffusion::forward_diffuse(y0, t, eps, sched);
        for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], a * rhs[i], 1e-12);
    }
}

TEST(ForwardDiffuse, PreservesUnitVariance) {
    auto sched = diffusion::build_cosine_schedule(100);
    const long frames = 4000, joints = 9;  // ~1e5 entries
    std::mt19937_64 eng(8);
    std::normal_distribution<double> dist(0.0, 1.0);
    PoseSeq3D y0(frames, joints);
    std::vector<double> eps(y0.coords.size());
    for (auto& v : y0.coords) v = dist(eng);
    for (auto& v : eps) v = dist(eng);
    for (long t : {1L, 25L, 50L, 99L}) {
        auto out = diffusion::forward_diffuse(y0, t, eps, sched);
        double mean = 0.0;
        for (double v : out) mean += v;
        mean /= static_cast<double>(out.size());
        double var = 0.0;
        for (double v : out) var += (v - mean) * (v - mean);
        var /= static_cast<double>(out.size());
        EXPECT_NEAR(var, 1.0, 0.05) << "t=" << t;
    }
}

TEST(DdimSample, PerfectDenoiserReturnsGroundTruth) {
    auto sched = diffusion::build_cosine_schedule(999);
    std::mt19937_64 eng(9);
    PoseSeq3D truth(3, 4, testutil::uniform_vec(eng, 36, -1, 1));
    PoseSeq2D x(3, 4);
    auto perfect = [&](const std::vector<double>&, const PoseSeq2D&, long) { return truth.coords; };
    for (long K : {1L, 5L}) {
        auto out = diffusion::ddim_sample(perfect, x, K, sched, 42);
        ASSERT_EQ(out.coords.size(), truth.coords.size());
        for (std::size_t i = 0; i < out.coords.size(); ++i) EXPECT_DOUBLE_EQ(out.coords[i], truth.coords[i]);
    }
}

TEST(DdimSample, DeterministicAtEtaZero) {
    auto sched = diffusion::build_cosine_schedule(200, 0.0);
    PoseSeq2D x(2, 3);
    auto denoiser = [](const std::vector<double>& y, const PoseSeq2D&, long t) {
        std::vector<double> out(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) out[i] = 0.9 * y[i] + 0.01 * static_cast<double>(t % 7);
        return out;
    };
    auto a = diffusion::ddim_sample(denoiser, x, 10, sched, 77);
    auto b = diffusion::ddim_sample(denoiser, x, 10, sched, 77);
    EXPECT_EQ(a.coords, b.coords);
    auto c = diffusion::ddim_sample(denoiser, x, 10, sched, 78);
    EXPECT_NE(a.coords, c.coords);
}

TEST(DdimSample, TwoStepScalarChainMatchesHandUnrolling) {
    const long T = 4, K = 2;
    auto sched = diffusion::build_cosine_schedule(T, 0.0);
    PoseSeq2D x(1, 1);
    const double slope = 0.5, bias = 0.1;
    auto affine = [&](const std::vector<double>& y, const PoseSeq2D&, long) {
        std::vector<double> out(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) out[i] = slope * y[i] + bias;
        return out;
    };
    auto out = diffusion::ddim_sample(affine, x, K, sched, 11);

    // Hand unrolling of coordinate 0 (elementwise map, so it evolves alone)
    // with the same starting draw.
    std::mt19937_64 eng(11);
    std::normal_distribution<double> dist(0.0, 1.0);
    const double y4 = dist(eng);  // first of the three N(0,1) draws
    // k=0: t=4, t'=2
    const double yhat0 = slope * y4 + bias;
    const double ab4 = sched.alpha_bar[4], ab2 = sched.alpha_bar[2];
    const double eps_hat = (y4 - std::sqrt(ab4) * yhat0) / std::sqrt(1.0 - ab4);
    const double y2 = std::sqrt(ab2) * yhat0 + std::sqrt(1.0 - ab2) * eps_hat;
    // k=1: t=2, returns the prediction
    const double expected = slope * y2 + bias;
    EXPECT_NEAR(out.coords[0], expected, 1e-12);
}

TEST(DdimSample, ClampsSigmaWhenRadicandGoesNegative) {
    // Gigantic eta makes sigma^2 exceed 1 - alpha_bar_t'; the sampler must
    // clamp and still produce finite output.
    auto sched = diffusion::build_cosine_schedule(100, 1e6);
    PoseSeq2D x(1, 2);
    auto denoiser = [](const std::vector<double>& y, const PoseSeq2D&, long) {
        std::vector<double> out(y.size(), 0.0);
        return out;
    };
    auto out = diffusion::ddim_sample(denoiser, x, 5, sched, 3);
    for (double v : out.coords) EXPECT_TRUE(std::isfinite(v));
}

TEST(DdimSample, RejectsBadK) {
    auto sched = diffusion::build_cosine_schedule(10);
    PoseSeq2D x(1, 1);
    auto denoiser = [](const std::vector<double>& y, const PoseSeq2D&, long) { return y; };
    EXPECT_THROW(diffusion::ddim_sample(denoiser, x, 0, sched, 1), std::invalid_argument);
}
