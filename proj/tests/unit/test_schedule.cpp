#include "memguard/errors.hpp"
#include "memguard/rng.hpp"
#include "memguard/schedule.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace memguard;

namespace {

NumericArray scalar(double v) { return NumericArray({1}, {v}); }

NumericArray random_array(Rng& rng, std::size_t n) {
    NumericArray a({n});
    for (auto& v : a.data) v = rng.normal();
    return a;
}

}  // namespace

TEST(NoiseSchedule, LinearEndpointsAndMonotone) {
    const auto s = NoiseSchedule::linear(200, 1e-4, 0.02);
    ASSERT_EQ(s.T(), 200);
    EXPECT_DOUBLE_EQ(s.betas.front(), 1e-4);
    EXPECT_DOUBLE_EQ(s.betas.back(), 0.02);
    EXPECT_EQ(s.alpha_bar(kClean), 1.0);
    for (int t = 1; t < s.T(); ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    // Independent product.
    double prod = 1.0;
    for (int t = 0; t < 200; ++t) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t / 199.0);
    EXPECT_NEAR(s.alpha_bar(199), prod, 1e-12);
}

TEST(NoiseSchedule, RejectsBetasOutsideUnitInterval) {
    EXPECT_THROW(NoiseSchedule::from_betas({0.1, 1.0}), ArgumentError);
    EXPECT_THROW(NoiseSchedule::from_betas({0.0}), ArgumentError);
    EXPECT_THROW(NoiseSchedule::from_betas({}), ArgumentError);
    EXPECT_THROW(NoiseSchedule::linear(10, 1e-4, 0.02).alpha_bar(10), ArgumentError);
}

TEST(ForwardDiffuse, CleanStepIsIdentity) {
    const auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
    EXPECT_EQ(forward_diffuse(scalar(0.3), kClean, scalar(5.0), s).data[0], 0.3);
}

TEST(ForwardDiffuse, PureNoiseLimit) {
    // 120 steps of beta = 1 - 1e-6 drive alpha_bar below the smallest double.
    const auto s = NoiseSchedule::from_betas(std::vector<double>(120, 1.0 - 1e-6));
    ASSERT_EQ(s.alpha_bar(119), 0.0);
    EXPECT_EQ(forward_diffuse(scalar(0.7), 119, scalar(1.25), s).data[0], 1.25);
}

TEST(ForwardDiffuse, HandEvaluatedScalar) {
    const auto s = NoiseSchedule::from_betas({0.75});  // alpha_bar = 0.25
    EXPECT_NEAR(forward_diffuse(scalar(1.0), 0, scalar(2.0), s).data[0], 2.232051, 1e-6);
}

TEST(ForwardDiffuse, ShapeMismatchIsArgumentError) {
    const auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
    EXPECT_THROW(forward_diffuse(NumericArray({2}), 0, NumericArray({3}), s), ArgumentError);
}

TEST(ForwardDiffuse, LinearInImageAndNoise) {
    const auto s = NoiseSchedule::linear(50, 1e-4, 0.02);
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x1 = random_array(rng, 32), x2 = random_array(rng, 32);
        const auto e1 = random_array(rng, 32), e2 = random_array(rng, 32);
        const double a = rng.normal(), b = rng.normal();
        NumericArray xs({32}), es({32});
        for (std::size_t i = 0; i < 32; ++i) {
            xs[i] = a * x1[i] + b * x2[i];
            es[i] = a * e1[i] + b * e2[i];
        }
        const int t = rng.index(50);
        const auto lhs = forward_diffuse(xs, t, es, s);
        const auto r1 = forward_diffuse(x1, t, e1, s), r2 = forward_diffuse(x2, t, e2, s);
        for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(lhs[i], a * r1[i] + b * r2[i], 1e-12);
    }
}

TEST(ForwardDiffuse, VariancePreserving) {
    const auto s = NoiseSchedule::linear(200, 1e-4, 0.02);
    Rng rng(11);
    const auto x0 = random_array(rng, 20000), eps = random_array(rng, 20000);
    for (int t : {0, 50, 199}) {
        const auto xt = forward_diffuse(x0, t, eps, s);
        double m = 0, v = 0;
        for (double x : xt.data) m += x;
        m /= 20000.0;
        for (double x : xt.data) v += (x - m) * (x - m);
        v /= 20000.0;
        EXPECT_NEAR(v, 1.0, 0.05) << "t=" << t;
    }
}

TEST(DdimStep, OneStepExactInversion) {
    const auto s = NoiseSchedule::linear(200, 1e-4, 0.02);
    Rng rng(5);
    const auto x0 = random_array(rng, 48), eps = random_array(rng, 48);
    for (int t : {0, 10, 199}) {
        const auto xt = forward_diffuse(x0, t, eps, s);
        const auto back = ddim_step(xt, eps, t, kClean, s);
        EXPECT_LT(max_abs_diff(back, x0), 1e-5);
    }
}

TEST(DdimStep, RecoversLessNoisyLatent) {
    const auto s = NoiseSchedule::linear(200, 1e-4, 0.02);
    Rng rng(6);
    const auto x0 = random_array(rng, 48), eps = random_array(rng, 48);
    const auto xt = forward_diffuse(x0, 120, eps, s);
    EXPECT_LT(max_abs_diff(ddim_step(xt, eps, 120, 40, s), forward_diffuse(x0, 40, eps, s)), 1e-10);
}

TEST(DdimStep, ZeroNoiseEqualAlphaBarIsNoOp) {
    // Two timesteps with (numerically) equal alpha_bar: betas so small the product does not move.
    const auto s = NoiseSchedule::from_betas({0.3, 1e-300});
    ASSERT_EQ(s.alpha_bar(0), s.alpha_bar(1));
    Rng rng(7);
    const auto x = random_array(rng, 16);
    EXPECT_LT(max_abs_diff(ddim_step(x, NumericArray({16}), 1, 0, s), x), 1e-12);
}

TEST(DdimStep, RejectsNonDecreasingTime) {
    const auto s = NoiseSchedule::linear(20, 1e-4, 0.02);
    const NumericArray x({4});
    EXPECT_THROW(ddim_step(x, x, 5, 5, s), ArgumentError);
    EXPECT_THROW(ddim_step(x, x, 5, 7, s), ArgumentError);
}

TEST(DdimStep, FiftyStepTrajectoryIsReproducible) {
    const auto s = NoiseSchedule::linear(200, 1e-4, 0.02);
    auto run = [&] {
        Rng rng(42);
        NumericArray x = random_array(rng, 64);
        const auto ts = inference_timesteps(200, 50);
        std::vector<NumericArray> traj;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            NumericArray eps(x.shape);
            for (std::size_t k = 0; k < eps.size(); ++k) eps[k] = std::sin(x[k] + ts[i]);
            x = ddim_step(x, eps, ts[i], i + 1 < ts.size() ? ts[i + 1] : kClean, s);
            traj.push_back(x);
        }
        return traj;
    };
    const auto a = run(), b = run();
    ASSERT_EQ(a.size(), 50u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i], b[i]));
}

TEST(InferenceTimesteps, EvenlySpacedAndDescending) {
    const auto ts = inference_timesteps(200, 50);
    ASSERT_EQ(ts.size(), 50u);
    EXPECT_EQ(ts.front(), 199);
    EXPECT_EQ(ts.back(), 0);
    for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
    EXPECT_THROW(inference_timesteps(10, 11), ArgumentError);
}

TEST(AncestralStep, DeterministicPerSeedAndExactWithTrueNoiseToClean) {
    const auto s = NoiseSchedule::linear(200, 1e-4, 0.02);
    Rng rng(9);
    const auto x0 = random_array(rng, 16), eps = random_array(rng, 16);
    const auto xt = forward_diffuse(x0, 100, eps, s);
    Rng a(1), b(1);
    EXPECT_TRUE(bitwise_equal(ancestral_step(xt, eps, 100, 50, s, a), ancestral_step(xt, eps, 100, 50, s, b)));
    Rng c(2);
    EXPECT_LT(max_abs_diff(ancestral_step(xt, eps, 100, kClean, s, c), x0), 1e-9);
}
