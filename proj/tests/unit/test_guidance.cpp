#include "memguard/dataset.hpp"
#include "memguard/errors.hpp"
#include "memguard/guidance.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>

using namespace memguard;

namespace {

const Vocabulary& vocab() {
    static const Vocabulary v = ToyLexicon::standard().vocabulary();
    return v;
}

Geometry geometry() {
    Geometry g;
    g.vocab_size = vocab().size();
    return g;
}

const NoiseSchedule& schedule() {
    static const NoiseSchedule s = NoiseSchedule::linear(200, 5e-4, 0.1);
    return s;
}

const DenoiserParams& params() {
    static const DenoiserParams p = init_params(geometry(), 11);
    return p;
}

NumericArray random_array(Rng& rng, std::vector<std::size_t> shape = {3, 16, 16}) {
    NumericArray a(shape);
    for (auto& v : a.data) v = rng.normal();
    return a;
}

NumericArray scalar(double v) { return NumericArray({1}, {v}); }

struct Fixture {
    PromptTokens tokens = tokenize("red square alpha", vocab());
    TextEmbedding e_p = encode(params(), tokens);
    TextEmbedding e_null = encode(params(), tokenize("", vocab()));
    Rng noise{5};
    StepContext ctx() { return {&params(), &schedule(), &e_null, &e_p, nullptr, &tokens, nullptr, &noise}; }
};

GuidanceConfig attenuating(int steps) {
    GuidanceConfig c;
    c.s = 7.5;
    c.r = 1.0;
    c.tau = -std::numeric_limits<double>::infinity();  // every token spikes
    c.attenuation.alpha = 0.25;
    c.steps = steps;
    c.seed = 3;
    return c;
}

class CountingInterceptor : public LogitInterceptor {
public:
    explicit CountingInterceptor(SitePolicy p) : policy_(std::move(p)) {}
    const SitePolicy& policy() const override { return policy_; }
    Mat transform(const Mat& logits, const AttentionSite& site, int) const override {
        std::lock_guard<std::mutex> lock(mu_);
        seen.push_back(site);
        Mat out = logits;
        out.col(1) *= 0.25;
        return out;
    }
    mutable std::vector<AttentionSite> seen;

private:
    SitePolicy policy_;
    mutable std::mutex mu_;
};

}  // namespace

TEST(CfgCompose, Examples) {
    Rng rng(1);
    const auto u = random_array(rng), c = random_array(rng);
    EXPECT_TRUE(bitwise_equal(cfg_compose(u, c, 1.0), c));
    EXPECT_TRUE(bitwise_equal(cfg_compose(u, u, 7.5), u));
    EXPECT_EQ(cfg_compose(scalar(0), scalar(1), 7.5)[0], 7.5);
    EXPECT_THROW(cfg_compose(u, scalar(1), 2.0), ArgumentError);
}

TEST(GuardCompose, Examples) {
    Rng rng(2);
    const auto u = random_array(rng), p = random_array(rng), n = random_array(rng);
    EXPECT_TRUE(bitwise_equal(guard_compose(u, p, n, 7.5, 0.0), cfg_compose(u, p, 7.5)));
    EXPECT_TRUE(bitwise_equal(guard_compose(u, p, p, 2.0, 2.0), u));
    EXPECT_EQ(guard_compose(scalar(0), scalar(1), scalar(2), 7.5, 1.0)[0], 5.5);
    EXPECT_THROW(guard_compose(u, p, scalar(0), 1.0, 1.0), ArgumentError);
}

TEST(GuardCompose, AlgebraicIdentityAndLinearity) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto u = random_array(rng), p = random_array(rng), n = random_array(rng), p2 = random_array(rng);
        const double s = rng.uniform(-2, 10), r = rng.uniform(0, 3), a = rng.uniform(-2, 2);
        const auto g = guard_compose(u, p, n, s, r), c = cfg_compose(u, p, s);
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], c[i] - r * (n[i] - u[i]), 1e-12);
        // f(u, p + a p2, n) - f(u, p, n) = a s p2
        NumericArray mix = p;
        for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += a * p2[i];
        const auto gm = guard_compose(u, mix, n, s, r);
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(gm[i] - g[i], a * s * p2[i], 1e-10);
    }
}

TEST(ThreeStream, BatchedMatchesSeparateCalls) {
    Fixture f;
    Rng rng(4);
    const auto x = random_array(rng);
    SpikeSet S;
    S.positions = {1, 2};
    S.zscores.assign(kMaxTokens, 0.0);
    AttenuationInterceptor icpt(S, 0.25, 1.0, SitePolicy::blocks({Block::down, Block::mid}, 2));
    const auto three = predict_three_stream(params(), x, 120, f.e_null, f.e_p, &icpt, 0);
    const auto u = predict_noise(params(), x, 120, f.e_null);
    const auto n = predict_noise(params(), x, 120, f.e_p);
    const auto p = predict_noise(params(), x, 120, f.e_p, &icpt);
    EXPECT_LE(max_abs_diff(three.eps_uncond, u.eps), 1e-5);
    EXPECT_LE(max_abs_diff(three.eps_neg, n.eps), 1e-5);
    EXPECT_LE(max_abs_diff(three.eps_pos, p.eps), 1e-5);
    EXPECT_GT(max_abs_diff(three.eps_pos, three.eps_neg), 1e-6);
    EXPECT_EQ(three.neg_trace.entries.size(), backbone_sites(geometry()).size());
}

TEST(ThreeStream, TraceRecordingDoesNotChangeStreams) {
    Fixture f;
    Rng rng(5);
    const auto x = random_array(rng);
    SpikeSet S;
    S.positions = {3};
    S.zscores.assign(kMaxTokens, 0.0);
    AttenuationInterceptor icpt(S, 0.5, 1.0, SitePolicy::blocks({Block::down, Block::mid}, 2));
    const auto on = predict_three_stream(params(), x, 50, f.e_null, f.e_p, &icpt, 0, true);
    const auto off = predict_three_stream(params(), x, 50, f.e_null, f.e_p, &icpt, 0, false);
    EXPECT_TRUE(bitwise_equal(on.eps_uncond, off.eps_uncond));
    EXPECT_TRUE(bitwise_equal(on.eps_neg, off.eps_neg));
    EXPECT_TRUE(bitwise_equal(on.eps_pos, off.eps_pos));
    EXPECT_TRUE(off.neg_trace.entries.empty());
}

TEST(ThreeStream, UniformAttentionMakesPositiveEqualNegative) {
    DenoiserParams p = params().clone();
    for (Block b : kAllBlocks) {
        p.get(to_string(b) + ".attn.k.weight")->value.setZero();
    }
    Fixture f;
    f.e_p = encode(p, f.tokens);
    f.e_null = encode(p, tokenize("", vocab()));
    Rng rng(6);
    const auto x = random_array(rng);
    SpikeSet S;
    S.positions = {1, 2, 3};
    S.zscores.assign(kMaxTokens, 0.0);
    AttenuationInterceptor icpt(S, 0.25, 1.0, SitePolicy::blocks({Block::down, Block::mid}, 2));
    const auto three = predict_three_stream(p, x, 100, f.e_null, f.e_p, &icpt, 0);
    EXPECT_TRUE(bitwise_equal(three.eps_pos, three.eps_neg));

    StepContext ctx{&p, &schedule(), &f.e_null, &f.e_p, nullptr, &f.tokens, nullptr, &f.noise};
    GuidanceConfig c = attenuating(4);
    c.tau = 0.0;
    for (int step = 0; step < 4; ++step) {
        const auto r = guard_denoise_step(ctx, x, step, 100, 50, c);
        EXPECT_TRUE(r.spikes.empty());
        EXPECT_FALSE(r.diag.positive_pass);
        EXPECT_EQ(r.diag.norm_pos, r.diag.norm_neg);
    }
}

TEST(GuardStep, SpikesTriggerAnAttenuatedPass) {
    Fixture f;
    Rng rng(7);
    const auto x = random_array(rng);
    auto ctx = f.ctx();
    const auto r = guard_denoise_step(ctx, x, 0, 199, 195, attenuating(50));
    EXPECT_EQ(r.spikes.positions.size(), static_cast<std::size_t>(kMaxTokens));
    EXPECT_TRUE(r.diag.positive_pass);
    EXPECT_EQ(r.diag.backbone_rows, 3);
    EXPECT_NE(r.diag.norm_pos, r.diag.norm_neg);
    for (const auto& s : r.diag.attenuated_sites) EXPECT_NE(s.block, Block::up);
    EXPECT_EQ(r.diag.attenuated_sites.size(), 4u);
}

TEST(GuardStep, DiagnosticsMatchIndependentStreams) {
    Fixture f;
    Rng rng(8);
    const auto x = random_array(rng);
    auto ctx = f.ctx();
    const auto r = guard_denoise_step(ctx, x, 0, 150, 140, attenuating(50));
    const auto u = predict_noise(params(), x, 150, f.e_null).eps;
    const auto n = predict_noise(params(), x, 150, f.e_p).eps;
    double w = 0;
    for (std::size_t i = 0; i < u.size(); ++i) w += (n[i] - u[i]) * (n[i] - u[i]);
    EXPECT_NEAR(r.diag.wen, std::sqrt(w), 1e-9);
    EXPECT_NEAR(r.diag.norm_uncond, u.norm(), 1e-9);
}

TEST(GuardStep, UnitScaleReturnsConditionalPrediction) {
    Fixture f;
    Rng rng(9);
    const auto x = random_array(rng);
    auto ctx = f.ctx();
    GuidanceConfig c = GuidanceConfig::cfg(1.0, 50, 0);
    c.clip_x0.reset();
    const auto r = guard_denoise_step(ctx, x, 0, 150, 140, c);
    const auto n = predict_noise(params(), x, 150, f.e_p).eps;
    const auto expect = ddim_step(x, n, 150, 140, schedule(), std::nullopt);
    EXPECT_LE(max_abs_diff(r.x_prev, expect), 1e-12);
    EXPECT_EQ(r.diag.backbone_rows, 2);
}

TEST(GuardStep, ZeroGateIsBitwiseIdentity) {
    Fixture f;
    Rng rng(10);
    const auto x = random_array(rng);
    GuidanceConfig gated = attenuating(50);
    gated.attenuation.step_mode = StepMode::first_half;
    GuidanceConfig plain = gated;
    plain.attenuation.alpha = 1.0;
    auto c1 = f.ctx();
    const auto a = guard_denoise_step(c1, x, 30, 60, 56, gated);
    auto c2 = f.ctx();
    const auto b = guard_denoise_step(c2, x, 30, 60, 56, plain);
    EXPECT_FALSE(a.diag.positive_pass);
    EXPECT_TRUE(bitwise_equal(a.x_prev, b.x_prev));
    auto c3 = f.ctx();
    EXPECT_TRUE(guard_denoise_step(c3, x, 10, 160, 156, gated).diag.positive_pass);
}

TEST(GuardStep, GuidanceScheduleScalesBothScales) {
    Fixture f;
    Rng rng(11);
    const auto x = random_array(rng);
    GuidanceConfig c = attenuating(50);
    c.r = 2.0;
    c.guidance_schedule = StepMode::linear_decay;
    auto ctx = f.ctx();
    const auto r = guard_denoise_step(ctx, x, 25, 100, 96, c);
    EXPECT_DOUBLE_EQ(r.diag.s_eff, 3.75);
    EXPECT_DOUBLE_EQ(r.diag.r_eff, 1.0);
}

TEST(GuardStep, IncompleteContext) {
    StepContext ctx;
    Rng rng(12);
    EXPECT_THROW(guard_denoise_step(ctx, random_array(rng), 0, 10, 5, GuidanceConfig{}), ArgumentError);
}

TEST(BlockPolicy, UpBlockLogitsAreNeverTransformed) {
    Fixture f;
    Rng rng(13);
    const auto x = random_array(rng);
    CountingInterceptor icpt(SitePolicy::blocks({Block::down, Block::mid}, 2));
    predict_noise(params(), x, 120, f.e_p, &icpt);
    EXPECT_EQ(icpt.seen.size(), 4u);
    for (const auto& s : icpt.seen) EXPECT_NE(s.block, Block::up);
}

TEST(BlockPolicy, FirstStepTraceMatchesCleanRun) {
    GuidanceConfig guard = attenuating(6);
    guard.tau = 1.0;
    guard.record_trace = true;
    GuidanceConfig clean = GuidanceConfig::cfg(7.5, 6, guard.seed);
    clean.record_trace = true;
    const auto a = generate(params(), schedule(), vocab(), "red square alpha", guard);
    const auto b = generate(params(), schedule(), vocab(), "red square alpha", clean);
    const auto ea = a.trace.at_step(0), eb = b.trace.at_step(0);
    ASSERT_EQ(ea.size(), eb.size());
    int up = 0;
    for (std::size_t i = 0; i < ea.size(); ++i) {
        EXPECT_EQ(ea[i]->site, eb[i]->site);
        EXPECT_EQ(ea[i]->weights, eb[i]->weights);
        EXPECT_EQ(ea[i]->logits, eb[i]->logits);
        up += ea[i]->site.block == Block::up;
    }
    EXPECT_EQ(up, 2);
}

TEST(Generate, PlainConfigMatchesReferenceSampler) {
    const auto cfg = GuidanceConfig::cfg(7.5, 8, 21);
    const auto g = generate(params(), schedule(), vocab(), "blue bar bravo", cfg);
    const auto ref = cfg_sample(params(), schedule(), vocab(), "blue bar bravo", 7.5, 8, 21);
    EXPECT_TRUE(bitwise_equal(g.image.pixels, ref.pixels));
    for (const auto& s : g.report.steps) {
        EXPECT_TRUE(s.spikes.empty());
        EXPECT_FALSE(s.diag.positive_pass);
    }
}

TEST(Generate, IdentityReductionBitwiseAlongTrajectory) {
    GuidanceConfig c;
    c.r = 0.0;
    c.attenuation.alpha = 1.0;
    c.tau = std::numeric_limits<double>::infinity();
    c.steps = 8;
    c.seed = 4;
    c.record_trajectory = true;
    std::vector<NumericArray> ref;
    cfg_sample(params(), schedule(), vocab(), "green column", 7.5, 8, 4, 1.0, &ref);
    const auto g = generate(params(), schedule(), vocab(), "green column", c);
    ASSERT_EQ(g.trajectory.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_TRUE(bitwise_equal(g.trajectory[i], ref[i])) << i;
}

TEST(Generate, DeterministicAndTraceIndependent) {
    GuidanceConfig c = attenuating(6);
    c.tau = 1.0;
    const auto a = generate(params(), schedule(), vocab(), "red square alpha", c);
    c.record_trace = true;
    const auto b = generate(params(), schedule(), vocab(), "red square alpha", c);
    EXPECT_TRUE(bitwise_equal(a.image.pixels, b.image.pixels));
    EXPECT_FALSE(b.trace.entries.empty());
    EXPECT_EQ(a.report.steps.size(), 6u);
}

TEST(Generate, AncestralSamplerIsSeeded) {
    GuidanceConfig c = attenuating(6);
    c.sampler = SamplerKind::ancestral;
    const auto a = generate(params(), schedule(), vocab(), "red square", c);
    const auto b = generate(params(), schedule(), vocab(), "red square", c);
    EXPECT_TRUE(bitwise_equal(a.image.pixels, b.image.pixels));
    c.seed = 99;
    const auto d = generate(params(), schedule(), vocab(), "red square", c);
    EXPECT_FALSE(bitwise_equal(a.image.pixels, d.image.pixels));
}

TEST(GuidanceConfig, ValidationAndRoundTrip) {
    GuidanceConfig c = attenuating(20);
    c.tau = std::numeric_limits<double>::infinity();
    c.attenuation.blocks = {Block::mid};
    c.attenuation.step_mode = StepMode::cosine_decay;
    c.sampler = SamplerKind::ancestral;
    c.clip_x0.reset();
    const auto back = guidance_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_TRUE(std::isinf(back.tau));

    GuidanceConfig bad;
    bad.r = -1;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = {};
    bad.steps = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = {};
    bad.baseline.method = BaselineMethod::wen_scale;
    EXPECT_THROW(bad.validate(), ConfigError);  // attenuation still on
    EXPECT_THROW(guidance_from_json(nlohmann::json{{"sampler", "euler"}}), ConfigError);
    EXPECT_THROW(guidance_from_json(nlohmann::json{{"s", "big"}}), ConfigError);
}

TEST(RunReport, RoundTrip) {
    GuidanceConfig c = attenuating(4);
    c.tau = 1.0;
    const auto g = generate(params(), schedule(), vocab(), "red square alpha", c);
    const auto back = RunReport::from_json(g.report.to_json());
    ASSERT_EQ(back.steps.size(), g.report.steps.size());
    for (std::size_t i = 0; i < back.steps.size(); ++i) {
        EXPECT_EQ(back.steps[i].spikes.positions, g.report.steps[i].spikes.positions);
        EXPECT_DOUBLE_EQ(back.steps[i].diag.wen, g.report.steps[i].diag.wen);
    }
    EXPECT_EQ(back.to_json(), g.report.to_json());
    EXPECT_EQ(g.report.to_json().at("schema_version"), kReportSchemaVersion);
}
