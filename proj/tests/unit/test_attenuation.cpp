#include "memguard/attenuation.hpp"
#include "memguard/errors.hpp"
#include "memguard/rng.hpp"
#include "memguard/text.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <cstring>

using namespace memguard;

namespace {

SpikeSet spikes(std::vector<int> pos) {
    SpikeSet s;
    s.positions = std::move(pos);
    s.zscores.assign(kMaxTokens, 0.0);
    return s;
}

Mat random_logits(Rng& rng, int rows, double scale = 2.0) {
    Mat l(rows, kMaxTokens);
    for (int i = 0; i < l.size(); ++i) l.data()[i] = scale * rng.normal();
    return l;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

TraceEntry entry(int head, Mat w) {
    TraceEntry e;
    e.site = {Block::down, 0, head};
    e.grid_h = static_cast<int>(w.rows());
    e.grid_w = 1;
    e.logits = Mat::Zero(w.rows(), w.cols());
    e.weights = std::move(w);
    return e;
}

}  // namespace

TEST(AttenuateLogits, AlphaOneIsIdentity) {
    Rng rng(1);
    const Mat l = random_logits(rng, 5);
    EXPECT_TRUE(bitwise_equal(attenuate_logits(l, spikes({1, 4}), 1.0), l));
}

TEST(AttenuateLogits, EmptySetIsIdentity) {
    Rng rng(2);
    const Mat l = random_logits(rng, 5);
    EXPECT_TRUE(bitwise_equal(attenuate_logits(l, spikes({}), 0.1), l));
}

TEST(AttenuateLogits, HandValue) {
    Mat l = Mat::Zero(1, kMaxTokens);
    l(0, 3) = 4.0;
    EXPECT_EQ(attenuate_logits(l, spikes({3}), 0.25)(0, 3), 1.0);
}

TEST(AttenuateLogits, OutOfRangePosition) {
    EXPECT_THROW(attenuate_logits(Mat::Zero(2, kMaxTokens), spikes({kMaxTokens}), 0.5), ArgumentError);
}

TEST(AttenuateLogits, FactorInterpolatesExponent) {
    Rng rng(3);
    const Mat l = random_logits(rng, 3);
    EXPECT_TRUE(bitwise_equal(attenuate_logits(l, spikes({2}), 0.25, 0.0), l));
    const Mat half = attenuate_logits(l, spikes({2}), 0.25, 0.5);
    for (int q = 0; q < 3; ++q) EXPECT_NEAR(half(q, 2), l(q, 2) * 0.5, 1e-15);
}

TEST(AttenuateLogits, LocalityProperty) {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const Mat l = random_logits(rng, 4);
        std::vector<int> pos;
        for (int i = 0; i < kMaxTokens; ++i)
            if (rng.bernoulli(0.3)) pos.push_back(i);
        const Mat out = attenuate_logits(l, spikes(pos), rng.uniform(0.01, 2.0));
        const Mat w0 = softmax_rows(l), w1 = softmax_rows(out);
        std::vector<int> rest;
        for (int i = 0; i < kMaxTokens; ++i)
            if (std::find(pos.begin(), pos.end(), i) == pos.end()) rest.push_back(i);
        for (int i : rest) {
            const Mat a = l.col(i), b = out.col(i);
            EXPECT_TRUE(bitwise_equal(a, b));
        }
        for (int q = 0; q < 4; ++q)
            for (std::size_t a = 1; a < rest.size(); ++a) {
                const double r0 = w0(q, rest[a]) / w0(q, rest[0]), r1 = w1(q, rest[a]) / w1(q, rest[0]);
                EXPECT_NEAR(r1, r0, 1e-6 * std::max(1.0, std::abs(r0)));
            }
    }
}

TEST(AttenuateLogits, PositiveSpikeWeightDecreases) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        Mat l = random_logits(rng, 1, 1.0);
        const int i = rng.index(kMaxTokens);
        l(0, i) = rng.uniform(0.1, 8.0);
        const Mat out = attenuate_logits(l, spikes({i}), rng.uniform(0.01, 0.99));
        EXPECT_LT(softmax_rows(out)(0, i), softmax_rows(l)(0, i));
    }
}

TEST(HeadHotness, UniformClosedForm) {
    const auto e = entry(0, Mat::Constant(4, kMaxTokens, 1.0 / kMaxTokens));
    const auto h = head_hotness({&e}, 2);
    ASSERT_EQ(h.size(), 1u);
    const double L = kMaxTokens;
    EXPECT_NEAR(h[0].attn_score, 1.0 / L, 1e-15);
    EXPECT_NEAR(h[0].entropy, std::log(L), 1e-12);
    EXPECT_NEAR(h[0].hotness, (1.0 / L) / std::log(L), 1e-12);
}

TEST(HeadHotness, OneHotIsFloored) {
    Mat w = Mat::Zero(4, kMaxTokens);
    w.col(3).setOnes();
    const auto e = entry(0, w);
    const auto h = head_hotness({&e}, 3);
    EXPECT_DOUBLE_EQ(h[0].entropy, 0.0);
    EXPECT_DOUBLE_EQ(h[0].hotness, 1.0 / kEntropyFloor);
    EXPECT_TRUE(std::isfinite(h[0].hotness));
}

TEST(HeadHotness, PeakedHeadRanksFirst) {
    Mat peaked = Mat::Constant(4, kMaxTokens, 0.02);
    peaked.col(3).setConstant(1.0 - 0.02 * (kMaxTokens - 1));
    const auto u = entry(0, Mat::Constant(4, kMaxTokens, 1.0 / kMaxTokens)), p = entry(1, peaked);
    const auto h = head_hotness({&u, &p}, 3);
    EXPECT_GT(h[1].hotness, h[0].hotness);
    const auto sel = select_heads(h, 0.5);
    EXPECT_EQ(sel.sites(), (std::set<AttentionSite>{{Block::down, 0, 1}}));
}

TEST(HeadHotness, InvalidTrigger) {
    const auto e = entry(0, Mat::Constant(1, kMaxTokens, 1.0 / kMaxTokens));
    EXPECT_THROW(head_hotness({&e}, kMaxTokens), ArgumentError);
}

TEST(SelectHeads, FullFractionKeepsAll) {
    std::vector<HeadHotness> h;
    for (Block b : kAllBlocks)
        for (int head = 0; head < 2; ++head) h.push_back({{b, 0, head}, 0.1, 1.0, 0.1 * (head + 1)});
    EXPECT_EQ(select_heads(h, 1.0).sites(), SitePolicy::blocks({Block::down, Block::mid, Block::up}, 2).sites());
}

TEST(SelectHeads, HotterHeadPerBlock) {
    std::vector<HeadHotness> h{{{Block::down, 0, 0}, 0, 0, 0.2}, {{Block::down, 0, 1}, 0, 0, 0.9},
                               {{Block::mid, 0, 0}, 0, 0, 0.7}, {{Block::mid, 0, 1}, 0, 0, 0.1}};
    EXPECT_EQ(select_heads(h, 0.5).sites(),
              (std::set<AttentionSite>{{Block::down, 0, 1}, {Block::mid, 0, 0}}));
}

TEST(SelectHeads, TieGoesToLowerHead) {
    std::vector<HeadHotness> h{{{Block::up, 0, 1}, 0, 0, 0.5}, {{Block::up, 0, 0}, 0, 0, 0.5}};
    EXPECT_EQ(select_heads(h, 0.5).sites(), (std::set<AttentionSite>{{Block::up, 0, 0}}));
}

TEST(SelectHeads, InvalidFraction) {
    EXPECT_THROW(select_heads({}, 0.0), ArgumentError);
    EXPECT_THROW(select_heads({}, 1.5), ArgumentError);
}

TEST(StepGate, Modes) {
    for (int t = 0; t < 50; ++t) EXPECT_EQ(step_gate(t, 50, StepMode::every_step), 1.0);
    EXPECT_EQ(step_gate(30, 50, StepMode::first_half), 0.0);
    EXPECT_EQ(step_gate(24, 50, StepMode::first_half), 1.0);
    EXPECT_EQ(step_gate(25, 50, StepMode::first_half), 0.0);
    EXPECT_DOUBLE_EQ(step_gate(25, 50, StepMode::linear_decay), 0.5);
    EXPECT_DOUBLE_EQ(step_gate(0, 50, StepMode::cosine_decay), 1.0);
    EXPECT_NEAR(step_gate(25, 50, StepMode::cosine_decay), 0.5, 1e-15);
    EXPECT_THROW(step_gate(50, 50, StepMode::every_step), ArgumentError);
}

TEST(StepGate, DecaysAreMonotoneInUnitRange) {
    for (StepMode m : {StepMode::cosine_decay, StepMode::linear_decay}) {
        double prev = 2.0;
        for (int t = 0; t < 50; ++t) {
            const double g = step_gate(t, 50, m);
            EXPECT_GE(g, 0.0);
            EXPECT_LE(g, 1.0);
            EXPECT_LT(g, prev);
            prev = g;
        }
    }
}

TEST(AttenuationPolicy, Validation) {
    AttenuationPolicy p;
    EXPECT_NO_THROW(p.validate());
    p.alpha = 0.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = {};
    p.blocks.clear();
    EXPECT_THROW(p.validate(), ConfigError);
    p = {};
    p.head_fraction = 0.5;
    EXPECT_THROW(p.validate(), ConfigError);
    p.head_mode = HeadMode::top_k_hot;
    EXPECT_NO_THROW(p.validate());
    p.head_fraction = 0.0;
    EXPECT_THROW(p.validate(), ConfigError);
}

TEST(AttenuationPolicy, NamesRoundTrip) {
    for (StepMode m : {StepMode::every_step, StepMode::first_half, StepMode::cosine_decay, StepMode::linear_decay})
        EXPECT_EQ(parse_step_mode(to_string(m)), m);
    for (HeadMode m : {HeadMode::all_heads, HeadMode::top_k_hot}) EXPECT_EQ(parse_head_mode(to_string(m)), m);
    EXPECT_THROW(parse_step_mode("sometimes"), ConfigError);
}

TEST(AttenuationInterceptor, TransformsSpikeColumns) {
    Rng rng(6);
    const Mat l = random_logits(rng, 3);
    AttenuationInterceptor icpt(spikes({0, 5}), 0.5, 1.0, SitePolicy::blocks({Block::down}, 2));
    EXPECT_TRUE(bitwise_equal(icpt.transform(l, {Block::down, 0, 0}, 0), attenuate_logits(l, spikes({0, 5}), 0.5)));
    EXPECT_TRUE(icpt.policy().contains({Block::down, 0, 1}));
    EXPECT_FALSE(icpt.policy().contains({Block::up, 0, 0}));
    EXPECT_THROW(AttenuationInterceptor(spikes({}), 0.0, 1.0, {}), ConfigError);
}
