#include "memguard/attention.hpp"
#include "memguard/errors.hpp"
#include "memguard/rng.hpp"
#include "memguard/text.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace memguard;

namespace {

Mat random(Rng& rng, int r, int c) {
    Mat m(r, c);
    for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

class ColumnMask : public LogitInterceptor {
public:
    ColumnMask(int col, SitePolicy p) : col_(col), policy_(std::move(p)) {}
    const SitePolicy& policy() const override { return policy_; }
    Mat transform(const Mat& l, const AttentionSite&, int) const override {
        Mat out = l;
        out.col(col_).setConstant(-std::numeric_limits<double>::infinity());
        return out;
    }

private:
    int col_;
    SitePolicy policy_;
};

class Identity : public LogitInterceptor {
public:
    explicit Identity(SitePolicy p) : policy_(std::move(p)) {}
    const SitePolicy& policy() const override { return policy_; }
    Mat transform(const Mat& l, const AttentionSite&, int) const override { return l; }

private:
    SitePolicy policy_;
};

class Shrinker : public LogitInterceptor {
public:
    explicit Shrinker(SitePolicy p) : policy_(std::move(p)) {}
    const SitePolicy& policy() const override { return policy_; }
    Mat transform(const Mat& l, const AttentionSite&, int) const override { return l.leftCols(l.cols() - 1); }

private:
    SitePolicy policy_;
};

const AttentionSite kDown{Block::down, 0, 0};

}  // namespace

TEST(AttentionLogits, ZeroFeaturesGiveZeroLogits) {
    Rng rng(1);
    const Mat l = attention_logits(Mat::Zero(5, 4), random(rng, 8, 6), random(rng, 4, 3), random(rng, 6, 3), 3);
    EXPECT_EQ(l.rows(), 5);
    EXPECT_EQ(l.cols(), 8);
    EXPECT_TRUE((l.array() == 0.0).all());
}

TEST(AttentionLogits, HandMatrixProduct) {
    // Q = [1, 0], K1 = [1, 0], K2 = [0, 1], d_k = 4 -> [1/2, 0].
    const Mat H = (Mat(1, 2) << 1, 0).finished();
    const Mat E = (Mat(2, 2) << 1, 0, 0, 1).finished();
    const Mat I = Mat::Identity(2, 2);
    const Mat l = attention_logits(H, E, I, I, 4);
    EXPECT_DOUBLE_EQ(l(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(l(0, 1), 0.0);
}

TEST(AttentionLogits, LinearInTheEmbedding) {
    Rng rng(2);
    const Mat H = random(rng, 4, 5), E = random(rng, 8, 6), WQ = random(rng, 5, 3), WK = random(rng, 6, 3);
    const Mat a = attention_logits(H, E, WQ, WK, 3);
    const Mat b = attention_logits(H, 2.5 * E, WQ, WK, 3);
    EXPECT_LT((b - 2.5 * a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AttentionLogits, DimensionMismatch) {
    EXPECT_THROW(attention_logits(Mat::Zero(2, 3), Mat::Zero(8, 4), Mat::Zero(2, 2), Mat::Zero(4, 2), 2), ArgumentError);
    EXPECT_THROW(attention_logits(Mat::Zero(2, 3), Mat::Zero(8, 4), Mat::Zero(3, 2), Mat::Zero(4, 5), 2), ArgumentError);
}

TEST(Attend, UniformLogitsGiveUniformWeights) {
    Rng rng(3);
    const auto r = attend(Mat::Zero(3, kMaxTokens), random(rng, kMaxTokens, 4), nullptr, kDown, 0);
    EXPECT_TRUE(((r.weights.array() - 1.0 / kMaxTokens).abs() < 1e-15).all());
}

TEST(Attend, SoftmaxByHand) {
    const auto r = attend((Mat(1, 2) << 2, 0).finished(), Mat::Identity(2, 2), nullptr, kDown, 0);
    const double e2 = std::exp(2.0);
    EXPECT_NEAR(r.weights(0, 0), e2 / (e2 + 1), 1e-15);
    EXPECT_NEAR(r.weights(0, 0), 0.8808, 1e-4);
    EXPECT_NEAR(r.weights(0, 1), 0.1192, 1e-4);
    EXPECT_NEAR(r.output(0, 0), r.weights(0, 0), 1e-15);
}

TEST(Attend, MaskedColumnGetsZeroAndRestRenormalizes) {
    Rng rng(4);
    const Mat l = random(rng, 6, kMaxTokens);
    const Mat V = random(rng, kMaxTokens, 3);
    ColumnMask mask(3, SitePolicy({kDown}));
    const auto plain = attend(l, V, nullptr, kDown, 0);
    const auto masked = attend(l, V, &mask, kDown, 0);
    for (int q = 0; q < 6; ++q) {
        EXPECT_EQ(masked.weights(q, 3), 0.0);
        const double rest = 1.0 - plain.weights(q, 3);
        for (int i = 0; i < kMaxTokens; ++i) {
            if (i != 3) {
                EXPECT_NEAR(masked.weights(q, i), plain.weights(q, i) / rest, 1e-12);
            }
        }
        EXPECT_NEAR(masked.weights.row(q).sum(), 1.0, 1e-12);
    }
}

TEST(Attend, InterceptorOnlyAppliesAtSelectedSites) {
    Rng rng(5);
    const Mat l = random(rng, 4, kMaxTokens);
    const Mat V = random(rng, kMaxTokens, 2);
    ColumnMask mask(0, SitePolicy({AttentionSite{Block::mid, 0, 1}}));
    const auto a = attend(l, V, &mask, kDown, 0);
    const auto b = attend(l, V, nullptr, kDown, 0);
    EXPECT_TRUE(a.weights == b.weights);
    EXPECT_TRUE(a.output == b.output);
}

TEST(Attend, IdentityInterceptorIsBitwiseNoOp) {
    Rng rng(6);
    const Mat l = random(rng, 16, kMaxTokens);
    const Mat V = random(rng, kMaxTokens, 5);
    Identity id(SitePolicy({kDown}));
    const auto a = attend(l, V, &id, kDown, 0);
    const auto b = attend(l, V, nullptr, kDown, 0);
    EXPECT_TRUE(a.weights == b.weights);
    EXPECT_TRUE(a.output == b.output);
}

TEST(Attend, ShapeChangingInterceptorIsAContractViolation) {
    Shrinker s(SitePolicy({kDown}));
    EXPECT_THROW(attend(Mat::Zero(2, kMaxTokens), Mat::Zero(kMaxTokens, 2), &s, kDown, 0), ContractViolation);
    EXPECT_THROW(attend(Mat::Zero(2, kMaxTokens), Mat::Zero(3, 2), nullptr, kDown, 0), ArgumentError);
}

TEST(Attend, RowsSumToOneUnderExtremeLogits) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const Mat l = 200.0 * random(rng, 8, kMaxTokens);
        const auto r = attend(l, Mat::Identity(kMaxTokens, kMaxTokens), nullptr, kDown, 0);
        for (int q = 0; q < 8; ++q) {
            EXPECT_NEAR(r.weights.row(q).sum(), 1.0, 1e-6);
            EXPECT_TRUE((r.weights.row(q).array() >= 0.0).all());
        }
    }
}

TEST(Attend, BatchingCommutesWithInterception) {
    // Per-row interception then stacking equals interception of the stacked rows.
    Rng rng(8);
    const Mat l1 = random(rng, 3, kMaxTokens), l2 = random(rng, 3, kMaxTokens);
    const Mat V = random(rng, kMaxTokens, 2);
    ColumnMask mask(2, SitePolicy({kDown}));
    Mat stacked(6, kMaxTokens);
    stacked << l1, l2;
    const auto s = attend(stacked, V, &mask, kDown, 0);
    const auto a = attend(l1, V, &mask, kDown, 0), b = attend(l2, V, &mask, kDown, 0);
    EXPECT_TRUE(s.weights.topRows(3) == a.weights);
    EXPECT_TRUE(s.weights.bottomRows(3) == b.weights);
}

TEST(SitePolicy, BlocksExpandToEveryHead) {
    const auto p = SitePolicy::blocks({Block::down, Block::mid}, 2);
    EXPECT_EQ(p.sites().size(), 4u);
    EXPECT_TRUE(p.contains({Block::mid, 0, 1}));
    EXPECT_FALSE(p.contains({Block::up, 0, 0}));
    EXPECT_EQ(parse_block("mid"), Block::mid);
    EXPECT_THROW(parse_block("left"), ConfigError);
}

TEST(AttentionTrace, StepLookup) {
    TraceRecorder rec;
    rec.step = 2;
    rec.record(kDown, 1, 1, Mat::Zero(1, kMaxTokens), Mat::Constant(1, kMaxTokens, 1.0 / kMaxTokens));
    rec.step = 5;
    rec.record(kDown, 1, 1, Mat::Zero(1, kMaxTokens), Mat::Constant(1, kMaxTokens, 1.0 / kMaxTokens));
    EXPECT_EQ(rec.trace.steps(), (std::vector<int>{2, 5}));
    EXPECT_EQ(rec.trace.at_step(5).size(), 1u);
    EXPECT_TRUE(rec.trace.at_step(3).empty());
}
