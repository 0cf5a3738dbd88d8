#pragma once

#include "memguard/attention.hpp"
#include "memguard/spike.hpp"

#include <string>
#include <vector>

namespace memguard {

enum class HeadMode { all_heads, top_k_hot };
enum class StepMode { every_step, first_half, cosine_decay, linear_decay };

std::string to_string(HeadMode m);
std::string to_string(StepMode m);
HeadMode parse_head_mode(const std::string& s);
StepMode parse_step_mode(const std::string& s);

struct AttenuationPolicy {
    double alpha = 0.25;
    std::vector<Block> blocks{Block::down, Block::mid};
    HeadMode head_mode = HeadMode::all_heads;
    double head_fraction = 1.0;  // only meaningful for top_k_hot
    StepMode step_mode = StepMode::every_step;

    void validate() const;  // throws ConfigError
};

inline constexpr double kEntropyFloor = 1e-6;

// l * alpha^(factor * [i in S]) column-wise; non-spike columns are copied bitwise.
Mat attenuate_logits(const Mat& logits, const SpikeSet& S, double alpha, double factor = 1.0);

struct HeadHotness {
    AttentionSite site;
    double attn_score = 0.0;  // mean over queries of the weight on the trigger token
    double entropy = 0.0;     // of the query-averaged token distribution (nats)
    double hotness = 0.0;     // attn_score / max(entropy, kEntropyFloor)
};

std::vector<HeadHotness> head_hotness(const std::vector<const TraceEntry*>& entries, int trigger);

// ceil(k * heads) hottest heads of every (block, layer); ties go to the lower head index.
SitePolicy select_heads(const std::vector<HeadHotness>& hotness, double k);

// Fraction of the attenuation applied at sampler step t of `total`.
double step_gate(int t, int total, StepMode mode);

// Attenuates spike columns at the selected sites.
class AttenuationInterceptor : public LogitInterceptor {
public:
    AttenuationInterceptor(SpikeSet spikes, double alpha, double factor, SitePolicy sites);
    const SitePolicy& policy() const override { return sites_; }
    Mat transform(const Mat& logits, const AttentionSite& site, int step) const override;

private:
    SpikeSet spikes_;
    double alpha_;
    double factor_;
    SitePolicy sites_;
};

}  // namespace memguard
