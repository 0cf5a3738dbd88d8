#include "memguard/attenuation.hpp"

#include "memguard/errors.hpp"
#include "memguard/text.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace memguard {

std::string to_string(HeadMode m) { return m == HeadMode::all_heads ? "all" : "top_k_hot"; }

std::string to_string(StepMode m) {
    switch (m) {
        case StepMode::every_step: return "every_step";
        case StepMode::first_half: return "first_half";
        case StepMode::cosine_decay: return "cosine_decay";
        case StepMode::linear_decay: return "linear_decay";
    }
    return "?";
}

HeadMode parse_head_mode(const std::string& s) {
    if (s == "all") return HeadMode::all_heads;
    if (s == "top_k_hot") return HeadMode::top_k_hot;
    throw ConfigError("unknown head mode '" + s + "'");
}

StepMode parse_step_mode(const std::string& s) {
    for (StepMode m : {StepMode::every_step, StepMode::first_half, StepMode::cosine_decay, StepMode::linear_decay})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown step mode '" + s + "'");
}

void AttenuationPolicy::validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("attenuation alpha must be > 0");
    if (blocks.empty()) throw ConfigError("attenuation needs at least one block");
    if (head_mode == HeadMode::top_k_hot && !(head_fraction > 0.0 && head_fraction <= 1.0))
        throw ConfigError("head_fraction must be in (0, 1]");
    if (head_mode == HeadMode::all_heads && head_fraction != 1.0)
        throw ConfigError("head_fraction applies only to top_k_hot");
}

Mat attenuate_logits(const Mat& logits, const SpikeSet& S, double alpha, double factor) {
    Mat out = logits;
    if (factor == 0.0) return out;
    const double scale = factor == 1.0 ? alpha : std::pow(alpha, factor);
    for (int i : S.positions) {
        if (i < 0 || i >= logits.cols()) throw ArgumentError("attenuate_logits: spike position out of range");
        out.col(i) *= scale;
    }
    return out;
}

std::vector<HeadHotness> head_hotness(const std::vector<const TraceEntry*>& entries, int trigger) {
    std::vector<HeadHotness> out;
    for (const auto* e : entries) {
        if (trigger < 0 || trigger >= e->weights.cols()) throw ArgumentError("head_hotness: invalid trigger position");
        const Eigen::RowVectorXd p = e->weights.colwise().mean();
        double ent = 0.0;
        for (Eigen::Index i = 0; i < p.size(); ++i)
            if (p[i] > 0.0) ent -= p[i] * std::log(p[i]);
        HeadHotness h;
        h.site = e->site;
        h.attn_score = p[trigger];
        h.entropy = ent;
        h.hotness = h.attn_score / std::max(ent, kEntropyFloor);
        out.push_back(h);
    }
    return out;
}

SitePolicy select_heads(const std::vector<HeadHotness>& hotness, double k) {
    if (!(k > 0.0 && k <= 1.0)) throw ArgumentError("select_heads: k must be in (0, 1]");
    std::map<std::pair<Block, int>, std::vector<const HeadHotness*>> groups;
    for (const auto& h : hotness) groups[{h.site.block, h.site.layer}].push_back(&h);
    std::set<AttentionSite> chosen;
    for (auto& [key, heads] : groups) {
        std::sort(heads.begin(), heads.end(), [](const HeadHotness* a, const HeadHotness* b) {
            if (a->hotness != b->hotness) return a->hotness > b->hotness;
            return a->site.head < b->site.head;
        });
        const auto n = static_cast<std::size_t>(std::ceil(k * static_cast<double>(heads.size()) - 1e-9));
        for (std::size_t i = 0; i < std::min(n, heads.size()); ++i) chosen.insert(heads[i]->site);
    }
    return SitePolicy(std::move(chosen));
}

double step_gate(int t, int total, StepMode mode) {
    if (total < 1 || t < 0 || t >= total) throw ArgumentError("step_gate: need 0 <= t < total");
    const double u = static_cast<double>(t) / total;
    switch (mode) {
        case StepMode::every_step: return 1.0;
        case StepMode::first_half: return 2 * t < total ? 1.0 : 0.0;
        case StepMode::cosine_decay: return 0.5 * (1.0 + std::cos(M_PI * u));
        case StepMode::linear_decay: return 1.0 - u;
    }
    return 1.0;
}

AttenuationInterceptor::AttenuationInterceptor(SpikeSet spikes, double alpha, double factor, SitePolicy sites)
    : spikes_(std::move(spikes)), alpha_(alpha), factor_(factor), sites_(std::move(sites)) {
    if (!(alpha_ > 0.0)) throw ConfigError("attenuation alpha must be > 0");
}

Mat AttenuationInterceptor::transform(const Mat& logits, const AttentionSite&, int) const {
    return attenuate_logits(logits, spikes_, alpha_, factor_);
}

}  // namespace memguard
