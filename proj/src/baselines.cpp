#include "memguard/baselines.hpp"

#include "memguard/errors.hpp"
#include "memguard/rng.hpp"

#include <limits>

namespace memguard {

std::string to_string(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::none: return "none";
        case BaselineMethod::rta: return "rta";
        case BaselineMethod::wen_scale: return "wen_scale";
        case BaselineMethod::ren_mask: return "ren_mask";
        case BaselineMethod::semantic_guard: return "semantic_guard";
    }
    return "?";
}

BaselineMethod parse_baseline_method(const std::string& s) {
    for (auto m : {BaselineMethod::none, BaselineMethod::rta, BaselineMethod::wen_scale, BaselineMethod::ren_mask,
                   BaselineMethod::semantic_guard})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown baseline method '" + s + "'");
}

void BaselineConfig::validate() const {
    if (rta_k < 0) throw ConfigError("rta k must be >= 0");
    if (wen_gamma < 0.0 || wen_gamma > 1.0) throw ConfigError("wen_scale gamma must be in [0, 1]");
    if (ren_bot_boost < 0.0) throw ConfigError("ren_mask BOT boost must be >= 0");
}

PromptTokens rta(const PromptTokens& tokens, int k, std::uint64_t seed, const Vocabulary& vocab) {
    if (k < 0) throw ArgumentError("rta: k must be >= 0");
    tokens.validate(vocab);
    if (tokens.word_count() + k > kMaxTokens - 2)
        throw TokenizationError("rta: inserting " + std::to_string(k) + " tokens overflows L_max (truncation)");
    if (k == 0) return tokens;
    Rng rng(seed);
    std::vector<int> words(tokens.ids.begin() + 1, tokens.ids.begin() + tokens.eot_pos);
    const int first_content = 3;
    for (int i = 0; i < k; ++i) {
        const int id = first_content + rng.index(vocab.size() - first_content);
        const int pos = rng.index(static_cast<int>(words.size()) + 1);
        words.insert(words.begin() + pos, id);
    }
    return tokens_from_ids(words, vocab);
}

NumericArray wen_scale_compose(const NumericArray& eps_uncond, const NumericArray& eps_cond, double s, double gamma) {
    if (gamma < 0.0 || gamma > 1.0) throw ArgumentError("wen_scale_compose: gamma must be in [0, 1]");
    NumericArray::require_same_shape(eps_uncond, eps_cond, "wen_scale_compose");
    const double g = s * gamma;
    NumericArray out = eps_uncond;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + g * (eps_cond[i] - eps_uncond[i]);
    return out;
}

RenMaskInterceptor::RenMaskInterceptor(const PromptTokens& tokens, double bot_boost, const Geometry& geometry)
    : boost_(bot_boost), sites_(SitePolicy::blocks({Block::down, Block::mid, Block::up}, geometry.heads)) {
    if (bot_boost < 0.0) throw ArgumentError("ren_mask: BOT boost must be >= 0");
    masked_.push_back(tokens.eot_pos);
    for (int p : tokens.pad_positions()) masked_.push_back(p);
}

Mat RenMaskInterceptor::transform(const Mat& logits, const AttentionSite&, int) const {
    Mat out = logits;
    for (int c : masked_) out.col(c).setConstant(-std::numeric_limits<double>::infinity());
    if (boost_ != 0.0) out.col(kBot).array() += boost_;
    return out;
}

std::unique_ptr<LogitInterceptor> ren_mask_interceptor(const PromptTokens& tokens, double bot_boost,
                                                       const Geometry& geometry) {
    return std::make_unique<RenMaskInterceptor>(tokens, bot_boost, geometry);
}

std::string paraphrase(const std::string& prompt, const std::map<std::string, std::string>& table) {
    if (table.empty()) return prompt;
    std::string out;
    for (const auto& w : split_words(prompt)) {
        auto it = table.find(w);
        if (it == table.end()) throw ConfigError("paraphrase table has no entry for '" + w + "'");
        out += (out.empty() ? "" : " ") + it->second;
    }
    return out;
}

TextEmbedding semantic_positive(const DenoiserParams& params, const std::string& prompt,
                                const std::map<std::string, std::string>& table, const Vocabulary& vocab) {
    return encode(params, tokenize(paraphrase(prompt, table), vocab));
}

}  // namespace memguard
