#pragma once

#include "memguard/array.hpp"
#include "memguard/attention.hpp"
#include "memguard/backbone.hpp"
#include "memguard/text.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <string>

namespace memguard {

enum class BaselineMethod { none, rta, wen_scale, ren_mask, semantic_guard };

std::string to_string(BaselineMethod m);
BaselineMethod parse_baseline_method(const std::string& s);

struct BaselineConfig {
    BaselineMethod method = BaselineMethod::none;
    int rta_k = 1;                                  // random tokens inserted
    double wen_gamma = 0.5;                         // scale on the conditional difference
    double ren_bot_boost = 1.0;                     // added to the BOT logit column
    std::map<std::string, std::string> paraphrase;  // word -> replacement; empty = identity

    void validate() const;
};

// Inserts k random content tokens between BOT and EOT.
PromptTokens rta(const PromptTokens& tokens, int k, std::uint64_t seed, const Vocabulary& vocab);

// u + s * gamma * (c - u)
NumericArray wen_scale_compose(const NumericArray& eps_uncond, const NumericArray& eps_cond, double s, double gamma);

// Masks EOT and padding columns to -inf and adds b to the BOT column, at every site.
class RenMaskInterceptor : public LogitInterceptor {
public:
    RenMaskInterceptor(const PromptTokens& tokens, double bot_boost, const Geometry& geometry);
    const SitePolicy& policy() const override { return sites_; }
    Mat transform(const Mat& logits, const AttentionSite& site, int step) const override;

private:
    std::vector<int> masked_;
    double boost_;
    SitePolicy sites_;
};

std::unique_ptr<LogitInterceptor> ren_mask_interceptor(const PromptTokens& tokens, double bot_boost,
                                                       const Geometry& geometry);

// Word-by-word substitution; every word must be covered unless the table is empty.
std::string paraphrase(const std::string& prompt, const std::map<std::string, std::string>& table);

// Embedding of the paraphrased prompt, used as the positive-stream conditioning.
TextEmbedding semantic_positive(const DenoiserParams& params, const std::string& prompt,
                                const std::map<std::string, std::string>& table, const Vocabulary& vocab);

}  // namespace memguard
