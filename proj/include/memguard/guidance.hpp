#pragma once

#include "memguard/attenuation.hpp"
#include "memguard/backbone.hpp"
#include "memguard/baselines.hpp"
#include "memguard/metrics.hpp"
#include "memguard/schedule.hpp"
#include "memguard/spike.hpp"

#include <json.hpp>

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace memguard {

enum class SamplerKind { ddim, ancestral };
std::string to_string(SamplerKind k);
SamplerKind parse_sampler(const std::string& s);

struct GuidanceConfig {
    double s = 7.5;   // attraction (CFG) scale
    double r = 0.0;   // repulsion scale
    double tau = 3.0;
    AttenuationPolicy attenuation;
    std::vector<Block> detection_blocks{Block::down, Block::mid};
    bool include_eot_floor = false;
    int steps = 50;
    SamplerKind sampler = SamplerKind::ddim;
    StepMode guidance_schedule = StepMode::every_step;  // multiplier on s and r
    std::optional<double> clip_x0 = 1.0;
    std::uint64_t seed = 0;
    bool record_trace = false;       // keep the negative-stream trace of every step
    bool record_trajectory = false;  // keep x_t after every step
    BaselineConfig baseline;

    void validate() const;  // throws ConfigError

    // Plain CFG: no attenuation, no repulsion, never detects.
    static GuidanceConfig cfg(double s, int steps, std::uint64_t seed);
};

nlohmann::json to_json(const GuidanceConfig& c);
GuidanceConfig guidance_from_json(const nlohmann::json& j);

// u + s (c - u); s == 1 returns c exactly.
NumericArray cfg_compose(const NumericArray& eps_uncond, const NumericArray& eps_cond, double s);
// u + s (p - u) - r (n - u); r == 0 is exactly cfg_compose(u, p, s).
NumericArray guard_compose(const NumericArray& eps_uncond, const NumericArray& eps_pos, const NumericArray& eps_neg,
                           double s, double r);

struct ThreeStreamPrediction {
    NumericArray eps_uncond;
    NumericArray eps_neg;
    NumericArray eps_pos;
    AttentionTrace neg_trace;
};

// The three streams as one batched backbone call, with a known positive-stream interceptor.
ThreeStreamPrediction predict_three_stream(const DenoiserParams& params, const NumericArray& x_t, int t,
                                           const TextEmbedding& e_null, const TextEmbedding& e_p,
                                           const LogitInterceptor* pos_interceptor, int step = 0,
                                           bool record_neg = true);

// Conditioning shared by every step of one generation.
struct StepContext {
    const DenoiserParams* params = nullptr;
    const NoiseSchedule* schedule = nullptr;
    const TextEmbedding* e_null = nullptr;
    const TextEmbedding* e_p = nullptr;      // memorized-conditional (negative) prompt
    const TextEmbedding* e_pos = nullptr;    // positive conditioning; defaults to e_p
    const PromptTokens* tokens = nullptr;
    const LogitInterceptor* cond_interceptor = nullptr;  // e.g. a masking baseline on the conditional stream
    Rng* noise = nullptr;                    // ancestral sampler only
};

struct StepDiagnostics {
    int step = 0;
    int t = 0;
    std::vector<double> token_mass;  // detector input M
    double norm_uncond = 0.0;
    double norm_neg = 0.0;
    double norm_pos = 0.0;
    double wen = 0.0;                // ||eps_neg - eps_uncond||
    double s_eff = 0.0;
    double r_eff = 0.0;
    double gate = 0.0;
    int backbone_rows = 0;
    bool positive_pass = false;      // a separate attenuated pass ran
    std::vector<AttentionSite> attenuated_sites;
};

struct StepResult {
    NumericArray x_prev;
    SpikeSet spikes;
    StepDiagnostics diag;
    AttentionTrace neg_trace;
};

// One step: {uncond, neg} batched with the negative trace recorded, spike detection on that
// trace, the attenuated positive stream when spikes exist, composition and the sampler update.
StepResult guard_denoise_step(const StepContext& ctx, const NumericArray& x_t, int step, int t, int t_prev,
                              const GuidanceConfig& config);

struct StepRecord {
    StepDiagnostics diag;
    SpikeSet spikes;
};

inline constexpr int kReportSchemaVersion = 1;

struct RunReport {
    int schema_version = kReportSchemaVersion;
    std::string prompt;
    std::string effective_prompt;  // after RTA etc.
    std::string method;
    GuidanceConfig config;
    std::vector<StepRecord> steps;
    std::optional<MetricsRecord> metrics;
    std::vector<std::string> token_strings;

    nlohmann::json to_json() const;
    static RunReport from_json(const nlohmann::json& j);
};

struct Generation {
    ImageSample image;
    RunReport report;
    AttentionTrace trace;                  // filled when config.record_trace
    std::vector<NumericArray> trajectory;  // filled when config.record_trajectory
};

Generation generate(const DenoiserParams& params, const NoiseSchedule& schedule, const Vocabulary& vocab,
                    const std::string& prompt, const GuidanceConfig& config);

// Reference classifier-free-guidance sampler with no hooks, used to check reductions.
ImageSample cfg_sample(const DenoiserParams& params, const NoiseSchedule& schedule, const Vocabulary& vocab,
                       const std::string& prompt, double s, int steps, std::uint64_t seed,
                       std::optional<double> clip_x0 = 1.0, std::vector<NumericArray>* trajectory = nullptr);

NumericArray initial_latent(std::uint64_t seed);

}  // namespace memguard
