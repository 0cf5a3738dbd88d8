#pragma once

#include "memguard/checkpoint.hpp"
#include "memguard/dataset.hpp"
#include "memguard/guidance.hpp"
#include "memguard/metrics.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace memguard {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kRecordSchemaVersion = 1;
inline constexpr int kGenerationsPerPrompt = 4;

struct ModelSection {
    Geometry geometry;
    int T = 200;
    double beta_start = 5e-4;
    double beta_end = 0.1;
    TrainConfig train;

    NoiseSchedule schedule() const { return NoiseSchedule::linear(T, beta_start, beta_end); }
};

// Grids over the guidance knobs. Every combination of the listed values is one run.
struct SweepSpec {
    std::vector<std::string> settings{"verbatim", "template"};
    std::vector<std::string> methods{"none", "ca", "guard"};
    std::vector<double> taus{1.0, 2.0, 3.0};
    std::vector<double> alphas{0.1, 0.25, 0.5, 0.75, 1.0};
    std::vector<double> rs{0.0, 0.5, 1.0, 2.0};
    std::vector<int> steps{50};
    std::vector<double> scales{7.5};
    std::vector<SamplerKind> samplers{SamplerKind::ddim};
    std::vector<StepMode> guidance_schedules{StepMode::every_step};
    std::vector<int> rta_k{1, 2};
    std::vector<double> wen_gamma{0.25, 0.5, 0.75};
    std::vector<double> ren_bot_boost{0.0, 1.0, 2.0};
    int prompts_per_setting = 8;  // 0 = all
    bool filter_memorized = true;  // keep prompts whose unmitigated sim exceeds filter_threshold
    double filter_threshold = 0.7;

    // Run configs for one method tag, derived from `base` (which supplies the fixed knobs).
    std::vector<GuidanceConfig> points(const std::string& method, const GuidanceConfig& base) const;
};

// Paraphrase table for the semantic positive target: colors and shapes swap with their
// synonyms, caption ids and triggers become a neutral filler, fillers stay.
std::map<std::string, std::string> default_paraphrase_table();

enum class Objective { best_sim, best_align, best_dist };
std::string to_string(Objective o);
Objective parse_objective(const std::string& s);

struct SelectionRule {
    std::optional<double> reference_align;  // taken from the unmitigated record when absent
    double degradation_budget = 0.15;
    Objective objective = Objective::best_sim;

    void validate() const;
    double floor(double reference) const { return (1.0 - degradation_budget) * reference; }
};

struct ExperimentConfig {
    int schema_version = kConfigSchemaVersion;
    ModelSection model;
    DatasetSpec dataset;
    GuidanceConfig guidance;
    SweepSpec sweep;
    SelectionRule selection;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);  // throws ConfigError

// Method tag of a run config: none, ca, guard, or a baseline name.
std::string method_label(const GuidanceConfig& c);

struct Interval {
    double mean = 0.0;
    double half_width = 0.0;  // 1.96 * sample std / sqrt(n); 0 when n < 2
    int n = 0;
};
Interval confidence_interval(const std::vector<double>& xs);

struct PromptResult {
    std::string prompt;
    std::vector<MetricsRecord> generations;  // one per seed
    std::vector<double> wen;                 // per generation
    Interval sim;
    Interval align;
};

struct SpikeStats {
    double steps_with_spikes = 0.0;  // fraction of steps with a non-empty set
    double mean_set_size = 0.0;
    double mean_wen = 0.0;
    double eot_rate = 0.0;           // fraction of non-empty sets containing EOT
};

struct ExperimentRecord {
    int schema_version = kRecordSchemaVersion;
    std::string id;       // content hash of the run identity
    std::string setting;  // verbatim | template | nonmemorized
    std::string method;
    GuidanceConfig config;
    std::vector<PromptResult> prompts;
    MetricsRecord aggregate;  // mean sim, mean align, dist over the whole generation set
    Interval sim;             // over per-prompt means
    Interval align;
    SpikeStats spikes;

    nlohmann::json to_json() const;
    static ExperimentRecord from_json(const nlohmann::json& j);
};

// Trained model plus the dataset it was trained on and the metric references.
class Lab {
public:
    Lab(Checkpoint checkpoint, ToyDataset dataset);

    const Checkpoint& checkpoint() const noexcept { return ckpt_; }
    const ToyDataset& dataset() const noexcept { return dataset_; }
    const Vocabulary& vocab() const noexcept { return vocab_; }
    const SimilarityIndex& index() const noexcept { return index_; }
    const std::vector<ImageSample>& reference() const noexcept { return reference_; }
    // Stable identity of the model, part of every record id.
    const std::string& fingerprint() const noexcept { return fingerprint_; }

    Generation run(const std::string& prompt, const GuidanceConfig& config) const;
    MetricsRecord score(const ImageSample& image, const std::string& prompt) const;

    // verbatim: memorized prompts; template: template-group prompts; nonmemorized: held-out prompts.
    std::vector<std::string> prompts(const std::string& setting, int limit) const;

private:
    Checkpoint ckpt_;
    ToyDataset dataset_;
    Vocabulary vocab_;
    SimilarityIndex index_;
    std::vector<ImageSample> reference_;
    std::string fingerprint_;
};

// Rebuilds the training dataset from the spec stored with the checkpoint.
Lab load_lab(const std::string& checkpoint_path);

// Binary PPM of an image scaled by an integer factor.
std::string to_ppm(const ImageSample& image, int scale = 8);

// Seed of generation g of prompt p; identical across configs so comparisons are paired.
std::uint64_t generation_seed(std::uint64_t base, std::size_t prompt_index, int g);

std::string record_id(const std::string& fingerprint, const std::string& setting, const GuidanceConfig& config,
                      const std::vector<std::string>& prompts, int generations);

// Four seeded generations per prompt, scored and aggregated.
ExperimentRecord evaluate(const Lab& lab, const std::string& setting, const std::vector<std::string>& prompts,
                          const GuidanceConfig& config, int generations = kGenerationsPerPrompt);

// Prompts whose unmitigated mean sim exceeds `threshold`.
std::vector<std::string> filter_memorized(const Lab& lab, const std::vector<std::string>& prompts,
                                          const GuidanceConfig& base, double threshold);

// Append-only directory of records, one JSON file per id, written atomically.
class RecordStore {
public:
    explicit RecordStore(std::string dir);
    bool has(const std::string& id) const;
    void put(const ExperimentRecord& r) const;
    ExperimentRecord get(const std::string& id) const;
    std::vector<ExperimentRecord> all() const;  // sorted by id
    const std::string& dir() const noexcept { return dir_; }

private:
    std::string dir_;
};

struct SweepProgress {
    int done = 0;
    int skipped = 0;
    int total = 0;
};

// Runs every point of `spec` not yet in the store. Returns the record ids of the whole sweep.
std::vector<std::string> run_sweep(const Lab& lab, const SweepSpec& spec, const GuidanceConfig& base,
                                   const RecordStore& store, int workers = 1,
                                   const std::function<void(const SweepProgress&)>& progress = {});

struct SelectionResult {
    std::optional<ExperimentRecord> chosen;  // empty: no feasible config
    double reference_align = 0.0;
    double floor = 0.0;
    int feasible = 0;
    std::string message;
};

// Keeps records with align >= (1 - budget) * reference, then optimizes the objective.
// Ties are broken by the lexicographically smallest canonical config string.
SelectionResult run_selection(const std::vector<ExperimentRecord>& records, const SelectionRule& rule);

std::string canonical_config(const GuidanceConfig& c);

struct MassSeries {
    std::vector<int> steps;
    std::vector<double> values;
    std::vector<std::string> warnings;  // e.g. missing steps
};

// Per-step detector statistic M[token] under `policy`.
MassSeries ca_mass_trajectory(const AttentionTrace& trace, int token, const SitePolicy& policy,
                              int expected_steps = -1);

// Query-mean weight on `token` averaged over every entry of a step; each block's series is that
// block's share of the sum, so the three series add up to the all-block value.
struct BlockMass {
    MassSeries all;
    std::map<Block, MassSeries> blocks;
};
BlockMass block_mass_trajectory(const AttentionTrace& trace, int token, int expected_steps = -1);

struct RobustnessRow {
    std::string prompt;
    MetricsRecord base;       // means over generations
    MetricsRecord mitigated;
    MetricsRecord delta;      // mitigated - base
};

struct RobustnessReport {
    std::vector<RobustnessRow> rows;
    Interval base_sim, base_align;          // over per-prompt means
    Interval mitigated_sim, mitigated_align;
    double sim_change = 0.0;
    double align_change = 0.0;
    bool within_noise = false;  // both |changes| below the unmitigated half-widths

    nlohmann::json to_json() const;
};

// Same prompts and seeds with and without `mitigation`.
RobustnessReport nonmemorized_robustness(const Lab& lab, const std::vector<std::string>& prompts,
                                         const GuidanceConfig& mitigation, int generations = kGenerationsPerPrompt);

// Report emission: CSV table, Pareto frontier and trajectory plots.
std::string records_csv(const std::vector<ExperimentRecord>& records);
std::string frontier_svg(const std::vector<ExperimentRecord>& records, const std::string& setting);
std::string series_svg(const std::string& title, const std::vector<std::pair<std::string, MassSeries>>& series);
// Mean mass per token position over steps, position 0 left out.
std::string token_distribution_svg(const std::string& title, const std::vector<double>& mass_by_position);

}  // namespace memguard
