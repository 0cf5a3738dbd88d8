#include "memguard/harness.hpp"

#include "memguard/archive.hpp"
#include "memguard/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace memguard {

using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json number_or_inf(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

double read_number(const json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return kInf;
        throw ConfigError("expected a number, got '" + s + "'");
    }
    return j.get<double>();
}

json nan_or(double v) { return std::isnan(v) ? json(nullptr) : json(v); }
double read_nan_or(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

template <class T>
std::vector<T> read_list(const json& j, const char* key, std::vector<T> fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<std::vector<T>>();
}

std::vector<double> read_number_list(const json& j, const char* key, std::vector<double> fallback) {
    if (!j.contains(key)) return fallback;
    std::vector<double> out;
    for (const auto& v : j.at(key)) out.push_back(read_number(v));
    return out;
}

const std::set<std::string> kSettings{"verbatim", "template", "nonmemorized"};
const std::set<std::string> kMethods{"none", "ca", "guard", "rta", "wen_scale", "ren_mask", "semantic_guard"};

json interval_json(const Interval& i) { return {{"mean", nan_or(i.mean)}, {"ci95", nan_or(i.half_width)}, {"n", i.n}}; }
Interval interval_from(const json& j) { return {read_nan_or(j.at("mean")), read_nan_or(j.at("ci95")), j.at("n")}; }

json metrics_json(const MetricsRecord& m) { return {{"sim", nan_or(m.sim)}, {"align", nan_or(m.align)}, {"dist", nan_or(m.dist)}}; }
MetricsRecord metrics_from(const json& j) {
    return {read_nan_or(j.at("sim")), read_nan_or(j.at("align")), read_nan_or(j.at("dist"))};
}

double mean(const std::vector<double>& xs) {
    return xs.empty() ? kNaN : std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

}  // namespace

// ---- configuration ----

std::vector<GuidanceConfig> SweepSpec::points(const std::string& method, const GuidanceConfig& base) const {
    if (!kMethods.count(method)) throw ConfigError("sweep: unknown method '" + method + "'");
    std::vector<GuidanceConfig> out;
    for (int st : steps)
        for (double s : scales)
            for (SamplerKind sk : samplers)
                for (StepMode gs : guidance_schedules) {
                    GuidanceConfig c = base;
                    c.steps = st;
                    c.s = s;
                    c.sampler = sk;
                    c.guidance_schedule = gs;
                    c.r = 0.0;
                    c.tau = kInf;
                    c.attenuation.alpha = 1.0;
                    c.baseline = BaselineConfig{};
                    c.record_trace = false;
                    c.record_trajectory = false;
                    if (method == "none") {
                        out.push_back(c);
                    } else if (method == "ca" || method == "guard") {
                        for (double tau : taus)
                            for (double a : alphas)
                                for (double r : method == "ca" ? std::vector<double>{0.0} : rs) {
                                    if (method == "guard" && r == 0.0) continue;  // that is the "ca" point
                                    GuidanceConfig p = c;
                                    p.tau = tau;
                                    p.attenuation.alpha = a;
                                    p.r = r;
                                    out.push_back(p);
                                }
                    } else if (method == "rta") {
                        for (int k : rta_k) {
                            GuidanceConfig p = c;
                            p.baseline.method = BaselineMethod::rta;
                            p.baseline.rta_k = k;
                            out.push_back(p);
                        }
                    } else if (method == "wen_scale") {
                        for (double g : wen_gamma) {
                            GuidanceConfig p = c;
                            p.baseline.method = BaselineMethod::wen_scale;
                            p.baseline.wen_gamma = g;
                            out.push_back(p);
                        }
                    } else if (method == "ren_mask") {
                        for (double b : ren_bot_boost) {
                            GuidanceConfig p = c;
                            p.baseline.method = BaselineMethod::ren_mask;
                            p.baseline.ren_bot_boost = b;
                            out.push_back(p);
                        }
                    } else {  // semantic_guard
                        for (double r : rs) {
                            GuidanceConfig p = c;
                            p.baseline.method = BaselineMethod::semantic_guard;
                            p.baseline.paraphrase = base.baseline.paraphrase.empty() ? default_paraphrase_table()
                                                                                     : base.baseline.paraphrase;
                            p.r = r;
                            out.push_back(p);
                        }
                    }
                }
    for (const auto& c : out) c.validate();
    return out;
}

std::map<std::string, std::string> default_paraphrase_table() {
    const ToyLexicon& lex = ToyLexicon::standard();
    std::map<std::string, std::string> t = lex.paraphrase_table();
    for (const auto& [syn, canon] : lex.synonyms) t[syn] = canon;
    for (const auto& w : lex.caption_ids) t[w] = "photo";
    for (const auto& w : lex.triggers) t[w] = "photo";
    for (const auto& w : lex.fillers) t[w] = w;
    return t;
}

std::string to_string(Objective o) {
    switch (o) {
        case Objective::best_sim: return "best-sim";
        case Objective::best_align: return "best-align";
        case Objective::best_dist: return "best-dist";
    }
    return "?";
}

Objective parse_objective(const std::string& s) {
    if (s == "best-sim" || s == "best_sim") return Objective::best_sim;
    if (s == "best-align" || s == "best_align") return Objective::best_align;
    if (s == "best-dist" || s == "best_dist") return Objective::best_dist;
    throw ConfigError("unknown objective '" + s + "'");
}

void SelectionRule::validate() const {
    if (!(degradation_budget > 0.0 && degradation_budget < 1.0))
        throw ConfigError("selection: degradation_budget must be in (0, 1)");
    if (reference_align && !std::isfinite(*reference_align)) throw ConfigError("selection: reference_align must be finite");
}

json to_json(const ExperimentConfig& c) {
    const SweepSpec& s = c.sweep;
    json taus = json::array();
    for (double t : s.taus) taus.push_back(number_or_inf(t));
    json samplers = json::array();
    for (auto k : s.samplers) samplers.push_back(to_string(k));
    json schedules = json::array();
    for (auto m : s.guidance_schedules) schedules.push_back(to_string(m));
    json model = to_json(c.model.geometry);
    model["T"] = c.model.T;
    model["beta_start"] = c.model.beta_start;
    model["beta_end"] = c.model.beta_end;
    model["train"] = to_json(c.model.train);
    json sel = {{"degradation_budget", c.selection.degradation_budget}, {"objective", to_string(c.selection.objective)}};
    sel["reference_align"] = c.selection.reference_align ? json(*c.selection.reference_align) : json(nullptr);
    return {{"schema_version", c.schema_version},
            {"model", model},
            {"dataset", to_json(c.dataset)},
            {"guidance", to_json(c.guidance)},
            {"sweep",
             {{"settings", s.settings},
              {"methods", s.methods},
              {"taus", taus},
              {"alphas", s.alphas},
              {"rs", s.rs},
              {"steps", s.steps},
              {"scales", s.scales},
              {"samplers", samplers},
              {"guidance_schedules", schedules},
              {"rta_k", s.rta_k},
              {"wen_gamma", s.wen_gamma},
              {"ren_bot_boost", s.ren_bot_boost},
              {"prompts_per_setting", s.prompts_per_setting},
              {"filter_memorized", s.filter_memorized},
              {"filter_threshold", s.filter_threshold}}},
            {"selection", sel}};
}

ExperimentConfig experiment_from_json(const json& j) {
    ExperimentConfig c;
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    c.schema_version = j.value("schema_version", 0);
    if (c.schema_version != kConfigSchemaVersion)
        throw ConfigError("unsupported config schema_version " + std::to_string(c.schema_version));
    for (const auto& [key, _] : j.items())
        if (key != "schema_version" && key != "model" && key != "dataset" && key != "guidance" && key != "sweep" &&
            key != "selection")
            throw ConfigError("unknown config section '" + key + "'");
    try {
        if (j.contains("model")) {
            const json& m = j.at("model");
            c.model.geometry = geometry_from_json(m);
            c.model.T = m.value("T", c.model.T);
            c.model.beta_start = m.value("beta_start", c.model.beta_start);
            c.model.beta_end = m.value("beta_end", c.model.beta_end);
            if (m.contains("train")) c.model.train = train_config_from_json(m.at("train"));
            if (c.model.T < 1 || !(c.model.beta_start > 0.0) || !(c.model.beta_end < 1.0) ||
                c.model.beta_start > c.model.beta_end)
                throw ConfigError("model: need T >= 1 and 0 < beta_start <= beta_end < 1");
        }
        if (j.contains("dataset")) c.dataset = dataset_spec_from_json(j.at("dataset"));
        if (j.contains("guidance")) c.guidance = guidance_from_json(j.at("guidance"));
        if (j.contains("sweep")) {
            const json& s = j.at("sweep");
            SweepSpec& w = c.sweep;
            w.settings = read_list(s, "settings", w.settings);
            w.methods = read_list(s, "methods", w.methods);
            w.taus = read_number_list(s, "taus", w.taus);
            w.alphas = read_number_list(s, "alphas", w.alphas);
            w.rs = read_number_list(s, "rs", w.rs);
            w.steps = read_list(s, "steps", w.steps);
            w.scales = read_number_list(s, "scales", w.scales);
            if (s.contains("samplers")) {
                w.samplers.clear();
                for (const auto& v : s.at("samplers")) w.samplers.push_back(parse_sampler(v));
            }
            if (s.contains("guidance_schedules")) {
                w.guidance_schedules.clear();
                for (const auto& v : s.at("guidance_schedules")) w.guidance_schedules.push_back(parse_step_mode(v));
            }
            w.rta_k = read_list(s, "rta_k", w.rta_k);
            w.wen_gamma = read_number_list(s, "wen_gamma", w.wen_gamma);
            w.ren_bot_boost = read_number_list(s, "ren_bot_boost", w.ren_bot_boost);
            w.prompts_per_setting = s.value("prompts_per_setting", w.prompts_per_setting);
            w.filter_memorized = s.value("filter_memorized", w.filter_memorized);
            w.filter_threshold = s.value("filter_threshold", w.filter_threshold);
        }
        if (j.contains("selection")) {
            const json& s = j.at("selection");
            if (s.contains("reference_align") && !s.at("reference_align").is_null())
                c.selection.reference_align = s.at("reference_align").get<double>();
            c.selection.degradation_budget = s.value("degradation_budget", c.selection.degradation_budget);
            if (s.contains("objective")) c.selection.objective = parse_objective(s.at("objective"));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    for (const auto& s : c.sweep.settings)
        if (!kSettings.count(s)) throw ConfigError("sweep: unknown setting '" + s + "'");
    for (const auto& m : c.sweep.methods)
        if (!kMethods.count(m)) throw ConfigError("sweep: unknown method '" + m + "'");
    if (c.sweep.taus.empty() || c.sweep.alphas.empty() || c.sweep.rs.empty() || c.sweep.steps.empty() ||
        c.sweep.scales.empty() || c.sweep.samplers.empty() || c.sweep.guidance_schedules.empty())
        throw ConfigError("sweep: every grid needs at least one value");
    for (double a : c.sweep.alphas)
        if (!(a > 0.0) || !std::isfinite(a)) throw ConfigError("sweep: alphas must be finite and > 0");
    for (double r : c.sweep.rs)
        if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("sweep: rs must be finite and >= 0");
    for (double t : c.sweep.taus)
        if (std::isnan(t)) throw ConfigError("sweep: tau must not be NaN");
    for (int st : c.sweep.steps)
        if (st < 1) throw ConfigError("sweep: steps must be >= 1");
    c.selection.validate();
    return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    return experiment_from_json(j);
}

std::string method_label(const GuidanceConfig& c) {
    if (c.baseline.method != BaselineMethod::none) return to_string(c.baseline.method);
    const bool attenuates = c.attenuation.alpha != 1.0 && !std::isinf(c.tau);
    if (c.r > 0.0) return attenuates ? "guard" : "repel";
    return attenuates ? "ca" : "none";
}

Interval confidence_interval(const std::vector<double>& xs) {
    Interval out;
    out.n = static_cast<int>(xs.size());
    if (xs.empty()) return {kNaN, kNaN, 0};
    out.mean = mean(xs);
    if (xs.size() < 2) return out;
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    out.half_width = 1.96 * sd / std::sqrt(static_cast<double>(xs.size()));
    return out;
}

// ---- records ----

json ExperimentRecord::to_json() const {
    json ps = json::array();
    for (const auto& p : prompts) {
        json gens = json::array();
        for (const auto& g : p.generations) gens.push_back(metrics_json(g));
        ps.push_back({{"prompt", p.prompt},
                      {"generations", gens},
                      {"wen", p.wen},
                      {"sim", interval_json(p.sim)},
                      {"align", interval_json(p.align)}});
    }
    return {{"schema_version", schema_version},
            {"id", id},
            {"setting", setting},
            {"method", method},
            {"config", memguard::to_json(config)},
            {"prompts", ps},
            {"aggregate", metrics_json(aggregate)},
            {"sim", interval_json(sim)},
            {"align", interval_json(align)},
            {"spikes",
             {{"steps_with_spikes", spikes.steps_with_spikes},
              {"mean_set_size", spikes.mean_set_size},
              {"mean_wen", spikes.mean_wen},
              {"eot_rate", spikes.eot_rate}}},
            {"definitions",
             {{"sim", "stand-in for copy detection: max cosine of mean-subtracted pixel vectors against the training images"},
              {"align", "stand-in for prompt alignment: fraction of prompt color/shape attributes recovered by the rule-based classifier"},
              {"dist", "stand-in for distribution distance: Frechet distance of a fixed 32-dim random projection, "
                       "computed once over the entire generation set against the training images (no interval)"},
              {"ci95", "1.96 * sample std / sqrt(n); per prompt n = generations, per record n = prompts"}}}};
}

ExperimentRecord ExperimentRecord::from_json(const json& j) {
    ExperimentRecord r;
    try {
        r.schema_version = j.at("schema_version");
        if (r.schema_version != kRecordSchemaVersion) throw IoError("unsupported record schema");
        r.id = j.at("id");
        r.setting = j.at("setting");
        r.method = j.at("method");
        r.config = guidance_from_json(j.at("config"));
        for (const auto& p : j.at("prompts")) {
            PromptResult pr;
            pr.prompt = p.at("prompt");
            for (const auto& g : p.at("generations")) pr.generations.push_back(metrics_from(g));
            pr.wen = p.at("wen").get<std::vector<double>>();
            pr.sim = interval_from(p.at("sim"));
            pr.align = interval_from(p.at("align"));
            r.prompts.push_back(std::move(pr));
        }
        r.aggregate = metrics_from(j.at("aggregate"));
        r.sim = interval_from(j.at("sim"));
        r.align = interval_from(j.at("align"));
        const json& s = j.at("spikes");
        r.spikes = {s.at("steps_with_spikes"), s.at("mean_set_size"), s.at("mean_wen"), s.at("eot_rate")};
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed experiment record: ") + e.what());
    }
    return r;
}

// ---- lab ----

Lab::Lab(Checkpoint checkpoint, ToyDataset dataset)
    : ckpt_(std::move(checkpoint)),
      dataset_(std::move(dataset)),
      vocab_(ckpt_.vocabulary),
      index_(dataset_.unique_images()),
      reference_(dataset_.unique_images()) {
    std::string blob;
    for (const auto& [name, var] : ckpt_.params.entries()) {
        blob += name;
        blob.append(reinterpret_cast<const char*>(var->value.data()),
                    static_cast<std::size_t>(var->value.size()) * sizeof(double));
    }
    blob.append(reinterpret_cast<const char*>(ckpt_.schedule.betas.data()), ckpt_.schedule.betas.size() * sizeof(double));
    for (const auto& w : ckpt_.vocabulary) blob += w + ' ';
    blob += memguard::to_json(dataset_.spec).dump();
    fingerprint_ = hex(fnv1a(blob));
}

Generation Lab::run(const std::string& prompt, const GuidanceConfig& config) const {
    return generate(ckpt_.params, ckpt_.schedule, vocab_, prompt, config);
}

MetricsRecord Lab::score(const ImageSample& image, const std::string& prompt) const {
    return {index_.score(image), alignment_score(image, prompt), kNaN};
}

std::vector<std::string> Lab::prompts(const std::string& setting, int limit) const {
    std::vector<std::string> out;
    if (setting == "verbatim") {
        out = dataset_.memorized_prompts;
    } else if (setting == "template") {
        // Round-robin over groups so every template is represented.
        std::size_t longest = 0;
        for (const auto& g : dataset_.template_groups) longest = std::max(longest, g.prompts.size());
        for (std::size_t i = 0; i < longest; ++i)
            for (const auto& g : dataset_.template_groups)
                if (i < g.prompts.size()) out.push_back(g.prompts[i]);
    } else if (setting == "nonmemorized") {
        return heldout_prompts(dataset_, limit > 0 ? limit : 32);
    } else {
        throw ConfigError("unknown setting '" + setting + "'");
    }
    if (limit > 0 && static_cast<int>(out.size()) > limit) out.resize(static_cast<std::size_t>(limit));
    return out;
}

Lab load_lab(const std::string& checkpoint_path) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    if (!ckpt.extra.contains("dataset"))
        throw ConfigError("checkpoint " + checkpoint_path + " does not record its dataset spec");
    ToyDataset ds = make_dataset(dataset_spec_from_json(ckpt.extra.at("dataset")));
    return Lab(std::move(ckpt), std::move(ds));
}

std::string to_ppm(const ImageSample& image, int scale) {
    if (scale < 1) throw ArgumentError("to_ppm: scale must be >= 1");
    const int n = kImageSize * scale;
    std::string out = "P6\n" + std::to_string(n) + " " + std::to_string(n) + "\n255\n";
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            for (int c = 0; c < kChannels; ++c) {
                const double v = std::clamp(image.at(c, y / scale, x / scale), -1.0, 1.0);
                out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround((v + 1.0) * 127.5))));
            }
    return out;
}

std::uint64_t generation_seed(std::uint64_t base, std::size_t prompt_index, int g) {
    return mix_seed(base, 1000 * static_cast<std::uint64_t>(prompt_index) + static_cast<std::uint64_t>(g) + 11);
}

std::string canonical_config(const GuidanceConfig& c) {
    GuidanceConfig k = c;
    k.record_trace = false;
    k.record_trajectory = false;
    return to_json(k).dump();
}

std::string record_id(const std::string& fingerprint, const std::string& setting, const GuidanceConfig& config,
                      const std::vector<std::string>& prompts, int generations) {
    std::string key = fingerprint + '|' + setting + '|' + canonical_config(config) + '|' + std::to_string(generations);
    for (const auto& p : prompts) key += '|' + p;
    return hex(fnv1a(key));
}

ExperimentRecord evaluate(const Lab& lab, const std::string& setting, const std::vector<std::string>& prompts,
                          const GuidanceConfig& config, int generations) {
    if (generations < 1) throw ArgumentError("evaluate: generations must be >= 1");
    config.validate();
    ExperimentRecord rec;
    rec.setting = setting;
    rec.method = method_label(config);
    rec.config = config;
    rec.config.record_trace = false;
    rec.config.record_trajectory = false;
    rec.id = record_id(lab.fingerprint(), setting, config, prompts, generations);

    std::vector<ImageSample> images;
    std::vector<double> all_sim, all_align, all_wen, prompt_sim, prompt_align;
    long steps = 0, spiky = 0, spike_total = 0, eot_hits = 0;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        PromptResult pr;
        pr.prompt = prompts[p];
        std::vector<double> sims, aligns;
        for (int g = 0; g < generations; ++g) {
            GuidanceConfig c = rec.config;
            c.seed = generation_seed(config.seed, p, g);
            Generation gen = lab.run(prompts[p], c);
            MetricsRecord m = lab.score(gen.image, prompts[p]);
            pr.generations.push_back(m);
            pr.wen.push_back(wen_signal(gen.report));
            sims.push_back(m.sim);
            aligns.push_back(m.align);
            int eot = -1;
            for (std::size_t i = 0; i < gen.report.token_strings.size(); ++i)
                if (gen.report.token_strings[i] == lab.vocab().word(kEot)) eot = static_cast<int>(i);
            for (const auto& s : gen.report.steps) {
                ++steps;
                if (!s.spikes.empty()) {
                    ++spiky;
                    if (s.spikes.contains(eot)) ++eot_hits;
                }
                spike_total += static_cast<long>(s.spikes.positions.size());
            }
            images.push_back(std::move(gen.image));
        }
        pr.sim = confidence_interval(sims);
        pr.align = confidence_interval(aligns);
        all_sim.insert(all_sim.end(), sims.begin(), sims.end());
        all_align.insert(all_align.end(), aligns.begin(), aligns.end());
        all_wen.insert(all_wen.end(), pr.wen.begin(), pr.wen.end());
        prompt_sim.push_back(pr.sim.mean);
        prompt_align.push_back(pr.align.mean);
        rec.prompts.push_back(std::move(pr));
    }
    rec.aggregate.sim = mean(all_sim);
    rec.aggregate.align = mean(all_align);
    rec.aggregate.dist = images.size() >= 16 && lab.reference().size() >= 16
                             ? distribution_score(images, lab.reference())
                             : kNaN;
    rec.sim = confidence_interval(prompt_sim);
    rec.align = confidence_interval(prompt_align);
    rec.spikes.steps_with_spikes = steps ? static_cast<double>(spiky) / static_cast<double>(steps) : 0.0;
    rec.spikes.mean_set_size = steps ? static_cast<double>(spike_total) / static_cast<double>(steps) : 0.0;
    rec.spikes.mean_wen = mean(all_wen);
    rec.spikes.eot_rate = spiky ? static_cast<double>(eot_hits) / static_cast<double>(spiky) : 0.0;
    return rec;
}

namespace {

GuidanceConfig unmitigated(const GuidanceConfig& base) {
    GuidanceConfig c = base;
    c.r = 0.0;
    c.tau = kInf;
    c.attenuation.alpha = 1.0;
    c.baseline = BaselineConfig{};
    c.record_trace = false;
    c.record_trajectory = false;
    return c;
}

}  // namespace

std::vector<std::string> filter_memorized(const Lab& lab, const std::vector<std::string>& prompts,
                                          const GuidanceConfig& base, double threshold) {
    const ExperimentRecord r = evaluate(lab, "filter", prompts, unmitigated(base));
    std::vector<std::string> out;
    for (const auto& p : r.prompts)
        if (p.sim.mean > threshold) out.push_back(p.prompt);
    return out;
}

// ---- record store ----

RecordStore::RecordStore(std::string dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create record store " + dir_ + ": " + ec.message());
}

bool RecordStore::has(const std::string& id) const { return std::filesystem::exists(dir_ + "/" + id + ".json"); }

void RecordStore::put(const ExperimentRecord& r) const {
    write_text_file_atomic(dir_ + "/" + r.id + ".json", r.to_json().dump(1));
}

ExperimentRecord RecordStore::get(const std::string& id) const {
    try {
        return ExperimentRecord::from_json(json::parse(read_text_file(dir_ + "/" + id + ".json")));
    } catch (const json::exception& e) {
        throw IoError("record " + id + " is not valid JSON: " + e.what());
    }
}

std::vector<ExperimentRecord> RecordStore::all() const {
    std::vector<std::string> ids;
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
        const auto& p = e.path();
        if (p.extension() == ".json" && p.filename().string().find(".tmp") == std::string::npos)
            ids.push_back(p.stem().string());
    }
    std::sort(ids.begin(), ids.end());
    std::vector<ExperimentRecord> out;
    for (const auto& id : ids) out.push_back(get(id));
    return out;
}

std::vector<std::string> run_sweep(const Lab& lab, const SweepSpec& spec, const GuidanceConfig& base,
                                   const RecordStore& store, int workers,
                                   const std::function<void(const SweepProgress&)>& progress) {
    struct Task {
        std::string setting;
        std::vector<std::string> prompts;
        GuidanceConfig config;
        std::string id;
    };
    std::vector<Task> tasks;
    auto add = [&](const std::string& setting, const std::vector<std::string>& prompts, const GuidanceConfig& c) {
        tasks.push_back({setting, prompts, c, record_id(lab.fingerprint(), setting, c, prompts, kGenerationsPerPrompt)});
    };
    std::vector<std::string> ids;
    for (const auto& setting : spec.settings) {
        std::vector<std::string> prompts = lab.prompts(setting, spec.prompts_per_setting);
        if (spec.filter_memorized && setting != "nonmemorized") {
            // The unfiltered unmitigated run doubles as the filter and is kept in the store.
            const GuidanceConfig none = spec.points("none", base).front();
            const std::string cid = record_id(lab.fingerprint(), setting + "-candidates", none, prompts, kGenerationsPerPrompt);
            ExperimentRecord cand;
            if (store.has(cid)) {
                cand = store.get(cid);
            } else {
                cand = evaluate(lab, setting + "-candidates", prompts, none);
                store.put(cand);
            }
            ids.push_back(cid);
            std::vector<std::string> kept;
            for (const auto& p : cand.prompts)
                if (p.sim.mean > spec.filter_threshold) kept.push_back(p.prompt);
            prompts = kept;
        }
        if (prompts.empty()) continue;
        for (const auto& method : spec.methods)
            for (const auto& c : spec.points(method, base)) add(setting, prompts, c);
    }

    SweepProgress state;
    state.total = static_cast<int>(tasks.size());
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            const Task& t = tasks[i];
            bool skipped = store.has(t.id);
            if (!skipped) {
                try {
                    store.put(evaluate(lab, t.setting, t.prompts, t.config));
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!failure) failure = std::current_exception();
                    return;
                }
            }
            std::lock_guard<std::mutex> lock(mu);
            ++state.done;
            if (skipped) ++state.skipped;
            if (progress) progress(state);
        }
    };
    const int n = std::max(1, workers);
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < n; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);
    for (const auto& t : tasks) ids.push_back(t.id);
    return ids;
}

// ---- selection ----

SelectionResult run_selection(const std::vector<ExperimentRecord>& records, const SelectionRule& rule) {
    rule.validate();
    SelectionResult out;
    if (rule.reference_align) {
        out.reference_align = *rule.reference_align;
    } else {
        const ExperimentRecord* ref = nullptr;
        for (const auto& r : records)
            if (r.method == "none" && (!ref || canonical_config(r.config) < canonical_config(ref->config))) ref = &r;
        if (!ref) {
            out.message = "no feasible config: no unmitigated record to take the reference alignment from";
            return out;
        }
        out.reference_align = ref->aggregate.align;
    }
    out.floor = rule.floor(out.reference_align);

    auto value = [&](const ExperimentRecord& r) {
        switch (rule.objective) {
            case Objective::best_sim: return r.aggregate.sim;
            case Objective::best_align: return -r.aggregate.align;
            case Objective::best_dist: return r.aggregate.dist;
        }
        return kNaN;
    };
    const ExperimentRecord* best = nullptr;
    std::string best_key;
    for (const auto& r : records) {
        if (!(r.aggregate.align >= out.floor)) continue;
        const double v = value(r);
        if (std::isnan(v)) continue;
        ++out.feasible;
        const std::string key = canonical_config(r.config) + '|' + r.setting;
        if (!best || v < value(*best) || (v == value(*best) && key < best_key)) {
            best = &r;
            best_key = key;
        }
    }
    if (!best) {
        std::ostringstream os;
        os << "no feasible config: no record reaches the alignment floor " << out.floor;
        out.message = os.str();
        return out;
    }
    out.chosen = *best;
    std::ostringstream os;
    os << "chose " << best->id << " (" << best->method << ") among " << out.feasible << " feasible records";
    out.message = os.str();
    return out;
}

// ---- trajectories ----

namespace {

void note_missing(MassSeries& s, int expected_steps) {
    if (expected_steps <= 0) return;
    std::vector<int> missing;
    std::set<int> have(s.steps.begin(), s.steps.end());
    for (int t = 0; t < expected_steps; ++t)
        if (!have.count(t)) missing.push_back(t);
    if (missing.empty()) return;
    std::ostringstream os;
    os << "partial series: " << missing.size() << " of " << expected_steps << " steps missing (first " << missing.front()
       << ")";
    s.warnings.push_back(os.str());
}

}  // namespace

MassSeries ca_mass_trajectory(const AttentionTrace& trace, int token, const SitePolicy& policy, int expected_steps) {
    if (token < 0 || token >= kMaxTokens) throw ArgumentError("ca_mass_trajectory: token out of range");
    MassSeries s;
    for (int step : trace.steps()) {
        const auto entries = trace.at_step(step);
        s.steps.push_back(step);
        s.values.push_back(token_max_mass(entries, policy).M[static_cast<std::size_t>(token)]);
    }
    note_missing(s, expected_steps);
    return s;
}

BlockMass block_mass_trajectory(const AttentionTrace& trace, int token, int expected_steps) {
    if (token < 0 || token >= kMaxTokens) throw ArgumentError("block_mass_trajectory: token out of range");
    BlockMass out;
    for (Block b : kAllBlocks) out.blocks[b];
    for (int step : trace.steps()) {
        const auto entries = trace.at_step(step);
        const double n = static_cast<double>(entries.size());
        double total = 0.0;
        std::map<Block, double> parts{{Block::down, 0.0}, {Block::mid, 0.0}, {Block::up, 0.0}};
        for (const TraceEntry* e : entries) {
            const double share = e->weights.col(token).mean() / n;
            parts[e->site.block] += share;
            total += share;
        }
        out.all.steps.push_back(step);
        out.all.values.push_back(total);
        for (auto& [b, series] : out.blocks) {
            series.steps.push_back(step);
            series.values.push_back(parts[b]);
        }
    }
    note_missing(out.all, expected_steps);
    for (auto& [b, series] : out.blocks) series.warnings = out.all.warnings;
    return out;
}

// ---- robustness ----

json RobustnessReport::to_json() const {
    json rs = json::array();
    for (const auto& r : rows)
        rs.push_back({{"prompt", r.prompt},
                      {"base", metrics_json(r.base)},
                      {"mitigated", metrics_json(r.mitigated)},
                      {"delta", metrics_json(r.delta)}});
    return {{"rows", rs},
            {"base_sim", interval_json(base_sim)},
            {"base_align", interval_json(base_align)},
            {"mitigated_sim", interval_json(mitigated_sim)},
            {"mitigated_align", interval_json(mitigated_align)},
            {"sim_change", sim_change},
            {"align_change", align_change},
            {"within_noise", within_noise}};
}

RobustnessReport nonmemorized_robustness(const Lab& lab, const std::vector<std::string>& prompts,
                                         const GuidanceConfig& mitigation, int generations) {
    const ExperimentRecord base = evaluate(lab, "nonmemorized", prompts, unmitigated(mitigation), generations);
    const ExperimentRecord mit = evaluate(lab, "nonmemorized", prompts, mitigation, generations);
    RobustnessReport out;
    std::vector<double> bs, ba, ms, ma;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        RobustnessRow row;
        row.prompt = prompts[i];
        row.base = {base.prompts[i].sim.mean, base.prompts[i].align.mean, kNaN};
        row.mitigated = {mit.prompts[i].sim.mean, mit.prompts[i].align.mean, kNaN};
        row.delta = {row.mitigated.sim - row.base.sim, row.mitigated.align - row.base.align, kNaN};
        bs.push_back(row.base.sim);
        ba.push_back(row.base.align);
        ms.push_back(row.mitigated.sim);
        ma.push_back(row.mitigated.align);
        out.rows.push_back(std::move(row));
    }
    out.base_sim = confidence_interval(bs);
    out.base_align = confidence_interval(ba);
    out.mitigated_sim = confidence_interval(ms);
    out.mitigated_align = confidence_interval(ma);
    out.sim_change = out.mitigated_sim.mean - out.base_sim.mean;
    out.align_change = out.mitigated_align.mean - out.base_align.mean;
    auto quiet = [](double change, const Interval& i) { return change == 0.0 || std::abs(change) < i.half_width; };
    out.within_noise = quiet(out.sim_change, out.base_sim) && quiet(out.align_change, out.base_align);
    return out;
}

// ---- report emission ----

std::string records_csv(const std::vector<ExperimentRecord>& records) {
    std::ostringstream os;
    os.precision(6);
    os << "id,setting,method,s,r,tau,alpha,steps,sampler,guidance_schedule,rta_k,wen_gamma,ren_bot_boost,prompts,"
          "sim_mean,sim_ci95,align_mean,align_ci95,dist,steps_with_spikes,mean_spikes,mean_wen\n";
    for (const auto& r : records) {
        const auto& c = r.config;
        os << r.id << ',' << r.setting << ',' << r.method << ',' << c.s << ',' << c.r << ','
           << (std::isinf(c.tau) ? std::string("inf") : std::to_string(c.tau)) << ',' << c.attenuation.alpha << ','
           << c.steps << ',' << to_string(c.sampler) << ',' << to_string(c.guidance_schedule) << ','
           << c.baseline.rta_k << ',' << c.baseline.wen_gamma << ',' << c.baseline.ren_bot_boost << ','
           << r.prompts.size() << ',' << r.aggregate.sim << ',' << r.sim.half_width << ',' << r.aggregate.align << ','
           << r.align.half_width << ',' << r.aggregate.dist << ',' << r.spikes.steps_with_spikes << ','
           << r.spikes.mean_set_size << ',' << r.spikes.mean_wen << '\n';
    }
    return os.str();
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f"};

struct Frame {
    double x0, x1, y0, y1;  // data range
    static constexpr double W = 640, H = 420, L = 60, R = 20, T = 40, B = 50;
    double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
    double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

std::string svg_open(const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
    std::ostringstream os;
    os.precision(4);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::W << "\" height=\"" << Frame::H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << Frame::W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n"
       << "<line x1=\"" << Frame::L << "\" y1=\"" << Frame::H - Frame::B << "\" x2=\"" << Frame::W - Frame::R
       << "\" y2=\"" << Frame::H - Frame::B << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << Frame::L << "\" y1=\"" << Frame::T << "\" x2=\"" << Frame::L << "\" y2=\""
       << Frame::H - Frame::B << "\" stroke=\"black\"/>\n"
       << "<text x=\"" << Frame::W / 2 << "\" y=\"" << Frame::H - 12 << "\" text-anchor=\"middle\">" << xl << "</text>\n"
       << "<text x=\"16\" y=\"" << Frame::H / 2 << "\" transform=\"rotate(-90 16 " << Frame::H / 2
       << ")\" text-anchor=\"middle\">" << yl << "</text>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = f.x0 + (f.x1 - f.x0) * k / 4.0, yv = f.y0 + (f.y1 - f.y0) * k / 4.0;
        os << "<text x=\"" << f.px(xv) << "\" y=\"" << Frame::H - Frame::B + 16 << "\" text-anchor=\"middle\">" << xv
           << "</text>\n<text x=\"" << Frame::L - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << yv
           << "</text>\n";
    }
    return os.str();
}

Frame fit(double x0, double x1, double y0, double y1) {
    if (!(x1 > x0)) x1 = x0 + 1.0;
    if (!(y1 > y0)) y1 = y0 + 1.0;
    return {x0, x1, y0, y1};
}

}  // namespace

std::string frontier_svg(const std::vector<ExperimentRecord>& records, const std::string& setting) {
    std::vector<const ExperimentRecord*> rs;
    for (const auto& r : records)
        if (r.setting == setting && std::isfinite(r.aggregate.sim) && std::isfinite(r.aggregate.align)) rs.push_back(&r);
    std::map<std::string, std::size_t> colors;
    for (const auto* r : rs) colors.emplace(r->method, 0);
    std::size_t k = 0;
    for (auto& [m, c] : colors) c = k++ % std::size(kPalette);

    const Frame f = fit(0.0, 1.0, 0.0, 1.0);
    std::ostringstream os;
    os.precision(5);
    os << svg_open(f, setting + ": similarity vs alignment", "alignment (stand-in)", "similarity (stand-in)");
    for (const auto* r : rs)
        os << "<circle cx=\"" << f.px(r->aggregate.align) << "\" cy=\"" << f.py(std::clamp(r->aggregate.sim, 0.0, 1.0))
           << "\" r=\"4\" fill=\"" << kPalette[colors[r->method]] << "\" fill-opacity=\"0.7\"><title>" << r->id << ' '
           << r->method << "</title></circle>\n";
    // Pareto frontier: no other record has both lower sim and higher alignment.
    std::vector<const ExperimentRecord*> front;
    for (const auto* a : rs) {
        bool dominated = false;
        for (const auto* b : rs)
            if (b != a && b->aggregate.sim <= a->aggregate.sim && b->aggregate.align >= a->aggregate.align &&
                (b->aggregate.sim < a->aggregate.sim || b->aggregate.align > a->aggregate.align))
                dominated = true;
        if (!dominated) front.push_back(a);
    }
    std::sort(front.begin(), front.end(),
              [](const auto* a, const auto* b) { return a->aggregate.align < b->aggregate.align; });
    if (!front.empty()) {
        os << "<polyline fill=\"none\" stroke=\"black\" stroke-dasharray=\"4 3\" points=\"";
        for (const auto* r : front) os << f.px(r->aggregate.align) << ',' << f.py(std::clamp(r->aggregate.sim, 0.0, 1.0)) << ' ';
        os << "\"/>\n";
    }
    double ly = Frame::T + 6;
    for (const auto& [m, c] : colors) {
        os << "<rect x=\"" << Frame::W - 150 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << kPalette[c]
           << "\"/><text x=\"" << Frame::W - 134 << "\" y=\"" << ly + 9 << "\">" << m << "</text>\n";
        ly += 16;
    }
    os << "</svg>\n";
    return os.str();
}

std::string series_svg(const std::string& title, const std::vector<std::pair<std::string, MassSeries>>& series) {
    double x1 = 1.0, y1 = 0.0;
    for (const auto& [name, s] : series) {
        for (int st : s.steps) x1 = std::max(x1, static_cast<double>(st));
        for (double v : s.values) y1 = std::max(y1, v);
    }
    const Frame f = fit(0.0, x1, 0.0, y1 > 0.0 ? y1 * 1.05 : 1.0);
    std::ostringstream os;
    os.precision(5);
    os << svg_open(f, title, "denoising step", "attention mass");
    double ly = Frame::T + 6;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& [name, s] = series[i];
        const char* color = kPalette[i % std::size(kPalette)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t j = 0; j < s.values.size(); ++j) os << f.px(s.steps[j]) << ',' << f.py(s.values[j]) << ' ';
        os << "\"/>\n<rect x=\"" << Frame::W - 150 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << color
           << "\"/><text x=\"" << Frame::W - 134 << "\" y=\"" << ly + 9 << "\">" << name << "</text>\n";
        ly += 16;
    }
    os << "</svg>\n";
    return os.str();
}

std::string token_distribution_svg(const std::string& title, const std::vector<double>& mass_by_position) {
    double y1 = 0.0;
    for (std::size_t i = 1; i < mass_by_position.size(); ++i) y1 = std::max(y1, mass_by_position[i]);
    const double n = static_cast<double>(std::max<std::size_t>(mass_by_position.size(), 2));
    const Frame f = fit(0.5, n - 0.5, 0.0, y1 > 0.0 ? y1 * 1.05 : 1.0);
    std::ostringstream os;
    os.precision(5);
    os << svg_open(f, title + " (position 0 excluded)", "token position", "mean attention mass");
    const double w = (f.px(1.0) - f.px(0.0)) * 0.7;
    for (std::size_t i = 1; i < mass_by_position.size(); ++i) {
        const double x = f.px(static_cast<double>(i));
        os << "<rect x=\"" << x - w / 2 << "\" y=\"" << f.py(mass_by_position[i]) << "\" width=\"" << w << "\" height=\""
           << f.py(0.0) - f.py(mass_by_position[i]) << "\" fill=\"" << kPalette[0] << "\"/>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace memguard
