#include "memguard/guidance.hpp"

#include "memguard/errors.hpp"
#include "memguard/rng.hpp"

#include <algorithm>
#include <cmath>

namespace memguard {

using nlohmann::json;

std::string to_string(SamplerKind k) { return k == SamplerKind::ddim ? "ddim" : "ancestral"; }

SamplerKind parse_sampler(const std::string& s) {
    if (s == "ddim") return SamplerKind::ddim;
    if (s == "ancestral") return SamplerKind::ancestral;
    throw ConfigError("unknown sampler '" + s + "'");
}

void GuidanceConfig::validate() const {
    if (!std::isfinite(s)) throw ConfigError("guidance scale s must be finite");
    if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("repulsion scale r must be finite and >= 0");
    if (std::isnan(tau)) throw ConfigError("tau must not be NaN");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (detection_blocks.empty()) throw ConfigError("detection needs at least one block");
    if (clip_x0 && !(*clip_x0 > 0.0)) throw ConfigError("clip_x0 must be positive");
    attenuation.validate();
    baseline.validate();
    const auto m = baseline.method;
    if (m != BaselineMethod::none && attenuation.alpha != 1.0)
        throw ConfigError("baseline '" + memguard::to_string(m) + "' runs alone: set attenuation alpha to 1");
    if ((m == BaselineMethod::rta || m == BaselineMethod::wen_scale || m == BaselineMethod::ren_mask) && r != 0.0)
        throw ConfigError("baseline '" + memguard::to_string(m) + "' runs alone: set r to 0");
}

GuidanceConfig GuidanceConfig::cfg(double s, int steps, std::uint64_t seed) {
    GuidanceConfig c;
    c.s = s;
    c.r = 0.0;
    c.tau = std::numeric_limits<double>::infinity();
    c.attenuation.alpha = 1.0;
    c.steps = steps;
    c.seed = seed;
    return c;
}

namespace {

json number_or_inf(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

double read_number(const json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        throw ConfigError("expected a number, got '" + s + "'");
    }
    return j.get<double>();
}

json blocks_json(const std::vector<Block>& bs) {
    json a = json::array();
    for (Block b : bs) a.push_back(to_string(b));
    return a;
}

std::vector<Block> blocks_from(const json& j) {
    std::vector<Block> out;
    for (const auto& b : j) out.push_back(parse_block(b.get<std::string>()));
    return out;
}

}  // namespace

json to_json(const GuidanceConfig& c) {
    json j{
        {"s", c.s},
        {"r", c.r},
        {"tau", number_or_inf(c.tau)},
        {"attenuation",
         {{"alpha", c.attenuation.alpha},
          {"blocks", blocks_json(c.attenuation.blocks)},
          {"head_mode", to_string(c.attenuation.head_mode)},
          {"head_fraction", c.attenuation.head_fraction},
          {"step_mode", to_string(c.attenuation.step_mode)}}},
        {"detection_blocks", blocks_json(c.detection_blocks)},
        {"include_eot_floor", c.include_eot_floor},
        {"steps", c.steps},
        {"sampler", to_string(c.sampler)},
        {"guidance_schedule", to_string(c.guidance_schedule)},
        {"clip_x0", c.clip_x0 ? json(*c.clip_x0) : json(nullptr)},
        {"seed", c.seed},
        {"record_trace", c.record_trace},
        {"record_trajectory", c.record_trajectory},
        {"baseline",
         {{"method", to_string(c.baseline.method)},
          {"rta_k", c.baseline.rta_k},
          {"wen_gamma", c.baseline.wen_gamma},
          {"ren_bot_boost", c.baseline.ren_bot_boost},
          {"paraphrase", c.baseline.paraphrase}}},
    };
    return j;
}

GuidanceConfig guidance_from_json(const json& j) {
    GuidanceConfig c;
    try {
        if (j.contains("s")) c.s = j.at("s").get<double>();
        if (j.contains("r")) c.r = j.at("r").get<double>();
        if (j.contains("tau")) c.tau = read_number(j.at("tau"));
        if (j.contains("attenuation")) {
            const auto& a = j.at("attenuation");
            if (a.contains("alpha")) c.attenuation.alpha = a.at("alpha").get<double>();
            if (a.contains("blocks")) c.attenuation.blocks = blocks_from(a.at("blocks"));
            if (a.contains("head_mode")) c.attenuation.head_mode = parse_head_mode(a.at("head_mode"));
            if (a.contains("head_fraction")) c.attenuation.head_fraction = a.at("head_fraction").get<double>();
            if (a.contains("step_mode")) c.attenuation.step_mode = parse_step_mode(a.at("step_mode"));
        }
        if (j.contains("detection_blocks")) c.detection_blocks = blocks_from(j.at("detection_blocks"));
        if (j.contains("include_eot_floor")) c.include_eot_floor = j.at("include_eot_floor").get<bool>();
        if (j.contains("steps")) c.steps = j.at("steps").get<int>();
        if (j.contains("sampler")) c.sampler = parse_sampler(j.at("sampler"));
        if (j.contains("guidance_schedule")) c.guidance_schedule = parse_step_mode(j.at("guidance_schedule"));
        if (j.contains("clip_x0"))
            c.clip_x0 = j.at("clip_x0").is_null() ? std::nullopt : std::optional<double>(j.at("clip_x0").get<double>());
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("record_trace")) c.record_trace = j.at("record_trace").get<bool>();
        if (j.contains("record_trajectory")) c.record_trajectory = j.at("record_trajectory").get<bool>();
        if (j.contains("baseline")) {
            const auto& b = j.at("baseline");
            if (b.contains("method")) c.baseline.method = parse_baseline_method(b.at("method"));
            if (b.contains("rta_k")) c.baseline.rta_k = b.at("rta_k").get<int>();
            if (b.contains("wen_gamma")) c.baseline.wen_gamma = b.at("wen_gamma").get<double>();
            if (b.contains("ren_bot_boost")) c.baseline.ren_bot_boost = b.at("ren_bot_boost").get<double>();
            if (b.contains("paraphrase"))
                c.baseline.paraphrase = b.at("paraphrase").get<std::map<std::string, std::string>>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid guidance section: ") + e.what());
    }
    c.validate();
    return c;
}

NumericArray cfg_compose(const NumericArray& eps_uncond, const NumericArray& eps_cond, double s) {
    NumericArray::require_same_shape(eps_uncond, eps_cond, "cfg_compose");
    if (s == 1.0) return eps_cond;
    NumericArray out = eps_uncond;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + s * (eps_cond[i] - eps_uncond[i]);
    return out;
}

NumericArray guard_compose(const NumericArray& eps_uncond, const NumericArray& eps_pos, const NumericArray& eps_neg,
                           double s, double r) {
    NumericArray::require_same_shape(eps_uncond, eps_pos, "guard_compose");
    NumericArray::require_same_shape(eps_uncond, eps_neg, "guard_compose");
    if (r == 0.0) return cfg_compose(eps_uncond, eps_pos, s);
    NumericArray out = eps_uncond;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double d = s * (eps_pos[i] - eps_uncond[i]) - r * (eps_neg[i] - eps_uncond[i]);
        out[i] = eps_uncond[i] + d;
    }
    return out;
}

ThreeStreamPrediction predict_three_stream(const DenoiserParams& params, const NumericArray& x_t, int t,
                                           const TextEmbedding& e_null, const TextEmbedding& e_p,
                                           const LogitInterceptor* pos_interceptor, int step, bool record_neg) {
    TraceRecorder rec;
    std::vector<DenoiserInput> rows{
        {x_t, t, &e_null, {}, step},
        {x_t, t, &e_p, {nullptr, record_neg ? &rec : nullptr}, step},
        {x_t, t, &e_p, {pos_interceptor, nullptr}, step},
    };
    auto out = predict_noise_batch(params, rows);
    return {std::move(out[0]), std::move(out[1]), std::move(out[2]), std::move(rec.trace)};
}

namespace {

double scaled(double v, double factor) { return factor == 1.0 ? v : v * factor; }

SitePolicy attenuation_sites(const GuidanceConfig& config, const DenoiserParams& params, const AttentionTrace& trace,
                             const SpikeSet& spikes) {
    const SitePolicy all = SitePolicy::blocks(config.attenuation.blocks, params.geometry.heads);
    if (config.attenuation.head_mode == HeadMode::all_heads) return all;
    std::vector<const TraceEntry*> entries;
    for (const auto& e : trace.entries)
        if (all.contains(e.site)) entries.push_back(&e);
    return select_heads(head_hotness(entries, spikes.strongest()), config.attenuation.head_fraction);
}

}  // namespace

StepResult guard_denoise_step(const StepContext& ctx, const NumericArray& x_t, int step, int t, int t_prev,
                              const GuidanceConfig& config) {
    if (!ctx.params || !ctx.schedule || !ctx.e_null || !ctx.e_p) throw ArgumentError("guard_denoise_step: incomplete context");
    const DenoiserParams& params = *ctx.params;
    const auto method = config.baseline.method;
    const TextEmbedding* e_pos = ctx.e_pos ? ctx.e_pos : ctx.e_p;
    StepResult res;
    StepDiagnostics& d = res.diag;
    d.step = step;
    d.t = t;
    const double g = step_gate(step, config.steps, config.guidance_schedule);
    d.s_eff = scaled(config.s, g);
    d.r_eff = scaled(config.r, g);
    d.gate = step_gate(step, config.steps, config.attenuation.step_mode);

    // Pass 1: unconditional and memorized-conditional streams, negative trace recorded.
    TraceRecorder rec;
    std::vector<DenoiserInput> rows{
        {x_t, t, ctx.e_null, {}, step},
        {x_t, t, ctx.e_p, {ctx.cond_interceptor, &rec}, step},
    };
    const bool semantic = method == BaselineMethod::semantic_guard;
    if (semantic) rows.push_back({x_t, t, e_pos, {}, step});
    auto out = predict_noise_batch(params, rows);
    d.backbone_rows = static_cast<int>(rows.size());
    const NumericArray& eps_u = out[0];
    const NumericArray& eps_n = out[1];

    const SitePolicy detect_sites = SitePolicy::blocks(config.detection_blocks, params.geometry.heads);
    const auto entries = rec.trace.at_step(step);
    const TokenMassProfile mass = token_max_mass(entries, detect_sites);
    d.token_mass = mass.M;
    DetectOptions opts;
    opts.include_eot_floor = config.include_eot_floor;
    opts.eot_pos = ctx.tokens ? ctx.tokens->eot_pos : -1;
    res.spikes = detect_from_mass(mass, config.tau, opts, step);

    // Pass 2: the attenuated positive stream, only when it can differ from the negative one.
    NumericArray eps_p;
    const bool attenuate = method == BaselineMethod::none && config.attenuation.alpha != 1.0 && d.gate != 0.0 &&
                           !res.spikes.empty();
    if (attenuate) {
        const SitePolicy sites = attenuation_sites(config, params, rec.trace, res.spikes);
        d.attenuated_sites.assign(sites.sites().begin(), sites.sites().end());
        AttenuationInterceptor icpt(res.spikes, config.attenuation.alpha, d.gate, sites);
        eps_p = std::move(predict_noise_batch(params, {{x_t, t, e_pos, {&icpt, nullptr}, step}})[0]);
        d.backbone_rows += 1;
        d.positive_pass = true;
    } else {
        eps_p = semantic ? out[2] : eps_n;
    }

    d.norm_uncond = eps_u.norm();
    d.norm_neg = eps_n.norm();
    d.norm_pos = eps_p.norm();
    NumericArray diff = eps_n;
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= eps_u[i];
    d.wen = diff.norm();

    const NumericArray eps = method == BaselineMethod::wen_scale
                                 ? wen_scale_compose(eps_u, eps_n, d.s_eff, config.baseline.wen_gamma)
                                 : guard_compose(eps_u, eps_p, eps_n, d.s_eff, d.r_eff);
    if (config.sampler == SamplerKind::ddim) {
        res.x_prev = ddim_step(x_t, eps, t, t_prev, *ctx.schedule, config.clip_x0);
    } else {
        if (!ctx.noise) throw ArgumentError("ancestral sampler needs a noise generator");
        res.x_prev = ancestral_step(x_t, eps, t, t_prev, *ctx.schedule, *ctx.noise, config.clip_x0);
    }
    res.neg_trace = std::move(rec.trace);
    return res;
}

NumericArray initial_latent(std::uint64_t seed) {
    Rng rng(seed);
    NumericArray x({kChannels, kImageSize, kImageSize});
    for (auto& v : x.data) v = rng.normal();
    return x;
}

namespace {

ImageSample clamp_image(const NumericArray& x) {
    NumericArray c = x;
    for (auto& v : c.data) v = std::clamp(v, -1.0, 1.0);
    return ImageSample(std::move(c));
}

}  // namespace

Generation generate(const DenoiserParams& params, const NoiseSchedule& schedule, const Vocabulary& vocab,
                    const std::string& prompt, const GuidanceConfig& config) {
    config.validate();
    const auto method = config.baseline.method;
    PromptTokens tokens = tokenize(prompt, vocab);
    if (method == BaselineMethod::rta) tokens = rta(tokens, config.baseline.rta_k, mix_seed(config.seed, 7), vocab);
    const TextEmbedding e_p = encode(params, tokens);
    const TextEmbedding e_null = encode(params, tokenize("", vocab));
    std::optional<TextEmbedding> e_pos;
    if (method == BaselineMethod::semantic_guard)
        e_pos = semantic_positive(params, prompt, config.baseline.paraphrase, vocab);
    std::unique_ptr<LogitInterceptor> ren;
    if (method == BaselineMethod::ren_mask) ren = ren_mask_interceptor(tokens, config.baseline.ren_bot_boost, params.geometry);

    Rng noise(mix_seed(config.seed, 3));
    StepContext ctx{&params, &schedule, &e_null, &e_p, e_pos ? &*e_pos : nullptr, &tokens, ren.get(), &noise};

    Generation gen;
    RunReport& rep = gen.report;
    rep.prompt = prompt;
    rep.effective_prompt = detokenize(tokens, vocab);
    rep.method = to_string(method);
    rep.config = config;
    for (int id : tokens.ids) rep.token_strings.push_back(vocab.word(id));

    NumericArray x = initial_latent(config.seed);
    const auto ts = inference_timesteps(schedule.T(), config.steps);
    for (int i = 0; i < config.steps; ++i) {
        const int t = ts[static_cast<std::size_t>(i)];
        const int t_prev = i + 1 < config.steps ? ts[static_cast<std::size_t>(i) + 1] : kClean;
        StepResult r = guard_denoise_step(ctx, x, i, t, t_prev, config);
        rep.steps.push_back({std::move(r.diag), std::move(r.spikes)});
        if (config.record_trace)
            for (auto& e : r.neg_trace.entries) gen.trace.entries.push_back(std::move(e));
        x = std::move(r.x_prev);
        if (config.record_trajectory) gen.trajectory.push_back(x);
    }
    gen.image = clamp_image(x);
    return gen;
}

ImageSample cfg_sample(const DenoiserParams& params, const NoiseSchedule& schedule, const Vocabulary& vocab,
                       const std::string& prompt, double s, int steps, std::uint64_t seed,
                       std::optional<double> clip_x0, std::vector<NumericArray>* trajectory) {
    const TextEmbedding e_c = encode(params, tokenize(prompt, vocab));
    const TextEmbedding e_0 = encode(params, tokenize("", vocab));
    NumericArray x = initial_latent(seed);
    const auto ts = inference_timesteps(schedule.T(), steps);
    for (int i = 0; i < steps; ++i) {
        const int t = ts[static_cast<std::size_t>(i)];
        const int t_prev = i + 1 < steps ? ts[static_cast<std::size_t>(i) + 1] : kClean;
        auto out = predict_noise_batch(params, {{x, t, &e_0, {}, i}, {x, t, &e_c, {}, i}});
        x = ddim_step(x, cfg_compose(out[0], out[1], s), t, t_prev, schedule, clip_x0);
        if (trajectory) trajectory->push_back(x);
    }
    return clamp_image(x);
}

// ---- report serialization

json RunReport::to_json() const {
    json steps_j = json::array();
    for (const auto& s : steps) {
        json spikes = json::array();
        for (int p : s.spikes.positions)
            spikes.push_back({{"index", p},
                              {"token", p < static_cast<int>(token_strings.size()) ? token_strings[static_cast<std::size_t>(p)] : ""},
                              {"z", s.spikes.zscores[static_cast<std::size_t>(p)]},
                              {"step", s.spikes.step}});
        json sites = json::array();
        for (const auto& a : s.diag.attenuated_sites) sites.push_back(to_string(a));
        steps_j.push_back({{"step", s.diag.step},
                           {"t", s.diag.t},
                           {"spikes", spikes},
                           {"zscores", s.spikes.zscores},
                           {"tau", number_or_inf(s.spikes.tau)},
                           {"token_mass", s.diag.token_mass},
                           {"norms", {{"uncond", s.diag.norm_uncond}, {"neg", s.diag.norm_neg}, {"pos", s.diag.norm_pos}}},
                           {"wen", s.diag.wen},
                           {"s_eff", s.diag.s_eff},
                           {"r_eff", s.diag.r_eff},
                           {"gate", s.diag.gate},
                           {"backbone_rows", s.diag.backbone_rows},
                           {"positive_pass", s.diag.positive_pass},
                           {"attenuated_sites", sites}});
    }
    json j{{"schema_version", schema_version},
           {"prompt", prompt},
           {"effective_prompt", effective_prompt},
           {"method", method},
           {"tokens", token_strings},
           {"config", memguard::to_json(config)},
           {"steps", steps_j},
           {"metric_definitions",
            {{"sim", "stand-in: max cosine of mean-subtracted pixels against the training images"},
             {"align", "stand-in: fraction of prompt color/shape attributes recovered by a rule-based classifier"},
             {"dist", "stand-in: Frechet distance of a fixed 32-dim random projection, whole set, no interval"},
             {"wen", "mean over steps of ||eps_neg - eps_uncond||"}}}};
    if (metrics) j["metrics"] = {{"sim", metrics->sim}, {"align", metrics->align}, {"dist", metrics->dist}};
    return j;
}

RunReport RunReport::from_json(const json& j) {
    RunReport r;
    try {
        r.schema_version = j.at("schema_version").get<int>();
        if (r.schema_version != kReportSchemaVersion)
            throw IoError("unsupported run report schema " + std::to_string(r.schema_version));
        r.prompt = j.at("prompt");
        r.effective_prompt = j.value("effective_prompt", r.prompt);
        r.method = j.value("method", "none");
        r.token_strings = j.value("tokens", std::vector<std::string>{});
        r.config = guidance_from_json(j.at("config"));
        for (const auto& s : j.at("steps")) {
            StepRecord rec;
            rec.diag.step = s.at("step");
            rec.diag.t = s.at("t");
            rec.diag.wen = s.at("wen");
            rec.diag.token_mass = s.value("token_mass", std::vector<double>{});
            rec.diag.norm_uncond = s.at("norms").at("uncond");
            rec.diag.norm_neg = s.at("norms").at("neg");
            rec.diag.norm_pos = s.at("norms").at("pos");
            rec.diag.s_eff = s.value("s_eff", 0.0);
            rec.diag.r_eff = s.value("r_eff", 0.0);
            rec.diag.gate = s.value("gate", 0.0);
            rec.diag.backbone_rows = s.value("backbone_rows", 0);
            rec.diag.positive_pass = s.value("positive_pass", false);
            for (const auto& a : s.value("attenuated_sites", json::array()))
                rec.diag.attenuated_sites.push_back(parse_site(a.get<std::string>()));
            rec.spikes.step = rec.diag.step;
            rec.spikes.zscores = s.value("zscores", std::vector<double>{});
            rec.spikes.tau = read_number(s.at("tau"));
            for (const auto& p : s.at("spikes")) rec.spikes.positions.push_back(p.at("index"));
            r.steps.push_back(std::move(rec));
        }
        if (j.contains("metrics"))
            r.metrics = MetricsRecord{j["metrics"].at("sim"), j["metrics"].at("align"), j["metrics"].at("dist")};
    } catch (const json::exception& e) {
        throw IoError(std::string("invalid run report: ") + e.what());
    }
    return r;
}

}  // namespace memguard
