// memguard: train, generate, analyze, sweep, select, report.

#include "memguard/archive.hpp"
#include "memguard/checkpoint.hpp"
#include "memguard/errors.hpp"
#include "memguard/harness.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

using namespace memguard;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    int workers = 1;
};

ExperimentConfig load_config(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
    if (c.seed) {
        cfg.dataset.seed = *c.seed;
        cfg.guidance.seed = *c.seed;
    }
    return cfg;
}

void ensure_dir(const std::string& d) { fs::create_directories(d); }

int cmd_train(const Common& c) {
    ExperimentConfig cfg = load_config(c);
    const std::uint64_t seed = c.seed.value_or(cfg.dataset.seed);
    ensure_dir(c.out);
    const ToyDataset ds = make_dataset(cfg.dataset);
    save_dataset(ds, c.out + "/dataset.h5", c.out + "/dataset.json");
    const Vocabulary vocab = ToyLexicon::standard().vocabulary();
    Geometry g = cfg.model.geometry;
    g.vocab_size = vocab.size();
    const NoiseSchedule schedule = cfg.model.schedule();
    const auto pairs = ds.training_pairs(vocab);
    std::cerr << "training on " << pairs.size() << " pairs for " << cfg.model.train.iterations(pairs.size())
              << " iterations\n";
    TrainingLog log;
    DenoiserParams params = train(pairs, g, schedule, cfg.model.train, seed, &log, [](int it, int total, double loss) {
        std::cerr << "  iter " << it << "/" << total << "  loss " << loss << "\n";
    });
    Checkpoint ckpt{std::move(params), schedule, vocab.content_words(), seed, cfg.model.train, log.final_loss};
    ckpt.extra = {{"dataset", to_json(cfg.dataset)}, {"config", to_json(cfg)}, {"train_seconds", log.seconds}};
    save_checkpoint(ckpt, c.out + "/checkpoint.h5");
    std::string curve = "iteration,smoothed_loss\n";
    for (const auto& [it, loss] : log.curve) curve += std::to_string(it) + "," + std::to_string(loss) + "\n";
    write_text_file(c.out + "/training_curve.csv", curve);
    std::cout << "checkpoint " << c.out << "/checkpoint.h5  final loss " << log.final_loss << "  (" << log.seconds
              << " s)\n";
    return 0;
}

struct GenerateArgs {
    std::string checkpoint;
    std::string prompt;
    std::string method;
    std::optional<double> s, r, tau, alpha;
    bool trace = false;
};

int cmd_generate(const Common& c, const GenerateArgs& a) {
    ExperimentConfig cfg = load_config(c);
    const Lab lab = load_lab(a.checkpoint);
    GuidanceConfig gc = cfg.guidance;
    if (!a.method.empty()) {
        SweepSpec one;
        one.taus = {a.tau.value_or(gc.tau)};
        one.alphas = {a.alpha.value_or(gc.attenuation.alpha)};
        one.rs = {a.r.value_or(gc.r > 0 ? gc.r : 1.0)};
        one.steps = {gc.steps};
        one.scales = {a.s.value_or(gc.s)};
        one.samplers = {gc.sampler};
        one.guidance_schedules = {gc.guidance_schedule};
        one.rta_k = {gc.baseline.rta_k};
        one.wen_gamma = {gc.baseline.wen_gamma};
        one.ren_bot_boost = {gc.baseline.ren_bot_boost};
        gc = one.points(a.method, gc).front();
    } else {
        if (a.s) gc.s = *a.s;
        if (a.r) gc.r = *a.r;
        if (a.tau) gc.tau = *a.tau;
        if (a.alpha) gc.attenuation.alpha = *a.alpha;
    }
    gc.record_trace = a.trace;
    gc.validate();
    ensure_dir(c.out);
    Generation gen = lab.run(a.prompt, gc);
    gen.report.metrics = lab.score(gen.image, a.prompt);
    write_text_file(c.out + "/image.ppm", to_ppm(gen.image));
    write_archive(c.out + "/image.h5", {{"image", gen.image.pixels}});
    write_text_file(c.out + "/report.json", gen.report.to_json().dump(2));
    if (a.trace) {
        PromptTokens tokens = tokenize(gen.report.effective_prompt, lab.vocab());
        save_trace(gen.trace,
                   {{"prompt", a.prompt}, {"seed", gc.seed}, {"config", to_json(gc)}, {"eot_pos", tokens.eot_pos},
                    {"steps", gc.steps}, {"tokens", gen.report.token_strings}},
                   c.out + "/trace.h5");
    }
    std::cout << "method " << method_label(gc) << "  sim " << gen.report.metrics->sim << "  align "
              << gen.report.metrics->align << "  wen " << wen_signal(gen.report) << "\n";
    return 0;
}

int cmd_analyze(const Common& c, const std::string& trace_path, int token_arg) {
    ExperimentConfig cfg = load_config(c);
    const LoadedTrace lt = load_trace(trace_path);
    const int token = token_arg >= 0 ? token_arg : lt.metadata.value("eot_pos", -1);
    if (token < 0) throw ConfigError("trace metadata has no eot_pos; pass --token");
    const int expected = lt.metadata.value("steps", -1);
    const int heads = lt.trace.entries.empty() ? 1 : [&] {
        int h = 0;
        for (const auto& e : lt.trace.entries) h = std::max(h, e.site.head + 1);
        return h;
    }();
    const SitePolicy policy = SitePolicy::blocks(cfg.guidance.detection_blocks, heads);
    const MassSeries ca = ca_mass_trajectory(lt.trace, token, policy, expected);
    const BlockMass bm = block_mass_trajectory(lt.trace, token, expected);
    for (const auto& w : ca.warnings) std::cerr << "warning: " << w << "\n";

    ensure_dir(c.out);
    std::string csv = "step,detector_mass,all_blocks,down,mid,up\n";
    for (std::size_t i = 0; i < ca.steps.size(); ++i)
        csv += std::to_string(ca.steps[i]) + "," + std::to_string(ca.values[i]) + "," + std::to_string(bm.all.values[i]) +
               "," + std::to_string(bm.blocks.at(Block::down).values[i]) + "," +
               std::to_string(bm.blocks.at(Block::mid).values[i]) + "," +
               std::to_string(bm.blocks.at(Block::up).values[i]) + "\n";
    write_text_file(c.out + "/mass.csv", csv);
    write_text_file(c.out + "/token_mass.svg", series_svg("token " + std::to_string(token) + " mass", {{"M", ca}}));
    write_text_file(c.out + "/block_mass.svg",
                    series_svg("per-block mass", {{"down", bm.blocks.at(Block::down)},
                                                  {"mid", bm.blocks.at(Block::mid)},
                                                  {"up", bm.blocks.at(Block::up)}}));
    std::vector<double> by_pos(kMaxTokens, 0.0);
    const auto steps = lt.trace.steps();
    for (int p = 0; p < kMaxTokens; ++p) {
        const MassSeries s = ca_mass_trajectory(lt.trace, p, policy);
        for (double v : s.values) by_pos[static_cast<std::size_t>(p)] += v / static_cast<double>(steps.size());
    }
    write_text_file(c.out + "/token_distribution.svg", token_distribution_svg("mean max-mass per token", by_pos));
    std::cout << "wrote " << c.out << "/mass.csv and plots for token " << token << " over " << ca.steps.size()
              << " steps\n";
    return 0;
}

int cmd_sweep(const Common& c, const std::string& checkpoint) {
    ExperimentConfig cfg = load_config(c);
    const Lab lab = load_lab(checkpoint);
    const RecordStore store(c.out + "/records");
    const auto ids = run_sweep(lab, cfg.sweep, cfg.guidance, store, c.workers, [](const SweepProgress& p) {
        std::cerr << "  " << p.done << "/" << p.total << (p.skipped ? " (" + std::to_string(p.skipped) + " cached)" : "")
                  << "\n";
    });
    std::cout << ids.size() << " records in " << store.dir() << "\n";
    return 0;
}

int cmd_select(const Common& c, const std::string& records_dir, const std::string& setting,
               const std::string& objective) {
    ExperimentConfig cfg = load_config(c);
    SelectionRule rule = cfg.selection;
    if (!objective.empty()) rule.objective = parse_objective(objective);
    const RecordStore store(records_dir);
    std::vector<ExperimentRecord> pool;
    for (auto& r : store.all())
        if (r.setting == setting) pool.push_back(std::move(r));
    const SelectionResult res = run_selection(pool, rule);
    json out = {{"setting", setting},
                {"objective", to_string(rule.objective)},
                {"reference_align", res.reference_align},
                {"floor", res.floor},
                {"feasible", res.feasible},
                {"message", res.message}};
    out["chosen"] = res.chosen ? res.chosen->to_json() : json(nullptr);
    ensure_dir(c.out);
    write_text_file(c.out + "/selection_" + setting + "_" + to_string(rule.objective) + ".json", out.dump(2));
    std::cout << res.message << "\n";
    return res.chosen ? 0 : 3;
}

int cmd_report(const Common& c, const std::string& records_dir) {
    const RecordStore store(records_dir);
    const auto records = store.all();
    ensure_dir(c.out);
    write_text_file(c.out + "/records.csv", records_csv(records));
    std::set<std::string> settings;
    for (const auto& r : records) settings.insert(r.setting);
    for (const auto& s : settings) write_text_file(c.out + "/frontier_" + s + ".svg", frontier_svg(records, s));
    std::cout << records.size() << " records, " << settings.size() << " settings -> " << c.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Memorization laboratory for a toy text-to-image diffusion model"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "JSON experiment config");
        sub->add_option("--seed", common.seed, "Seed for every random component");
        sub->add_option("--out", common.out, "Output directory");
        sub->add_option("--workers", common.workers, "Parallel sweep workers")->check(CLI::PositiveNumber);
    };

    auto* train = app.add_subcommand("train", "Build the dataset and train a checkpoint");
    add_common(train);

    GenerateArgs gen;
    auto* generate = app.add_subcommand("generate", "Sample one image with a report");
    add_common(generate);
    generate->add_option("--checkpoint", gen.checkpoint)->required();
    generate->add_option("--prompt", gen.prompt)->required();
    generate->add_option("--method", gen.method, "none|ca|guard|rta|wen_scale|ren_mask|semantic_guard");
    generate->add_option("--s", gen.s);
    generate->add_option("--r", gen.r);
    generate->add_option("--tau", gen.tau);
    generate->add_option("--alpha", gen.alpha);
    generate->add_flag("--trace", gen.trace, "Write the negative-stream attention trace");

    std::string trace_path;
    int token = -1;
    auto* analyze = app.add_subcommand("analyze", "Attention-mass trajectories and plots from a trace archive");
    add_common(analyze);
    analyze->add_option("--trace", trace_path)->required();
    analyze->add_option("--token", token, "Token position (default: EOT)");

    std::string checkpoint;
    auto* sweep = app.add_subcommand("sweep", "Evaluate every sweep point, skipping stored records");
    add_common(sweep);
    sweep->add_option("--checkpoint", checkpoint)->required();

    std::string records, setting = "verbatim", objective;
    auto* select = app.add_subcommand("select", "Apply the selection rule to stored records");
    add_common(select);
    select->add_option("--records", records)->required();
    select->add_option("--setting", setting);
    select->add_option("--objective", objective, "best-sim|best-align|best-dist");

    auto* report = app.add_subcommand("report", "CSV tables and frontier plots from stored records");
    add_common(report);
    report->add_option("--records", records)->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (train->parsed()) return cmd_train(common);
        if (generate->parsed()) return cmd_generate(common, gen);
        if (analyze->parsed()) return cmd_analyze(common, trace_path, token);
        if (sweep->parsed()) return cmd_sweep(common, checkpoint);
        if (select->parsed()) return cmd_select(common, records, setting, objective);
        if (report->parsed()) return cmd_report(common, records);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
