#include "memguard/checkpoint.hpp"

#include "memguard/archive.hpp"
#include "memguard/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <regex>
#include <tuple>

namespace memguard {

using nlohmann::json;

json to_json(const Geometry& g) {
    return {{"channels", g.channels}, {"text_dim", g.text_dim}, {"d_k", g.d_k},
            {"heads", g.heads},       {"time_dim", g.time_dim}, {"vocab_size", g.vocab_size}};
}

Geometry geometry_from_json(const json& j) {
    Geometry g;
    g.channels = j.value("channels", g.channels);
    g.text_dim = j.value("text_dim", g.text_dim);
    g.d_k = j.value("d_k", g.d_k);
    g.heads = j.value("heads", g.heads);
    g.time_dim = j.value("time_dim", g.time_dim);
    g.vocab_size = j.value("vocab_size", g.vocab_size);
    if (g.channels <= 0 || g.text_dim <= 0 || g.d_k <= 0 || g.heads <= 0 || g.time_dim <= 0)
        throw ConfigError("geometry: all widths must be positive");
    return g;
}

json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"lr_schedule", c.lr_schedule},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"cfg_dropout", c.cfg_dropout},
            {"target_loss", c.target_loss},
            {"log_every", c.log_every}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.cfg_dropout = j.value("cfg_dropout", c.cfg_dropout);
    c.target_loss = j.value("target_loss", c.target_loss);
    c.log_every = j.value("log_every", c.log_every);
    if (c.epochs < 0 || c.batch_size <= 0 || !(c.learning_rate > 0.0))
        throw ConfigError("train config: epochs >= 0, batch_size > 0 and learning_rate > 0 required");
    if (c.lr_schedule != "cosine" && c.lr_schedule != "constant")
        throw ConfigError("train config: unknown lr_schedule '" + c.lr_schedule + "'");
    if (c.cfg_dropout < 0.0 || c.cfg_dropout >= 1.0) throw ConfigError("train config: cfg_dropout must be in [0, 1)");
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    ArrayMap arrays;
    for (const auto& [name, var] : ckpt.params.entries()) arrays.emplace("params/" + name, to_array(var->value));
    NumericArray betas({ckpt.schedule.betas.size()});
    betas.data = ckpt.schedule.betas;
    arrays.emplace("schedule/betas", std::move(betas));
    write_archive(path, arrays);

    json names = json::array();
    for (const auto& [name, var] : ckpt.params.entries()) names.push_back(name);
    json meta = {{"schema_version", kCheckpointSchemaVersion},
                 {"geometry", to_json(ckpt.params.geometry)},
                 {"schedule", {{"T", ckpt.schedule.T()}, {"kind", "betas stored in archive"}}},
                 {"seed", ckpt.seed},
                 {"train_config", to_json(ckpt.train_config)},
                 {"final_loss", ckpt.final_loss},
                 {"vocabulary", ckpt.vocabulary},
                 {"parameters", names},
                 {"extra", ckpt.extra}};
    write_text_file_atomic(path + ".json", meta.dump(2));
}

Checkpoint load_checkpoint(const std::string& path) {
    json meta;
    try {
        meta = json::parse(read_text_file(path + ".json"));
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint sidecar " + path + ".json: " + e.what());
    }
    if (meta.value("schema_version", 0) != kCheckpointSchemaVersion)
        throw IoError("unsupported checkpoint schema in " + path + ".json");
    ArrayMap arrays = read_archive(path);

    Checkpoint ckpt;
    ckpt.vocabulary = meta.at("vocabulary").get<std::vector<std::string>>();
    ckpt.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.train_config = train_config_from_json(meta.at("train_config"));
    ckpt.final_loss = meta.value("final_loss", 0.0);
    ckpt.extra = meta.value("extra", json::object());

    const Geometry g = geometry_from_json(meta.at("geometry"));
    // Fresh parameters give the canonical names, order and shapes; values are then replaced.
    ckpt.params = init_params(g, 0);
    for (const auto& [name, var] : ckpt.params.entries()) {
        auto it = arrays.find("params/" + name);
        if (it == arrays.end()) throw IoError("checkpoint " + path + " lacks parameter '" + name + "'");
        Mat m = to_mat(it->second);
        if (m.rows() != var->value.rows() || m.cols() != var->value.cols())
            throw IoError("checkpoint parameter '" + name + "' has shape " + it->second.shape_string());
        var->value = std::move(m);
    }
    auto b = arrays.find("schedule/betas");
    if (b == arrays.end()) throw IoError("checkpoint " + path + " lacks schedule/betas");
    ckpt.schedule = NoiseSchedule::from_betas(b->second.data);
    return ckpt;
}

std::string trace_key(int step, const AttentionSite& site, const std::string& leaf) {
    return "step" + std::to_string(step) + "/block" + std::to_string(static_cast<int>(site.block)) + "/layer" +
           std::to_string(site.layer) + "/head" + std::to_string(site.head) + "/" + leaf;
}

void save_trace(const AttentionTrace& trace, const json& metadata, const std::string& path) {
    ArrayMap arrays;
    json grids = json::array();
    for (const TraceEntry& e : trace.entries) {
        arrays.emplace(trace_key(e.step, e.site, "logits"), to_array(e.logits));
        arrays.emplace(trace_key(e.step, e.site, "weights"), to_array(e.weights));
        grids.push_back({{"step", e.step},
                         {"block", to_string(e.site.block)},
                         {"layer", e.site.layer},
                         {"head", e.site.head},
                         {"grid", {e.grid_h, e.grid_w}}});
    }
    write_archive(path, arrays);
    json meta = {{"schema_version", 1},
                 {"key_pattern", "step{t}/block{b}/layer{l}/head{h}/{logits|weights}"},
                 {"block_index", {{"0", "down"}, {"1", "mid"}, {"2", "up"}}},
                 {"entries", grids},
                 {"run", metadata}};
    write_text_file_atomic(path + ".json", meta.dump(2));
}

LoadedTrace load_trace(const std::string& path) {
    ArrayMap arrays = read_archive(path);
    LoadedTrace out;
    json meta;
    try {
        meta = json::parse(read_text_file(path + ".json"));
    } catch (const json::exception& e) {
        throw IoError("malformed trace sidecar " + path + ".json: " + e.what());
    }
    out.metadata = meta.value("run", json::object());
    std::map<std::tuple<int, AttentionSite>, std::pair<int, int>> grids;
    for (const auto& e : meta.value("entries", json::array())) {
        AttentionSite s{parse_block(e.at("block")), e.at("layer"), e.at("head")};
        grids[{e.at("step").get<int>(), s}] = {e.at("grid")[0].get<int>(), e.at("grid")[1].get<int>()};
    }

    static const std::regex key(R"(step(\d+)/block(\d)/layer(\d+)/head(\d+)/weights)");
    for (const auto& [name, array] : arrays) {
        std::smatch m;
        if (!std::regex_match(name, m, key)) continue;
        const int b = std::stoi(m[2]);
        if (b < 0 || b > 2) throw IoError("trace key with unknown block index: " + name);
        TraceEntry e;
        e.step = std::stoi(m[1]);
        e.site = AttentionSite{static_cast<Block>(b), std::stoi(m[3]), std::stoi(m[4])};
        e.weights = to_mat(array);
        auto lg = arrays.find(trace_key(e.step, e.site, "logits"));
        e.logits = lg != arrays.end() ? to_mat(lg->second) : Mat();
        auto g = grids.find({e.step, e.site});
        if (g != grids.end()) {
            e.grid_h = g->second.first;
            e.grid_w = g->second.second;
        } else {
            const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(e.weights.rows()))));
            e.grid_h = side;
            e.grid_w = side;
        }
        out.trace.entries.push_back(std::move(e));
    }
    std::sort(out.trace.entries.begin(), out.trace.entries.end(), [](const TraceEntry& a, const TraceEntry& b) {
        return std::tie(a.step, a.site) < std::tie(b.step, b.site);
    });
    return out;
}

}  // namespace memguard
