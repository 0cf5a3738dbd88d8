#pragma once

#include "memguard/attention.hpp"
#include "memguard/backbone.hpp"
#include "memguard/schedule.hpp"
#include "memguard/text.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace memguard {

inline constexpr int kCheckpointSchemaVersion = 1;

nlohmann::json to_json(const Geometry& g);
Geometry geometry_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Everything needed to sample from a trained model.
struct Checkpoint {
    DenoiserParams params;
    NoiseSchedule schedule;
    std::vector<std::string> vocabulary;  // content words; specials are implicit
    std::uint64_t seed = 0;
    TrainConfig train_config;
    double final_loss = 0.0;
    nlohmann::json extra = nlohmann::json::object();  // free-form provenance (dataset spec etc.)

    Vocabulary vocab() const { return Vocabulary(vocabulary); }
};

// Arrays go to `path` (HDF5), metadata to `path + ".json"`. Parameters round-trip bit-exactly.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Trace archive: arrays keyed "step{t}/block{b}/layer{l}/head{h}/{logits|weights}" where b is the
// block index (0 down, 1 mid, 2 up), metadata in `path + ".json"`.
std::string trace_key(int step, const AttentionSite& site, const std::string& leaf);
void save_trace(const AttentionTrace& trace, const nlohmann::json& metadata, const std::string& path);

struct LoadedTrace {
    AttentionTrace trace;
    nlohmann::json metadata;
};
LoadedTrace load_trace(const std::string& path);

}  // namespace memguard
