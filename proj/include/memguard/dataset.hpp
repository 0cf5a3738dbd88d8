#pragma once

#include "memguard/array.hpp"
#include "memguard/backbone.hpp"
#include "memguard/rng.hpp"
#include "memguard/text.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace memguard {

// Closed toy world: colors, shapes, their synonyms, caption ids, template triggers, fillers.
struct ToyLexicon {
    std::vector<std::string> colors;
    std::vector<std::string> shapes;
    std::map<std::string, std::string> synonyms;  // synonym -> canonical color/shape
    std::vector<std::string> caption_ids;
    std::vector<std::string> triggers;
    std::vector<std::string> fillers;

    static const ToyLexicon& standard();
    Vocabulary vocabulary() const;

    // Canonical color/shape for a word (identity for canonical words), nullopt otherwise.
    std::optional<std::string> color_of(const std::string& w) const;
    std::optional<std::string> shape_of(const std::string& w) const;
    // Inverse synonym table: canonical -> synonym.
    std::map<std::string, std::string> paraphrase_table() const;
    // Palette vector in [-1, 1]^3.
    static std::array<double, 3> palette(const std::string& color);
};

struct ShapeSpec {
    std::string color;
    std::string shape;
    double size = 6.0;
    double cx = 8.0;
    double cy = 8.0;
};

struct RenderStyle {
    double shape_amplitude = 0.7;    // shape pixels = amplitude * palette
    double texture_amplitude = 1.0;  // gray texture drawn uniformly in [-a, a]
};

// Shape over a gray texture (or plain background when `texture` is empty), optional gray border.
ImageSample render(const ShapeSpec& shape, const RenderStyle& style, const std::vector<double>& texture,
                   double background = 0.0, std::optional<double> border = std::nullopt);
std::vector<double> random_texture(Rng& rng, double amplitude);

struct DatasetSpec {
    int base_size = 256;
    int verbatim_prompts = 8;
    int duplication = 64;           // copies per verbatim-memorized pair
    int template_groups = 2;
    int template_variants = 64;     // prompt variants per template group
    int memorized_threshold = 2;    // copy count that marks a prompt memorized
    bool share_caption_ids = true;  // caption ids also appear in base prompts
    double synonym_rate = 0.2;      // chance a base prompt uses a synonym word
    RenderStyle style;
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const DatasetSpec& s);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);  // throws ConfigError

enum class PairKind { base, verbatim, template_member };
std::string to_string(PairKind k);

struct DatasetPair {
    std::string prompt;
    ImageSample image;
    PairKind kind = PairKind::base;
    int template_group = -1;
};

struct TemplateGroup {
    std::string trigger;
    std::string color;
    std::string shape;
    std::vector<std::string> prompts;
};

struct ToyDataset {
    DatasetSpec spec;
    std::vector<DatasetPair> pairs;
    std::map<std::string, int> duplication_map;  // prompt -> copies of its most duplicated image
    std::vector<std::string> memorized_prompts;  // verbatim, in generation order
    std::vector<TemplateGroup> template_groups;

    // Distinct training images (used as the similarity reference set).
    std::vector<ImageSample> unique_images() const;
    std::vector<TrainingPair> training_pairs(const Vocabulary& vocab) const;
    std::vector<std::string> training_prompts() const;
};

ToyDataset make_dataset(const DatasetSpec& spec);

// Non-memorized prompts "color shape filler" absent from the training prompts; one per
// memorized prompt (same color and shape) followed by extra prompts up to `count`.
std::vector<std::string> heldout_prompts(const ToyDataset& ds, int count);

// Image archive (HDF5) plus JSON manifest.
void save_dataset(const ToyDataset& ds, const std::string& archive_path, const std::string& manifest_path);
ToyDataset load_dataset(const std::string& archive_path, const std::string& manifest_path);

}  // namespace memguard
