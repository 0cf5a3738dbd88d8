#include "memguard/dataset.hpp"

#include "memguard/archive.hpp"
#include "memguard/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

namespace memguard {

using nlohmann::json;

const ToyLexicon& ToyLexicon::standard() {
    static const ToyLexicon lex{
        {"red", "green", "blue", "yellow", "purple", "cyan"},
        {"square", "bar", "column"},
        {{"crimson", "red"}, {"emerald", "green"}, {"azure", "blue"}, {"golden", "yellow"},
         {"violet", "purple"}, {"teal", "cyan"}, {"block", "square"}, {"stripe", "bar"}, {"pillar", "column"}},
        {"alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"},
        {"poster", "logo"},
        {"photo", "art", "print", "hd", "vintage", "classic", "new", "free"},
    };
    return lex;
}

Vocabulary ToyLexicon::vocabulary() const {
    std::vector<std::string> w;
    w.insert(w.end(), colors.begin(), colors.end());
    w.insert(w.end(), shapes.begin(), shapes.end());
    for (const auto& [syn, canon] : synonyms) w.push_back(syn);
    w.insert(w.end(), caption_ids.begin(), caption_ids.end());
    w.insert(w.end(), triggers.begin(), triggers.end());
    w.insert(w.end(), fillers.begin(), fillers.end());
    return Vocabulary(w);
}

std::optional<std::string> ToyLexicon::color_of(const std::string& w) const {
    if (std::find(colors.begin(), colors.end(), w) != colors.end()) return w;
    auto it = synonyms.find(w);
    if (it != synonyms.end() && std::find(colors.begin(), colors.end(), it->second) != colors.end()) return it->second;
    return std::nullopt;
}

std::optional<std::string> ToyLexicon::shape_of(const std::string& w) const {
    if (std::find(shapes.begin(), shapes.end(), w) != shapes.end()) return w;
    auto it = synonyms.find(w);
    if (it != synonyms.end() && std::find(shapes.begin(), shapes.end(), it->second) != shapes.end()) return it->second;
    return std::nullopt;
}

std::map<std::string, std::string> ToyLexicon::paraphrase_table() const {
    std::map<std::string, std::string> t;
    for (const auto& [syn, canon] : synonyms) t[canon] = syn;
    return t;
}

std::array<double, 3> ToyLexicon::palette(const std::string& color) {
    static const std::map<std::string, std::array<double, 3>> p{
        {"red", {1, -1, -1}}, {"green", {-1, 1, -1}}, {"blue", {-1, -1, 1}},
        {"yellow", {1, 1, -1}}, {"purple", {1, -1, 1}}, {"cyan", {-1, 1, 1}}};
    auto it = p.find(color);
    if (it == p.end()) throw ArgumentError("unknown color '" + color + "'");
    return it->second;
}

std::vector<double> random_texture(Rng& rng, double amplitude) {
    std::vector<double> t(kImageSize * kImageSize);
    for (auto& v : t) v = rng.uniform(-amplitude, amplitude);
    return t;
}

ImageSample render(const ShapeSpec& s, const RenderStyle& style, const std::vector<double>& texture, double background,
                   std::optional<double> border) {
    if (!texture.empty() && texture.size() != std::size_t(kImageSize * kImageSize))
        throw ArgumentError("render: texture must have 16x16 entries");
    const auto pal = ToyLexicon::palette(s.color);
    const double r = s.size / 2.0;
    double hx = 0, hy = 0;
    if (s.shape == "square") hx = hy = 0.8 * r;
    else if (s.shape == "bar") hx = 1.4 * r, hy = r / 2.8;
    else if (s.shape == "column") hx = r / 2.8, hy = 1.4 * r;
    else throw ArgumentError("unknown shape '" + s.shape + "'");
    ImageSample img;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) {
            const double bg = texture.empty() ? background : texture[y * kImageSize + x];
            const bool inside = std::abs(x + 0.5 - s.cx) <= hx && std::abs(y + 0.5 - s.cy) <= hy;
            const bool edge = border && (x == 0 || y == 0 || x == kImageSize - 1 || y == kImageSize - 1);
            for (int c = 0; c < kChannels; ++c) {
                double v = inside ? style.shape_amplitude * pal[c] : bg;
                if (edge) v = *border;
                img.at(c, y, x) = v;
            }
        }
    return img;
}

void DatasetSpec::validate() const {
    const auto& lex = ToyLexicon::standard();
    if (base_size < 0 || verbatim_prompts < 0 || template_groups < 0) throw ArgumentError("DatasetSpec: negative count");
    if (duplication < 1) throw ArgumentError("DatasetSpec: duplication must be >= 1");
    if (memorized_threshold < 2) throw ArgumentError("DatasetSpec: memorized_threshold must be >= 2");
    if (verbatim_prompts > static_cast<int>(lex.caption_ids.size()))
        throw ArgumentError("DatasetSpec: more verbatim prompts than caption ids");
    if (template_groups > static_cast<int>(lex.triggers.size()))
        throw ArgumentError("DatasetSpec: more template groups than trigger words");
    const int combos = static_cast<int>(lex.colors.size() * lex.shapes.size());
    if (verbatim_prompts + template_groups > combos) throw ArgumentError("DatasetSpec: not enough color/shape combinations");
    if (template_groups > 0 && (template_variants < 1 || template_variants > 73))
        throw ArgumentError("DatasetSpec: template_variants must be in [1, 73]");
    if (synonym_rate < 0.0 || synonym_rate > 1.0) throw ArgumentError("DatasetSpec: synonym_rate outside [0,1]");
    if (base_size + verbatim_prompts * duplication + template_groups * template_variants == 0)
        throw ArgumentError("DatasetSpec: empty dataset");
}

std::string to_string(PairKind k) {
    switch (k) {
        case PairKind::base: return "base";
        case PairKind::verbatim: return "verbatim";
        case PairKind::template_member: return "template";
    }
    return "?";
}

namespace {

PairKind parse_kind(const std::string& s) {
    if (s == "base") return PairKind::base;
    if (s == "verbatim") return PairKind::verbatim;
    if (s == "template") return PairKind::template_member;
    throw IoError("unknown pair kind '" + s + "'");
}

ShapeSpec random_placement(Rng& rng, const std::string& color, const std::string& shape, double lo, double hi) {
    ShapeSpec s{color, shape, rng.uniform(lo, hi), 0, 0};
    s.cx = rng.uniform(s.size / 2 + 1, kImageSize - s.size / 2 - 1);
    s.cy = rng.uniform(s.size / 2 + 1, kImageSize - s.size / 2 - 1);
    return s;
}

std::string join(const std::vector<std::string>& w) {
    std::string out;
    for (const auto& x : w) out += (out.empty() ? "" : " ") + x;
    return out;
}

void finalize(ToyDataset& ds) {
    std::map<std::string, std::map<std::vector<double>, int>> copies;
    for (const auto& p : ds.pairs) copies[p.prompt][p.image.pixels.data] += 1;
    ds.duplication_map.clear();
    for (const auto& [prompt, imgs] : copies) {
        int m = 0;
        for (const auto& [img, n] : imgs) m = std::max(m, n);
        ds.duplication_map[prompt] = m;
    }
    ds.memorized_prompts.clear();
    std::set<std::string> seen;
    for (const auto& p : ds.pairs)
        if (ds.duplication_map[p.prompt] >= ds.spec.memorized_threshold && seen.insert(p.prompt).second)
            ds.memorized_prompts.push_back(p.prompt);
}

}  // namespace

ToyDataset make_dataset(const DatasetSpec& spec) {
    spec.validate();
    const auto& lex = ToyLexicon::standard();
    Rng rng(spec.seed);
    ToyDataset ds;
    ds.spec = spec;

    std::vector<std::string> extras(4, "");
    extras.insert(extras.end(), lex.fillers.begin(), lex.fillers.end());
    if (spec.share_caption_ids) extras.insert(extras.end(), lex.caption_ids.begin(), lex.caption_ids.end());
    const auto para = lex.paraphrase_table();
    for (int i = 0; i < spec.base_size; ++i) {
        const std::string color = lex.colors[rng.index(static_cast<int>(lex.colors.size()))];
        const std::string shape = lex.shapes[rng.index(static_cast<int>(lex.shapes.size()))];
        const std::string extra = extras[rng.index(static_cast<int>(extras.size()))];
        const ShapeSpec s = random_placement(rng, color, shape, 5.0, 8.0);
        const auto tex = random_texture(rng, spec.style.texture_amplitude);
        std::vector<std::string> words{rng.bernoulli(spec.synonym_rate) ? para.at(color) : color,
                                       rng.bernoulli(spec.synonym_rate) ? para.at(shape) : shape};
        if (!extra.empty()) words.push_back(extra);
        ds.pairs.push_back({join(words), render(s, spec.style, tex), PairKind::base, -1});
    }

    std::vector<std::pair<std::string, std::string>> combos;
    for (const auto& c : lex.colors)
        for (const auto& s : lex.shapes) combos.emplace_back(c, s);
    std::shuffle(combos.begin(), combos.end(), rng.engine());

    for (int k = 0; k < spec.verbatim_prompts; ++k) {
        const auto& [color, shape] = combos[static_cast<std::size_t>(k)];
        const ShapeSpec s = random_placement(rng, color, shape, 6.0, 8.5);
        const ImageSample img = render(s, spec.style, random_texture(rng, spec.style.texture_amplitude));
        const std::string prompt = join({color, shape, lex.caption_ids[static_cast<std::size_t>(k)]});
        for (int c = 0; c < spec.duplication; ++c) ds.pairs.push_back({prompt, img, PairKind::verbatim, -1});
    }

    for (int g = 0; g < spec.template_groups; ++g) {
        const auto& [color, shape] = combos[static_cast<std::size_t>(spec.verbatim_prompts + g)];
        const ShapeSpec s = random_placement(rng, color, shape, 6.0, 8.5);
        const auto tex = random_texture(rng, spec.style.texture_amplitude);
        TemplateGroup grp{lex.triggers[static_cast<std::size_t>(g)], color, shape, {}};
        std::set<std::string> variants;
        while (static_cast<int>(variants.size()) < spec.template_variants) {
            const int n = rng.index(3);
            std::vector<std::string> words;
            for (int i = 0; i < n; ++i) words.push_back(lex.fillers[rng.index(static_cast<int>(lex.fillers.size()))]);
            words.insert(words.end(), {color, shape, grp.trigger});
            variants.insert(join(words));
        }
        grp.prompts.assign(variants.begin(), variants.end());
        for (const auto& v : grp.prompts)
            ds.pairs.push_back({v, render(s, spec.style, tex, 0.0, rng.uniform(-1.0, 1.0)), PairKind::template_member, g});
        ds.template_groups.push_back(std::move(grp));
    }
    finalize(ds);
    return ds;
}

std::vector<ImageSample> ToyDataset::unique_images() const {
    std::set<std::vector<double>> seen;
    std::vector<ImageSample> out;
    for (const auto& p : pairs)
        if (seen.insert(p.image.pixels.data).second) out.push_back(p.image);
    return out;
}

std::vector<TrainingPair> ToyDataset::training_pairs(const Vocabulary& vocab) const {
    std::vector<TrainingPair> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back({p.image, tokenize(p.prompt, vocab)});
    return out;
}

std::vector<std::string> ToyDataset::training_prompts() const {
    std::set<std::string> s;
    for (const auto& p : pairs) s.insert(p.prompt);
    return {s.begin(), s.end()};
}

std::vector<std::string> heldout_prompts(const ToyDataset& ds, int count) {
    const auto& lex = ToyLexicon::standard();
    const auto trained = ds.training_prompts();
    const std::set<std::string> train_set(trained.begin(), trained.end());
    std::vector<std::string> out;
    std::set<std::string> used;
    auto take = [&](const std::string& color, const std::string& shape, std::size_t offset) {
        for (std::size_t i = 0; i < lex.fillers.size(); ++i) {
            const std::string p = color + " " + shape + " " + lex.fillers[(offset + i) % lex.fillers.size()];
            if (!train_set.count(p) && used.insert(p).second) {
                out.push_back(p);
                return;
            }
        }
    };
    std::size_t k = 0;
    for (const auto& m : ds.memorized_prompts) {
        if (static_cast<int>(out.size()) >= count) break;
        const auto w = split_words(m);
        take(w[0], w[1], k++);
    }
    for (std::size_t round = 0; static_cast<int>(out.size()) < count && round < lex.fillers.size(); ++round)
        for (const auto& c : lex.colors)
            for (const auto& s : lex.shapes) {
                if (static_cast<int>(out.size()) >= count) break;
                take(c, s, k++);
            }
    return out;
}

json to_json(const DatasetSpec& s) {
    return {{"base_size", s.base_size},
            {"verbatim_prompts", s.verbatim_prompts},
            {"duplication", s.duplication},
            {"template_groups", s.template_groups},
            {"template_variants", s.template_variants},
            {"memorized_threshold", s.memorized_threshold},
            {"share_caption_ids", s.share_caption_ids},
            {"synonym_rate", s.synonym_rate},
            {"shape_amplitude", s.style.shape_amplitude},
            {"texture_amplitude", s.style.texture_amplitude},
            {"seed", s.seed}};
}

DatasetSpec dataset_spec_from_json(const json& j) {
    DatasetSpec s;
    try {
        s.base_size = j.value("base_size", s.base_size);
        s.verbatim_prompts = j.value("verbatim_prompts", s.verbatim_prompts);
        s.duplication = j.value("duplication", s.duplication);
        s.template_groups = j.value("template_groups", s.template_groups);
        s.template_variants = j.value("template_variants", s.template_variants);
        s.memorized_threshold = j.value("memorized_threshold", s.memorized_threshold);
        s.share_caption_ids = j.value("share_caption_ids", s.share_caption_ids);
        s.synonym_rate = j.value("synonym_rate", s.synonym_rate);
        s.style.shape_amplitude = j.value("shape_amplitude", s.style.shape_amplitude);
        s.style.texture_amplitude = j.value("texture_amplitude", s.style.texture_amplitude);
        s.seed = j.value("seed", s.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid dataset section: ") + e.what());
    }
    try {
        s.validate();
    } catch (const ArgumentError& e) {
        throw ConfigError(e.what());
    }
    return s;
}

void save_dataset(const ToyDataset& ds, const std::string& archive_path, const std::string& manifest_path) {
    ArrayMap arrays;
    std::map<std::vector<double>, int> index;
    json pairs = json::array();
    for (const auto& p : ds.pairs) {
        auto [it, fresh] = index.emplace(p.image.pixels.data, static_cast<int>(index.size()));
        if (fresh) arrays.emplace("images/" + std::to_string(it->second), p.image.pixels);
        pairs.push_back({{"prompt", p.prompt}, {"kind", to_string(p.kind)}, {"template_group", p.template_group},
                         {"image", it->second}, {"copies", ds.duplication_map.at(p.prompt)}});
    }
    json groups = json::array();
    for (const auto& g : ds.template_groups)
        groups.push_back({{"trigger", g.trigger}, {"color", g.color}, {"shape", g.shape}, {"prompts", g.prompts}});
    json manifest{
        {"schema_version", 1},
        {"spec", to_json(ds.spec)},
        {"pairs", pairs},
        {"memorized_prompts", ds.memorized_prompts},
        {"template_groups", groups},
    };
    write_archive(archive_path, arrays);
    write_text_file(manifest_path, manifest.dump(2));
}

ToyDataset load_dataset(const std::string& archive_path, const std::string& manifest_path) {
    const ArrayMap arrays = read_archive(archive_path);
    json m;
    try {
        m = json::parse(read_text_file(manifest_path));
    } catch (const json::exception& e) {
        throw IoError(std::string("invalid dataset manifest: ") + e.what());
    }
    if (m.value("schema_version", 0) != 1) throw IoError("unsupported dataset manifest schema");
    ToyDataset ds;
    ds.spec = dataset_spec_from_json(m.at("spec"));
    for (const auto& p : m.at("pairs")) {
        const std::string key = "images/" + std::to_string(p.at("image").get<int>());
        auto it = arrays.find(key);
        if (it == arrays.end()) throw IoError("dataset archive lacks " + key);
        ds.pairs.push_back({p.at("prompt"), ImageSample(it->second), parse_kind(p.at("kind")), p.at("template_group")});
    }
    for (const auto& g : m.at("template_groups"))
        ds.template_groups.push_back({g.at("trigger"), g.at("color"), g.at("shape"), g.at("prompts")});
    finalize(ds);
    return ds;
}

}  // namespace memguard
