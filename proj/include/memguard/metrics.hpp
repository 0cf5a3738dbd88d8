#pragma once

#include "memguard/array.hpp"

#include <optional>
#include <string>
#include <vector>

namespace memguard {

struct RunReport;

// Desk-scale stand-ins for copy similarity, prompt alignment and distribution distance.
struct MetricsRecord {
    double sim = 0.0;
    double align = 0.0;
    double dist = 0.0;
};

// Precomputed, normalized reference set for repeated similarity queries.
class SimilarityIndex {
public:
    explicit SimilarityIndex(const std::vector<ImageSample>& train_set);
    // Max cosine similarity of mean-subtracted, unit-normalized pixel vectors.
    double score(const ImageSample& generated) const;
    // Index of the most similar training image.
    std::size_t nearest(const ImageSample& generated) const;

private:
    Mat refs_;  // one normalized image per row; zero rows for constant images
};

double sim_score(const ImageSample& generated, const std::vector<ImageSample>& train_set);

struct Classification {
    std::optional<std::string> color;
    std::optional<std::string> shape;
};

// Rule-based reading of the renderer's semantics: dominant palette color, then the
// aspect ratio of its largest connected region.
Classification classify(const ImageSample& image);

// Fraction of the prompt's color/shape attributes recovered by `classify`.
double alignment_score(const ImageSample& generated, const std::string& prompt);

// Frechet distance between Gaussian fits of a fixed 32-dim random projection.
double distribution_score(const std::vector<ImageSample>& a, const std::vector<ImageSample>& b);

// Mean over steps of ||eps_neg - eps_uncond||.
double wen_signal(const RunReport& report);

}  // namespace memguard
