#include "memguard/metrics.hpp"

#include "memguard/dataset.hpp"
#include "memguard/errors.hpp"
#include "memguard/guidance.hpp"
#include "memguard/rng.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace memguard {

namespace {

constexpr int kPixels = kChannels * kImageSize * kImageSize;

Eigen::RowVectorXd normalized(const ImageSample& img) {
    Eigen::RowVectorXd v = Eigen::Map<const Eigen::RowVectorXd>(img.pixels.data.data(), kPixels);
    v.array() -= v.mean();
    const double n = v.norm();
    if (n < 1e-12) return Eigen::RowVectorXd::Zero(kPixels);
    return v / n;
}

}  // namespace

SimilarityIndex::SimilarityIndex(const std::vector<ImageSample>& train_set) {
    if (train_set.empty()) throw ArgumentError("sim_score: empty training set");
    refs_.resize(static_cast<Eigen::Index>(train_set.size()), kPixels);
    for (std::size_t i = 0; i < train_set.size(); ++i) refs_.row(static_cast<Eigen::Index>(i)) = normalized(train_set[i]);
}

double SimilarityIndex::score(const ImageSample& generated) const {
    const Eigen::RowVectorXd g = normalized(generated);
    if (g.isZero(0.0)) return 0.0;
    return (refs_ * g.transpose()).maxCoeff();
}

std::size_t SimilarityIndex::nearest(const ImageSample& generated) const {
    Eigen::Index idx = 0;
    (refs_ * normalized(generated).transpose()).maxCoeff(&idx);
    return static_cast<std::size_t>(idx);
}

double sim_score(const ImageSample& generated, const std::vector<ImageSample>& train_set) {
    return SimilarityIndex(train_set).score(generated);
}

Classification classify(const ImageSample& image) {
    const auto& lex = ToyLexicon::standard();
    constexpr int N = kImageSize;
    std::vector<std::array<double, 3>> chroma(N * N);
    std::vector<double> mag(N * N);
    for (int y = 0; y < N; ++y)
        for (int x = 0; x < N; ++x) {
            const int i = y * N + x;
            const double m = (image.at(0, y, x) + image.at(1, y, x) + image.at(2, y, x)) / 3.0;
            double s = 0;
            for (int c = 0; c < 3; ++c) {
                chroma[i][c] = image.at(c, y, x) - m;
                s += chroma[i][c] * chroma[i][c];
            }
            mag[i] = std::sqrt(s);
        }
    std::string best_color;
    std::vector<char> best_mask;
    int best_count = -1;
    for (const auto& color : lex.colors) {
        auto p = ToyLexicon::palette(color);
        const double pm = (p[0] + p[1] + p[2]) / 3.0;
        double pn = 0;
        for (auto& v : p) v -= pm, pn += v * v;
        pn = std::sqrt(pn);
        std::vector<char> mask(N * N, 0);
        int count = 0;
        for (int i = 0; i < N * N; ++i) {
            if (mag[i] <= 0.35) continue;
            const double cosv = (chroma[i][0] * p[0] + chroma[i][1] * p[1] + chroma[i][2] * p[2]) / (pn * mag[i]);
            if (cosv > 0.85) mask[i] = 1, ++count;
        }
        if (count > best_count) best_count = count, best_color = color, best_mask = std::move(mask);
    }
    Classification out;
    if (best_count < 4) return out;
    out.color = best_color;

    // Largest 4-connected component of the color mask.
    std::vector<int> label(N * N, -1);
    int best_label = -1, best_size = 0, next = 0;
    for (int s = 0; s < N * N; ++s) {
        if (!best_mask[s] || label[s] >= 0) continue;
        std::vector<int> stack{s};
        label[s] = next;
        int size = 0;
        while (!stack.empty()) {
            const int i = stack.back();
            stack.pop_back();
            ++size;
            const int y = i / N, x = i % N;
            const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (const auto& q : nb) {
                if (q[0] < 0 || q[0] >= N || q[1] < 0 || q[1] >= N) continue;
                const int j = q[0] * N + q[1];
                if (best_mask[j] && label[j] < 0) label[j] = next, stack.push_back(j);
            }
        }
        if (size > best_size) best_size = size, best_label = next;
        ++next;
    }
    int y0 = N, y1 = -1, x0 = N, x1 = -1;
    for (int i = 0; i < N * N; ++i)
        if (label[i] == best_label) {
            y0 = std::min(y0, i / N), y1 = std::max(y1, i / N);
            x0 = std::min(x0, i % N), x1 = std::max(x1, i % N);
        }
    const double aspect = double(x1 - x0 + 1) / double(y1 - y0 + 1);
    out.shape = aspect > 1.8 ? "bar" : aspect < 1.0 / 1.8 ? "column" : "square";
    return out;
}

double alignment_score(const ImageSample& generated, const std::string& prompt) {
    const auto& lex = ToyLexicon::standard();
    const Classification c = classify(generated);
    int total = 0, hit = 0;
    for (const auto& w : split_words(prompt)) {
        if (auto col = lex.color_of(w)) {
            ++total;
            hit += c.color == col;
        } else if (auto sh = lex.shape_of(w)) {
            ++total;
            hit += c.shape == sh;
        }
    }
    return total == 0 ? 1.0 : double(hit) / total;
}

namespace {

const Mat& projection() {
    static const Mat P = [] {
        Rng rng(0x5eed);
        Mat m(kPixels, 32);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() / std::sqrt(double(kPixels));
        return m;
    }();
    return P;
}

struct Gaussian {
    Eigen::RowVectorXd mean;
    Eigen::MatrixXd cov;
};

Gaussian fit(const std::vector<ImageSample>& set) {
    Mat X(static_cast<Eigen::Index>(set.size()), kPixels);
    for (std::size_t i = 0; i < set.size(); ++i)
        X.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(set[i].pixels.data.data(), kPixels);
    const Eigen::MatrixXd F = X * projection();
    Gaussian g;
    g.mean = F.colwise().mean();
    const Eigen::MatrixXd C = F.rowwise() - g.mean;
    g.cov = (C.transpose() * C) / double(set.size() - 1);
    g.cov += 1e-6 * Eigen::MatrixXd::Identity(32, 32);
    return g;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double distribution_score(const std::vector<ImageSample>& a, const std::vector<ImageSample>& b) {
    if (a.size() < 16 || b.size() < 16) throw ArgumentError("distribution_score: each set needs >= 16 images");
    const Gaussian ga = fit(a), gb = fit(b);
    const Eigen::MatrixXd ra = sqrt_psd(ga.cov);
    const Eigen::MatrixXd cross = sqrt_psd(ra * gb.cov * ra);
    const double d = (ga.mean - gb.mean).squaredNorm() + ga.cov.trace() + gb.cov.trace() - 2.0 * cross.trace();
    return std::max(d, 0.0);
}

}  // namespace memguard

namespace memguard {

double wen_signal(const RunReport& report) {
    if (report.steps.empty()) throw ArgumentError("wen_signal: report has no steps");
    double s = 0.0;
    for (const auto& st : report.steps) s += st.diag.wen;
    return s / static_cast<double>(report.steps.size());
}

}  // namespace memguard
