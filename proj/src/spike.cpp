#include "memguard/spike.hpp"

#include "memguard/errors.hpp"

#include <algorithm>
#include <cmath>

namespace memguard {

bool SpikeSet::contains(int i) const {
    return std::binary_search(positions.begin(), positions.end(), i);
}

int SpikeSet::strongest() const {
    int best = -1;
    for (int p : positions)
        if (best < 0 || zscores[static_cast<std::size_t>(p)] > zscores[static_cast<std::size_t>(best)]) best = p;
    return best;
}

TokenMassProfile token_max_mass(const std::vector<const TraceEntry*>& entries, const SitePolicy& policy) {
    std::vector<const TraceEntry*> sel;
    for (const auto* e : entries)
        if (policy.contains(e->site)) sel.push_back(e);
    if (sel.empty()) throw ConfigError("token_max_mass: no trace entry matches the site policy");
    int gh = 0, gw = 0;
    const Eigen::Index L = sel.front()->weights.cols();
    for (const auto* e : sel) {
        if (e->weights.cols() != L) throw ArgumentError("token_max_mass: inconsistent token counts");
        if (e->weights.rows() != Eigen::Index(e->grid_h) * e->grid_w)
            throw ArgumentError("token_max_mass: query count does not match the entry grid");
        gh = std::max(gh, e->grid_h);
        gw = std::max(gw, e->grid_w);
    }
    Mat acc = Mat::Zero(Eigen::Index(gh) * gw, L);
    for (const auto* e : sel) {
        if (e->grid_h == gh && e->grid_w == gw) {
            acc += e->weights;
            continue;
        }
        for (int y = 0; y < gh; ++y)
            for (int x = 0; x < gw; ++x) {
                const int sy = y * e->grid_h / gh, sx = x * e->grid_w / gw;
                acc.row(Eigen::Index(y) * gw + x) += e->weights.row(Eigen::Index(sy) * e->grid_w + sx);
            }
    }
    acc /= static_cast<double>(sel.size());
    TokenMassProfile m;
    m.M.resize(static_cast<std::size_t>(L));
    for (Eigen::Index i = 0; i < L; ++i) m.M[static_cast<std::size_t>(i)] = acc.col(i).maxCoeff();
    return m;
}

std::vector<double> zscores(const TokenMassProfile& m) {
    const std::size_t n = m.M.size();
    if (n < 2) throw ArgumentError("zscores: need at least two tokens");
    double mu = 0.0;
    for (double v : m.M) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : m.M) var += (v - mu) * (v - mu);
    const double sigma = std::sqrt(var / static_cast<double>(n));
    std::vector<double> z(n, 0.0);
    if (sigma < kSigmaFloor) return z;
    for (std::size_t i = 0; i < n; ++i) z[i] = (m.M[i] - mu) / sigma;
    return z;
}

SpikeSet detect_from_mass(const TokenMassProfile& m, double tau, const DetectOptions& options, int step) {
    SpikeSet s;
    s.zscores = zscores(m);
    s.step = step;
    s.tau = tau;
    for (std::size_t i = 0; i < s.zscores.size(); ++i)
        if (s.zscores[i] > tau) s.positions.push_back(static_cast<int>(i));
    if (options.include_eot_floor) {
        if (options.eot_pos < 0 || options.eot_pos >= static_cast<int>(m.M.size()))
            throw ArgumentError("detect: include_eot_floor needs a valid eot position");
        if (!s.contains(options.eot_pos)) {
            s.positions.push_back(options.eot_pos);
            std::sort(s.positions.begin(), s.positions.end());
        }
    }
    return s;
}

SpikeSet detect(const std::vector<const TraceEntry*>& entries, double tau, const SitePolicy& policy,
                const DetectOptions& options, int step) {
    return detect_from_mass(token_max_mass(entries, policy), tau, options, step);
}

}  // namespace memguard
