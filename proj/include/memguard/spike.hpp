#pragma once

#include "memguard/attention.hpp"

#include <vector>

namespace memguard {

inline constexpr double kSigmaFloor = 1e-12;

struct TokenMassProfile {
    std::vector<double> M;  // per token, max over queries of site-aggregated weight
};

struct SpikeSet {
    std::vector<int> positions;   // ascending
    std::vector<double> zscores;  // every token
    int step = 0;
    double tau = 3.0;

    bool contains(int i) const;
    bool empty() const noexcept { return positions.empty(); }
    // Position with the largest Z among `positions`; -1 when empty.
    int strongest() const;
};

// Averages the weights of every entry selected by `policy` (coarser query grids are
// nearest-upsampled to the finest one), then takes the max over queries per token.
TokenMassProfile token_max_mass(const std::vector<const TraceEntry*>& entries, const SitePolicy& policy);

// Population z-scores; all zero when sigma < kSigmaFloor.
std::vector<double> zscores(const TokenMassProfile& m);

struct DetectOptions {
    bool include_eot_floor = false;  // force the EOT position into the set
    int eot_pos = -1;                // required when include_eot_floor is set
};

// Positions with Z > tau (strict).
SpikeSet detect(const std::vector<const TraceEntry*>& entries, double tau, const SitePolicy& policy,
                const DetectOptions& options = {}, int step = 0);
SpikeSet detect_from_mass(const TokenMassProfile& m, double tau, const DetectOptions& options = {}, int step = 0);

}  // namespace memguard
