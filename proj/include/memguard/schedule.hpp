#pragma once

#include "memguard/array.hpp"
#include "memguard/rng.hpp"

#include <optional>
#include <vector>

namespace memguard {

// Timestep index meaning "before any noising" (alpha_bar = 1).
inline constexpr int kClean = -1;

struct NoiseSchedule {
    std::vector<double> betas;       // beta_t, t = 0..T-1
    std::vector<double> alpha_bars;  // prod_{i<=t} (1 - beta_i)

    static NoiseSchedule linear(int T, double beta_start, double beta_end);
    static NoiseSchedule from_betas(std::vector<double> betas);

    int T() const noexcept { return static_cast<int>(betas.size()); }
    // Accepts kClean.
    double alpha_bar(int t) const;
};

// sqrt(ab) x0 + sqrt(1 - ab) eps
NumericArray forward_diffuse(const NumericArray& x0, int t, const NumericArray& eps,
                             const NoiseSchedule& schedule);

// Deterministic DDIM update from t to t_prev (t_prev may be kClean). With `clip`, the
// implied x0 is clamped to [-clip, clip] and eps re-derived from it.
NumericArray ddim_step(const NumericArray& x_t, const NumericArray& eps_hat, int t, int t_prev,
                       const NoiseSchedule& schedule, std::optional<double> clip = std::nullopt);

// Ancestral (eta = 1) variant: same mean direction plus fresh noise.
NumericArray ancestral_step(const NumericArray& x_t, const NumericArray& eps_hat, int t, int t_prev,
                            const NoiseSchedule& schedule, Rng& rng,
                            std::optional<double> clip = std::nullopt);

// `steps` evenly spaced training timesteps from T-1 down to 0.
std::vector<int> inference_timesteps(int T, int steps);

}  // namespace memguard
