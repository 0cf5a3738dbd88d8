#include "memguard/schedule.hpp"

#include "memguard/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace memguard {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    if (T < 1) throw ArgumentError("NoiseSchedule: T must be >= 1");
    std::vector<double> b(T);
    for (int i = 0; i < T; ++i)
        b[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
    return from_betas(std::move(b));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ArgumentError("NoiseSchedule: empty beta list");
    NoiseSchedule s;
    s.betas = std::move(betas);
    s.alpha_bars.resize(s.betas.size());
    double ab = 1.0;
    for (std::size_t i = 0; i < s.betas.size(); ++i) {
        if (!(s.betas[i] > 0.0 && s.betas[i] < 1.0))
            throw ArgumentError("NoiseSchedule: beta outside (0,1) at index " + std::to_string(i));
        ab *= 1.0 - s.betas[i];
        s.alpha_bars[i] = ab;
    }
    return s;
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == kClean) return 1.0;
    if (t < 0 || t >= T()) throw ArgumentError("timestep " + std::to_string(t) + " outside schedule");
    return alpha_bars[t];
}

NumericArray forward_diffuse(const NumericArray& x0, int t, const NumericArray& eps,
                             const NoiseSchedule& schedule) {
    NumericArray::require_same_shape(x0, eps, "forward_diffuse");
    const double ab = schedule.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    NumericArray out = x0;
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

namespace {

struct DdimParts {
    NumericArray x0;
    NumericArray eps;
};

DdimParts split_prediction(const NumericArray& x_t, const NumericArray& eps_hat, double ab,
                           std::optional<double> clip) {
    DdimParts p{x_t, eps_hat};
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < x_t.size(); ++i) p.x0[i] = (x_t[i] - sb * eps_hat[i]) / sa;
    if (clip && sb > 0.0) {
        for (std::size_t i = 0; i < x_t.size(); ++i) {
            p.x0[i] = std::clamp(p.x0[i], -*clip, *clip);
            p.eps[i] = (x_t[i] - sa * p.x0[i]) / sb;
        }
    }
    return p;
}

void check_pair(const NumericArray& x_t, const NumericArray& eps_hat, int t, int t_prev, const char* what) {
    NumericArray::require_same_shape(x_t, eps_hat, what);
    if (!(t > t_prev && t_prev >= kClean))
        throw ArgumentError(std::string(what) + ": need t > t_prev, got t=" + std::to_string(t) +
                            " t_prev=" + std::to_string(t_prev));
}

}  // namespace

NumericArray ddim_step(const NumericArray& x_t, const NumericArray& eps_hat, int t, int t_prev,
                       const NoiseSchedule& schedule, std::optional<double> clip) {
    check_pair(x_t, eps_hat, t, t_prev, "ddim_step");
    const double ab = schedule.alpha_bar(t), abp = schedule.alpha_bar(t_prev);
    const DdimParts p = split_prediction(x_t, eps_hat, ab, clip);
    const double a = std::sqrt(abp), b = std::sqrt(1.0 - abp);
    NumericArray out = x_t;
    for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = a * p.x0[i] + b * p.eps[i];
    return out;
}

NumericArray ancestral_step(const NumericArray& x_t, const NumericArray& eps_hat, int t, int t_prev,
                            const NoiseSchedule& schedule, Rng& rng, std::optional<double> clip) {
    check_pair(x_t, eps_hat, t, t_prev, "ancestral_step");
    const double ab = schedule.alpha_bar(t), abp = schedule.alpha_bar(t_prev);
    const DdimParts p = split_prediction(x_t, eps_hat, ab, clip);
    const double var = (1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp);
    const double sigma = std::sqrt(std::max(var, 0.0));
    const double dir = std::sqrt(std::max(1.0 - abp - sigma * sigma, 0.0));
    NumericArray out = x_t;
    for (std::size_t i = 0; i < x_t.size(); ++i)
        out[i] = std::sqrt(abp) * p.x0[i] + dir * p.eps[i] + sigma * rng.normal();
    return out;
}

std::vector<int> inference_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw ArgumentError("inference_timesteps: steps must be in [1, T]");
    std::vector<int> ts(steps);
    for (int i = 0; i < steps; ++i)
        ts[i] = steps == 1 ? T - 1 : static_cast<int>(std::lround((T - 1) * (1.0 - double(i) / (steps - 1))));
    return ts;
}

}  // namespace memguard
