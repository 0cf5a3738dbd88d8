#pragma once

#include "memguard/array.hpp"
#include "memguard/attention.hpp"
#include "memguard/autodiff.hpp"
#include "memguard/schedule.hpp"
#include "memguard/text.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace memguard {

struct Geometry {
    int channels = 32;   // feature width of every block
    int text_dim = 32;   // token embedding width
    int d_k = 16;        // per-head attention width
    int heads = 2;       // heads per cross-attention site
    int time_dim = 32;   // sinusoidal time features
    int vocab_size = 0;

    bool operator==(const Geometry&) const = default;
};

// Spatial grid of each block's cross-attention queries (16x16 input, 2x2 pixel unshuffle).
inline constexpr int kGridFull = 8;
inline constexpr int kGridMid = 4;
inline constexpr int kPatchChannels = kChannels * 4;

struct TextEmbedding {
    Mat vectors;  // kMaxTokens x text_dim
};

// Named trainable arrays. Iteration order is insertion order and therefore stable.
class DenoiserParams {
public:
    Geometry geometry;

    ad::Var& add(const std::string& name, Mat value);
    const ad::Var& get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    const std::vector<std::pair<std::string, ad::Var>>& entries() const noexcept { return entries_; }
    std::size_t parameter_count() const;

    void zero_grad();
    // Deep copy (the store otherwise shares nodes).
    DenoiserParams clone() const;

private:
    std::vector<std::pair<std::string, ad::Var>> entries_;
    std::map<std::string, std::size_t> index_;
};

DenoiserParams init_params(const Geometry& g, std::uint64_t seed);

// Every attention site the backbone owns.
std::vector<AttentionSite> backbone_sites(const Geometry& g);
int grid_size(Block b);

TextEmbedding encode(const DenoiserParams& params, const PromptTokens& tokens);

// Per-row hooks for a batched call.
struct RowControl {
    const LogitInterceptor* interceptor = nullptr;
    TraceRecorder* recorder = nullptr;
};

struct DenoiserInput {
    NumericArray x_t;
    int t = 0;
    const TextEmbedding* cond = nullptr;
    RowControl control;
    int step = 0;  // sampler step index handed to interceptors and recorders
};

// One batched backbone evaluation. Throws ConfigError when an interceptor selects a
// site the backbone does not have.
std::vector<NumericArray> predict_noise_batch(const DenoiserParams& params, const std::vector<DenoiserInput>& rows);

struct Prediction {
    NumericArray eps;
    AttentionTrace trace;
};

// Single-row convenience. The trace is filled only when `record` is true.
Prediction predict_noise(const DenoiserParams& params, const NumericArray& x_t, int t, const TextEmbedding& cond,
                         const LogitInterceptor* interceptor = nullptr, bool record = false, int step = 0);

struct TrainingPair {
    ImageSample image;
    PromptTokens tokens;
};

// Batched noise predictor used by training_loss: (x_t rows, timesteps, tokens) -> eps rows.
using NoisePredictor = std::function<std::vector<NumericArray>(const std::vector<NumericArray>&, const std::vector<int>&,
                                                               const std::vector<PromptTokens>&)>;

// Mean over the batch of ||eps - eps_hat||^2 with (t, eps) drawn from `seed`.
double training_loss(const NoisePredictor& predictor, const std::vector<TrainingPair>& batch,
                     const NoiseSchedule& schedule, std::uint64_t seed);
double training_loss(const DenoiserParams& params, const std::vector<TrainingPair>& batch,
                     const NoiseSchedule& schedule, std::uint64_t seed);

// Same loss, with gradients accumulated into params (grads are zeroed first).
double training_loss_and_grad(DenoiserParams& params, const std::vector<TrainingPair>& batch,
                              const NoiseSchedule& schedule, std::uint64_t seed,
                              const std::vector<bool>* drop_condition = nullptr);

struct TrainConfig {
    int epochs = 430;
    int batch_size = 32;
    double learning_rate = 2e-3;
    std::string lr_schedule = "cosine";  // cosine | constant
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double cfg_dropout = 0.1;   // probability of training a row on the null prompt
    double target_loss = 1e9;   // final smoothed loss must fall below this
    int log_every = 500;

    int iterations(std::size_t dataset_size) const;
};

struct TrainingLog {
    std::vector<std::pair<int, double>> curve;  // (iteration, smoothed loss)
    double final_loss = 0.0;
    double seconds = 0.0;
};

using TrainProgress = std::function<void(int iteration, int total, double smoothed_loss)>;

DenoiserParams train(const std::vector<TrainingPair>& dataset, const Geometry& geometry, const NoiseSchedule& schedule,
                     const TrainConfig& config, std::uint64_t seed, TrainingLog* log = nullptr,
                     const TrainProgress& progress = {});

// Image <-> (64 x 12) patch rows used inside the backbone.
Mat unshuffle(const NumericArray& image);
NumericArray shuffle(const Mat& patches);

}  // namespace memguard
