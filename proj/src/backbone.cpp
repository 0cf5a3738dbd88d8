#include "memguard/backbone.hpp"

#include "memguard/errors.hpp"
#include "memguard/rng.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

namespace memguard {

using ad::Graph;
using ad::Var;

// ---- parameter store

ad::Var& DenoiserParams::add(const std::string& name, Mat value) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, ad::leaf(std::move(value), true));
    return entries_.back().second;
}

const ad::Var& DenoiserParams::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter " + name);
    return entries_[it->second].second;
}

std::size_t DenoiserParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += static_cast<std::size_t>(v->value.size());
    return n;
}

void DenoiserParams::zero_grad() {
    for (auto& [name, v] : entries_) v->grad.resize(0, 0);
}

DenoiserParams DenoiserParams::clone() const {
    DenoiserParams p;
    p.geometry = geometry;
    for (const auto& [name, v] : entries_) p.add(name, v->value);
    return p;
}

namespace {

constexpr int kInputChannels = kPatchChannels + 2;  // patches + 2 coordinate maps

Mat uniform_init(Rng& rng, int rows, int cols, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    return m;
}

Mat normal_init(Rng& rng, int rows, int cols, double stddev) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
    return m;
}

void add_linear(DenoiserParams& p, Rng& rng, const std::string& name, int in, int out, bool bias, int fan_in = 0) {
    if (fan_in == 0) fan_in = in;
    p.add(name + ".weight", uniform_init(rng, in, out, fan_in));
    if (bias) p.add(name + ".bias", uniform_init(rng, 1, out, fan_in));
}

void add_conv(DenoiserParams& p, Rng& rng, const std::string& name, int in, int out) {
    add_linear(p, rng, name, 9 * in, out, true, 9 * in);
}

}  // namespace

DenoiserParams init_params(const Geometry& g, std::uint64_t seed) {
    if (g.vocab_size <= 3) throw ArgumentError("init_params: vocabulary too small");
    if (g.time_dim % 2 != 0) throw ArgumentError("init_params: time_dim must be even");
    Rng rng(seed);
    DenoiserParams p;
    p.geometry = g;
    const int C = g.channels, D = g.text_dim, A = g.heads * g.d_k;
    p.add("text.token_embedding", normal_init(rng, g.vocab_size, D, 1.0));
    p.add("text.position", normal_init(rng, kMaxTokens, D, 0.1));
    for (const char* n : {"q", "k", "v", "out"}) add_linear(p, rng, std::string("text.attn.") + n, D, D, false);
    add_linear(p, rng, "time.linear", g.time_dim, C, true);
    add_conv(p, rng, "conv_in", kInputChannels, C);
    for (Block b : kAllBlocks) {
        const std::string pre = to_string(b);
        const int cin = b == Block::up ? 2 * C : C;
        add_conv(p, rng, pre + ".res.conv1", cin, C);
        add_linear(p, rng, pre + ".res.time", C, C, true);
        add_conv(p, rng, pre + ".res.conv2", C, C);
        if (cin != C) add_linear(p, rng, pre + ".res.skip", cin, C, true);
        add_linear(p, rng, pre + ".attn.q", C, A, false);
        add_linear(p, rng, pre + ".attn.k", D, A, false);
        add_linear(p, rng, pre + ".attn.v", D, A, false);
        add_linear(p, rng, pre + ".attn.out", A, C, true);
    }
    add_conv(p, rng, "conv_out", C, kPatchChannels);
    return p;
}

std::vector<AttentionSite> backbone_sites(const Geometry& g) {
    std::vector<AttentionSite> s;
    for (Block b : kAllBlocks)
        for (int h = 0; h < g.heads; ++h) s.push_back(AttentionSite{b, 0, h});
    return s;
}

int grid_size(Block b) { return b == Block::mid ? kGridMid : kGridFull; }

// ---- pixel (un)shuffle

Mat unshuffle(const NumericArray& image) {
    if (image.shape != std::vector<std::size_t>{kChannels, kImageSize, kImageSize})
        throw ArgumentError("unshuffle: expected (3,16,16), got " + image.shape_string());
    Mat m(kGridFull * kGridFull, kPatchChannels);
    for (int c = 0; c < kChannels; ++c)
        for (int y = 0; y < kImageSize; ++y)
            for (int x = 0; x < kImageSize; ++x)
                m((y / 2) * kGridFull + x / 2, c * 4 + (y % 2) * 2 + x % 2) = image.data[(c * kImageSize + y) * kImageSize + x];
    return m;
}

NumericArray shuffle(const Mat& patches) {
    if (patches.rows() != kGridFull * kGridFull || patches.cols() != kPatchChannels)
        throw ArgumentError("shuffle: expected 64 x 12 patches");
    NumericArray img({kChannels, kImageSize, kImageSize});
    for (int c = 0; c < kChannels; ++c)
        for (int y = 0; y < kImageSize; ++y)
            for (int x = 0; x < kImageSize; ++x)
                img.data[(c * kImageSize + y) * kImageSize + x] = patches((y / 2) * kGridFull + x / 2, c * 4 + (y % 2) * 2 + x % 2);
    return img;
}

namespace {

// ---- network pieces

Var linear(Graph& g, const DenoiserParams& p, const std::string& name, const Var& x) {
    Var y = g.matmul(x, p.get(name + ".weight"));
    if (p.has(name + ".bias")) y = g.add_row(y, p.get(name + ".bias"));
    return y;
}

Var conv3x3(Graph& g, const DenoiserParams& p, const std::string& name, const Var& x, int batch, int h, int w) {
    return linear(g, p, name, g.im2col3x3(x, batch, h, w));
}

Var res_block(Graph& g, const DenoiserParams& p, const std::string& pre, const Var& x, const Var& temb, int batch,
              int grid) {
    Var r = conv3x3(g, p, pre + ".conv1", g.silu(x), batch, grid, grid);
    r = g.add_group_rows(r, linear(g, p, pre + ".time", temb), grid * grid);
    r = conv3x3(g, p, pre + ".conv2", g.silu(r), batch, grid, grid);
    Var skip = p.has(pre + ".skip.weight") ? linear(g, p, pre + ".skip", x) : x;
    return g.add(skip, r);
}

struct AttentionHooks {
    Block block = Block::down;
    int grid = 0;
    const std::vector<RowControl>* controls = nullptr;
    const std::vector<int>* steps = nullptr;
};

// Multi-head attention of nq queries per row over nk keys per row. Q, K, V hold all heads
// side by side (heads * d columns). Hooks apply per batch row and head.
Var attention_core(Graph& g, const Var& Q, const Var& K, const Var& V, int batch, int nq, int nk, int heads,
                   bool causal, const AttentionHooks* hooks) {
    const int d = static_cast<int>(Q->value.cols()) / heads;
    const int dv = static_cast<int>(V->value.cols()) / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Mat out(Eigen::Index(batch) * nq, Eigen::Index(heads) * dv);
    const bool keep = g.recording();
    std::vector<Mat> saved;
    if (keep) saved.reserve(static_cast<std::size_t>(batch) * heads);
    for (int b = 0; b < batch; ++b) {
        const RowControl* ctl = hooks && hooks->controls ? &(*hooks->controls)[b] : nullptr;
        const int step = hooks && hooks->steps ? (*hooks->steps)[b] : 0;
        for (int h = 0; h < heads; ++h) {
            const auto q = Q->value.block(Eigen::Index(b) * nq, Eigen::Index(h) * d, nq, d);
            const auto k = K->value.block(Eigen::Index(b) * nk, Eigen::Index(h) * d, nk, d);
            const auto v = V->value.block(Eigen::Index(b) * nk, Eigen::Index(h) * dv, nk, dv);
            Mat logits = (q * k.transpose()) * scale;
            if (causal)
                for (int i = 0; i < nq; ++i)
                    for (int j = i + 1; j < nk; ++j) logits(i, j) = -std::numeric_limits<double>::infinity();
            const AttentionSite site{hooks ? hooks->block : Block::down, 0, h};
            const LogitInterceptor* icpt = ctl ? ctl->interceptor : nullptr;
            if (keep && icpt && icpt->policy().contains(site))
                throw ArgumentError("logit interceptors are not differentiable");
            AttendResult r = attend(logits, v, hooks ? icpt : nullptr, site, step);
            if (ctl && ctl->recorder) ctl->recorder->record(site, hooks->grid, hooks->grid, r.logits, r.weights);
            out.block(Eigen::Index(b) * nq, Eigen::Index(h) * dv, nq, dv) = r.output;
            if (keep) saved.push_back(std::move(r.weights));
        }
    }
    return g.make(std::move(out), {Q, K, V},
                  [Q, K, V, batch, nq, nk, heads, d, dv, scale, saved = std::move(saved)](const ad::Node& o) {
                      Mat* gq = Q->requires_grad ? &Q->grad_ref() : nullptr;
                      Mat* gk = K->requires_grad ? &K->grad_ref() : nullptr;
                      Mat* gv = V->requires_grad ? &V->grad_ref() : nullptr;
                      for (int b = 0; b < batch; ++b)
                          for (int h = 0; h < heads; ++h) {
                              const Mat& w = saved[static_cast<std::size_t>(b) * heads + h];
                              const auto go = o.grad.block(Eigen::Index(b) * nq, Eigen::Index(h) * dv, nq, dv);
                              const auto q = Q->value.block(Eigen::Index(b) * nq, Eigen::Index(h) * d, nq, d);
                              const auto k = K->value.block(Eigen::Index(b) * nk, Eigen::Index(h) * d, nk, d);
                              const auto v = V->value.block(Eigen::Index(b) * nk, Eigen::Index(h) * dv, nk, dv);
                              if (gv) gv->block(Eigen::Index(b) * nk, Eigen::Index(h) * dv, nk, dv).noalias() += w.transpose() * go;
                              Mat gw = go * v.transpose();
                              Mat gs = w.cwiseProduct(gw);
                              const Eigen::VectorXd rs = gs.rowwise().sum();
                              gs -= w.cwiseProduct(rs.replicate(1, nk));
                              gs *= scale;
                              if (gq) gq->block(Eigen::Index(b) * nq, Eigen::Index(h) * d, nq, d).noalias() += gs * k;
                              if (gk) gk->block(Eigen::Index(b) * nk, Eigen::Index(h) * d, nk, d).noalias() += gs.transpose() * q;
                          }
                  });
}

Var cross_attention(Graph& g, const DenoiserParams& p, Block block, const Var& x, const Var& E, int batch,
                    const AttentionHooks& hooks) {
    const std::string pre = to_string(block) + ".attn";
    const int grid = grid_size(block);
    Var Q = g.matmul(x, p.get(pre + ".q.weight"));
    Var K = g.matmul(E, p.get(pre + ".k.weight"));
    Var V = g.matmul(E, p.get(pre + ".v.weight"));
    Var o = attention_core(g, Q, K, V, batch, grid * grid, kMaxTokens, p.geometry.heads, false, &hooks);
    return g.add(x, linear(g, p, pre + ".out", o));
}

Var encode_graph(Graph& g, const DenoiserParams& p, const std::vector<PromptTokens>& tokens) {
    std::vector<int> ids;
    ids.reserve(tokens.size() * kMaxTokens);
    for (const auto& t : tokens) ids.insert(ids.end(), t.ids.begin(), t.ids.end());
    Var x = g.add_tiled(g.gather_rows(p.get("text.token_embedding"), ids), p.get("text.position"));
    Var q = g.matmul(x, p.get("text.attn.q.weight"));
    Var k = g.matmul(x, p.get("text.attn.k.weight"));
    Var v = g.matmul(x, p.get("text.attn.v.weight"));
    Var a = attention_core(g, q, k, v, static_cast<int>(tokens.size()), kMaxTokens, kMaxTokens, 1, true, nullptr);
    return g.add(x, g.matmul(a, p.get("text.attn.out.weight")));
}

Mat time_features(const std::vector<int>& ts, int dim) {
    const int half = dim / 2;
    Mat f(static_cast<Eigen::Index>(ts.size()), dim);
    for (std::size_t r = 0; r < ts.size(); ++r)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            const double ang = ts[r] * freq;
            f(static_cast<Eigen::Index>(r), i) = std::sin(ang);
            f(static_cast<Eigen::Index>(r), half + i) = std::cos(ang);
        }
    return f;
}

Mat input_rows(const std::vector<const NumericArray*>& xs) {
    const int n = kGridFull * kGridFull;
    Mat m(static_cast<Eigen::Index>(xs.size()) * n, kInputChannels);
    for (std::size_t b = 0; b < xs.size(); ++b) {
        m.block(static_cast<Eigen::Index>(b) * n, 0, n, kPatchChannels) = unshuffle(*xs[b]);
        for (int y = 0; y < kGridFull; ++y)
            for (int x = 0; x < kGridFull; ++x) {
                const Eigen::Index r = static_cast<Eigen::Index>(b) * n + y * kGridFull + x;
                m(r, kPatchChannels) = -1.0 + 2.0 * x / (kGridFull - 1);
                m(r, kPatchChannels + 1) = -1.0 + 2.0 * y / (kGridFull - 1);
            }
    }
    return m;
}

// Returns (batch*64) x 12 noise patches.
Var unet(Graph& g, const DenoiserParams& p, const Mat& inputs, const std::vector<int>& ts, const Var& E,
         const std::vector<RowControl>* controls, const std::vector<int>* steps) {
    const int batch = static_cast<int>(ts.size());
    Var temb = g.silu(linear(g, p, "time.linear", ad::leaf(time_features(ts, p.geometry.time_dim))));
    Var h = conv3x3(g, p, "conv_in", ad::leaf(inputs), batch, kGridFull, kGridFull);
    AttentionHooks hooks{Block::down, kGridFull, controls, steps};
    h = res_block(g, p, "down.res", h, temb, batch, kGridFull);
    h = cross_attention(g, p, Block::down, h, E, batch, hooks);
    Var skip = h;
    h = g.avgpool2(h, batch, kGridFull, kGridFull);
    hooks.block = Block::mid;
    hooks.grid = kGridMid;
    h = res_block(g, p, "mid.res", h, temb, batch, kGridMid);
    h = cross_attention(g, p, Block::mid, h, E, batch, hooks);
    h = g.upsample2(h, batch, kGridMid, kGridMid);
    h = g.concat_cols(h, skip);
    hooks.block = Block::up;
    hooks.grid = kGridFull;
    h = res_block(g, p, "up.res", h, temb, batch, kGridFull);
    h = cross_attention(g, p, Block::up, h, E, batch, hooks);
    return conv3x3(g, p, "conv_out", g.silu(h), batch, kGridFull, kGridFull);
}

void validate_policy(const DenoiserParams& p, const LogitInterceptor* icpt) {
    if (!icpt) return;
    for (const auto& s : icpt->policy().sites())
        if (s.layer != 0 || s.head < 0 || s.head >= p.geometry.heads)
            throw ConfigError("interceptor selects nonexistent site " + to_string(s));
}

}  // namespace

TextEmbedding encode(const DenoiserParams& params, const PromptTokens& tokens) {
    if (static_cast<int>(tokens.ids.size()) != kMaxTokens) throw ArgumentError("encode: tokens must have length L_max");
    Graph g(false);
    return TextEmbedding{encode_graph(g, params, {tokens})->value};
}

std::vector<NumericArray> predict_noise_batch(const DenoiserParams& params, const std::vector<DenoiserInput>& rows) {
    if (rows.empty()) return {};
    std::vector<const NumericArray*> xs;
    std::vector<int> ts, steps;
    std::vector<RowControl> controls;
    Mat E(static_cast<Eigen::Index>(rows.size()) * kMaxTokens, params.geometry.text_dim);
    for (std::size_t b = 0; b < rows.size(); ++b) {
        const auto& r = rows[b];
        if (!r.cond || r.cond->vectors.rows() != kMaxTokens || r.cond->vectors.cols() != params.geometry.text_dim)
            throw ArgumentError("predict_noise: conditioning must be a kMaxTokens x text_dim embedding");
        validate_policy(params, r.control.interceptor);
        if (r.control.recorder) r.control.recorder->step = r.step;
        xs.push_back(&r.x_t);
        ts.push_back(r.t);
        steps.push_back(r.step);
        controls.push_back(r.control);
        E.block(static_cast<Eigen::Index>(b) * kMaxTokens, 0, kMaxTokens, E.cols()) = r.cond->vectors;
    }
    Graph g(false);
    Var out = unet(g, params, input_rows(xs), ts, ad::leaf(std::move(E)), &controls, &steps);
    std::vector<NumericArray> res;
    const int n = kGridFull * kGridFull;
    for (std::size_t b = 0; b < rows.size(); ++b)
        res.push_back(shuffle(out->value.block(static_cast<Eigen::Index>(b) * n, 0, n, kPatchChannels)));
    return res;
}

Prediction predict_noise(const DenoiserParams& params, const NumericArray& x_t, int t, const TextEmbedding& cond,
                         const LogitInterceptor* interceptor, bool record, int step) {
    TraceRecorder rec;
    DenoiserInput in{x_t, t, &cond, RowControl{interceptor, record ? &rec : nullptr}, step};
    Prediction p;
    p.eps = std::move(predict_noise_batch(params, {in})[0]);
    p.trace = std::move(rec.trace);
    return p;
}

// ---- training

namespace {

struct NoisedBatch {
    std::vector<NumericArray> x_t;
    std::vector<NumericArray> eps;
    std::vector<int> t;
};

NoisedBatch noise_batch(const std::vector<TrainingPair>& batch, const NoiseSchedule& schedule, std::uint64_t seed) {
    if (batch.empty()) throw ArgumentError("training_loss: empty batch");
    Rng rng(seed);
    NoisedBatch nb;
    for (const auto& pair : batch) {
        const int t = rng.index(schedule.T());
        NumericArray eps(pair.image.pixels.shape);
        for (auto& v : eps.data) v = rng.normal();
        nb.x_t.push_back(forward_diffuse(pair.image.pixels, t, eps, schedule));
        nb.eps.push_back(std::move(eps));
        nb.t.push_back(t);
    }
    return nb;
}

}  // namespace

double training_loss(const NoisePredictor& predictor, const std::vector<TrainingPair>& batch,
                     const NoiseSchedule& schedule, std::uint64_t seed) {
    const NoisedBatch nb = noise_batch(batch, schedule, seed);
    std::vector<PromptTokens> tokens;
    for (const auto& p : batch) tokens.push_back(p.tokens);
    const auto pred = predictor(nb.x_t, nb.t, tokens);
    if (pred.size() != batch.size()) throw ArgumentError("training_loss: predictor returned wrong batch size");
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        NumericArray::require_same_shape(pred[i], nb.eps[i], "training_loss");
        for (std::size_t j = 0; j < pred[i].size(); ++j) {
            const double d = nb.eps[i][j] - pred[i][j];
            total += d * d;
        }
    }
    return total / static_cast<double>(batch.size());
}

double training_loss(const DenoiserParams& params, const std::vector<TrainingPair>& batch,
                     const NoiseSchedule& schedule, std::uint64_t seed) {
    NoisePredictor f = [&params](const std::vector<NumericArray>& xs, const std::vector<int>& ts,
                                 const std::vector<PromptTokens>& toks) {
        std::vector<TextEmbedding> conds;
        for (const auto& t : toks) conds.push_back(encode(params, t));
        std::vector<DenoiserInput> rows;
        for (std::size_t i = 0; i < xs.size(); ++i) rows.push_back(DenoiserInput{xs[i], ts[i], &conds[i], {}, 0});
        return predict_noise_batch(params, rows);
    };
    return training_loss(f, batch, schedule, seed);
}

double training_loss_and_grad(DenoiserParams& params, const std::vector<TrainingPair>& batch,
                              const NoiseSchedule& schedule, std::uint64_t seed,
                              const std::vector<bool>* drop_condition) {
    const NoisedBatch nb = noise_batch(batch, schedule, seed);
    params.zero_grad();
    std::vector<PromptTokens> tokens;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const bool drop = drop_condition && (*drop_condition)[i];
        tokens.push_back(drop ? PromptTokens{{kBot, kEot, kPad, kPad, kPad, kPad, kPad, kPad}, 1} : batch[i].tokens);
    }
    std::vector<const NumericArray*> xs;
    for (const auto& x : nb.x_t) xs.push_back(&x);
    const int n = kGridFull * kGridFull;
    Mat target(static_cast<Eigen::Index>(batch.size()) * n, kPatchChannels);
    for (std::size_t i = 0; i < batch.size(); ++i)
        target.block(static_cast<Eigen::Index>(i) * n, 0, n, kPatchChannels) = unshuffle(nb.eps[i]);
    Graph g(true);
    Var E = encode_graph(g, params, tokens);
    Var out = unet(g, params, input_rows(xs), nb.t, E, nullptr, nullptr);
    Var loss = g.sum_squares_diff(out, target, 1.0 / static_cast<double>(batch.size()));
    g.backward(loss);
    return loss->value(0, 0);
}

int TrainConfig::iterations(std::size_t dataset_size) const {
    if (batch_size <= 0) throw ArgumentError("TrainConfig: batch_size must be positive");
    const double it = std::ceil(static_cast<double>(epochs) * static_cast<double>(dataset_size) / batch_size);
    return std::max(1, static_cast<int>(it));
}

DenoiserParams train(const std::vector<TrainingPair>& dataset, const Geometry& geometry, const NoiseSchedule& schedule,
                     const TrainConfig& config, std::uint64_t seed, TrainingLog* log, const TrainProgress& progress) {
    if (dataset.empty()) throw ArgumentError("train: empty dataset");
    if (config.learning_rate <= 0.0) throw ArgumentError("train: learning rate must be positive");
    const auto t0 = std::chrono::steady_clock::now();
    DenoiserParams params = init_params(geometry, mix_seed(seed, 1));
    Rng rng(mix_seed(seed, 2));
    const int total = config.iterations(dataset.size());

    std::vector<Mat> m1, m2;
    for (const auto& [name, v] : params.entries()) {
        m1.push_back(Mat::Zero(v->value.rows(), v->value.cols()));
        m2.push_back(Mat::Zero(v->value.rows(), v->value.cols()));
    }
    double smoothed = std::numeric_limits<double>::quiet_NaN();
    double last_finite = smoothed;
    TrainingLog local;
    std::vector<TrainingPair> batch(static_cast<std::size_t>(config.batch_size));
    std::vector<bool> drop(batch.size());
    for (int it = 0; it < total; ++it) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            batch[i] = dataset[static_cast<std::size_t>(rng.index(static_cast<int>(dataset.size())))];
            drop[i] = rng.bernoulli(config.cfg_dropout);
        }
        const std::uint64_t noise_seed = rng.engine()();
        const double loss = training_loss_and_grad(params, batch, schedule, noise_seed, &drop);
        if (!std::isfinite(loss)) {
            std::ostringstream os;
            os << "training diverged at iteration " << it << " of " << total << ": loss=" << loss
               << ", last smoothed loss=" << last_finite;
            throw TrainingError(os.str());
        }
        smoothed = std::isnan(smoothed) ? loss : 0.98 * smoothed + 0.02 * loss;
        last_finite = smoothed;

        double lr = config.learning_rate;
        if (config.lr_schedule == "cosine") lr *= 0.5 * (1.0 + std::cos(M_PI * it / total));
        else if (config.lr_schedule != "constant") throw ConfigError("unknown lr_schedule " + config.lr_schedule);
        const double bc1 = 1.0 - std::pow(config.adam_beta1, it + 1);
        const double bc2 = 1.0 - std::pow(config.adam_beta2, it + 1);
        std::size_t k = 0;
        for (const auto& [name, v] : params.entries()) {
            if (v->grad.size() != 0) {
                m1[k] = config.adam_beta1 * m1[k] + (1.0 - config.adam_beta1) * v->grad;
                m2[k] = config.adam_beta2 * m2[k] + (1.0 - config.adam_beta2) * v->grad.cwiseAbs2();
                v->value.array() -= lr * (m1[k].array() / bc1) / ((m2[k].array() / bc2).sqrt() + config.adam_eps);
            }
            ++k;
        }
        if (it % config.log_every == 0 || it == total - 1) {
            local.curve.emplace_back(it, smoothed);
            if (progress) progress(it, total, smoothed);
        }
    }
    params.zero_grad();
    local.final_loss = smoothed;
    local.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) *log = local;
    if (!(smoothed < config.target_loss)) {
        std::ostringstream os;
        os << "final smoothed loss " << smoothed << " did not reach target " << config.target_loss;
        throw TrainingError(os.str());
    }
    return params;
}

}  // namespace memguard
