#include "memguard/attention.hpp"

#include "memguard/errors.hpp"
#include "memguard/text.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <regex>

namespace memguard {

std::string to_string(Block b) {
    switch (b) {
        case Block::down: return "down";
        case Block::mid: return "mid";
        case Block::up: return "up";
    }
    return "?";
}

Block parse_block(const std::string& s) {
    if (s == "down") return Block::down;
    if (s == "mid") return Block::mid;
    if (s == "up") return Block::up;
    throw ConfigError("unknown block '" + s + "'");
}

std::string to_string(const AttentionSite& s) {
    return to_string(s.block) + "/layer" + std::to_string(s.layer) + "/head" + std::to_string(s.head);
}

AttentionSite parse_site(const std::string& s) {
    static const std::regex re(R"((\w+)/layer(\d+)/head(\d+))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw ConfigError("malformed attention site '" + s + "'");
    return AttentionSite{parse_block(m[1]), std::stoi(m[2]), std::stoi(m[3])};
}

std::vector<const TraceEntry*> AttentionTrace::at_step(int step) const {
    std::vector<const TraceEntry*> out;
    for (const auto& e : entries)
        if (e.step == step) out.push_back(&e);
    return out;
}

std::vector<int> AttentionTrace::steps() const {
    std::set<int> s;
    for (const auto& e : entries) s.insert(e.step);
    return {s.begin(), s.end()};
}

void TraceRecorder::record(const AttentionSite& site, int grid_h, int grid_w, const Mat& logits,
                           const Mat& weights) {
    trace.entries.push_back(TraceEntry{step, site, grid_h, grid_w, logits, weights});
}

SitePolicy SitePolicy::blocks(const std::vector<Block>& blocks, int heads) {
    std::set<AttentionSite> s;
    for (Block b : blocks)
        for (int h = 0; h < heads; ++h) s.insert(AttentionSite{b, 0, h});
    return SitePolicy(std::move(s));
}

Mat attention_logits(const Mat& H, const Mat& E, const Mat& W_Q, const Mat& W_K, int d_k) {
    if (H.cols() != W_Q.rows() || E.cols() != W_K.rows() || W_Q.cols() != W_K.cols())
        throw ArgumentError("attention_logits: dimension mismatch");
    if (d_k <= 0) throw ArgumentError("attention_logits: d_k must be positive");
    const Mat Q = H * W_Q;
    const Mat K = E * W_K;
    return (Q * K.transpose()) / std::sqrt(static_cast<double>(d_k));
}

Mat softmax_rows(const Mat& logits) {
    Mat w(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        double z = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            const double e = std::exp(logits(r, c) - m);
            w(r, c) = e;
            z += e;
        }
        w.row(r) /= z;
    }
    return w;
}

AttendResult attend(const Mat& logits, const Mat& V, const LogitInterceptor* interceptor,
                    const AttentionSite& site, int step) {
    if (V.rows() != logits.cols()) throw ArgumentError("attend: V rows must equal the token count");
    AttendResult r;
    if (interceptor != nullptr && interceptor->policy().contains(site)) {
        r.logits = interceptor->transform(logits, site, step);
        if (r.logits.rows() != logits.rows() || r.logits.cols() != logits.cols())
            throw ContractViolation("interceptor changed the logit shape at " + to_string(site));
    } else {
        r.logits = logits;
    }
    r.weights = softmax_rows(r.logits);
    r.output = r.weights * V;
    return r;
}

}  // namespace memguard
