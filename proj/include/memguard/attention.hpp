#pragma once

#include "memguard/array.hpp"

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace memguard {

enum class Block { down = 0, mid = 1, up = 2 };
inline constexpr Block kAllBlocks[] = {Block::down, Block::mid, Block::up};

std::string to_string(Block b);
Block parse_block(const std::string& s);  // throws ConfigError

struct AttentionSite {
    Block block = Block::down;
    int layer = 0;
    int head = 0;

    auto operator<=>(const AttentionSite&) const = default;
};

std::string to_string(const AttentionSite& s);
AttentionSite parse_site(const std::string& s);  // inverse of to_string; throws ConfigError

// One cross-attention head at one site and step. Queries are laid out on a grid_h x grid_w map.
struct TraceEntry {
    int step = 0;
    AttentionSite site;
    int grid_h = 0;
    int grid_w = 0;
    Mat logits;   // queries x kMaxTokens
    Mat weights;  // row-softmax of the (possibly intercepted) logits
};

struct AttentionTrace {
    std::vector<TraceEntry> entries;

    std::vector<const TraceEntry*> at_step(int step) const;
    std::vector<int> steps() const;
};

// Collects trace entries for one batch row; `step` is set by the sampler.
struct TraceRecorder {
    AttentionTrace trace;
    int step = 0;
    void record(const AttentionSite& site, int grid_h, int grid_w, const Mat& logits, const Mat& weights);
};

// Explicit set of attention sites.
class SitePolicy {
public:
    SitePolicy() = default;
    explicit SitePolicy(std::set<AttentionSite> sites) : sites_(std::move(sites)) {}
    // Every head (0..heads-1) of layer 0 in each listed block.
    static SitePolicy blocks(const std::vector<Block>& blocks, int heads);

    bool contains(const AttentionSite& s) const { return sites_.count(s) != 0; }
    bool empty() const noexcept { return sites_.empty(); }
    const std::set<AttentionSite>& sites() const noexcept { return sites_; }

private:
    std::set<AttentionSite> sites_;
};

// Pre-softmax hook. transform must be pure and shape-preserving.
class LogitInterceptor {
public:
    virtual ~LogitInterceptor() = default;
    virtual const SitePolicy& policy() const = 0;
    virtual Mat transform(const Mat& logits, const AttentionSite& site, int step) const = 0;
};

// Q K^T / sqrt(d_k) with Q = H W_Q, K = E W_K.
Mat attention_logits(const Mat& H, const Mat& E, const Mat& W_Q, const Mat& W_K, int d_k);

// Row softmax; -inf entries receive weight 0.
Mat softmax_rows(const Mat& logits);

struct AttendResult {
    Mat output;   // weights * V
    Mat weights;
    Mat logits;   // after interception
};

// Softmax(interceptor(l)) V when the interceptor's policy selects `site`, else softmax(l) V.
AttendResult attend(const Mat& logits, const Mat& V, const LogitInterceptor* interceptor,
                    const AttentionSite& site, int step);

}  // namespace memguard
