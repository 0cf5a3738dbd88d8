#pragma once

#include "memguard/array.hpp"

#include <functional>
#include <memory>
#include <vector>

// Minimal reverse-mode differentiation over row-major matrices.
namespace memguard::ad {

struct Node {
    Mat value;
    Mat grad;  // allocated lazily, same shape as value
    bool requires_grad = false;

    Mat& grad_ref();
};

using Var = std::shared_ptr<Node>;

Var leaf(Mat value, bool requires_grad = false);

// Records backward closures when enabled; a disabled graph just evaluates.
class Graph {
public:
    explicit Graph(bool record) : record_(record) {}

    bool recording() const noexcept { return record_; }

    // Output node for an op over `inputs`; `backward` runs only if recorded.
    Var make(Mat value, std::initializer_list<Var> inputs, std::function<void(const Node&)> backward);

    // Seeds d(root)/d(root) = 1 (root must be 1x1) and runs the tape in reverse.
    void backward(const Var& root);

    Var matmul(const Var& a, const Var& b);
    Var add(const Var& a, const Var& b);
    // a + row vector b broadcast down the rows.
    Var add_row(const Var& a, const Var& b);
    // a row r += g row (r / group).
    Var add_group_rows(const Var& a, const Var& g, int group);
    // a row r += p row (r % p.rows()).
    Var add_tiled(const Var& a, const Var& p);
    Var silu(const Var& a);
    Var concat_cols(const Var& a, const Var& b);
    Var gather_rows(const Var& table, const std::vector<int>& ids);

    // Spatial ops over activations laid out as (batch*h*w) x channels.
    Var im2col3x3(const Var& a, int batch, int h, int w);
    Var avgpool2(const Var& a, int batch, int h, int w);
    Var upsample2(const Var& a, int batch, int h, int w);

    // scale * sum((a - target)^2) as a 1x1 node.
    Var sum_squares_diff(const Var& a, const Mat& target, double scale);

private:
    bool record_;
    std::vector<std::function<void()>> tape_;
};

// Plain (untracked) kernels shared with inference code.
Mat im2col3x3(const Mat& a, int batch, int h, int w);
Mat col2im3x3(const Mat& cols, int batch, int h, int w, int channels);
Mat avgpool2(const Mat& a, int batch, int h, int w);
Mat upsample2(const Mat& a, int batch, int h, int w);
Mat silu(const Mat& a);

}  // namespace memguard::ad
