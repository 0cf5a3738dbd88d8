#include "memguard/autodiff.hpp"

#include "memguard/errors.hpp"

#include <algorithm>
#include <cmath>

namespace memguard::ad {

Mat& Node::grad_ref() {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    return grad;
}

Var leaf(Mat value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var Graph::make(Mat value, std::initializer_list<Var> inputs, std::function<void(const Node&)> backward) {
    auto out = std::make_shared<Node>();
    out->value = std::move(value);
    if (!record_) return out;
    bool any = false;
    for (const auto& v : inputs) any = any || v->requires_grad;
    if (!any) return out;
    out->requires_grad = true;
    tape_.push_back([out, backward = std::move(backward)]() {
        if (out->grad.size() != 0) backward(*out);
    });
    return out;
}

void Graph::backward(const Var& root) {
    if (root->value.rows() != 1 || root->value.cols() != 1)
        throw ArgumentError("Graph::backward: root must be a scalar");
    root->grad_ref()(0, 0) = 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    tape_.clear();
}

Var Graph::matmul(const Var& a, const Var& b) {
    if (a->value.cols() != b->value.rows()) throw ArgumentError("matmul: inner dimension mismatch");
    Mat v = a->value * b->value;
    return make(std::move(v), {a, b}, [a, b](const Node& o) {
        if (a->requires_grad) a->grad_ref().noalias() += o.grad * b->value.transpose();
        if (b->requires_grad) b->grad_ref().noalias() += a->value.transpose() * o.grad;
    });
}

Var Graph::add(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ArgumentError("add: shape mismatch");
    return make(a->value + b->value, {a, b}, [a, b](const Node& o) {
        if (a->requires_grad) a->grad_ref() += o.grad;
        if (b->requires_grad) b->grad_ref() += o.grad;
    });
}

Var Graph::add_row(const Var& a, const Var& b) {
    if (b->value.rows() != 1 || b->value.cols() != a->value.cols()) throw ArgumentError("add_row: shape mismatch");
    Mat v = a->value.rowwise() + b->value.row(0);
    return make(std::move(v), {a, b}, [a, b](const Node& o) {
        if (a->requires_grad) a->grad_ref() += o.grad;
        if (b->requires_grad) b->grad_ref() += o.grad.colwise().sum();
    });
}

Var Graph::add_group_rows(const Var& a, const Var& g, int group) {
    if (g->value.cols() != a->value.cols() || g->value.rows() * group != a->value.rows())
        throw ArgumentError("add_group_rows: shape mismatch");
    Mat v = a->value;
    for (Eigen::Index r = 0; r < v.rows(); ++r) v.row(r) += g->value.row(r / group);
    return make(std::move(v), {a, g}, [a, g, group](const Node& o) {
        if (a->requires_grad) a->grad_ref() += o.grad;
        if (g->requires_grad) {
            Mat& gg = g->grad_ref();
            for (Eigen::Index r = 0; r < o.grad.rows(); ++r) gg.row(r / group) += o.grad.row(r);
        }
    });
}

Var Graph::add_tiled(const Var& a, const Var& p) {
    const Eigen::Index n = p->value.rows();
    if (p->value.cols() != a->value.cols() || a->value.rows() % n != 0)
        throw ArgumentError("add_tiled: shape mismatch");
    Mat v = a->value;
    for (Eigen::Index r = 0; r < v.rows(); ++r) v.row(r) += p->value.row(r % n);
    return make(std::move(v), {a, p}, [a, p, n](const Node& o) {
        if (a->requires_grad) a->grad_ref() += o.grad;
        if (p->requires_grad) {
            Mat& gp = p->grad_ref();
            for (Eigen::Index r = 0; r < o.grad.rows(); ++r) gp.row(r % n) += o.grad.row(r);
        }
    });
}

Mat silu(const Mat& a) {
    return a.unaryExpr([](double x) { return x / (1.0 + std::exp(-x)); });
}

Var Graph::silu(const Var& a) {
    return make(ad::silu(a->value), {a}, [a](const Node& o) {
        Mat d = a->value.unaryExpr([](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
        a->grad_ref() += o.grad.cwiseProduct(d);
    });
}

Var Graph::concat_cols(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows()) throw ArgumentError("concat_cols: row mismatch");
    const Eigen::Index ca = a->value.cols(), cb = b->value.cols();
    Mat v(a->value.rows(), ca + cb);
    v.leftCols(ca) = a->value;
    v.rightCols(cb) = b->value;
    return make(std::move(v), {a, b}, [a, b, ca, cb](const Node& o) {
        if (a->requires_grad) a->grad_ref() += o.grad.leftCols(ca);
        if (b->requires_grad) b->grad_ref() += o.grad.rightCols(cb);
    });
}

Var Graph::gather_rows(const Var& table, const std::vector<int>& ids) {
    Mat v(static_cast<Eigen::Index>(ids.size()), table->value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table->value.rows()) throw ArgumentError("gather_rows: id out of range");
        v.row(static_cast<Eigen::Index>(i)) = table->value.row(ids[i]);
    }
    return make(std::move(v), {table}, [table, ids](const Node& o) {
        Mat& g = table->grad_ref();
        for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += o.grad.row(static_cast<Eigen::Index>(i));
    });
}

Mat im2col3x3(const Mat& a, int batch, int h, int w) {
    const Eigen::Index c = a.cols();
    if (a.rows() != Eigen::Index(batch) * h * w) throw ArgumentError("im2col3x3: row count mismatch");
    Mat out = Mat::Zero(a.rows(), 9 * c);
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Eigen::Index r = (Eigen::Index(b) * h + y) * w + x;
                for (int k = 0; k < 9; ++k) {
                    const int yy = y + k / 3 - 1, xx = x + k % 3 - 1;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    out.block(r, k * c, 1, c) = a.row((Eigen::Index(b) * h + yy) * w + xx);
                }
            }
    return out;
}

Mat col2im3x3(const Mat& cols, int batch, int h, int w, int channels) {
    Mat out = Mat::Zero(Eigen::Index(batch) * h * w, channels);
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Eigen::Index r = (Eigen::Index(b) * h + y) * w + x;
                for (int k = 0; k < 9; ++k) {
                    const int yy = y + k / 3 - 1, xx = x + k % 3 - 1;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    out.row((Eigen::Index(b) * h + yy) * w + xx) += cols.block(r, k * channels, 1, channels);
                }
            }
    return out;
}

Var Graph::im2col3x3(const Var& a, int batch, int h, int w) {
    const int c = static_cast<int>(a->value.cols());
    return make(ad::im2col3x3(a->value, batch, h, w), {a}, [a, batch, h, w, c](const Node& o) {
        a->grad_ref() += col2im3x3(o.grad, batch, h, w, c);
    });
}

Mat avgpool2(const Mat& a, int batch, int h, int w) {
    const int ho = h / 2, wo = w / 2;
    Mat out = Mat::Zero(Eigen::Index(batch) * ho * wo, a.cols());
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                out.row((Eigen::Index(b) * ho + y / 2) * wo + x / 2) += 0.25 * a.row((Eigen::Index(b) * h + y) * w + x);
    return out;
}

Mat upsample2(const Mat& a, int batch, int h, int w) {
    const int ho = h * 2, wo = w * 2;
    Mat out(Eigen::Index(batch) * ho * wo, a.cols());
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < ho; ++y)
            for (int x = 0; x < wo; ++x)
                out.row((Eigen::Index(b) * ho + y) * wo + x) = a.row((Eigen::Index(b) * h + y / 2) * w + x / 2);
    return out;
}

Var Graph::avgpool2(const Var& a, int batch, int h, int w) {
    return make(ad::avgpool2(a->value, batch, h, w), {a}, [a, batch, h, w](const Node& o) {
        Mat& g = a->grad_ref();
        const int ho = h / 2, wo = w / 2;
        for (int b = 0; b < batch; ++b)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    g.row((Eigen::Index(b) * h + y) * w + x) += 0.25 * o.grad.row((Eigen::Index(b) * ho + y / 2) * wo + x / 2);
    });
}

Var Graph::upsample2(const Var& a, int batch, int h, int w) {
    return make(ad::upsample2(a->value, batch, h, w), {a}, [a, batch, h, w](const Node& o) {
        Mat& g = a->grad_ref();
        const int ho = h * 2, wo = w * 2;
        for (int b = 0; b < batch; ++b)
            for (int y = 0; y < ho; ++y)
                for (int x = 0; x < wo; ++x)
                    g.row((Eigen::Index(b) * h + y / 2) * w + x / 2) += o.grad.row((Eigen::Index(b) * ho + y) * wo + x);
    });
}

Var Graph::sum_squares_diff(const Var& a, const Mat& target, double scale) {
    if (a->value.rows() != target.rows() || a->value.cols() != target.cols())
        throw ArgumentError("sum_squares_diff: shape mismatch");
    Mat diff = a->value - target;
    Mat v(1, 1);
    v(0, 0) = scale * diff.squaredNorm();
    return make(std::move(v), {a}, [a, diff = std::move(diff), scale](const Node& o) {
        a->grad_ref() += (2.0 * scale * o.grad(0, 0)) * diff;
    });
}

}  // namespace memguard::ad
