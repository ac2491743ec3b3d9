#include "satrack/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace satrack {

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) +
                             ": operand shapes do not match");
    }
}

bool want_grad(const Tensor& a) { return a.requires_grad(); }
bool want_grad(const Tensor& a, const Tensor& b) {
    return a.requires_grad() || b.requires_grad();
}
bool want_grad(const Tensor& a, const Tensor& b, const Tensor& c) {
    return a.requires_grad() || b.requires_grad() || c.requires_grad();
}

void record(std::function<void()> fn) {
    Tape::current()->record(std::move(fn));
}

bool taping(const Tensor& out) {
    return Tape::current() != nullptr && out.requires_grad();
}

// Shared implementation for elementwise binary ops with per-element
// backward factors computed from the saved operands.
template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          Fwd fwd, Bwd bwd) {
    check_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape(), want_grad(a, b));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    if (taping(out)) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        record([an, bn, on, bwd]() {
            if (on->grad.empty()) return;
            int64_t n = static_cast<int64_t>(on->data.size());
            bool ga = an->requires_grad, gb = bn->requires_grad;
            if (ga) detail::ensure_grad(*an);
            if (gb) detail::ensure_grad(*bn);
            for (int64_t i = 0; i < n; ++i) {
                double da = 0.0, db = 0.0;
                bwd(an->data[i], bn->data[i], on->grad[i], da, db);
                if (ga) an->grad[i] += da;
                if (gb) bn->grad[i] += db;
            }
        });
    }
    return out;
}

template <typename Fwd, typename Bwd>
Tensor elementwise_unary(const Tensor& x, Fwd fwd, Bwd bwd) {
    Tensor out = Tensor::zeros(x.shape(), want_grad(x));
    const double* px = x.data();
    double* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    if (taping(out)) {
        NodePtr xn = x.node(), on = out.node();
        record([xn, on, bwd]() {
            if (on->grad.empty()) return;
            detail::ensure_grad(*xn);
            int64_t n = static_cast<int64_t>(on->data.size());
            for (int64_t i = 0; i < n; ++i) {
                xn->grad[i] += bwd(xn->data[i], on->data[i]) * on->grad[i];
            }
        });
    }
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    // Ties route the gradient to the first operand.
    return elementwise_binary(
        a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
        [](double x, double y, double g, double& da, double& db) {
            if (x <= y) da = g; else db = g;
        });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y, double g, double& da, double& db) {
            if (x >= y) da = g; else db = g;
        });
}

Tensor scale(const Tensor& x, double c) {
    return elementwise_unary(
        x, [c](double v) { return c * v; },
        [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
    return elementwise_unary(
        x, [c](double v) { return v + c; },
        [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
    return elementwise_unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return elementwise_unary(
        x,
        [](double v) {
            return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                            : std::exp(v) / (1.0 + std::exp(v));
        },
        [](double, double s) { return s * (1.0 - s); });
}

Tensor abs(const Tensor& x) {
    // Subgradient at 0 is taken as 0.
    return elementwise_unary(
        x, [](double v) { return v < 0.0 ? -v : v; },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& x) {
    Tensor out = Tensor::zeros({1}, want_grad(x));
    double acc = 0.0;
    const double* px = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
    out.data()[0] = acc;
    if (taping(out)) {
        NodePtr xn = x.node(), on = out.node();
        record([xn, on]() {
            if (on->grad.empty()) return;
            detail::ensure_grad(*xn);
            double g = on->grad[0];
            for (double& v : xn->grad) v += g;
        });
    }
    return out;
}

Tensor add_rowwise(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || x.dim(1) != b.dim(0)) {
        throw DimensionError("add_rowwise expects [R x C] and [C]");
    }
    int64_t rows = x.dim(0), cols = x.dim(1);
    Tensor out = Tensor::zeros(x.shape(), want_grad(x, b));
    const double* px = x.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
            po[r * cols + c] = px[r * cols + c] + pb[c];
    if (taping(out)) {
        NodePtr xn = x.node(), bn = b.node(), on = out.node();
        record([xn, bn, on, rows, cols]() {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                detail::accumulate_grad(*xn, on->grad);
            }
            if (bn->requires_grad) {
                detail::ensure_grad(*bn);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cols; ++c)
                        bn->grad[c] += on->grad[r * cols + c];
            }
        });
    }
    return out;
}

Tensor add_broadcast_batch(const Tensor& x, const Tensor& p) {
    if (x.ndim() != 3 || p.ndim() != 2 || x.dim(1) != p.dim(0) ||
        x.dim(2) != p.dim(1)) {
        throw DimensionError("add_broadcast_batch expects [B x N x C] and [N x C]");
    }
    int64_t batch = x.dim(0), per = p.numel();
    Tensor out = Tensor::zeros(x.shape(), want_grad(x, p));
    const double* px = x.data();
    const double* pp = p.data();
    double* po = out.data();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < per; ++i)
            po[b * per + i] = px[b * per + i] + pp[i];
    if (taping(out)) {
        NodePtr xn = x.node(), pn = p.node(), on = out.node();
        record([xn, pn, on, batch, per]() {
            if (on->grad.empty()) return;
            if (xn->requires_grad) detail::accumulate_grad(*xn, on->grad);
            if (pn->requires_grad) {
                detail::ensure_grad(*pn);
                for (int64_t b = 0; b < batch; ++b)
                    for (int64_t i = 0; i < per; ++i)
                        pn->grad[i] += on->grad[b * per + i];
            }
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw DimensionError("matmul expects rank-2 operands");
    }
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul inner dimensions disagree: " +
                             std::to_string(a.dim(1)) + " vs " +
                             std::to_string(b.dim(0)));
    }
    int64_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    Tensor out = Tensor::zeros({m, p}, want_grad(a, b));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    uint64_t macs = 0;
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (int64_t t = 0; t < k; ++t) {
                acc += pa[i * k + t] * pb[t * p + j];
                ++macs;
            }
            po[i * p + j] = acc;
        }
    }
    MacCounter::add(macs);
    if (taping(out)) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        record([an, bn, on, m, k, p]() {
            if (on->grad.empty()) return;
            const std::vector<double>& g = on->grad;
            if (an->requires_grad) {
                detail::ensure_grad(*an);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t t = 0; t < k; ++t) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < p; ++j)
                            acc += g[i * p + j] * bn->data[t * p + j];
                        an->grad[i * k + t] += acc;
                    }
            }
            if (bn->requires_grad) {
                detail::ensure_grad(*bn);
                for (int64_t t = 0; t < k; ++t)
                    for (int64_t j = 0; j < p; ++j) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < m; ++i)
                            acc += an->data[i * k + t] * g[i * p + j];
                        bn->grad[t * p + j] += acc;
                    }
            }
        });
    }
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 3 || b.ndim() != 3) {
        throw DimensionError("bmm expects rank-3 operands");
    }
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw DimensionError("bmm operand shapes are incompatible");
    }
    int64_t g = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
    Tensor out = Tensor::zeros({g, m, p}, want_grad(a, b));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    uint64_t macs = 0;
    for (int64_t bi = 0; bi < g; ++bi) {
        const double* A = pa + bi * m * k;
        const double* B = pb + bi * k * p;
        double* O = po + bi * m * p;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < p; ++j) {
                double acc = 0.0;
                for (int64_t t = 0; t < k; ++t) {
                    acc += A[i * k + t] * B[t * p + j];
                    ++macs;
                }
                O[i * p + j] = acc;
            }
    }
    MacCounter::add(macs);
    if (taping(out)) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        record([an, bn, on, g, m, k, p]() {
            if (on->grad.empty()) return;
            for (int64_t bi = 0; bi < g; ++bi) {
                const double* G = on->grad.data() + bi * m * p;
                const double* A = an->data.data() + bi * m * k;
                const double* B = bn->data.data() + bi * k * p;
                if (an->requires_grad) {
                    detail::ensure_grad(*an);
                    double* dA = an->grad.data() + bi * m * k;
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t t = 0; t < k; ++t) {
                            double acc = 0.0;
                            for (int64_t j = 0; j < p; ++j)
                                acc += G[i * p + j] * B[t * p + j];
                            dA[i * k + t] += acc;
                        }
                }
                if (bn->requires_grad) {
                    detail::ensure_grad(*bn);
                    double* dB = bn->grad.data() + bi * k * p;
                    for (int64_t t = 0; t < k; ++t)
                        for (int64_t j = 0; j < p; ++j) {
                            double acc = 0.0;
                            for (int64_t i = 0; i < m; ++i)
                                acc += A[i * k + t] * G[i * p + j];
                            dB[t * p + j] += acc;
                        }
                }
            }
        });
    }
    return out;
}

Tensor transpose_last2(const Tensor& x) {
    if (x.ndim() != 2 && x.ndim() != 3) {
        throw DimensionError("transpose_last2 expects rank 2 or 3");
    }
    int64_t g = x.ndim() == 3 ? x.dim(0) : 1;
    int64_t m = x.dim(x.ndim() - 2), n = x.dim(x.ndim() - 1);
    Shape out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    Tensor out = Tensor::zeros(out_shape, want_grad(x));
    const double* px = x.data();
    double* po = out.data();
    for (int64_t bi = 0; bi < g; ++bi)
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                po[bi * m * n + j * m + i] = px[bi * m * n + i * n + j];
    if (taping(out)) {
        NodePtr xn = x.node(), on = out.node();
        record([xn, on, g, m, n]() {
            if (on->grad.empty()) return;
            detail::ensure_grad(*xn);
            for (int64_t bi = 0; bi < g; ++bi)
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j)
                        xn->grad[bi * m * n + i * n + j] +=
                            on->grad[bi * m * n + j * m + i];
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    Tensor out = Tensor::from_data(std::move(new_shape), x.values(),
                                   want_grad(x));
    if (out.numel() != x.numel()) {
        throw DimensionError("reshape changes the element count");
    }
    if (taping(out)) {
        NodePtr xn = x.node(), on = out.node();
        record([xn, on]() {
            if (on->grad.empty()) return;
            detail::accumulate_grad(*xn, on->grad);
        });
    }
    return out;
}

Tensor permute_0213(const Tensor& x) {
    if (x.ndim() != 4) throw DimensionError("permute_0213 expects rank 4");
    int64_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
    Tensor out = Tensor::zeros({a, c, b, d}, want_grad(x));
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < a; ++i)
        for (int64_t j = 0; j < b; ++j)
            for (int64_t k = 0; k < c; ++k)
                for (int64_t l = 0; l < d; ++l)
                    po[((i * c + k) * b + j) * d + l] =
                        px[((i * b + j) * c + k) * d + l];
    if (taping(out)) {
        NodePtr xn = x.node(), on = out.node();
        record([xn, on, a, b, c, d]() {
            if (on->grad.empty()) return;
            detail::ensure_grad(*xn);
            for (int64_t i = 0; i < a; ++i)
                for (int64_t j = 0; j < b; ++j)
                    for (int64_t k = 0; k < c; ++k)
                        for (int64_t l = 0; l < d; ++l)
                            xn->grad[((i * b + j) * c + k) * d + l] +=
                                on->grad[((i * c + k) * b + j) * d + l];
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
    if (x.ndim() != 2) throw DimensionError("gather_rows expects rank 2");
    int64_t r = x.dim(0), c = x.dim(1);
    for (int64_t i : rows) {
        if (i < 0 || i >= r) {
            throw DimensionError("gather_rows index out of range");
        }
    }
    int64_t k = static_cast<int64_t>(rows.size());
    if (k == 0) throw DimensionError("gather_rows requires at least one row");
    Tensor out = Tensor::zeros({k, c}, want_grad(x));
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < k; ++i)
        std::copy(px + rows[i] * c, px + (rows[i] + 1) * c, po + i * c);
    if (taping(out)) {
        NodePtr xn = x.node(), on = out.node();
        record([xn, on, rows, c]() {
            if (on->grad.empty()) return;
            detail::ensure_grad(*xn);
            for (size_t i = 0; i < rows.size(); ++i)
                for (int64_t j = 0; j < c; ++j)
                    xn->grad[rows[i] * c + j] +=
                        on->grad[static_cast<int64_t>(i) * c + j];
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t len) {
    if (x.ndim() != 2) throw DimensionError("slice_cols expects rank 2");
    int64_t r = x.dim(0), c = x.dim(1);
    if (c0 < 0 || len <= 0 || c0 + len > c) {
        throw DimensionError("slice_cols range out of bounds");
    }
    Tensor out = Tensor::zeros({r, len}, want_grad(x));
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < r; ++i)
        std::copy(px + i * c + c0, px + i * c + c0 + len, po + i * len);
    if (taping(out)) {
        NodePtr xn = x.node(), on = out.node();
        record([xn, on, r, c, c0, len]() {
            if (on->grad.empty()) return;
            detail::ensure_grad(*xn);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < len; ++j)
                    xn->grad[i * c + c0 + j] += on->grad[i * len + j];
        });
    }
    return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows requires input rows");
    int64_t c = rows[0].numel();
    bool rg = false;
    for (const Tensor& t : rows) {
        if (t.ndim() != 1 || t.numel() != c) {
            throw DimensionError("stack_rows expects equal-length [C] rows");
        }
        rg = rg || t.requires_grad();
    }
    int64_t k = static_cast<int64_t>(rows.size());
    Tensor out = Tensor::zeros({k, c}, rg);
    double* po = out.data();
    for (int64_t i = 0; i < k; ++i)
        std::copy(rows[i].data(), rows[i].data() + c, po + i * c);
    if (taping(out)) {
        std::vector<NodePtr> nodes;
        nodes.reserve(rows.size());
        for (const Tensor& t : rows) nodes.push_back(t.node());
        NodePtr on = out.node();
        record([nodes, on, c]() {
            if (on->grad.empty()) return;
            for (size_t i = 0; i < nodes.size(); ++i) {
                if (!nodes[i]->requires_grad) continue;
                detail::ensure_grad(*nodes[i]);
                for (int64_t j = 0; j < c; ++j)
                    nodes[i]->grad[j] += on->grad[static_cast<int64_t>(i) * c + j];
            }
        });
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 4 || b.ndim() != 4 || a.dim(0) != b.dim(0) ||
        a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw DimensionError("concat_channels expects [B x C x H x W] pairs "
                             "matching outside the channel axis");
    }
    int64_t batch = a.dim(0), c1 = a.dim(1), c2 = b.dim(1);
    int64_t hw = a.dim(2) * a.dim(3);
    Tensor out = Tensor::zeros({batch, c1 + c2, a.dim(2), a.dim(3)},
                               want_grad(a, b));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < batch; ++i) {
        std::copy(pa + i * c1 * hw, pa + (i + 1) * c1 * hw,
                  po + i * (c1 + c2) * hw);
        std::copy(pb + i * c2 * hw, pb + (i + 1) * c2 * hw,
                  po + i * (c1 + c2) * hw + c1 * hw);
    }
    if (taping(out)) {
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        record([an, bn, on, batch, c1, c2, hw]() {
            if (on->grad.empty()) return;
            for (int64_t i = 0; i < batch; ++i) {
                const double* g = on->grad.data() + i * (c1 + c2) * hw;
                if (an->requires_grad) {
                    detail::ensure_grad(*an);
                    double* da = an->grad.data() + i * c1 * hw;
                    for (int64_t j = 0; j < c1 * hw; ++j) da[j] += g[j];
                }
                if (bn->requires_grad) {
                    detail::ensure_grad(*bn);
                    double* db = bn->grad.data() + i * c2 * hw;
                    for (int64_t j = 0; j < c2 * hw; ++j)
                        db[j] += g[c1 * hw + j];
                }
            }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (w.ndim() != 2) throw DimensionError("linear weight must be rank 2");
    int64_t cin = w.dim(0), cout = w.dim(1);
    if (x.dim(x.ndim() - 1) != cin) {
        throw DimensionError("linear input trailing dimension mismatch");
    }
    int64_t rows = x.numel() / cin;
    Tensor flat = reshape(x, {rows, cin});
    Tensor y = matmul(flat, w);
    if (bias.defined()) y = add_rowwise(y, bias);
    Shape out_shape = x.shape();
    out_shape.back() = cout;
    return reshape(y, std::move(out_shape));
}

Tensor linear(const Tensor& x, const Tensor& w) {
    return linear(x, w, Tensor());
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4) {
        throw DimensionError("conv2d expects x [B x C x H x W], w [O x C x k x k]");
    }
    if (x.dim(1) != w.dim(1)) {
        throw DimensionError("conv2d input channel mismatch");
    }
    if (w.dim(2) != w.dim(3)) {
        throw ConfigError("conv2d supports square kernels only");
    }
    if (stride < 1 || pad < 0) throw ConfigError("conv2d bad stride/padding");
    int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t cout = w.dim(0), k = w.dim(2);
    int64_t ho = (h + 2 * pad - k) / stride + 1;
    int64_t wo = (wd + 2 * pad - k) / stride + 1;
    if (h + 2 * pad < k || wd + 2 * pad < k) {
        throw DimensionError("conv2d kernel larger than padded input");
    }
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout)) {
        throw DimensionError("conv2d bias must be [Cout]");
    }
    bool rg = want_grad(x, w) || (bias.defined() && bias.requires_grad());
    Tensor out = Tensor::zeros({batch, cout, ho, wo}, rg);
    const double* px = x.data();
    const double* pw = w.data();
    double* po = out.data();
    uint64_t macs = 0;
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t oc = 0; oc < cout; ++oc)
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox) {
                    double acc = bias.defined() ? bias.data()[oc] : 0.0;
                    for (int64_t ic = 0; ic < cin; ++ic)
                        for (int64_t ky = 0; ky < k; ++ky)
                            for (int64_t kx = 0; kx < k; ++kx) {
                                int64_t iy = oy * stride + ky - pad;
                                int64_t ix = ox * stride + kx - pad;
                                double v = (iy >= 0 && iy < h && ix >= 0 &&
                                            ix < wd)
                                               ? px[((b * cin + ic) * h + iy) *
                                                        wd +
                                                    ix]
                                               : 0.0;
                                acc += pw[((oc * cin + ic) * k + ky) * k + kx] *
                                       v;
                                ++macs;
                            }
                    po[((b * cout + oc) * ho + oy) * wo + ox] = acc;
                }
    MacCounter::add(macs);
    if (taping(out)) {
        NodePtr xn = x.node(), wn = w.node(), on = out.node();
        NodePtr biasn = bias.defined() ? bias.node() : nullptr;
        int64_t s = stride, p = pad;
        record([xn, wn, biasn, on, batch, cin, cout, h, wd, k, ho, wo, s, p]() {
            if (on->grad.empty()) return;
            bool gx = xn->requires_grad, gw = wn->requires_grad;
            bool gb = biasn && biasn->requires_grad;
            if (gx) detail::ensure_grad(*xn);
            if (gw) detail::ensure_grad(*wn);
            if (gb) detail::ensure_grad(*biasn);
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t oc = 0; oc < cout; ++oc)
                    for (int64_t oy = 0; oy < ho; ++oy)
                        for (int64_t ox = 0; ox < wo; ++ox) {
                            double g = on->grad[((b * cout + oc) * ho + oy) *
                                                    wo +
                                                ox];
                            if (g == 0.0) continue;
                            if (gb) biasn->grad[oc] += g;
                            for (int64_t ic = 0; ic < cin; ++ic)
                                for (int64_t ky = 0; ky < k; ++ky)
                                    for (int64_t kx = 0; kx < k; ++kx) {
                                        int64_t iy = oy * s + ky - p;
                                        int64_t ix = ox * s + kx - p;
                                        if (iy < 0 || iy >= h || ix < 0 ||
                                            ix >= wd)
                                            continue;
                                        int64_t xi =
                                            ((b * cin + ic) * h + iy) * wd + ix;
                                        int64_t wi =
                                            ((oc * cin + ic) * k + ky) * k + kx;
                                        if (gx)
                                            xn->grad[xi] += wn->data[wi] * g;
                                        if (gw)
                                            wn->grad[wi] += xn->data[xi] * g;
                                    }
                        }
        });
    }
    return out;
}

Tensor conv2d_depthwise(const Tensor& x, const Tensor& kernel,
                        const Tensor& bias) {
    if (x.ndim() != 4 || kernel.ndim() != 3) {
        throw DimensionError(
            "conv2d_depthwise expects x [B x C x H x W], kernel [C x k x k]");
    }
    if (kernel.dim(1) != kernel.dim(2)) {
        throw ConfigError("depthwise kernel must be square");
    }
    int64_t k = kernel.dim(1);
    if (k % 2 == 0) {
        throw ConfigError("depthwise kernel size must be odd, got " +
                          std::to_string(k));
    }
    if (x.dim(1) != kernel.dim(0)) {
        throw DimensionError("depthwise channel mismatch");
    }
    if (bias.ndim() != 1 || bias.dim(0) != x.dim(1)) {
        throw DimensionError("depthwise bias must be [C]");
    }
    int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t p = k / 2;
    bool rg = want_grad(x, kernel, bias);
    Tensor out = Tensor::zeros(x.shape(), rg);
    const double* px = x.data();
    const double* pk = kernel.data();
    const double* pb = bias.data();
    double* po = out.data();
    uint64_t macs = 0;
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t oy = 0; oy < h; ++oy)
                for (int64_t ox = 0; ox < wd; ++ox) {
                    double acc = pb[ch];
                    for (int64_t ky = 0; ky < k; ++ky)
                        for (int64_t kx = 0; kx < k; ++kx) {
                            int64_t iy = oy + ky - p;
                            int64_t ix = ox + kx - p;
                            double v = (iy >= 0 && iy < h && ix >= 0 && ix < wd)
                                           ? px[((b * c + ch) * h + iy) * wd + ix]
                                           : 0.0;
                            acc += pk[(ch * k + ky) * k + kx] * v;
                            ++macs;
                        }
                    po[((b * c + ch) * h + oy) * wd + ox] = acc;
                }
    MacCounter::add(macs);
    if (taping(out)) {
        NodePtr xn = x.node(), kn = kernel.node(), bn = bias.node(),
                on = out.node();
        record([xn, kn, bn, on, batch, c, h, wd, k, p]() {
            if (on->grad.empty()) return;
            bool gx = xn->requires_grad, gk = kn->requires_grad,
                 gb = bn->requires_grad;
            if (gx) detail::ensure_grad(*xn);
            if (gk) detail::ensure_grad(*kn);
            if (gb) detail::ensure_grad(*bn);
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t ch = 0; ch < c; ++ch)
                    for (int64_t oy = 0; oy < h; ++oy)
                        for (int64_t ox = 0; ox < wd; ++ox) {
                            double g =
                                on->grad[((b * c + ch) * h + oy) * wd + ox];
                            if (g == 0.0) continue;
                            if (gb) bn->grad[ch] += g;
                            for (int64_t ky = 0; ky < k; ++ky)
                                for (int64_t kx = 0; kx < k; ++kx) {
                                    int64_t iy = oy + ky - p;
                                    int64_t ix = ox + kx - p;
                                    if (iy < 0 || iy >= h || ix < 0 || ix >= wd)
                                        continue;
                                    int64_t xi =
                                        ((b * c + ch) * h + iy) * wd + ix;
                                    int64_t ki = (ch * k + ky) * k + kx;
                                    if (gx) xn->grad[xi] += kn->data[ki] * g;
                                    if (gk) kn->grad[ki] += xn->data[xi] * g;
                                }
                        }
        });
    }
    return out;
}

Tensor conv2d_pointwise(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.ndim() != 4 || w.ndim() != 2 || w.dim(1) != x.dim(1)) {
        throw DimensionError(
            "conv2d_pointwise expects x [B x Cin x H x W], w [Cout x Cin]");
    }
    int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t cout = w.dim(0);
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout)) {
        throw DimensionError("pointwise bias must be [Cout]");
    }
    bool rg = want_grad(x, w) || (bias.defined() && bias.requires_grad());
    Tensor out = Tensor::zeros({batch, cout, h, wd}, rg);
    const double* px = x.data();
    const double* pw = w.data();
    double* po = out.data();
    int64_t hw = h * wd;
    uint64_t macs = 0;
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t oc = 0; oc < cout; ++oc)
            for (int64_t i = 0; i < hw; ++i) {
                double acc = bias.defined() ? bias.data()[oc] : 0.0;
                for (int64_t ic = 0; ic < cin; ++ic) {
                    acc += pw[oc * cin + ic] * px[(b * cin + ic) * hw + i];
                    ++macs;
                }
                po[(b * cout + oc) * hw + i] = acc;
            }
    MacCounter::add(macs);
    if (taping(out)) {
        NodePtr xn = x.node(), wn = w.node(), on = out.node();
        NodePtr biasn = bias.defined() ? bias.node() : nullptr;
        record([xn, wn, biasn, on, batch, cin, cout, hw]() {
            if (on->grad.empty()) return;
            bool gx = xn->requires_grad, gw = wn->requires_grad;
            bool gb = biasn && biasn->requires_grad;
            if (gx) detail::ensure_grad(*xn);
            if (gw) detail::ensure_grad(*wn);
            if (gb) detail::ensure_grad(*biasn);
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t oc = 0; oc < cout; ++oc)
                    for (int64_t i = 0; i < hw; ++i) {
                        double g = on->grad[(b * cout + oc) * hw + i];
                        if (g == 0.0) continue;
                        if (gb) biasn->grad[oc] += g;
                        for (int64_t ic = 0; ic < cin; ++ic) {
                            int64_t xi = (b * cin + ic) * hw + i;
                            if (gx)
                                xn->grad[xi] += wn->data[oc * cin + ic] * g;
                            if (gw)
                                wn->grad[oc * cin + ic] += xn->data[xi] * g;
                        }
                    }
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    if (x.ndim() < 1) throw DimensionError("softmax_rows needs rank >= 1");
    int64_t d = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape(), want_grad(x));
    const double* px = x.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double mx = row[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        double z = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            po[r * d + i] = std::exp(row[i] - mx);
            z += po[r * d + i];
        }
        for (int64_t i = 0; i < d; ++i) po[r * d + i] /= z;
    }
    if (taping(out)) {
        NodePtr xn = x.node(), on = out.node();
        record([xn, on, rows, d]() {
            if (on->grad.empty()) return;
            detail::ensure_grad(*xn);
            for (int64_t r = 0; r < rows; ++r) {
                const double* s = on->data.data() + r * d;
                const double* g = on->grad.data() + r * d;
                double dot = 0.0;
                for (int64_t i = 0; i < d; ++i) dot += s[i] * g[i];
                for (int64_t i = 0; i < d; ++i)
                    xn->grad[r * d + i] += s[i] * (g[i] - dot);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
    if (x.ndim() < 1) throw DimensionError("layer_norm needs rank >= 1");
    int64_t c = x.dim(x.ndim() - 1);
    if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 ||
        beta.dim(0) != c) {
        throw DimensionError("layer_norm gamma/beta must be [C]");
    }
    int64_t rows = x.numel() / c;
    Tensor out = Tensor::zeros(x.shape(), want_grad(x, gamma, beta));
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    double* po = out.data();
    auto hat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * c;
        double mean = 0.0;
        for (int64_t i = 0; i < c; ++i) mean += row[i];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t i = 0; i < c; ++i) {
            double dv = row[i] - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(c);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int64_t i = 0; i < c; ++i) {
            double h = (row[i] - mean) * is;
            (*hat)[r * c + i] = h;
            po[r * c + i] = pg[i] * h + pb[i];
        }
    }
    if (taping(out)) {
        NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node(),
                on = out.node();
        record([xn, gn, bn, on, hat, inv_std, rows, c]() {
            if (on->grad.empty()) return;
            bool gx = xn->requires_grad, gg = gn->requires_grad,
                 gb = bn->requires_grad;
            if (gx) detail::ensure_grad(*xn);
            if (gg) detail::ensure_grad(*gn);
            if (gb) detail::ensure_grad(*bn);
            for (int64_t r = 0; r < rows; ++r) {
                const double* g = on->grad.data() + r * c;
                const double* h = hat->data() + r * c;
                if (gg || gb) {
                    for (int64_t i = 0; i < c; ++i) {
                        if (gg) gn->grad[i] += g[i] * h[i];
                        if (gb) bn->grad[i] += g[i];
                    }
                }
                if (gx) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (int64_t i = 0; i < c; ++i) {
                        double dh = g[i] * gn->data[i];
                        mean_dh += dh;
                        mean_dh_h += dh * h[i];
                    }
                    mean_dh /= static_cast<double>(c);
                    mean_dh_h /= static_cast<double>(c);
                    double is = (*inv_std)[r];
                    for (int64_t i = 0; i < c; ++i) {
                        double dh = g[i] * gn->data[i];
                        xn->grad[r * c + i] +=
                            is * (dh - mean_dh - h[i] * mean_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

Tensor cross_entropy_rows(const Tensor& logits,
                          const std::vector<int64_t>& targets) {
    if (logits.ndim() != 2) {
        throw DimensionError("cross_entropy_rows expects [R x K] logits");
    }
    int64_t r = logits.dim(0), k = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != r) {
        throw DimensionError("cross_entropy_rows target count mismatch");
    }
    for (int64_t t : targets) {
        if (t < 0 || t >= k) throw DimensionError("target class out of range");
    }
    Tensor out = Tensor::zeros({r}, want_grad(logits));
    const double* pz = logits.data();
    double* po = out.data();
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    for (int64_t i = 0; i < r; ++i) {
        const double* row = pz + i * k;
        double mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) {
            (*probs)[i * k + j] = std::exp(row[j] - mx);
            z += (*probs)[i * k + j];
        }
        for (int64_t j = 0; j < k; ++j) (*probs)[i * k + j] /= z;
        po[i] = std::log(z) + mx - row[targets[static_cast<size_t>(i)]];
    }
    if (taping(out)) {
        NodePtr zn = logits.node(), on = out.node();
        record([zn, on, probs, targets, r, k]() {
            if (on->grad.empty()) return;
            detail::ensure_grad(*zn);
            for (int64_t i = 0; i < r; ++i) {
                double g = on->grad[i];
                if (g == 0.0) continue;
                for (int64_t j = 0; j < k; ++j) {
                    double ind =
                        (j == targets[static_cast<size_t>(i)]) ? 1.0 : 0.0;
                    zn->grad[i * k + j] += g * ((*probs)[i * k + j] - ind);
                }
            }
        });
    }
    return out;
}

} // namespace satrack
