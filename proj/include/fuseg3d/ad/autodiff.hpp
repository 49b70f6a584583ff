#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "fuseg3d/core/tensor.hpp"

namespace fuseg3d::ad {

using core::Tensor;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline bool& grad_mode() {
    thread_local bool on = true;
    return on;
}

// RAII guard disabling tape construction (inference mode).
struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGrad() { grad_mode() = prev; }
};

struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;  // pushes this->grad into parents

    Tensor& ensure_grad() {
        if (!grad.defined()) grad = Tensor(value.shape());
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

inline std::uint64_t next_seq() {
    static std::uint64_t counter = 0;
    return ++counter;
}

class Var {
public:
    Var() = default;

    explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
        node_->seq = next_seq();
    }

    explicit Var(NodePtr n) : node_(std::move(n)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& value() { return node_->value; }
    Tensor& grad() { return node_->ensure_grad(); }
    const Tensor& grad_view() const { return node_->grad; }
    bool has_grad() const { return node_->grad.defined(); }
    void clear_grad() { node_->grad = Tensor(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const NodePtr& node() const { return node_; }

    const std::vector<std::int64_t>& shape() const { return node_->value.shape(); }
    std::int64_t numel() const { return node_->value.numel(); }

    Var detach() const { return Var(node_->value, false); }

private:
    NodePtr node_;
};

// Builds an op node. `bw` receives the finished node (value + grad) and must
// accumulate into the parents' grads. Parents that don't require grad still
// appear in `parents` so backward code can index them uniformly.
inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rg = false;
    if (grad_mode())
        for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    n->seq = next_seq();
    if (rg) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(bw);
    }
    return Var(n);
}

// Reverse pass from a scalar root (or any root given an explicit seed).
// The tape is consumed: node closures are released as they run.
inline void backward(const Var& root, Tensor seed = Tensor()) {
    Node* r = root.node().get();
    if (!r || !r->requires_grad)
        throw std::logic_error("backward: root does not require grad");
    if (!seed.defined()) {
        if (root.numel() != 1)
            throw std::logic_error("backward: non-scalar root needs an explicit seed");
        seed = Tensor(root.shape(), 1.0);
    }
    {
        Tensor& g = r->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
    }

    // The walk owns the nodes (shared_ptr) so that releasing edges below
    // cannot free a node still awaiting its turn.
    std::vector<NodePtr> order;
    std::unordered_set<Node*> seen;
    std::vector<NodePtr> stack{root.node()};
    seen.insert(r);
    while (!stack.empty()) {
        NodePtr n = std::move(stack.back());
        stack.pop_back();
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

    for (const NodePtr& n : order) {
        if (n->backward) {
            n->backward(*n);
            // Consume the tape as we go: closures (and the intermediate
            // values they capture) and op-node grads are no longer needed.
            n->backward = nullptr;
            n->parents.clear();
            if (n.get() != r) n->grad = Tensor();
        }
    }
}

inline void accumulate(Node& dst, const Tensor& g) {
    Tensor& acc = dst.ensure_grad();
    const std::int64_t n = acc.numel();
    double* a = acc.data();
    const double* b = g.data();
    for (std::int64_t i = 0; i < n; ++i) a[i] += b[i];
}

// ---- elementwise ----------------------------------------------------------

namespace detail {

template <class F>
Tensor map_tensor(const Tensor& x, F f) {
    Tensor y(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
    return y;
}

// dfn(x_i, y_i) = dy/dx at element i
template <class F, class D>
Var unary_op(const Var& x, F f, D dfn) {
    Tensor y = map_tensor(x.value(), f);
    return make_op(std::move(y), {x}, [x, dfn](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        const Tensor& xv = x.value();
        const Tensor& yv = self.value;
        const Tensor& gy = self.grad;
        const std::int64_t n = xv.numel();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i] * dfn(xv[i], yv[i]);
    });
}

inline void check_same_shape(const Var& a, const Var& b, const char* what) {
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    a.value().shape_str() + " vs " + b.value().shape_str());
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "add");
    Tensor y(a.shape());
    const std::int64_t n = y.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = a.value()[i] + b.value()[i];
    return make_op(std::move(y), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) accumulate(*a.node(), self.grad);
        if (b.requires_grad()) accumulate(*b.node(), self.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor y(a.shape());
    const std::int64_t n = y.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = a.value()[i] - b.value()[i];
    return make_op(std::move(y), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) accumulate(*a.node(), self.grad);
        if (b.requires_grad()) {
            Tensor& gb = b.node()->ensure_grad();
            const std::int64_t n = gb.numel();
            for (std::int64_t i = 0; i < n; ++i) gb[i] -= self.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor y(a.shape());
    const std::int64_t n = y.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = a.value()[i] * b.value()[i];
    return make_op(std::move(y), {a, b}, [a, b](Node& self) {
        const std::int64_t n = self.value.numel();
        if (a.requires_grad()) {
            Tensor& ga = a.node()->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += self.grad[i] * b.value()[i];
        }
        if (b.requires_grad()) {
            Tensor& gb = b.node()->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) gb[i] += self.grad[i] * a.value()[i];
        }
    });
}

inline Var mul_scalar(const Var& x, double s) {
    return detail::unary_op(x, [s](double v) { return v * s; },
                            [s](double, double) { return s; });
}

inline Var add_scalar(const Var& x, double s) {
    return detail::unary_op(x, [s](double v) { return v + s; },
                            [](double, double) { return 1.0; });
}

inline Var neg(const Var& x) { return mul_scalar(x, -1.0); }

inline Var exp_v(const Var& x) {
    return detail::unary_op(x, [](double v) { return std::exp(v); },
                            [](double, double y) { return y; });
}

inline Var sigmoid(const Var& x) {
    return detail::unary_op(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                            [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(const Var& x) {
    return detail::unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                            [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// erf-based GELU: x * Phi(x); smooth, so finite differences behave.
inline Var gelu(const Var& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(
        x,
        [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [=](double v, double) {
            const double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            return phi + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
        });
}

inline Var tanh_v(const Var& x) {
    return detail::unary_op(x, [](double v) { return std::tanh(v); },
                            [](double, double y) { return 1.0 - y * y; });
}

// ---- reductions ------------------------------------------------------------

inline Var sum(const Var& x) {
    double s = 0.0;
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) s += x.value()[i];
    return make_op(Tensor::scalar(s), {x}, [x](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        const double g = self.grad[0];
        const std::int64_t n = gx.numel();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
}

inline Var mean(const Var& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---- shape ops -------------------------------------------------------------

inline Var reshape(const Var& x, std::vector<std::int64_t> shape) {
    Tensor y = x.value().reshaped(std::move(shape));
    return make_op(std::move(y), {x}, [x](Node& self) {
        if (!x.requires_grad()) return;
        accumulate(*x.node(), self.grad.reshaped(x.shape()));
    });
}

namespace detail {

inline std::vector<std::int64_t> apply_perm(const std::vector<std::int64_t>& shape,
                                            const std::vector<std::int64_t>& perm) {
    std::vector<std::int64_t> out(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out[i] = shape[static_cast<std::size_t>(perm[i])];
    return out;
}

inline Tensor permute_tensor(const Tensor& x, const std::vector<std::int64_t>& perm) {
    const auto& xs = x.shape();
    const std::size_t nd = xs.size();
    Tensor y(apply_perm(xs, perm));
    std::vector<std::int64_t> xstr(nd, 1), ystr(nd, 1);
    for (std::size_t a = nd - 1; a > 0; --a) xstr[a - 1] = xstr[a] * xs[a];
    const auto& ys = y.shape();
    for (std::size_t a = nd - 1; a > 0; --a) ystr[a - 1] = ystr[a] * ys[a];
    const std::int64_t n = x.numel();
    std::vector<std::int64_t> idx(nd, 0);
    const double* xd = x.data();
    double* yd = y.data();
    for (std::int64_t f = 0; f < n; ++f) {
        std::int64_t yf = 0;
        for (std::size_t a = 0; a < nd; ++a) yf += idx[static_cast<std::size_t>(perm[a])] * ystr[a];
        yd[yf] = xd[f];
        for (std::size_t a = nd; a-- > 0;) {
            if (++idx[a] < xs[a]) break;
            idx[a] = 0;
        }
    }
    return y;
}

}  // namespace detail

inline Var permute(const Var& x, std::vector<std::int64_t> perm) {
    Tensor y = detail::permute_tensor(x.value(), perm);
    return make_op(std::move(y), {x}, [x, perm](Node& self) {
        if (!x.requires_grad()) return;
        std::vector<std::int64_t> inv(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i)
            inv[static_cast<std::size_t>(perm[i])] = static_cast<std::int64_t>(i);
        accumulate(*x.node(), detail::permute_tensor(self.grad, inv));
    });
}

// Concatenate along axis 1 of equally-shaped-elsewhere tensors (the layouts
// used here only ever concatenate channels).
inline Var concat_axis1(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input");
    const auto& s0 = xs[0].shape();
    std::int64_t outer = s0[0];
    std::int64_t inner = 1;
    for (std::size_t a = 2; a < s0.size(); ++a) inner *= s0[a];
    std::int64_t ctot = 0;
    for (const auto& x : xs) {
        const auto& s = x.shape();
        if (s.size() != s0.size() || s[0] != outer)
            throw std::invalid_argument("concat: incompatible shapes");
        for (std::size_t a = 2; a < s0.size(); ++a)
            if (s[a] != s0[a]) throw std::invalid_argument("concat: incompatible shapes");
        ctot += s[1];
    }
    std::vector<std::int64_t> yshape = s0;
    yshape[1] = ctot;
    Tensor y(yshape);
    std::int64_t coff = 0;
    for (const auto& x : xs) {
        const std::int64_t c = x.shape()[1];
        const double* xd = x.value().data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(xd + o * c * inner, xd + (o + 1) * c * inner,
                      y.data() + (o * ctot + coff) * inner);
        coff += c;
    }
    return make_op(std::move(y), xs, [xs, outer, inner, ctot](Node& self) {
        std::int64_t coff = 0;
        for (const auto& x : xs) {
            const std::int64_t c = x.shape()[1];
            if (x.requires_grad()) {
                Tensor& gx = x.node()->ensure_grad();
                for (std::int64_t o = 0; o < outer; ++o) {
                    const double* g = self.grad.data() + (o * ctot + coff) * inner;
                    double* dst = gx.data() + o * c * inner;
                    for (std::int64_t i = 0; i < c * inner; ++i) dst[i] += g[i];
                }
            }
            coff += c;
        }
    });
}

// ---- linear algebra --------------------------------------------------------

// y = x @ w + b with x:[N,Cin], w:[Cin,Cout], b:[Cout] (b optional).
inline Var linear(const Var& x, const Var& w, const Var& b = Var()) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
        throw std::invalid_argument("linear: bad shapes " + x.value().shape_str() + " x " +
                                    w.value().shape_str());
    const std::int64_t n = xs[0], cin = xs[1], cout = ws[1];
    Tensor y({n, cout});
    {
        ConstMatMap xm(x.value().data(), n, cin);
        ConstMatMap wm(w.value().data(), cin, cout);
        MatMap ym(y.data(), n, cout);
        ym.noalias() = xm * wm;
        if (b.defined()) {
            ConstMatMap bm(b.value().data(), 1, cout);
            ym.rowwise() += bm.row(0);
        }
    }
    std::vector<Var> parents = b.defined() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_op(std::move(y), std::move(parents), [x, w, b, n, cin, cout](Node& self) {
        ConstMatMap gy(self.grad.data(), n, cout);
        if (x.requires_grad()) {
            ConstMatMap wm(w.value().data(), cin, cout);
            MatMap gx(x.node()->ensure_grad().data(), n, cin);
            gx.noalias() += gy * wm.transpose();
        }
        if (w.requires_grad()) {
            ConstMatMap xm(x.value().data(), n, cin);
            MatMap gw(w.node()->ensure_grad().data(), cin, cout);
            gw.noalias() += xm.transpose() * gy;
        }
        if (b.defined() && b.requires_grad()) {
            MatMap gb(b.node()->ensure_grad().data(), 1, cout);
            gb.row(0) += gy.colwise().sum();
        }
    });
}

inline Var matmul(const Var& a, const Var& b) { return linear(a, b); }

// ---- softmax / normalization ----------------------------------------------

// Softmax over the last axis, max-subtracted for stability.
inline Var softmax_lastdim(const Var& x) {
    const auto& s = x.shape();
    const std::int64_t c = s.back();
    const std::int64_t rows = x.numel() / c;
    Tensor y(s);
    const double* xd = x.value().data();
    double* yd = y.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = xd + r * c;
        double* yr = yd + r * c;
        double mx = xr[0];
        for (std::int64_t i = 1; i < c; ++i) mx = std::max(mx, xr[i]);
        double z = 0.0;
        for (std::int64_t i = 0; i < c; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            z += yr[i];
        }
        const double inv = 1.0 / z;
        for (std::int64_t i = 0; i < c; ++i) yr[i] *= inv;
    }
    return make_op(std::move(y), {x}, [x, rows, c](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        const double* yd = self.value.data();
        const double* gy = self.grad.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* yr = yd + r * c;
            const double* gr = gy + r * c;
            double dot = 0.0;
            for (std::int64_t i = 0; i < c; ++i) dot += yr[i] * gr[i];
            double* gxr = gx.data() + r * c;
            for (std::int64_t i = 0; i < c; ++i) gxr[i] += yr[i] * (gr[i] - dot);
        }
    });
}

// LayerNorm over the last axis with affine parameters gamma/beta of size C.
inline Var layer_norm_lastdim(const Var& x, const Var& gamma, const Var& beta,
                              double eps = 1e-5) {
    const auto& s = x.shape();
    const std::int64_t c = s.back();
    if (gamma.numel() != c || beta.numel() != c)
        throw std::invalid_argument("layer_norm: affine size mismatch");
    const std::int64_t rows = x.numel() / c;
    Tensor y(s);
    Tensor xhat({rows, c});
    Tensor rstd({rows});
    const double* xd = x.value().data();
    const double* gm = gamma.value().data();
    const double* bt = beta.value().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = xd + r * c;
        double mu = 0.0;
        for (std::int64_t i = 0; i < c; ++i) mu += xr[i];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::int64_t i = 0; i < c; ++i) {
            const double d = xr[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double rs = 1.0 / std::sqrt(var + eps);
        rstd[r] = rs;
        double* hr = xhat.data() + r * c;
        double* yr = y.data() + r * c;
        for (std::int64_t i = 0; i < c; ++i) {
            hr[i] = (xr[i] - mu) * rs;
            yr[i] = hr[i] * gm[i] + bt[i];
        }
    }
    return make_op(std::move(y), {x, gamma, beta},
                   [x, gamma, beta, xhat, rstd, rows, c](Node& self) {
        const double* gy = self.grad.data();
        const double* hd = xhat.data();
        const double* gm = gamma.value().data();
        if (gamma.requires_grad()) {
            Tensor& gg = gamma.node()->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t i = 0; i < c; ++i) gg[i] += gy[r * c + i] * hd[r * c + i];
        }
        if (beta.requires_grad()) {
            Tensor& gb = beta.node()->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t i = 0; i < c; ++i) gb[i] += gy[r * c + i];
        }
        if (x.requires_grad()) {
            Tensor& gx = x.node()->ensure_grad();
            const double cn = static_cast<double>(c);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gr = gy + r * c;
                const double* hr = hd + r * c;
                double sum_g = 0.0, sum_gh = 0.0;
                for (std::int64_t i = 0; i < c; ++i) {
                    const double gi = gr[i] * gm[i];
                    sum_g += gi;
                    sum_gh += gi * hr[i];
                }
                const double rs = rstd[r];
                double* gxr = gx.data() + r * c;
                for (std::int64_t i = 0; i < c; ++i) {
                    const double gi = gr[i] * gm[i];
                    gxr[i] += rs * (gi - sum_g / cn - hr[i] * sum_gh / cn);
                }
            }
        }
    });
}

// Gathers rows of a [R, H] table into [H, P] output: out[h, p] = table[idx[p], h].
// Used for the per-window relative position bias.
inline Var gather_bias(const Var& table, const std::vector<std::int64_t>& idx,
                       std::vector<std::int64_t> out_shape) {
    const std::int64_t h = table.shape()[1];
    const std::int64_t p = static_cast<std::int64_t>(idx.size());
    Tensor y({h, p});
    const double* td = table.value().data();
    for (std::int64_t j = 0; j < p; ++j)
        for (std::int64_t hh = 0; hh < h; ++hh) y[hh * p + j] = td[idx[static_cast<std::size_t>(j)] * h + hh];
    return make_op(y.reshaped(std::move(out_shape)), {table}, [table, idx, h, p](Node& self) {
        if (!table.requires_grad()) return;
        Tensor& gt = table.node()->ensure_grad();
        const Tensor g = self.grad.reshaped({h, p});
        for (std::int64_t j = 0; j < p; ++j)
            for (std::int64_t hh = 0; hh < h; ++hh)
                gt[idx[static_cast<std::size_t>(j)] * h + hh] += g[hh * p + j];
    });
}

}  // namespace fuseg3d::ad
