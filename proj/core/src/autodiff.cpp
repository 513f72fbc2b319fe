#include "qsv/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

#include "qsv/error.hpp"

namespace qsv::ad {

namespace {

thread_local bool t_finite_checks = true;
thread_local GradSink* t_sink = nullptr;

void accumulate(Tensor& dst, const Tensor& src) {
    const size_t n = dst.numel();
    double* d = dst.data();
    const double* s = src.data();
    for (size_t i = 0; i < n; ++i) d[i] += s[i];
}

/// Gradient destination for a node: named/requires-grad leaves are redirected
/// to the active sink so shared parameters are never mutated from worker
/// threads; everything else accumulates in the node itself.
Tensor& grad_buf(Node& n) {
    if (t_sink && n.requires_grad && !n.backprop) return t_sink->slot(n);
    return n.ensure_grad();
}

NodePtr make_node(Tensor data, std::vector<NodePtr> parents, const char* tag,
                  std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->data = std::move(data);
    n->parents = std::move(parents);
    n->tag = tag;
    for (const auto& p : n->parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->backprop = std::move(backprop);
    if (t_finite_checks && !n->data.all_finite()) {
        raise_numeric("op '", tag, "' produced non-finite values");
    }
    return n;
}

void check_same_shape(const char* op, const Value& a, const Value& b) {
    if (!a.data().same_shape(b.data())) {
        raise_shape(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                    shape_str(b.shape()));
    }
}

size_t last_dim(const Value& x, const char* op) {
    if (x.shape().empty()) raise_shape(op, ": rank-0 input");
    return x.shape().back();
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (!grad_materialized) {
        grad = Tensor(data.shape());
        grad_materialized = true;
    }
    return grad;
}

Value Value::constant(Tensor t, const char* tag) {
    auto n = std::make_shared<Node>();
    n->data = std::move(t);
    n->tag = tag;
    return Value(std::move(n));
}

Value Value::param(Tensor t, std::string name) {
    auto n = std::make_shared<Node>();
    n->data = std::move(t);
    n->tag = "param";
    n->name = std::move(name);
    n->requires_grad = true;
    return Value(std::move(n));
}

const Tensor& Value::grad() const {
    if (!node_->grad_materialized) {
        raise_state("grad: no gradient materialized for '",
                    node_->name.empty() ? node_->tag : node_->name.c_str(), "'");
    }
    return node_->grad;
}

void Value::zero_grad() {
    node_->grad = Tensor();
    node_->grad_materialized = false;
    node_->backward_done = false;
}

void set_finite_checks(bool enabled) { t_finite_checks = enabled; }
bool finite_checks_enabled() { return t_finite_checks; }

// ---- elementwise -----------------------------------------------------------

Value add(const Value& a, const Value& b) {
    check_same_shape("add", a, b);
    Tensor out = a.data();
    accumulate(out, b.data());
    return Value(make_node(std::move(out), {a.node(), b.node()}, "add",
                           [](Node& self) {
                               for (int k = 0; k < 2; ++k) {
                                   Node& p = *self.parents[k];
                                   if (p.requires_grad) accumulate(grad_buf(p), self.grad);
                               }
                           }));
}

Value sub(const Value& a, const Value& b) {
    check_same_shape("sub", a, b);
    Tensor out = a.data();
    {
        double* d = out.data();
        const double* s = b.data().data();
        for (size_t i = 0; i < out.numel(); ++i) d[i] -= s[i];
    }
    return Value(make_node(std::move(out), {a.node(), b.node()}, "sub",
                           [](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad) accumulate(grad_buf(pa), self.grad);
                               if (pb.requires_grad) {
                                   Tensor& g = grad_buf(pb);
                                   for (size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
                               }
                           }));
}

Value mul(const Value& a, const Value& b) {
    check_same_shape("mul", a, b);
    Tensor out = a.data();
    {
        double* d = out.data();
        const double* s = b.data().data();
        for (size_t i = 0; i < out.numel(); ++i) d[i] *= s[i];
    }
    return Value(make_node(std::move(out), {a.node(), b.node()}, "mul",
                           [](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad) {
                                   Tensor& g = grad_buf(pa);
                                   const double* bd = pb.data.data();
                                   for (size_t i = 0; i < g.numel(); ++i)
                                       g[i] += self.grad[i] * bd[i];
                               }
                               if (pb.requires_grad) {
                                   Tensor& g = grad_buf(pb);
                                   const double* ad = pa.data.data();
                                   for (size_t i = 0; i < g.numel(); ++i)
                                       g[i] += self.grad[i] * ad[i];
                               }
                           }));
}

Value scale(const Value& a, double c) {
    Tensor out = a.data();
    for (size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return Value(make_node(std::move(out), {a.node()}, "scale",
                           [c](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               for (size_t i = 0; i < g.numel(); ++i)
                                   g[i] += c * self.grad[i];
                           }));
}

// ---- matrix ops ------------------------------------------------------------

Value matmul(const Value& a, const Value& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 ||
        a.shape()[1] != b.shape()[0]) {
        raise_shape("matmul: incompatible shapes ", shape_str(a.shape()), " x ",
                    shape_str(b.shape()));
    }
    const size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out(Shape{m, n});
    {
        const double* A = a.data().data();
        const double* B = b.data().data();
        double* C = out.data();
        for (size_t i = 0; i < m; ++i) {
            for (size_t p = 0; p < k; ++p) {
                const double av = A[i * k + p];
                const double* brow = B + p * n;
                double* crow = C + i * n;
                for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    return Value(make_node(std::move(out), {a.node(), b.node()}, "matmul",
                           [m, k, n](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               const double* G = self.grad.data();
                               if (pa.requires_grad) {
                                   Tensor& da = grad_buf(pa);
                                   const double* B = pb.data.data();
                                   for (size_t i = 0; i < m; ++i) {
                                       for (size_t p = 0; p < k; ++p) {
                                           const double* grow = G + i * n;
                                           const double* brow = B + p * n;
                                           double acc = 0.0;
                                           for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                           da[i * k + p] += acc;
                                       }
                                   }
                               }
                               if (pb.requires_grad) {
                                   Tensor& db = grad_buf(pb);
                                   const double* A = pa.data.data();
                                   for (size_t i = 0; i < m; ++i) {
                                       for (size_t p = 0; p < k; ++p) {
                                           const double av = A[i * k + p];
                                           const double* grow = G + i * n;
                                           double* drow = db.data() + p * n;
                                           for (size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                                       }
                                   }
                               }
                           }));
}

Value transpose(const Value& a) {
    if (a.shape().size() != 2) {
        raise_shape("transpose: expected rank 2, got ", shape_str(a.shape()));
    }
    const size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out(Shape{n, m});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return Value(make_node(std::move(out), {a.node()}, "transpose",
                           [m, n](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               for (size_t i = 0; i < m; ++i)
                                   for (size_t j = 0; j < n; ++j)
                                       g[i * n + j] += self.grad[j * m + i];
                           }));
}

Value linear(const Value& x, const Value& w, const Value& b) {
    const size_t in = last_dim(x, "linear");
    if (w.shape().size() != 2 || w.shape()[0] != in) {
        raise_shape("linear: weight ", shape_str(w.shape()),
                    " does not match input ", shape_str(x.shape()));
    }
    const size_t out_dim = w.shape()[1];
    const size_t rows = x.data().numel() / in;
    const bool has_bias = b.defined();
    if (has_bias && (b.shape().size() != 1 || b.shape()[0] != out_dim)) {
        raise_shape("linear: bias ", shape_str(b.shape()), " does not match out=",
                    out_dim);
    }
    Shape out_shape(x.shape());
    out_shape.back() = out_dim;
    Tensor out(std::move(out_shape));
    {
        const double* X = x.data().data();
        const double* W = w.data().data();
        double* Y = out.data();
        if (has_bias) {
            const double* B = b.data().data();
            for (size_t r = 0; r < rows; ++r)
                std::memcpy(Y + r * out_dim, B, out_dim * sizeof(double));
        }
        for (size_t r = 0; r < rows; ++r) {
            const double* xrow = X + r * in;
            double* yrow = Y + r * out_dim;
            for (size_t i = 0; i < in; ++i) {
                const double xv = xrow[i];
                const double* wrow = W + i * out_dim;
                for (size_t o = 0; o < out_dim; ++o) yrow[o] += xv * wrow[o];
            }
        }
    }
    std::vector<NodePtr> parents{x.node(), w.node()};
    if (has_bias) parents.push_back(b.node());
    return Value(make_node(
        std::move(out), std::move(parents), "linear",
        [rows, in, out_dim, has_bias](Node& self) {
            Node& px = *self.parents[0];
            Node& pw = *self.parents[1];
            const double* G = self.grad.data();
            if (px.requires_grad) {
                Tensor& dx = grad_buf(px);
                const double* W = pw.data.data();
                for (size_t r = 0; r < rows; ++r) {
                    const double* grow = G + r * out_dim;
                    double* drow = dx.data() + r * in;
                    for (size_t i = 0; i < in; ++i) {
                        const double* wrow = W + i * out_dim;
                        double acc = 0.0;
                        for (size_t o = 0; o < out_dim; ++o) acc += grow[o] * wrow[o];
                        drow[i] += acc;
                    }
                }
            }
            if (pw.requires_grad) {
                Tensor& dw = grad_buf(pw);
                const double* X = px.data.data();
                for (size_t r = 0; r < rows; ++r) {
                    const double* xrow = X + r * in;
                    const double* grow = G + r * out_dim;
                    for (size_t i = 0; i < in; ++i) {
                        const double xv = xrow[i];
                        double* dwrow = dw.data() + i * out_dim;
                        for (size_t o = 0; o < out_dim; ++o) dwrow[o] += xv * grow[o];
                    }
                }
            }
            if (has_bias) {
                Node& pb = *self.parents[2];
                if (pb.requires_grad) {
                    Tensor& db = grad_buf(pb);
                    for (size_t r = 0; r < rows; ++r) {
                        const double* grow = G + r * out_dim;
                        for (size_t o = 0; o < out_dim; ++o) db[o] += grow[o];
                    }
                }
            }
        }));
}

// ---- reductions ------------------------------------------------------------

namespace {
// Decompose a shape around `axis` into outer s, axis n, inner s.
void axis_split(const Shape& s, size_t axis, size_t& outer, size_t& n,
                size_t& inner) {
    outer = 1;
    for (size_t i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    inner = 1;
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace

Value sum_axis(const Value& x, size_t axis) {
    if (axis >= x.shape().size()) {
        raise_shape("sum_axis: axis ", axis, " out of range for ",
                    shape_str(x.shape()));
    }
    size_t outer, n, inner;
    axis_split(x.shape(), axis, outer, n, inner);
    Shape out_shape;
    for (size_t i = 0; i < x.shape().size(); ++i)
        if (i != axis) out_shape.push_back(x.shape()[i]);
    Tensor out(out_shape);
    {
        const double* X = x.data().data();
        double* Y = out.data();
        for (size_t o = 0; o < outer; ++o)
            for (size_t a = 0; a < n; ++a) {
                const double* src = X + (o * n + a) * inner;
                double* dst = Y + o * inner;
                for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    }
    return Value(make_node(std::move(out), {x.node()}, "sum_axis",
                           [outer, n, inner](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               const double* G = self.grad.data();
                               for (size_t o = 0; o < outer; ++o)
                                   for (size_t a = 0; a < n; ++a) {
                                       double* dst = g.data() + (o * n + a) * inner;
                                       const double* src = G + o * inner;
                                       for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
                                   }
                           }));
}

Value mean_axis(const Value& x, size_t axis) {
    if (axis >= x.shape().size()) {
        raise_shape("mean_axis: axis ", axis, " out of range for ",
                    shape_str(x.shape()));
    }
    const double inv = 1.0 / static_cast<double>(x.shape()[axis]);
    return scale(sum_axis(x, axis), inv);
}

Value sum_all(const Value& x) {
    double total = 0.0;
    for (size_t i = 0; i < x.data().numel(); ++i) total += x.data()[i];
    return Value(make_node(Tensor::scalar(total), {x.node()}, "sum_all",
                           [](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               const double gv = self.grad[0];
                               for (size_t i = 0; i < g.numel(); ++i) g[i] += gv;
                           }));
}

// ---- row-wise nonlinearities -----------------------------------------------

Value softmax_last(const Value& x) {
    const size_t width = last_dim(x, "softmax");
    const size_t rows = x.data().numel() / width;
    Tensor out(x.shape());
    {
        const double* X = x.data().data();
        double* Y = out.data();
        for (size_t r = 0; r < rows; ++r) {
            const double* xr = X + r * width;
            double* yr = Y + r * width;
            double m = xr[0];
            for (size_t j = 1; j < width; ++j) m = std::max(m, xr[j]);
            double z = 0.0;
            for (size_t j = 0; j < width; ++j) {
                yr[j] = std::exp(xr[j] - m);
                z += yr[j];
            }
            const double inv = 1.0 / z;
            for (size_t j = 0; j < width; ++j) yr[j] *= inv;
        }
    }
    return Value(make_node(std::move(out), {x.node()}, "softmax",
                           [rows, width](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               const double* Y = self.data.data();
                               const double* G = self.grad.data();
                               for (size_t r = 0; r < rows; ++r) {
                                   const double* yr = Y + r * width;
                                   const double* gr = G + r * width;
                                   double dot = 0.0;
                                   for (size_t j = 0; j < width; ++j) dot += yr[j] * gr[j];
                                   double* dr = g.data() + r * width;
                                   for (size_t j = 0; j < width; ++j)
                                       dr[j] += yr[j] * (gr[j] - dot);
                               }
                           }));
}

Value causal_softmax(const Value& x) {
    if (x.shape().size() != 2 || x.shape()[0] != x.shape()[1]) {
        raise_shape("causal_softmax: expected square matrix, got ",
                    shape_str(x.shape()));
    }
    const size_t t = x.shape()[0];
    Tensor out(x.shape());
    {
        const double* X = x.data().data();
        double* Y = out.data();
        for (size_t r = 0; r < t; ++r) {
            const double* xr = X + r * t;
            double* yr = Y + r * t;
            double m = xr[0];
            for (size_t j = 1; j <= r; ++j) m = std::max(m, xr[j]);
            double z = 0.0;
            for (size_t j = 0; j <= r; ++j) {
                yr[j] = std::exp(xr[j] - m);
                z += yr[j];
            }
            const double inv = 1.0 / z;
            for (size_t j = 0; j <= r; ++j) yr[j] *= inv;
        }
    }
    return Value(make_node(std::move(out), {x.node()}, "causal_softmax",
                           [t](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               const double* Y = self.data.data();
                               const double* G = self.grad.data();
                               for (size_t r = 0; r < t; ++r) {
                                   const double* yr = Y + r * t;
                                   const double* gr = G + r * t;
                                   double dot = 0.0;
                                   for (size_t j = 0; j <= r; ++j) dot += yr[j] * gr[j];
                                   double* dr = g.data() + r * t;
                                   for (size_t j = 0; j <= r; ++j)
                                       dr[j] += yr[j] * (gr[j] - dot);
                               }
                           }));
}

Value layernorm_last(const Value& x, const Value& gamma, const Value& beta,
                     double eps) {
    const size_t width = last_dim(x, "layernorm");
    if (width < 1) raise_shape("layernorm: empty last axis");
    if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
        raise_shape("layernorm: affine params must be [", width, "], got ",
                    shape_str(gamma.shape()), " and ", shape_str(beta.shape()));
    }
    const size_t rows = x.data().numel() / width;
    Tensor out(x.shape());
    {
        const double* X = x.data().data();
        const double* Gm = gamma.data().data();
        const double* Bt = beta.data().data();
        double* Y = out.data();
        for (size_t r = 0; r < rows; ++r) {
            const double* xr = X + r * width;
            double* yr = Y + r * width;
            double mu = 0.0;
            for (size_t j = 0; j < width; ++j) mu += xr[j];
            mu /= width;
            double var = 0.0;
            for (size_t j = 0; j < width; ++j) {
                const double d = xr[j] - mu;
                var += d * d;
            }
            var /= width;
            const double inv = 1.0 / std::sqrt(var + eps);
            for (size_t j = 0; j < width; ++j)
                yr[j] = Gm[j] * ((xr[j] - mu) * inv) + Bt[j];
        }
    }
    return Value(make_node(
        std::move(out), {x.node(), gamma.node(), beta.node()}, "layernorm",
        [rows, width, eps](Node& self) {
            Node& px = *self.parents[0];
            Node& pg = *self.parents[1];
            Node& pb = *self.parents[2];
            const double* X = px.data.data();
            const double* Gm = pg.data.data();
            const double* G = self.grad.data();
            std::vector<double> xhat(width);
            for (size_t r = 0; r < rows; ++r) {
                const double* xr = X + r * width;
                const double* gr = G + r * width;
                double mu = 0.0;
                for (size_t j = 0; j < width; ++j) mu += xr[j];
                mu /= width;
                double var = 0.0;
                for (size_t j = 0; j < width; ++j) {
                    const double d = xr[j] - mu;
                    var += d * d;
                }
                var /= width;
                const double inv = 1.0 / std::sqrt(var + eps);
                for (size_t j = 0; j < width; ++j) xhat[j] = (xr[j] - mu) * inv;

                if (pg.requires_grad) {
                    Tensor& dg = grad_buf(pg);
                    for (size_t j = 0; j < width; ++j) dg[j] += gr[j] * xhat[j];
                }
                if (pb.requires_grad) {
                    Tensor& db = grad_buf(pb);
                    for (size_t j = 0; j < width; ++j) db[j] += gr[j];
                }
                if (px.requires_grad) {
                    Tensor& dx = grad_buf(px);
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (size_t j = 0; j < width; ++j) {
                        const double dxh = gr[j] * Gm[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                    }
                    mean_dxhat /= width;
                    mean_dxhat_xhat /= width;
                    double* dr = dx.data() + r * width;
                    for (size_t j = 0; j < width; ++j) {
                        const double dxh = gr[j] * Gm[j];
                        dr[j] += inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
        }));
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Value gelu(const Value& x) {
    Tensor out(x.shape());
    {
        const double* X = x.data().data();
        double* Y = out.data();
        for (size_t i = 0; i < out.numel(); ++i) {
            const double v = X[i];
            const double u = kGeluC * (v + kGeluA * v * v * v);
            Y[i] = 0.5 * v * (1.0 + std::tanh(u));
        }
    }
    return Value(make_node(std::move(out), {x.node()}, "gelu",
                           [](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               const double* X = p.data.data();
                               for (size_t i = 0; i < g.numel(); ++i) {
                                   const double v = X[i];
                                   const double u = kGeluC * (v + kGeluA * v * v * v);
                                   const double th = std::tanh(u);
                                   const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                                   const double d =
                                       0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                                   g[i] += d * self.grad[i];
                               }
                           }));
}

Value tanh_act(const Value& x) {
    Tensor out(x.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(x.data()[i]);
    return Value(make_node(std::move(out), {x.node()}, "tanh",
                           [](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               const double* Y = self.data.data();
                               for (size_t i = 0; i < g.numel(); ++i)
                                   g[i] += (1.0 - Y[i] * Y[i]) * self.grad[i];
                           }));
}

// ---- structural ops ----------------------------------------------------------

Value concat_rows(const std::vector<Value>& xs) {
    if (xs.empty()) raise_shape("concat_rows: empty input list");
    Shape tail(xs[0].shape().begin() + 1, xs[0].shape().end());
    size_t rows = 0;
    size_t row_elems = 1;
    for (size_t d : tail) row_elems *= d;
    for (const auto& x : xs) {
        if (x.shape().empty()) raise_shape("concat_rows: rank-0 input");
        Shape t(x.shape().begin() + 1, x.shape().end());
        if (t != tail) {
            raise_shape("concat_rows: trailing dims differ: ", shape_str(xs[0].shape()),
                        " vs ", shape_str(x.shape()));
        }
        rows += x.shape()[0];
    }
    Shape out_shape{rows};
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    Tensor out(std::move(out_shape));
    {
        size_t off = 0;
        for (const auto& x : xs) {
            std::memcpy(out.data() + off, x.data().data(),
                        x.data().numel() * sizeof(double));
            off += x.data().numel();
        }
    }
    std::vector<NodePtr> parents;
    parents.reserve(xs.size());
    for (const auto& x : xs) parents.push_back(x.node());
    return Value(make_node(std::move(out), std::move(parents), "concat_rows",
                           [](Node& self) {
                               size_t off = 0;
                               for (auto& pp : self.parents) {
                                   Node& p = *pp;
                                   const size_t n = p.data.numel();
                                   if (p.requires_grad) {
                                       Tensor& g = grad_buf(p);
                                       const double* src = self.grad.data() + off;
                                       for (size_t i = 0; i < n; ++i) g[i] += src[i];
                                   }
                                   off += n;
                               }
                           }));
}

Value slice_rows(const Value& x, size_t start, size_t len) {
    if (x.shape().empty()) raise_shape("slice_rows: rank-0 input");
    const size_t rows = x.shape()[0];
    if (start + len > rows) {
        raise_shape("slice_rows: [", start, ", ", start + len, ") out of ", rows,
                    " rows");
    }
    const size_t row_elems = x.data().numel() / rows;
    Shape out_shape(x.shape());
    out_shape[0] = len;
    Tensor out(std::move(out_shape));
    std::memcpy(out.data(), x.data().data() + start * row_elems,
                len * row_elems * sizeof(double));
    return Value(make_node(std::move(out), {x.node()}, "slice_rows",
                           [start, len, row_elems](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               double* dst = g.data() + start * row_elems;
                               const double* src = self.grad.data();
                               for (size_t i = 0; i < len * row_elems; ++i) dst[i] += src[i];
                           }));
}

Value slice_cols(const Value& x, size_t start, size_t len) {
    if (x.shape().size() != 2) {
        raise_shape("slice_cols: expected rank 2, got ", shape_str(x.shape()));
    }
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    if (start + len > cols) {
        raise_shape("slice_cols: [", start, ", ", start + len, ") out of ", cols,
                    " cols");
    }
    Tensor out(Shape{rows, len});
    for (size_t r = 0; r < rows; ++r)
        std::memcpy(out.data() + r * len, x.data().data() + r * cols + start,
                    len * sizeof(double));
    return Value(make_node(std::move(out), {x.node()}, "slice_cols",
                           [rows, cols, start, len](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               for (size_t r = 0; r < rows; ++r) {
                                   double* dst = g.data() + r * cols + start;
                                   const double* src = self.grad.data() + r * len;
                                   for (size_t j = 0; j < len; ++j) dst[j] += src[j];
                               }
                           }));
}

Value gather_rows(const Value& x, const std::vector<size_t>& idx) {
    if (x.shape().empty()) raise_shape("gather_rows: rank-0 input");
    const size_t rows = x.shape()[0];
    const size_t row_elems = x.data().numel() / rows;
    for (size_t i : idx) {
        if (i >= rows) raise_shape("gather_rows: index ", i, " out of ", rows);
    }
    Shape out_shape(x.shape());
    out_shape[0] = idx.size();
    Tensor out(std::move(out_shape));
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.data() + r * row_elems,
                    x.data().data() + idx[r] * row_elems,
                    row_elems * sizeof(double));
    return Value(make_node(std::move(out), {x.node()}, "gather_rows",
                           [idx, row_elems](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = grad_buf(p);
                               for (size_t r = 0; r < idx.size(); ++r) {
                                   double* dst = g.data() + idx[r] * row_elems;
                                   const double* src = self.grad.data() + r * row_elems;
                                   for (size_t i = 0; i < row_elems; ++i) dst[i] += src[i];
                               }
                           }));
}

Value reshape(const Value& x, Shape shape) {
    Tensor out = x.data().reshaped(std::move(shape));
    return Value(make_node(std::move(out), {x.node()}, "reshape",
                           [](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               accumulate(grad_buf(p), self.grad);
                           }));
}

Value masked_mean(const Value& x, const Value& w) {
    if (x.shape().empty() || w.shape().size() != 1 ||
        w.shape()[0] != x.shape()[0]) {
        raise_shape("masked_mean: weights ", shape_str(w.shape()),
                    " do not match rows of ", shape_str(x.shape()));
    }
    const size_t n = x.shape()[0];
    const size_t rest = x.data().numel() / n;
    double wsum = 0.0;
    for (size_t i = 0; i < n; ++i) wsum += w.data()[i];
    if (wsum == 0.0) raise_numeric("masked_mean: weights sum to zero");
    Shape out_shape(x.shape().begin() + 1, x.shape().end());
    Tensor out(std::move(out_shape));
    {
        const double* X = x.data().data();
        double* Y = out.data();
        for (size_t i = 0; i < n; ++i) {
            const double wi = w.data()[i] / wsum;
            const double* xr = X + i * rest;
            for (size_t j = 0; j < rest; ++j) Y[j] += wi * xr[j];
        }
    }
    return Value(make_node(
        std::move(out), {x.node(), w.node()}, "masked_mean",
        [n, rest, wsum](Node& self) {
            Node& px = *self.parents[0];
            Node& pw = *self.parents[1];
            const double* G = self.grad.data();
            const double* Y = self.data.data();
            const double* X = px.data.data();
            const double* W = pw.data.data();
            if (px.requires_grad) {
                Tensor& dx = grad_buf(px);
                for (size_t i = 0; i < n; ++i) {
                    const double wi = W[i] / wsum;
                    double* dr = dx.data() + i * rest;
                    for (size_t j = 0; j < rest; ++j) dr[j] += wi * G[j];
                }
            }
            if (pw.requires_grad) {
                Tensor& dw = grad_buf(pw);
                for (size_t i = 0; i < n; ++i) {
                    const double* xr = X + i * rest;
                    double acc = 0.0;
                    for (size_t j = 0; j < rest; ++j) acc += G[j] * (xr[j] - Y[j]);
                    dw[i] += acc / wsum;
                }
            }
        }));
}

Value embedding(const Value& table, const std::vector<size_t>& ids) {
    if (table.shape().size() != 2) {
        raise_shape("embedding: table must be rank 2, got ",
                    shape_str(table.shape()));
    }
    return gather_rows(table, ids);
}

Value cross_entropy(const Value& logits, const std::vector<size_t>& targets,
                    const std::vector<bool>& mask) {
    if (logits.shape().size() != 2) {
        raise_shape("cross_entropy: logits must be rank 2, got ",
                    shape_str(logits.shape()));
    }
    const size_t n = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != n || mask.size() != n) {
        raise_shape("cross_entropy: ", n, " rows vs ", targets.size(),
                    " targets and ", mask.size(), " mask entries");
    }
    size_t count = 0;
    for (size_t r = 0; r < n; ++r) {
        if (!mask[r]) continue;
        ++count;
        if (targets[r] >= v) {
            raise_shape("cross_entropy: target ", targets[r], " out of vocab ", v);
        }
    }
    if (count == 0) raise_shape("cross_entropy: no rows selected by mask");
    double loss = 0.0;
    {
        const double* X = logits.data().data();
        for (size_t r = 0; r < n; ++r) {
            if (!mask[r]) continue;
            const double* xr = X + r * v;
            double m = xr[0];
            for (size_t j = 1; j < v; ++j) m = std::max(m, xr[j]);
            double z = 0.0;
            for (size_t j = 0; j < v; ++j) z += std::exp(xr[j] - m);
            loss += m + std::log(z) - xr[targets[r]];
        }
        loss /= static_cast<double>(count);
    }
    return Value(make_node(
        Tensor::scalar(loss), {logits.node()}, "cross_entropy",
        [n, v, targets, mask, count](Node& self) {
            Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            Tensor& g = grad_buf(p);
            const double* X = p.data.data();
            const double gv = self.grad[0] / static_cast<double>(count);
            for (size_t r = 0; r < n; ++r) {
                if (!mask[r]) continue;
                const double* xr = X + r * v;
                double m = xr[0];
                for (size_t j = 1; j < v; ++j) m = std::max(m, xr[j]);
                double z = 0.0;
                for (size_t j = 0; j < v; ++j) z += std::exp(xr[j] - m);
                const double inv = 1.0 / z;
                double* gr = g.data() + r * v;
                for (size_t j = 0; j < v; ++j)
                    gr[j] += gv * std::exp(xr[j] - m) * inv;
                gr[targets[r]] -= gv;
            }
        }));
}

Value straight_through(const Value& soft, Tensor hard) {
    if (!soft.data().same_shape(hard)) {
        raise_shape("straight_through: hard values ", shape_str(hard.shape()),
                    " do not match soft branch ", shape_str(soft.shape()));
    }
    return Value(make_node(std::move(hard), {soft.node()}, "straight_through",
                           [](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               accumulate(grad_buf(p), self.grad);
                           }));
}

Value momentum_scan(const Value& x, double alpha) {
    if (x.shape().empty() || x.shape()[0] < 1) {
        raise_shape("momentum_scan: need at least one row, got ",
                    shape_str(x.shape()));
    }
    const size_t n = x.shape()[0];
    const size_t rest = x.data().numel() / n;
    Tensor out(x.shape());
    {
        const double* X = x.data().data();
        double* Y = out.data();
        for (size_t i = 1; i < n; ++i) {
            const double* xc = X + i * rest;
            const double* xp = X + (i - 1) * rest;
            const double* yp = Y + (i - 1) * rest;
            double* yc = Y + i * rest;
            for (size_t j = 0; j < rest; ++j)
                yc[j] = alpha * (xc[j] - xp[j]) + (1.0 - alpha) * yp[j];
        }
    }
    return Value(make_node(
        std::move(out), {x.node()}, "momentum_scan",
        [n, rest, alpha](Node& self) {
            Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            Tensor& dx = grad_buf(p);
            const double* G = self.grad.data();
            // S_i = G_i + (1-alpha) S_{i+1}, walked from the last row down;
            // row i of the input receives alpha*(S_i - S_{i+1}).
            std::vector<double> s_next(rest, 0.0), s_curr(rest);
            for (size_t ii = n; ii-- > 0;) {
                if (ii >= 1) {
                    const double* gr = G + ii * rest;
                    for (size_t j = 0; j < rest; ++j)
                        s_curr[j] = gr[j] + (1.0 - alpha) * s_next[j];
                } else {
                    std::fill(s_curr.begin(), s_curr.end(), 0.0);
                }
                double* dr = dx.data() + ii * rest;
                if (ii >= 1) {
                    for (size_t j = 0; j < rest; ++j) dr[j] += alpha * s_curr[j];
                }
                if (ii + 1 <= n - 1) {
                    for (size_t j = 0; j < rest; ++j) dr[j] -= alpha * s_next[j];
                }
                std::swap(s_curr, s_next);
            }
        }));
}

Value detach(const Value& x) { return Value::constant(x.data(), "detach"); }

// ---- engine ----------------------------------------------------------------

Tensor& GradSink::slot(const Node& n) {
    auto it = grads.find(&n);
    if (it == grads.end()) {
        it = grads.emplace(&n, Tensor(n.data.shape())).first;
    }
    return it->second;
}

void GradSink::add_to(const GradSink& other) {
    for (const auto& [node, g] : other.grads) {
        auto it = grads.find(node);
        if (it == grads.end()) {
            grads.emplace(node, g);
        } else {
            accumulate(it->second, g);
        }
    }
}

void backward(const Value& root, GradSink* sink) {
    if (!root.defined()) raise_state("backward: undefined root");
    Node* r = root.node().get();
    if (r->data.numel() != 1) {
        raise_shape("backward: root must be scalar, got ",
                    shape_str(r->data.shape()));
    }
    if (r->backward_done) {
        raise_state("backward: already run from this root; rebuild the graph "
                    "or zero_grad() it first");
    }
    r->backward_done = true;
    if (!r->requires_grad) return;  // constant graph, nothing to populate

    // Post-order DFS over requires-grad ancestors; gray/black marks catch the
    // (construction-impossible) cycle case.
    std::vector<Node*> order;
    std::unordered_map<Node*, int> state;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(r, 0);
    state[r] = 1;
    while (!stack.empty()) {
        Node* n = stack.back().first;
        size_t& idx = stack.back().second;
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (!p->requires_grad) continue;
            auto it = state.find(p);
            if (it == state.end()) {
                state[p] = 1;
                stack.emplace_back(p, 0);
            } else if (it->second == 1) {
                raise_state("backward: cycle detected at op '", p->tag, "'");
            }
        } else {
            state[n] = 2;
            order.push_back(n);
            stack.pop_back();
        }
    }

    GradSink* prev = t_sink;
    t_sink = sink;
    grad_buf(*r)[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad_materialized) n->backprop(*n);
    }
    t_sink = prev;
}

double grad_check(const std::function<Value()>& build,
                  const std::vector<Value>& params, double h) {
    Value probe1 = build();
    Value probe2 = build();
    if (probe1.data().numel() != 1) {
        raise_shape("grad_check: builder must produce a scalar, got ",
                    shape_str(probe1.shape()));
    }
    if (std::memcmp(probe1.data().data(), probe2.data().data(),
                    sizeof(double)) != 0) {
        raise_state("grad_check: builder is not deterministic (two forward "
                    "passes disagree)");
    }

    for (const auto& p : params) const_cast<Value&>(p).zero_grad();
    Value root = build();
    backward(root);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p.node()->grad_materialized ? p.node()->grad
                                                       : Tensor(p.shape()));
    }

    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& data = const_cast<Value&>(params[pi]).mutable_data();
        for (size_t e = 0; e < data.numel(); ++e) {
            const double orig = data[e];
            data[e] = orig + h;
            const double fp = build().data().value();
            data[e] = orig - h;
            const double fm = build().data().value();
            data[e] = orig;
            const double cd = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][e];
            const double rel =
                std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace qsv::ad
