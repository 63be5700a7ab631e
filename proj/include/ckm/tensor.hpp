#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "ckm/common.hpp"

namespace ckm {

namespace detail {

inline void blas_single_thread() {
    static bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}

struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated during backward
    bool needs_grad = false;
    bool is_param = false;
    bool backward_root_used = false;
    int pending = 0;  // consumers not yet processed, used by backward
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> vjp;

    size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

inline size_t shape_numel(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument(msg("tensor: non-positive dim in ", shape_str(s)));
        n *= static_cast<size_t>(d);
    }
    return n;
}

}  // namespace detail

// Dense double-precision array participating in a reverse-mode gradient graph.
// Value semantics: copying a Tensor copies the handle, not the buffer.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(std::vector<int> shape, std::vector<double> values) {
        return make(std::move(shape), std::move(values), false, false);
    }

    static Tensor scalar(double v) { return constant({1}, {v}); }

    static Tensor zeros(std::vector<int> shape) {
        size_t n = detail::shape_numel(shape);
        return constant(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<int> shape, double v) {
        size_t n = detail::shape_numel(shape);
        return constant(std::move(shape), std::vector<double>(n, v));
    }

    // Trainable leaf. Gradients accumulate across backward passes until
    // zero_grad is called.
    static Tensor param(std::vector<int> shape, std::vector<double> values) {
        return make(std::move(shape), std::move(values), true, true);
    }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return node().shape; }
    size_t numel() const { return node().numel(); }
    const std::vector<double>& value() const { return node().value; }
    bool needs_grad() const { return node().needs_grad; }
    bool is_param() const { return node().is_param; }

    double item() const {
        if (numel() != 1)
            throw std::logic_error(msg("Tensor::item: tensor has shape ", shape_str(shape())));
        return value()[0];
    }

    const std::vector<double>& grad() const {
        if (node().grad.empty())
            throw std::logic_error("Tensor::grad: no gradient has been computed");
        return node().grad;
    }

    bool has_grad() const { return !node().grad.empty(); }

    void zero_grad() {
        node().grad.clear();
        node().backward_root_used = false;
    }

    // Overwrites the stored values. Only allowed on leaves; used by optimizers.
    void set_value(const std::vector<double>& v) {
        detail::Node& n = node();
        if (!n.parents.empty())
            throw std::logic_error("Tensor::set_value: only leaf tensors may be assigned");
        if (v.size() != n.value.size())
            throw std::invalid_argument(msg("Tensor::set_value: size mismatch ", v.size(), " vs ",
                                            n.value.size()));
        n.value = v;
    }

    std::shared_ptr<detail::Node> handle() const { return n_; }

    static Tensor from_node(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

    detail::Node& node() const {
        if (!n_) throw std::logic_error("Tensor: empty handle");
        return *n_;
    }

private:
    static Tensor make(std::vector<int> shape, std::vector<double> values, bool needs_grad,
                       bool is_param) {
        size_t n = detail::shape_numel(shape);
        if (values.size() != n)
            throw std::invalid_argument(msg("tensor: shape ", shape_str(shape), " expects ", n,
                                            " values, got ", values.size()));
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->needs_grad = needs_grad;
        node->is_param = is_param;
        return from_node(std::move(node));
    }

    std::shared_ptr<detail::Node> n_;
};

namespace detail {

inline Tensor make_op(std::vector<int> shape, std::vector<double> value,
                      std::vector<Tensor> parents, std::function<void(Node&)> vjp) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    for (const Tensor& p : parents) {
        node->parents.push_back(p.handle());
        if (p.needs_grad()) node->needs_grad = true;
    }
    if (node->needs_grad) node->vjp = std::move(vjp);
    return Tensor::from_node(std::move(node));
}

// Right-aligned broadcast of two shapes, numpy style.
inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b,
                                        const char* opname) {
    size_t nd = std::max(a.size(), b.size());
    std::vector<int> out(nd);
    for (size_t i = 0; i < nd; ++i) {
        int da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument(
                msg(opname, ": shapes ", shape_str(a), " and ", shape_str(b), " not broadcastable"));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides (in elements) of `shape` viewed as `out`, 0 on broadcast axes.
inline std::vector<size_t> broadcast_strides(const std::vector<int>& shape,
                                             const std::vector<int>& out) {
    std::vector<size_t> st(out.size(), 0);
    size_t offset = out.size() - shape.size();
    size_t run = 1;
    for (size_t i = shape.size(); i-- > 0;) {
        st[i + offset] = (shape[i] == 1 && out[i + offset] != 1) ? 0 : run;
        run *= static_cast<size_t>(shape[i]);
    }
    return st;
}

struct BroadcastIter {
    std::vector<int> out_shape;
    std::vector<size_t> sa, sb;
    size_t n;

    BroadcastIter(const std::vector<int>& a, const std::vector<int>& b, const char* opname)
        : out_shape(broadcast_shape(a, b, opname)),
          sa(broadcast_strides(a, out_shape)),
          sb(broadcast_strides(b, out_shape)),
          n(shape_numel(out_shape)) {}

    template <typename F>
    void for_each(F&& f) const {
        size_t nd = out_shape.size();
        std::vector<size_t> idx(nd, 0);
        size_t ia = 0, ib = 0;
        for (size_t i = 0; i < n; ++i) {
            f(i, ia, ib);
            for (size_t d = nd; d-- > 0;) {
                if (++idx[d] < static_cast<size_t>(out_shape[d])) {
                    ia += sa[d];
                    ib += sb[d];
                    break;
                }
                idx[d] = 0;
                ia -= sa[d] * (out_shape[d] - 1);
                ib -= sb[d] * (out_shape[d] - 1);
            }
        }
    }
};

template <typename FwdF, typename DaF, typename DbF>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, const char* opname, FwdF fwd, DaF da,
                        DbF db) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (a.shape() == b.shape()) {
        std::vector<double> out(av.size());
        for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
        return make_op(a.shape(), std::move(out), {a, b}, [fwd, da, db](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            if (pa.needs_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pa.grad[i] += self.grad[i] * da(pa.value[i], pb.value[i]);
            }
            if (pb.needs_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pb.grad[i] += self.grad[i] * db(pa.value[i], pb.value[i]);
            }
        });
    }
    BroadcastIter it(a.shape(), b.shape(), opname);
    std::vector<double> out(it.n);
    it.for_each([&](size_t i, size_t ia, size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
    return make_op(it.out_shape, std::move(out), {a, b}, [it, fwd, da, db](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.needs_grad) pa.ensure_grad();
        if (pb.needs_grad) pb.ensure_grad();
        it.for_each([&](size_t i, size_t ia, size_t ib) {
            if (pa.needs_grad) pa.grad[ia] += self.grad[i] * da(pa.value[ia], pb.value[ib]);
            if (pb.needs_grad) pb.grad[ib] += self.grad[i] * db(pa.value[ia], pb.value[ib]);
        });
    });
}

template <typename FwdF, typename DF>
Tensor unary_elementwise(const Tensor& x, FwdF fwd, DF dfwd) {
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    return make_op(x.shape(), std::move(out), {x}, [dfwd](Node& self) {
        Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            p.grad[i] += self.grad[i] * dfwd(p.value[i], self.value[i]);
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_broadcast(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_broadcast(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_broadcast(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::unary_elementwise(
        x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
    return detail::unary_elementwise(
        x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return v / (1.0 + std::exp(-v)); },
        [](double v, double) {
            double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 + v * (1.0 - s));
        });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// Values pinned to [lo, hi]; gradient passes only where the input is inside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument(msg("clamp: lo=", lo, " > hi=", hi));
    return detail::unary_elementwise(
        x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// Same forward values, but the gradient path to the input is cut.
inline Tensor detach(const Tensor& x) {
    return Tensor::constant(x.shape(), x.value());
}

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
    size_t n = detail::shape_numel(shape);
    if (n != x.numel())
        throw std::invalid_argument(
            msg("reshape: cannot view ", shape_str(x.shape()), " as ", shape_str(shape)));
    return detail::make_op(std::move(shape), x.value(), {x}, [](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    return detail::make_op({1}, {s}, {x}, [](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        double g = self.grad[0];
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

inline Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / double(x.numel())); }

inline Tensor mse_mean(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(
            msg("mse_mean: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()), " differ"));
    const auto& av = a.value();
    const auto& bv = b.value();
    double s = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
        double d = av[i] - bv[i];
        s += d * d;
    }
    double n = double(av.size());
    return detail::make_op({1}, {s / n}, {a, b}, [n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        double g = self.grad[0] * 2.0 / n;
        if (pa.needs_grad) pa.ensure_grad();
        if (pb.needs_grad) pb.ensure_grad();
        for (size_t i = 0; i < pa.value.size(); ++i) {
            double d = g * (pa.value[i] - pb.value[i]);
            if (pa.needs_grad) pa.grad[i] += d;
            if (pb.needs_grad) pb.grad[i] -= d;
        }
    });
}

// Squared Frobenius norm of (a - b), summed over all entries.
inline Tensor sq_norm_diff(const Tensor& a, const Tensor& b) {
    return mul_scalar(mse_mean(a, b), double(a.numel()));
}

inline Tensor softmax(const Tensor& x, int axis) {
    const auto& sh = x.shape();
    int nd = static_cast<int>(sh.size());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd)
        throw std::invalid_argument(msg("softmax: axis ", axis, " out of range for ", shape_str(sh)));
    size_t inner = 1, outer = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[i];
    for (int i = axis + 1; i < nd; ++i) inner *= sh[i];
    size_t k = sh[axis];
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
            size_t base = o * k * inner + in;
            double mx = xv[base];
            for (size_t j = 1; j < k; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (size_t j = 0; j < k; ++j) {
                double e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (size_t j = 0; j < k; ++j) out[base + j * inner] /= z;
        }
    }
    return detail::make_op(sh, std::move(out), {x}, [outer, inner, k](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (size_t o = 0; o < outer; ++o) {
            for (size_t in = 0; in < inner; ++in) {
                size_t base = o * k * inner + in;
                double dot = 0.0;
                for (size_t j = 0; j < k; ++j)
                    dot += self.grad[base + j * inner] * self.value[base + j * inner];
                for (size_t j = 0; j < k; ++j) {
                    size_t ix = base + j * inner;
                    p.grad[ix] += self.value[ix] * (self.grad[ix] - dot);
                }
            }
        }
    });
}

// Normalizes over the trailing `naxes` axes. Scale and shift, when wanted,
// are applied by the caller with broadcasted mul/add.
inline Tensor layer_norm(const Tensor& x, int naxes, double eps = 1e-5) {
    const auto& sh = x.shape();
    if (naxes <= 0 || naxes > static_cast<int>(sh.size()))
        throw std::invalid_argument(msg("layer_norm: bad axis count ", naxes, " for ",
                                        shape_str(sh)));
    size_t group = 1, outer = 1;
    for (size_t i = 0; i < sh.size(); ++i) {
        if (i + naxes >= sh.size())
            group *= sh[i];
        else
            outer *= sh[i];
    }
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    std::vector<double> inv_std(outer);
    for (size_t o = 0; o < outer; ++o) {
        const double* src = xv.data() + o * group;
        double m = 0.0;
        for (size_t i = 0; i < group; ++i) m += src[i];
        m /= double(group);
        double var = 0.0;
        for (size_t i = 0; i < group; ++i) {
            double d = src[i] - m;
            var += d * d;
        }
        var /= double(group);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[o] = is;
        for (size_t i = 0; i < group; ++i) out[o * group + i] = (src[i] - m) * is;
    }
    return detail::make_op(sh, std::move(out), {x},
                           [outer, group, inv_std = std::move(inv_std)](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (size_t o = 0; o < outer; ++o) {
            const double* y = self.value.data() + o * group;
            const double* g = self.grad.data() + o * group;
            double gmean = 0.0, gymean = 0.0;
            for (size_t i = 0; i < group; ++i) {
                gmean += g[i];
                gymean += g[i] * y[i];
            }
            gmean /= double(group);
            gymean /= double(group);
            double* dst = p.grad.data() + o * group;
            for (size_t i = 0; i < group; ++i)
                dst[i] += inv_std[o] * (g[i] - gmean - y[i] * gymean);
        }
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::blas_single_thread();
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw std::invalid_argument(
            msg("matmul: shapes ", shape_str(sa), " and ", shape_str(sb), " incompatible"));
    int n = sa[0], k = sa[1], m = sb[1];
    std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, n, m, k, 1.0, a.value().data(), k,
                b.value().data(), m, 0.0, out.data(), m);
    return detail::make_op({n, m}, std::move(out), {a, b}, [n, k, m](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        if (pa.needs_grad) {
            pa.ensure_grad();
            // dA += dY * B^T
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, n, k, m, 1.0, self.grad.data(), m,
                        pb.value.data(), m, 1.0, pa.grad.data(), k);
        }
        if (pb.needs_grad) {
            pb.ensure_grad();
            // dB += A^T * dY
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, m, n, 1.0, pa.value.data(), k,
                        self.grad.data(), m, 1.0, pb.grad.data(), m);
        }
    });
}

inline Tensor transpose(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.size() != 2)
        throw std::invalid_argument(msg("transpose: expected 2-d tensor, got ", shape_str(sh)));
    int r = sh[0], c = sh[1];
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = xv[static_cast<size_t>(i) * c + j];
    return detail::make_op({c, r}, std::move(out), {x}, [r, c](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                p.grad[static_cast<size_t>(i) * c + j] += self.grad[static_cast<size_t>(j) * r + i];
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const auto& sh0 = parts[0].shape();
    int nd = static_cast<int>(sh0.size());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd)
        throw std::invalid_argument(msg("concat: axis ", axis, " out of range for ", shape_str(sh0)));
    std::vector<int> out_shape = sh0;
    for (size_t p = 1; p < parts.size(); ++p) {
        const auto& sh = parts[p].shape();
        if (static_cast<int>(sh.size()) != nd)
            throw std::invalid_argument(msg("concat: rank mismatch ", shape_str(sh0), " vs ",
                                            shape_str(sh)));
        for (int d = 0; d < nd; ++d)
            if (d != axis && sh[d] != sh0[d])
                throw std::invalid_argument(msg("concat: shapes ", shape_str(sh0), " and ",
                                                shape_str(sh), " differ off-axis"));
        out_shape[axis] += sh[axis];
    }
    size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= sh0[d];
    for (int d = axis + 1; d < nd; ++d) inner *= sh0[d];
    std::vector<double> out(detail::shape_numel(out_shape));
    std::vector<size_t> runs(parts.size());
    size_t total_run = static_cast<size_t>(out_shape[axis]) * inner;
    for (size_t p = 0; p < parts.size(); ++p) runs[p] = static_cast<size_t>(parts[p].shape()[axis]) * inner;
    for (size_t o = 0; o < outer; ++o) {
        size_t off = o * total_run;
        for (size_t p = 0; p < parts.size(); ++p) {
            const auto& v = parts[p].value();
            std::copy(v.begin() + o * runs[p], v.begin() + (o + 1) * runs[p], out.begin() + off);
            off += runs[p];
        }
    }
    return detail::make_op(out_shape, std::move(out), parts,
                           [outer, runs, total_run](detail::Node& self) {
        for (auto& ph : self.parents)
            if (ph->needs_grad) ph->ensure_grad();
        for (size_t o = 0; o < outer; ++o) {
            size_t off = o * total_run;
            for (size_t p = 0; p < self.parents.size(); ++p) {
                detail::Node& par = *self.parents[p];
                if (par.needs_grad)
                    for (size_t i = 0; i < runs[p]; ++i) par.grad[o * runs[p] + i] += self.grad[off + i];
                off += runs[p];
            }
        }
    });
}

// Contiguous slice along one axis.
inline Tensor narrow(const Tensor& x, int axis, int start, int len) {
    const auto& sh = x.shape();
    int nd = static_cast<int>(sh.size());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd)
        throw std::invalid_argument(msg("narrow: axis ", axis, " out of range for ", shape_str(sh)));
    if (start < 0 || len <= 0 || start + len > sh[axis])
        throw std::invalid_argument(msg("narrow: range [", start, ",", start + len,
                                        ") invalid for axis of size ", sh[axis]));
    size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= sh[d];
    for (int d = axis + 1; d < nd; ++d) inner *= sh[d];
    std::vector<int> out_shape = sh;
    out_shape[axis] = len;
    size_t in_run = static_cast<size_t>(sh[axis]) * inner;
    size_t out_run = static_cast<size_t>(len) * inner;
    size_t skip = static_cast<size_t>(start) * inner;
    const auto& xv = x.value();
    std::vector<double> out(outer * out_run);
    for (size_t o = 0; o < outer; ++o)
        std::copy(xv.begin() + o * in_run + skip, xv.begin() + o * in_run + skip + out_run,
                  out.begin() + o * out_run);
    return detail::make_op(out_shape, std::move(out), {x},
                           [outer, in_run, out_run, skip](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (size_t o = 0; o < outer; ++o)
            for (size_t i = 0; i < out_run; ++i)
                p.grad[o * in_run + skip + i] += self.grad[o * out_run + i];
    });
}

// Row selection from a 2-d tensor; rows may repeat. The adjoint scatter-adds
// back into the picked rows.
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    const auto& sh = x.shape();
    if (sh.size() != 2)
        throw std::invalid_argument(msg("gather_rows: want 2-d input, got ", shape_str(sh)));
    if (rows.empty()) throw std::invalid_argument("gather_rows: empty row list");
    int n = sh[0], d = sh[1];
    for (int r : rows)
        if (r < 0 || r >= n)
            throw std::invalid_argument(msg("gather_rows: row ", r, " outside [0,", n, ")"));
    const auto& xv = x.value();
    std::vector<double> out(rows.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy(xv.begin() + static_cast<size_t>(rows[i]) * d,
                  xv.begin() + static_cast<size_t>(rows[i]) * d + d, out.begin() + i * d);
    return detail::make_op({(int)rows.size(), d}, std::move(out), {x}, [rows, d](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < d; ++j)
                p.grad[static_cast<size_t>(rows[i]) * d + j] += self.grad[i * d + j];
    });
}

// Backpropagates from a scalar loss through the recorded graph. Each node is
// visited exactly once, in reverse topological order. Calling backward twice
// on the same loss is an error; parameter gradients accumulate across
// different losses until zero_grad.
inline void backward(const Tensor& loss) {
    detail::Node* root = &loss.node();
    if (root->numel() != 1)
        throw std::invalid_argument(
            msg("backward: loss must be scalar, got shape ", shape_str(root->shape)));
    if (!root->needs_grad)
        throw std::logic_error("backward: loss does not depend on any parameter");
    if (root->backward_root_used)
        throw std::logic_error("backward: already called on this loss; build a fresh graph");
    root->backward_root_used = true;

    // Count, for every reachable differentiable node, how many reachable
    // consumers it has. Constant subgraphs are never entered.
    std::unordered_set<detail::Node*> seen{root};
    std::vector<detail::Node*> stack{root};
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        for (auto& ph : n->parents) {
            detail::Node* p = ph.get();
            if (!p->needs_grad) continue;
            ++p->pending;
            if (seen.insert(p).second) stack.push_back(p);
        }
    }

    root->grad.assign(1, 1.0);
    std::vector<detail::Node*> ready{root};
    while (!ready.empty()) {
        detail::Node* n = ready.back();
        ready.pop_back();
        if (n->vjp) {
            n->ensure_grad();
            n->vjp(*n);
        }
        for (auto& ph : n->parents) {
            detail::Node* p = ph.get();
            if (!p->needs_grad) continue;
            if (--p->pending == 0) ready.push_back(p);
        }
        if (!n->is_param && n != root) n->grad.clear();
    }
    root->grad.clear();
    for (detail::Node* n : seen) n->pending = 0;
}

// Sets the number of worker threads used by data-parallel helpers. BLAS
// stays single-threaded regardless, for bit-reproducible results.
inline int& compute_threads() {
    static int n = 1;
    return n;
}

}  // namespace ckm
