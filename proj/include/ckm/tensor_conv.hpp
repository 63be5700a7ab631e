#pragma once

#include <vector>

#include "ckm/tensor.hpp"

namespace ckm {

namespace detail {

// Gathers conv patches of x [Cin,H,W] into cols [Cin*kh*kw, Ho*Wo].
// Out-of-range taps read zero.
inline void im2col(const double* x, int cin, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, double* cols) {
    for (int c = 0; c < cin; ++c) {
        const double* plane = x + static_cast<size_t>(c) * h * w;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* row = cols + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) *
                                         (static_cast<size_t>(ho) * wo);
                for (int oi = 0; oi < ho; ++oi) {
                    int ii = oi * stride - pad + ki;
                    for (int oj = 0; oj < wo; ++oj) {
                        int jj = oj * stride - pad + kj;
                        row[static_cast<size_t>(oi) * wo + oj] =
                            (ii >= 0 && ii < h && jj >= 0 && jj < w)
                                ? plane[static_cast<size_t>(ii) * w + jj]
                                : 0.0;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds cols back into dx.
inline void col2im_acc(const double* cols, int cin, int h, int w, int kh, int kw, int stride,
                       int pad, int ho, int wo, double* dx) {
    for (int c = 0; c < cin; ++c) {
        double* plane = dx + static_cast<size_t>(c) * h * w;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const double* row = cols + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) *
                                               (static_cast<size_t>(ho) * wo);
                for (int oi = 0; oi < ho; ++oi) {
                    int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= h) continue;
                    for (int oj = 0; oj < wo; ++oj) {
                        int jj = oj * stride - pad + kj;
                        if (jj < 0 || jj >= w) continue;
                        plane[static_cast<size_t>(ii) * w + jj] += row[static_cast<size_t>(oi) * wo + oj];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// 2-d convolution with zero padding: x [Cin,H,W], w [Cout,Cin,kh,kw] -> [Cout,Ho,Wo].
inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int pad = 0) {
    detail::blas_single_thread();
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sx.size() != 3 || sw.size() != 4 || sx[0] != sw[1])
        throw std::invalid_argument(
            msg("conv2d: shapes ", shape_str(sx), " and ", shape_str(sw), " incompatible"));
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride or pad");
    int cin = sx[0], h = sx[1], wd = sx[2];
    int cout = sw[0], kh = sw[2], kw = sw[3];
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    if (h + 2 * pad < kh || wd + 2 * pad < kw)
        throw std::invalid_argument(msg("conv2d: kernel ", kh, "x", kw, " larger than padded input ",
                                        shape_str(sx)));
    size_t ckk = static_cast<size_t>(cin) * kh * kw;
    size_t hw = static_cast<size_t>(ho) * wo;
    std::vector<double> cols(ckk * hw);
    detail::im2col(x.value().data(), cin, h, wd, kh, kw, stride, pad, ho, wo, cols.data());
    std::vector<double> out(static_cast<size_t>(cout) * hw, 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, cout, static_cast<int>(hw),
                static_cast<int>(ckk), 1.0, w.value().data(), static_cast<int>(ckk), cols.data(),
                static_cast<int>(hw), 0.0, out.data(), static_cast<int>(hw));
    // cols are recomputed in the backward pass instead of being cached: at
    // typical sizes the graph for one step would otherwise hold hundreds of MB.
    return detail::make_op({cout, ho, wo}, std::move(out), {x, w},
                           [cin, h, wd, kh, kw, stride, pad, ho, wo](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pw = *self.parents[1];
        int cout = self.shape[0];
        size_t ckk = static_cast<size_t>(cin) * kh * kw;
        size_t hw = static_cast<size_t>(ho) * wo;
        if (pw.needs_grad) {
            pw.ensure_grad();
            std::vector<double> cols(ckk * hw);
            detail::im2col(px.value.data(), cin, h, wd, kh, kw, stride, pad, ho, wo, cols.data());
            // dW += dY * cols^T
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, cout, static_cast<int>(ckk),
                        static_cast<int>(hw), 1.0, self.grad.data(), static_cast<int>(hw),
                        cols.data(), static_cast<int>(hw), 1.0, pw.grad.data(),
                        static_cast<int>(ckk));
        }
        if (px.needs_grad) {
            px.ensure_grad();
            std::vector<double> dcols(ckk * hw, 0.0);
            // dcols = W^T * dY
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(ckk),
                        static_cast<int>(hw), cout, 1.0, pw.value.data(), static_cast<int>(ckk),
                        self.grad.data(), static_cast<int>(hw), 0.0, dcols.data(),
                        static_cast<int>(hw));
            detail::col2im_acc(dcols.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
                               px.grad.data());
        }
    });
}

// 2x2 average pooling, stride 2. Requires even spatial dims.
inline Tensor avgpool2(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.size() != 3 || sh[1] % 2 != 0 || sh[2] % 2 != 0)
        throw std::invalid_argument(msg("avgpool2: expected [C,2m,2n], got ", shape_str(sh)));
    int c = sh[0], h = sh[1], w = sh[2];
    int ho = h / 2, wo = w / 2;
    const auto& xv = x.value();
    std::vector<double> out(static_cast<size_t>(c) * ho * wo);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j) {
                const double* p = xv.data() + (static_cast<size_t>(ch) * h + 2 * i) * w + 2 * j;
                out[(static_cast<size_t>(ch) * ho + i) * wo + j] =
                    0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
            }
    return detail::make_op({c, ho, wo}, std::move(out), {x}, [c, h, w, ho, wo](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j) {
                    double g = 0.25 * self.grad[(static_cast<size_t>(ch) * ho + i) * wo + j];
                    double* q = p.grad.data() + (static_cast<size_t>(ch) * h + 2 * i) * w + 2 * j;
                    q[0] += g;
                    q[1] += g;
                    q[w] += g;
                    q[w + 1] += g;
                }
    });
}

// Nearest-neighbour 2x upsampling.
inline Tensor upsample_nearest2(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.size() != 3)
        throw std::invalid_argument(msg("upsample_nearest2: expected [C,H,W], got ", shape_str(sh)));
    int c = sh[0], h = sh[1], w = sh[2];
    const auto& xv = x.value();
    std::vector<double> out(static_cast<size_t>(c) * 4 * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j)
                out[(static_cast<size_t>(ch) * 2 * h + i) * 2 * w + j] =
                    xv[(static_cast<size_t>(ch) * h + i / 2) * w + j / 2];
    return detail::make_op({c, 2 * h, 2 * w}, std::move(out), {x}, [c, h, w](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < 2 * h; ++i)
                for (int j = 0; j < 2 * w; ++j)
                    p.grad[(static_cast<size_t>(ch) * h + i / 2) * w + j / 2] +=
                        self.grad[(static_cast<size_t>(ch) * 2 * h + i) * 2 * w + j];
    });
}

namespace detail {

// Half-pixel bilinear taps for 2x upsampling along one axis: output j draws
// from input cells tap0/tap1 with weights w0/1-w0, clamped at the ends so
// constants survive exactly.
inline void bilinear2_taps(int n, std::vector<int>& t0, std::vector<int>& t1,
                           std::vector<double>& w0) {
    t0.resize(static_cast<size_t>(2 * n));
    t1.resize(static_cast<size_t>(2 * n));
    w0.resize(static_cast<size_t>(2 * n));
    for (int j = 0; j < 2 * n; ++j) {
        double pos = (j + 0.5) / 2.0 - 0.5;
        int lo = (int)std::floor(pos);
        double frac = pos - lo;
        int hi = lo + 1;
        if (lo < 0) lo = 0;
        if (hi > n - 1) hi = n - 1;
        t0[(size_t)j] = lo;
        t1[(size_t)j] = hi;
        w0[(size_t)j] = 1.0 - frac;
    }
}

}  // namespace detail

// Bilinear 2x upsampling (half-pixel convention, edges clamped).  Smooth
// enough that band-pass pyramids put coarse structure into coarse levels.
inline Tensor upsample_bilinear2(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.size() != 3)
        throw std::invalid_argument(msg("upsample_bilinear2: expected [C,H,W], got ", shape_str(sh)));
    int c = sh[0], h = sh[1], w = sh[2];
    std::vector<int> r0, r1, c0, c1;
    std::vector<double> rw, cw;
    detail::bilinear2_taps(h, r0, r1, rw);
    detail::bilinear2_taps(w, c0, c1, cw);
    const auto& xv = x.value();
    std::vector<double> out(static_cast<size_t>(c) * 4 * h * w);
    for (int ch = 0; ch < c; ++ch) {
        const double* src = xv.data() + static_cast<size_t>(ch) * h * w;
        double* dst = out.data() + static_cast<size_t>(ch) * 4 * h * w;
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j) {
                double a = rw[(size_t)i], b = cw[(size_t)j];
                dst[(size_t)i * 2 * w + j] =
                    a * b * src[(size_t)r0[(size_t)i] * w + c0[(size_t)j]] +
                    a * (1 - b) * src[(size_t)r0[(size_t)i] * w + c1[(size_t)j]] +
                    (1 - a) * b * src[(size_t)r1[(size_t)i] * w + c0[(size_t)j]] +
                    (1 - a) * (1 - b) * src[(size_t)r1[(size_t)i] * w + c1[(size_t)j]];
            }
    }
    return detail::make_op(
        {c, 2 * h, 2 * w}, std::move(out), {x},
        [c, h, w, r0, r1, c0, c1, rw, cw](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                double* dst = p.grad.data() + static_cast<size_t>(ch) * h * w;
                const double* g = self.grad.data() + static_cast<size_t>(ch) * 4 * h * w;
                for (int i = 0; i < 2 * h; ++i)
                    for (int j = 0; j < 2 * w; ++j) {
                        double gv = g[(size_t)i * 2 * w + j];
                        double a = rw[(size_t)i], b = cw[(size_t)j];
                        dst[(size_t)r0[(size_t)i] * w + c0[(size_t)j]] += a * b * gv;
                        dst[(size_t)r0[(size_t)i] * w + c1[(size_t)j]] += a * (1 - b) * gv;
                        dst[(size_t)r1[(size_t)i] * w + c0[(size_t)j]] += (1 - a) * b * gv;
                        dst[(size_t)r1[(size_t)i] * w + c1[(size_t)j]] += (1 - a) * (1 - b) * gv;
                    }
            }
        });
}

// Keeps every second sample along both spatial axes, starting at index 0.
inline Tensor downsample2(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.size() != 3)
        throw std::invalid_argument(msg("downsample2: expected [C,H,W], got ", shape_str(sh)));
    int c = sh[0], h = sh[1], w = sh[2];
    int ho = (h + 1) / 2, wo = (w + 1) / 2;
    const auto& xv = x.value();
    std::vector<double> out(static_cast<size_t>(c) * ho * wo);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j)
                out[(static_cast<size_t>(ch) * ho + i) * wo + j] =
                    xv[(static_cast<size_t>(ch) * h + 2 * i) * w + 2 * j];
    return detail::make_op({c, ho, wo}, std::move(out), {x}, [c, h, w, ho, wo](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.needs_grad) return;
        p.ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j)
                    p.grad[(static_cast<size_t>(ch) * h + 2 * i) * w + 2 * j] +=
                        self.grad[(static_cast<size_t>(ch) * ho + i) * wo + j];
    });
}

}  // namespace ckm
