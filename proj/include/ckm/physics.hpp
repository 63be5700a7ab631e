#pragma once

// Physics regularizers for stage-3 training: edge loss over binarized
// Laplacian fields, regional propagation loss through a frozen segmenter,
// multi-scale Laplacian-pyramid feature loss, the stacked physical residual,
// and the total objective.

#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "ckm/common.hpp"
#include "ckm/config.hpp"
#include "ckm/tensor.hpp"
#include "ckm/tensor_conv.hpp"

namespace ckm {

struct PhysicsWeights {
    double lambda_edge = 1e-3;
    double lambda_region = 5e-3;
    double lambda_mulfea = 5e-3;
    double ste_alpha = 50.0;
    double ste_tau = 0.2;
    double grid_h_interval = 1.0;
    int pyramid_levels = 4;
    std::vector<double> pyramid_weights;  // empty = all ones

    void validate() const {
        if (lambda_edge < 0 || lambda_region < 0 || lambda_mulfea < 0)
            throw std::invalid_argument("physics: lambdas must be >= 0");
        if (!(ste_alpha > 0)) throw std::invalid_argument("physics: ste_alpha must be > 0");
        if (!(ste_tau > 0 && ste_tau < 1))
            throw std::invalid_argument(msg("physics: ste_tau=", ste_tau, " outside (0,1)"));
        if (!(grid_h_interval > 0))
            throw std::invalid_argument("physics: grid_h_interval must be > 0");
        if (pyramid_levels < 1) throw std::invalid_argument("physics: pyramid_levels must be >= 1");
        if (!pyramid_weights.empty() && (int)pyramid_weights.size() != pyramid_levels)
            throw std::invalid_argument(msg("physics: ", pyramid_weights.size(),
                                            " pyramid weights for ", pyramid_levels, " levels"));
        for (double w : pyramid_weights)
            if (w < 0) throw std::invalid_argument("physics: pyramid weights must be >= 0");
    }

    std::vector<double> level_weights() const {
        if (pyramid_weights.empty()) return std::vector<double>((size_t)pyramid_levels, 1.0);
        return pyramid_weights;
    }

    static PhysicsWeights from_config(const KvConfig& cfg) {
        PhysicsWeights w;
        w.lambda_edge = cfg.get_f64("physics.lambda_edge", w.lambda_edge);
        w.lambda_region = cfg.get_f64("physics.lambda_region", w.lambda_region);
        w.lambda_mulfea = cfg.get_f64("physics.lambda_mulfea", w.lambda_mulfea);
        w.ste_alpha = cfg.get_f64("physics.ste_alpha", w.ste_alpha);
        w.ste_tau = cfg.get_f64("physics.ste_tau", w.ste_tau);
        w.grid_h_interval = cfg.get_f64("physics.grid_h_interval", w.grid_h_interval);
        w.pyramid_levels = (int)cfg.get_int("physics.pyramid_levels", w.pyramid_levels);
        std::string wl = cfg.get_str("physics.pyramid_weights", "");
        if (!wl.empty()) {
            w.pyramid_weights.clear();
            std::istringstream in(wl);
            std::string tok;
            while (std::getline(in, tok, ',')) {
                size_t used = 0;
                double v = std::stod(tok, &used);
                if (used != tok.size())
                    throw std::invalid_argument(msg("physics.pyramid_weights: bad entry '", tok, "'"));
                w.pyramid_weights.push_back(v);
            }
        }
        w.validate();
        return w;
    }
};

// 5-point discrete Laplacian with zero-padded borders.
inline Tensor laplacian(const Tensor& x, double h_interval = 1.0) {
    const auto& sh = x.shape();
    if (sh.size() != 3 || sh[0] != 1)
        throw std::invalid_argument(msg("laplacian: want (1,h,w), got ", shape_str(sh)));
    if (sh[1] < 3 || sh[2] < 3)
        throw std::invalid_argument(msg("laplacian: grid too small ", shape_str(sh)));
    if (!(h_interval > 0)) throw std::invalid_argument("laplacian: h_interval must be > 0");
    double inv = 1.0 / (h_interval * h_interval);
    Tensor k = Tensor::constant({1, 1, 3, 3}, {0.0, inv, 0.0, inv, -4.0 * inv, inv, 0.0, inv, 0.0});
    return conv2d(x, k, 1, 1);
}

// Binarize with a straight-through gradient: forward is 1[soft > 0.5], the
// backward path is the sigmoid surrogate.  The per-tensor normalizer max|x|
// is treated as a constant.  All-zero input maps to all zeros.
inline Tensor ste(const Tensor& x, double alpha, double tau) {
    if (!(alpha > 0)) throw std::invalid_argument("ste: alpha must be > 0");
    if (!(tau > 0 && tau < 1)) throw std::invalid_argument("ste: tau must be in (0,1)");
    double m = 0.0;
    for (double v : x.value()) m = std::max(m, std::abs(v));
    if (m == 0.0) return Tensor::zeros(x.shape());
    Tensor soft = sigmoid(add_scalar(mul_scalar(x, alpha / m), -alpha * tau));
    std::vector<double> hv(soft.numel());
    const auto& sv = soft.value();
    for (size_t i = 0; i < hv.size(); ++i) hv[i] = sv[i] > 0.5 ? 1.0 : 0.0;
    Tensor hard = Tensor::constant(x.shape(), std::move(hv));
    return hard + sub(soft, detach(soft));
}

using Batch = std::vector<Tensor>;

// Frozen segmenter hook: (1,h,h) gain map -> (4,h,h) class logits.
using RegionFn = std::function<Tensor(const Tensor&)>;

namespace detail_physics {

inline void check_batch(const Batch& a, const Batch& b, const char* where) {
    if (a.empty()) throw std::invalid_argument(msg(where, ": empty batch"));
    if (a.size() != b.size())
        throw std::invalid_argument(msg(where, ": batch sizes ", a.size(), " vs ", b.size()));
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].shape() != b[i].shape())
            throw std::invalid_argument(msg(where, ": shape mismatch at sample ", i, ": ",
                                            shape_str(a[i].shape()), " vs ",
                                            shape_str(b[i].shape())));
}

}  // namespace detail_physics

inline Tensor edge_loss(const Batch& x0, const Batch& x0hat, const PhysicsWeights& w) {
    detail_physics::check_batch(x0, x0hat, "edge_loss");
    Tensor acc = Tensor::scalar(0.0);
    for (size_t n = 0; n < x0.size(); ++n) {
        Tensor a = ste(laplacian(x0[n], w.grid_h_interval), w.ste_alpha, w.ste_tau);
        Tensor b = ste(laplacian(x0hat[n], w.grid_h_interval), w.ste_alpha, w.ste_tau);
        acc = acc + sq_norm_diff(a, b);
    }
    return mul_scalar(acc, 1.0 / (double)x0.size());
}

inline Tensor region_probs(const RegionFn& region_fwd, const Tensor& x) {
    Tensor logits = region_fwd(x);
    const auto& sh = logits.shape();
    if (sh.size() != 3 || sh[0] != 4)
        throw std::invalid_argument(msg("region_probs: want (4,h,w) logits, got ", shape_str(sh)));
    return softmax(logits, 0);
}

// Squared probability-map gap through the frozen segmenter; the target branch
// is detached so only the generated sample receives gradient.
inline Tensor region_loss(const Batch& x0, const Batch& x0hat, const RegionFn& region_fwd) {
    detail_physics::check_batch(x0, x0hat, "region_loss");
    if (!region_fwd) throw std::invalid_argument("region_loss: no region network");
    Tensor acc = Tensor::scalar(0.0);
    for (size_t n = 0; n < x0.size(); ++n) {
        Tensor p = detach(region_probs(region_fwd, x0[n]));
        Tensor q = region_probs(region_fwd, x0hat[n]);
        acc = acc + sq_norm_diff(p, q);
    }
    return mul_scalar(acc, 1.0 / (double)x0.size());
}

namespace detail_physics {

inline Tensor gauss5(const Tensor& x) {
    static const double b[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
    std::vector<double> k(25);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) k[(size_t)(i * 5 + j)] = b[i] * b[j];
    return conv2d(x, Tensor::constant({1, 1, 5, 5}, std::move(k)), 1, 2);
}

}  // namespace detail_physics

// Band-pass features L_l = x_l - up2(down2(gauss(x_l))) for l = 1..L plus the
// final low-pass; reconstruction telescopes back to x exactly.  up2 is
// bilinear so that smooth coarse structure lands in the coarse levels rather
// than leaking blockiness into the fine bands.
inline std::vector<Tensor> laplacian_pyramid(const Tensor& x, int L) {
    const auto& sh = x.shape();
    if (sh.size() != 3 || sh[0] != 1)
        throw std::invalid_argument(msg("laplacian_pyramid: want (1,h,w), got ", shape_str(sh)));
    if (L < 1) throw std::invalid_argument("laplacian_pyramid: L must be >= 1");
    int div = 1 << L;
    if (sh[1] % div != 0 || sh[2] % div != 0)
        throw std::invalid_argument(msg("laplacian_pyramid: ", shape_str(sh),
                                        " not divisible by 2^L=", div));
    ++trace::pyramid_calls();
    std::vector<Tensor> out;
    out.reserve((size_t)L + 1);
    Tensor cur = x;
    for (int l = 0; l < L; ++l) {
        Tensor dn = downsample2(detail_physics::gauss5(cur));
        out.push_back(sub(cur, upsample_bilinear2(dn)));
        cur = dn;
    }
    out.push_back(cur);
    return out;
}

inline Tensor multiscale_loss(const Batch& x0, const Batch& x0hat, const PhysicsWeights& w) {
    detail_physics::check_batch(x0, x0hat, "multiscale_loss");
    std::vector<double> wl = w.level_weights();
    Tensor acc = Tensor::scalar(0.0);
    for (size_t n = 0; n < x0.size(); ++n) {
        std::vector<Tensor> pa = laplacian_pyramid(x0[n], w.pyramid_levels);
        std::vector<Tensor> pb = laplacian_pyramid(x0hat[n], w.pyramid_levels);
        for (int l = 0; l < w.pyramid_levels; ++l)
            if (wl[(size_t)l] != 0.0)
                acc = acc + mul_scalar(sq_norm_diff(pa[(size_t)l], pb[(size_t)l]), wl[(size_t)l]);
    }
    return mul_scalar(acc, 1.0 / (double)x0.size());
}

// Single-sample residual stack (edge, region, pyramid levels), each field
// scaled by the square root of its weight so that ||r||^2 equals the
// lambda-weighted sum of the three per-sample losses.
inline Tensor physical_residual(const Tensor& x0, const Tensor& x0hat, const RegionFn& region_fwd,
                                const PhysicsWeights& w) {
    if (x0.shape() != x0hat.shape())
        throw std::invalid_argument(msg("physical_residual: shape mismatch ", shape_str(x0.shape()),
                                        " vs ", shape_str(x0hat.shape())));
    std::vector<Tensor> parts;
    Tensor re = sub(ste(laplacian(x0, w.grid_h_interval), w.ste_alpha, w.ste_tau),
                    ste(laplacian(x0hat, w.grid_h_interval), w.ste_alpha, w.ste_tau));
    parts.push_back(mul_scalar(reshape(re, {(int)re.numel()}), std::sqrt(w.lambda_edge)));
    if (!region_fwd) throw std::invalid_argument("physical_residual: no region network");
    Tensor rr = sub(detach(region_probs(region_fwd, x0)), region_probs(region_fwd, x0hat));
    parts.push_back(mul_scalar(reshape(rr, {(int)rr.numel()}), std::sqrt(w.lambda_region)));
    std::vector<double> wl = w.level_weights();
    std::vector<Tensor> pa = laplacian_pyramid(x0, w.pyramid_levels);
    std::vector<Tensor> pb = laplacian_pyramid(x0hat, w.pyramid_levels);
    for (int l = 0; l < w.pyramid_levels; ++l) {
        Tensor d = sub(pa[(size_t)l], pb[(size_t)l]);
        parts.push_back(mul_scalar(reshape(d, {(int)d.numel()}),
                                   std::sqrt(w.lambda_mulfea * wl[(size_t)l])));
    }
    return concat(parts, 0);
}

struct LossBreakdown {
    Tensor total;
    Tensor l_z0;
    Tensor l_edge;    // unweighted term values; total applies the lambdas
    Tensor l_region;
    Tensor l_mulfea;
};

// L_total = L_z0 + lambda_edge*L_edge + lambda_region*L_region +
// lambda_mulfea*L_mulfea.  Terms with lambda = 0 are skipped outright, so the
// segmenter and the pyramid are never touched on the vanilla path; x0/x0hat
// may then be empty.
inline LossBreakdown total_loss(const Batch& z0, const Batch& z0_pred, const Batch& x0,
                                const Batch& x0hat, const RegionFn& region_fwd,
                                const PhysicsWeights& w) {
    detail_physics::check_batch(z0, z0_pred, "total_loss: latent");
    const bool any_phys = w.lambda_edge > 0 || w.lambda_region > 0 || w.lambda_mulfea > 0;
    if (any_phys) detail_physics::check_batch(x0, x0hat, "total_loss: decoded");

    LossBreakdown out;
    Tensor acc = Tensor::scalar(0.0);
    for (size_t n = 0; n < z0.size(); ++n) acc = acc + sq_norm_diff(z0[n], z0_pred[n]);
    out.l_z0 = mul_scalar(acc, 1.0 / (double)z0.size());
    out.l_edge = w.lambda_edge > 0 ? edge_loss(x0, x0hat, w) : Tensor::scalar(0.0);
    out.l_region = w.lambda_region > 0 ? region_loss(x0, x0hat, region_fwd) : Tensor::scalar(0.0);
    out.l_mulfea = w.lambda_mulfea > 0 ? multiscale_loss(x0, x0hat, w) : Tensor::scalar(0.0);
    out.total = out.l_z0 + mul_scalar(out.l_edge, w.lambda_edge) +
                mul_scalar(out.l_region, w.lambda_region) +
                mul_scalar(out.l_mulfea, w.lambda_mulfea);
    return out;
}

}  // namespace ckm
