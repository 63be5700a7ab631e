#pragma once

// Noise schedule, forward process, DDPM posterior mathematics and the DDIM
// sampler, all in pred-x0 mode (pred-eps kept for completeness).  Timesteps
// are 1-based throughout with alpha_bar(0) == 1 by convention.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ckm/common.hpp"
#include "ckm/rng.hpp"
#include "ckm/tensor.hpp"

namespace ckm {

struct NoiseSchedule {
    int T = 0;
    // Arrays are sized T+1 and indexed by timestep; index 0 is unused except
    // for alpha_bar where alpha_bar[0] == 1.
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> beta_tilde;  // (1-abar_{t-1}) * beta_t / (1-abar_t); zero at t=1
    std::vector<double> A_tilde;     // sqrt(abar_{t-1}) * beta_t / (1-abar_t)

    double abar(int t) const {
        if (t < 0 || t > T)
            throw std::invalid_argument(msg("abar: t=", t, " outside [0,", T, "]"));
        return alpha_bar[(size_t)t];
    }

    void check_t(int t) const {
        if (t < 1 || t > T)
            throw std::invalid_argument(msg("timestep t=", t, " outside [1,", T, "]"));
    }
};

// Squared-cosine alpha_bar with offset s=0.008; betas derived from the raw
// curve, clipped to <= 0.999, and alpha_bar rebuilt from the clipped alphas
// so every stored array stays self-consistent.
inline NoiseSchedule cosine_schedule(int T) {
    if (T < 2) throw std::invalid_argument(msg("cosine_schedule: T=", T, " must be >= 2"));
    const double s = 0.008;
    auto f = [&](int t) {
        double u = (((double)t / T + s) / (1.0 + s)) * (M_PI / 2.0);
        double c = std::cos(u);
        return c * c;
    };

    NoiseSchedule sch;
    sch.T = T;
    sch.beta.assign((size_t)T + 1, 0.0);
    sch.alpha.assign((size_t)T + 1, 0.0);
    sch.alpha_bar.assign((size_t)T + 1, 1.0);
    sch.beta_tilde.assign((size_t)T + 1, 0.0);
    sch.A_tilde.assign((size_t)T + 1, 0.0);

    const double f0 = f(0);
    double prev_raw = 1.0;
    for (int t = 1; t <= T; ++t) {
        double raw = f(t) / f0;
        double b = 1.0 - raw / prev_raw;
        prev_raw = raw;
        if (b > 0.999) b = 0.999;
        if (b < 1e-12) b = 1e-12;  // cosine curve is strictly decreasing; guard rounding only
        sch.beta[(size_t)t] = b;
        sch.alpha[(size_t)t] = 1.0 - b;
        sch.alpha_bar[(size_t)t] = sch.alpha_bar[(size_t)t - 1] * (1.0 - b);
    }
    for (int t = 1; t <= T; ++t) {
        double bt = sch.beta[(size_t)t];
        double ab = sch.alpha_bar[(size_t)t];
        double abp = sch.alpha_bar[(size_t)t - 1];
        sch.beta_tilde[(size_t)t] = (1.0 - abp) * bt / (1.0 - ab);
        sch.A_tilde[(size_t)t] = std::sqrt(abp) * bt / (1.0 - ab);
    }
    return sch;
}

// Strictly increasing timesteps from 1 to T inclusive; length I+1 for I
// sampling steps.
struct SubSequence {
    std::vector<int> indices;

    int steps() const { return (int)indices.size() - 1; }

    void validate(int T) const {
        if (indices.size() < 2)
            throw std::invalid_argument("subsequence must hold at least {1, T}");
        if (indices.front() != 1)
            throw std::invalid_argument(msg("subsequence must start at 1, got ", indices.front()));
        if (indices.back() != T)
            throw std::invalid_argument(msg("subsequence must end at T=", T, ", got ", indices.back()));
        for (size_t i = 1; i < indices.size(); ++i)
            if (indices[i] <= indices[i - 1])
                throw std::invalid_argument(msg("subsequence not strictly increasing at position ", i));
    }

    static SubSequence uniform(int T, int len) {
        if (T < 2) throw std::invalid_argument(msg("subsequence: T=", T, " must be >= 2"));
        if (len < 2 || len > T)
            throw std::invalid_argument(msg("subsequence length ", len, " outside [2,", T, "]"));
        SubSequence sub;
        sub.indices.reserve((size_t)len);
        for (int i = 0; i < len; ++i) {
            double pos = 1.0 + (double)(T - 1) * (double)i / (double)(len - 1);
            sub.indices.push_back((int)std::llround(pos));
        }
        sub.validate(T);
        return sub;
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(msg(where, ": shape mismatch ", shape_str(a.shape()), " vs ",
                                        shape_str(b.shape())));
}

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
inline Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    s.check_t(t);
    check_same_shape(x0, eps, "forward_noise");
    double ab = s.alpha_bar[(size_t)t];
    return mul_scalar(x0, std::sqrt(ab)) + mul_scalar(eps, std::sqrt(1.0 - ab));
}

inline Tensor eps_to_x0(const Tensor& x_t, const Tensor& eps, int t, const NoiseSchedule& s) {
    s.check_t(t);
    check_same_shape(x_t, eps, "eps_to_x0");
    double ab = s.alpha_bar[(size_t)t];
    return mul_scalar(x_t + mul_scalar(eps, -std::sqrt(1.0 - ab)), 1.0 / std::sqrt(ab));
}

inline Tensor x0_to_eps(const Tensor& x_t, const Tensor& x0, int t, const NoiseSchedule& s) {
    s.check_t(t);
    check_same_shape(x_t, x0, "x0_to_eps");
    double ab = s.alpha_bar[(size_t)t];
    return mul_scalar(x_t + mul_scalar(x0, -std::sqrt(ab)), 1.0 / std::sqrt(1.0 - ab));
}

struct PosteriorParams {
    Tensor mean;
    double var = 0.0;
};

// Posterior q(x_{t-1} | x_t, x0): mean in the x0 parameterization, variance
// beta_tilde_t.  t=1 has no posterior; the samplers return the x0 prediction
// there instead.
inline PosteriorParams posterior_params_x0(const Tensor& x_t, const Tensor& x0, int t,
                                           const NoiseSchedule& s) {
    if (t < 2 || t > s.T)
        throw std::invalid_argument(msg("posterior_params_x0: t=", t, " outside [2,", s.T, "]"));
    check_same_shape(x_t, x0, "posterior_params_x0");
    double a = s.alpha[(size_t)t];
    double ab = s.alpha_bar[(size_t)t];
    double abp = s.alpha_bar[(size_t)t - 1];
    double cx = std::sqrt(a) * (1.0 - abp) / (1.0 - ab);
    double c0 = std::sqrt(abp) * (1.0 - a) / (1.0 - ab);
    return {mul_scalar(x_t, cx) + mul_scalar(x0, c0), s.beta_tilde[(size_t)t]};
}

// Same posterior mean written in terms of the noise instead of x0.
inline Tensor posterior_mean_eps(const Tensor& x_t, const Tensor& eps, int t,
                                 const NoiseSchedule& s) {
    if (t < 2 || t > s.T)
        throw std::invalid_argument(msg("posterior_mean_eps: t=", t, " outside [2,", s.T, "]"));
    check_same_shape(x_t, eps, "posterior_mean_eps");
    double a = s.alpha[(size_t)t];
    double ab = s.alpha_bar[(size_t)t];
    double ce = (1.0 - a) / std::sqrt(1.0 - ab);
    return mul_scalar(x_t + mul_scalar(eps, -ce), 1.0 / std::sqrt(a));
}

// One reverse step in pred-x0 mode.  The noise carries standard deviation
// sqrt(beta_tilde_t), the standard-Gaussian reading of the posterior variance.
inline Tensor ddpm_step_x0(const Tensor& x_t, const Tensor& x0_pred, int t, const NoiseSchedule& s,
                           const Tensor& noise) {
    s.check_t(t);
    check_same_shape(x_t, x0_pred, "ddpm_step_x0");
    check_same_shape(x_t, noise, "ddpm_step_x0");
    if (t == 1) return x0_pred;
    PosteriorParams p = posterior_params_x0(x_t, x0_pred, t, s);
    return p.mean + mul_scalar(noise, std::sqrt(p.var));
}

// pred-eps companion of ddpm_step_x0.
inline Tensor ddpm_step_eps(const Tensor& x_t, const Tensor& eps_pred, int t,
                            const NoiseSchedule& s, const Tensor& noise) {
    s.check_t(t);
    check_same_shape(x_t, eps_pred, "ddpm_step_eps");
    check_same_shape(x_t, noise, "ddpm_step_eps");
    if (t == 1) return eps_to_x0(x_t, eps_pred, 1, s);
    Tensor mean = posterior_mean_eps(x_t, eps_pred, t, s);
    return mean + mul_scalar(noise, std::sqrt(s.beta_tilde[(size_t)t]));
}

// Family of posteriors sharing the forward marginals, parameterized by the
// reverse variance sigma_t^2 in [0, 1-abar_{t-1}].  sigma_t^2 = beta_tilde_t
// recovers the DDPM posterior; sigma_t = 0 is the deterministic DDIM update.
inline PosteriorParams generalized_posterior(const Tensor& x_t, const Tensor& x0, int t,
                                             double sigma2, const NoiseSchedule& s) {
    s.check_t(t);
    check_same_shape(x_t, x0, "generalized_posterior");
    double ab = s.alpha_bar[(size_t)t];
    double abp = s.alpha_bar[(size_t)t - 1];
    double bbar_t = 1.0 - ab;
    double bbar_p = 1.0 - abp;
    if (!(sigma2 >= 0.0 && sigma2 <= bbar_p))
        throw std::invalid_argument(msg("generalized_posterior: sigma_t^2=", sigma2,
                                        " outside [0, ", bbar_p, "] at t=", t));
    double rad = bbar_p - sigma2;
    if (rad < 0.0) rad = 0.0;
    double cx = std::sqrt(rad) / std::sqrt(bbar_t);
    double c0 = std::sqrt(abp) - std::sqrt(ab) * cx;
    return {mul_scalar(x_t, cx) + mul_scalar(x0, c0), sigma2};
}

// Denoiser callback: (z_t, t, tokens) -> z0 prediction.
using DenoiseFn = std::function<Tensor(const Tensor&, int, const Tensor&)>;

// Deterministic DDIM sampling over a subsequence {1, ..., T}.  Walks the
// subsequence from T down; each visited timestep costs one denoiser call
// (I+1 in total), and the final call at t=1 returns the z0 prediction
// directly.  Built from differentiable ops, so gradients flow through the
// whole chain into the denoiser parameters.
inline Tensor ddim_sample(const Tensor& z_T, const SubSequence& sub, const DenoiseFn& net,
                          const Tensor& tokens, const NoiseSchedule& s) {
    sub.validate(s.T);
    Tensor z = z_T;
    int n = (int)sub.indices.size();
    for (int i = n - 1; i >= 1; --i) {
        int t = sub.indices[(size_t)i];
        Tensor z0 = net(z, t, tokens);
        check_same_shape(z, z0, "ddim_sample: denoiser output");
        double ab = s.alpha_bar[(size_t)t];
        double rt = std::sqrt(1.0 - ab);
        Tensor eps = mul_scalar(z, 1.0 / rt) + mul_scalar(z0, -std::sqrt(ab) / rt);
        int tp = sub.indices[(size_t)i - 1];
        double abp = s.alpha_bar[(size_t)tp];
        z = mul_scalar(z0, std::sqrt(abp)) + mul_scalar(eps, std::sqrt(1.0 - abp));
    }
    Tensor out = net(z, 1, tokens);
    check_same_shape(z, out, "ddim_sample: denoiser output");
    return out;
}

// Standard-normal constant tensor; draws consume the generator row-major.
inline Tensor randn(Rng& rng, std::vector<int> shape) {
    size_t n = detail::shape_numel(shape);
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return Tensor::constant(std::move(shape), std::move(v));
}

}  // namespace ckm
