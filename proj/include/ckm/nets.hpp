#pragma once

// The four trainable networks: region segmenter, gain-map VAE, condition
// encoder, and the conditional denoising UNet. All of them are thin wrappers
// around a ParamStore plus a forward() that builds an autodiff graph, so the
// training loop owns batching, losses, and optimizer steps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ckm/common.hpp"
#include "ckm/config.hpp"
#include "ckm/grid.hpp"
#include "ckm/optim.hpp"
#include "ckm/rng.hpp"
#include "ckm/tensor.hpp"
#include "ckm/tensor_conv.hpp"

namespace ckm {

enum class NetKind : uint8_t { region = 0, vae = 1, cond = 2, unet = 3 };

inline const char* kind_name(NetKind k) {
    switch (k) {
        case NetKind::region: return "region";
        case NetKind::vae: return "vae";
        case NetKind::cond: return "cond";
        case NetKind::unet: return "unet";
    }
    return "?";
}

struct RegionNetConfig {
    int w1 = 16, w2 = 32, w3 = 64;
    int classes = 4;

    static RegionNetConfig from_config(const KvConfig& cfg) {
        RegionNetConfig c;
        c.w1 = (int)cfg.get_int("region_net.w1", c.w1);
        c.w2 = (int)cfg.get_int("region_net.w2", c.w2);
        c.w3 = (int)cfg.get_int("region_net.w3", c.w3);
        return c;
    }
};

struct VaeConfig {
    int w1 = 32, w2 = 64;
    int zc = 3;  // latent channels

    static VaeConfig from_config(const KvConfig& cfg) {
        VaeConfig c;
        c.w1 = (int)cfg.get_int("vae.w1", c.w1);
        c.w2 = (int)cfg.get_int("vae.w2", c.w2);
        c.zc = (int)cfg.get_int("vae.zc", c.zc);
        return c;
    }
};

struct CondEncConfig {
    int h = 64;       // conditioning maps are (3,h,h)
    int d_i = 64;     // token width
    int patch = 8;    // patch embedding size -> n = (h/patch)^2 tokens
    int window = 4;   // self-attention window (per side, in tokens)
    int blocks = 2;
    int mlp_mult = 2;

    static CondEncConfig from_config(const KvConfig& cfg) {
        CondEncConfig c;
        c.h = (int)cfg.get_int("grid.h", c.h);
        c.d_i = (int)cfg.get_int("cond.d_i", c.d_i);
        c.window = (int)cfg.get_int("cond.window", c.window);
        return c;
    }
};

struct UNetConfig {
    int zc = 3;
    int w1 = 32, w2 = 64, w3 = 128;
    int d_i = 64;   // incoming token width
    int d_n = 64;   // attention inner width
    int temb = 64;  // sinusoidal time embedding width
    int T = 1000;   // for validating the t argument

    static UNetConfig from_config(const KvConfig& cfg) {
        UNetConfig c;
        c.w1 = (int)cfg.get_int("unet.w1", c.w1);
        c.w2 = (int)cfg.get_int("unet.w2", c.w2);
        c.w3 = (int)cfg.get_int("unet.w3", c.w3);
        c.d_i = (int)cfg.get_int("cond.d_i", c.d_i);
        c.d_n = (int)cfg.get_int("unet.d_n", c.d_n);
        c.T = (int)cfg.get_int("diffusion.T", c.T);
        return c;
    }
};

namespace detail_nets {

inline Tensor reg(ParamStore& ps, const std::string& name, const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= (size_t)d;
    return ps.add(name, shape, std::vector<double>(n, 0.0));
}

// 3x3 (or kxk) convolution with bias; default padding keeps the map size.
struct Conv {
    Tensor w, b;
    int stride = 1, pad = -1;

    Tensor operator()(const Tensor& x) const {
        int k = w.shape()[2];
        int p = pad >= 0 ? pad : k / 2;
        return add(conv2d(x, w, stride, p), b);
    }
};

// Normalization over the trailing `naxes` axes with a learned affine.
struct Norm {
    Tensor g, s;
    int naxes = 2;

    Tensor operator()(const Tensor& x) const { return add(mul(layer_norm(x, naxes), g), s); }
};

struct Linear {
    Tensor w, b;  // [in,out], [out]

    Tensor operator()(const Tensor& x) const { return add(matmul(x, w), b); }
};

inline Conv make_conv(ParamStore& ps, const std::string& pfx, int cout, int cin, int k,
                      int stride = 1, int pad = -1) {
    Conv c{reg(ps, pfx + ".w", {cout, cin, k, k}), reg(ps, pfx + ".b", {cout, 1, 1})};
    c.stride = stride;
    c.pad = pad;
    return c;
}

inline Norm make_norm_c(ParamStore& ps, const std::string& pfx, int c) {
    return {reg(ps, pfx + ".g", {c, 1, 1}), reg(ps, pfx + ".s", {c, 1, 1}), 2};
}

inline Norm make_norm_t(ParamStore& ps, const std::string& pfx, int d) {
    return {reg(ps, pfx + ".g", {d}), reg(ps, pfx + ".s", {d}), 1};
}

inline Linear make_linear(ParamStore& ps, const std::string& pfx, int in, int out) {
    return {reg(ps, pfx + ".w", {in, out}), reg(ps, pfx + ".b", {out})};
}

// conv -> norm -> silu, twice. The workhorse of both UNets.
struct Block {
    Conv c1, c2;
    Norm n1, n2;

    Tensor operator()(const Tensor& x) const { return silu(n2(c2(silu(n1(c1(x)))))); }
};

inline Block make_block(ParamStore& ps, const std::string& pfx, int cin, int cout) {
    return {make_conv(ps, pfx + ".c1", cout, cin, 3), make_conv(ps, pfx + ".c2", cout, cout, 3),
            make_norm_c(ps, pfx + ".n1", cout), make_norm_c(ps, pfx + ".n2", cout)};
}

inline bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

// Fill every registered parameter in registration order: conv kernels get
// fan-in scaled normals, matmul weights 1/sqrt(in), norm gains 1, positional
// embeddings a small normal, everything else (biases, shifts) zero.
inline void init_params(ParamStore& ps, Rng& rng) {
    for (const auto& item : ps.items()) {
        Tensor t = item.second;
        const auto& sh = t.shape();
        std::vector<double> v(t.numel(), 0.0);
        if (ends_with(item.first, ".g")) {
            std::fill(v.begin(), v.end(), 1.0);
        } else if (ends_with(item.first, ".w") && sh.size() == 4) {
            double sd = std::sqrt(2.0 / ((double)sh[1] * sh[2] * sh[3]));
            for (auto& x : v) x = sd * rng.normal();
        } else if (ends_with(item.first, ".w") && sh.size() == 2) {
            double sd = std::sqrt(1.0 / (double)sh[0]);
            for (auto& x : v) x = sd * rng.normal();
        } else if (ends_with(item.first, ".pos")) {
            for (auto& x : v) x = 0.02 * rng.normal();
        }
        t.set_value(v);
    }
}

// Scaled dot-product attention shared by the condition encoder (self) and the
// denoising UNet (cross). Queries come from q_rows, keys/values from kv_rows;
// scores are scaled by 1/sqrt(d_n) and softmaxed per query row, so `a` is
// row-stochastic. Zero kv_rows give a uniform `a` over zero values: out == 0.
struct AttnResult {
    Tensor a;    // [nq, nkv]
    Tensor out;  // [nq, cols(wo)]
};

inline AttnResult scaled_attention(const Tensor& q_rows, const Tensor& kv_rows, const Tensor& wq,
                                   const Tensor& wk, const Tensor& wv, const Tensor& wo, int d_n) {
    Tensor q = matmul(q_rows, wq);
    Tensor k = matmul(kv_rows, wk);
    Tensor v = matmul(kv_rows, wv);
    Tensor a = softmax(mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt((double)d_n)), 1);
    return {a, matmul(matmul(a, v), wo)};
}

// Classic transformer timestep embedding, returned as a [1,dim] constant.
inline Tensor time_embedding(int t, int dim) {
    int half = dim / 2;
    std::vector<double> v((size_t)dim, 0.0);
    for (int i = 0; i < half; ++i) {
        double f = std::exp(-std::log(10000.0) * (double)i / (double)(half - 1));
        v[(size_t)i] = std::sin((double)t * f);
        v[(size_t)(half + i)] = std::cos((double)t * f);
    }
    return Tensor::constant({1, dim}, v);
}

inline void check_chw(const Tensor& x, int c, const char* who) {
    const auto& sh = x.shape();
    if (sh.size() != 3 || sh[0] != c)
        throw std::invalid_argument(msg(who, ": expected (", c, ",h,w) input, got ", shape_str(sh)));
    if (sh[1] != sh[2]) throw std::invalid_argument(msg(who, ": input must be square, got ", shape_str(sh)));
}

}  // namespace detail_nets

// KL(N(mu, exp(logvar)) || N(0,I)), summed over all latent cells.
inline Tensor kl_divergence(const Tensor& mu, const Tensor& logvar) {
    Tensor var = ::ckm::exp(logvar);
    Tensor t = sub(add(mul(mu, mu), var), add_scalar(logvar, 1.0));
    return mul_scalar(sum(t), 0.5);
}

// ---------------------------------------------------------------------------
// Region segmenter: small two-scale UNet, (1,h,h) -> (classes,h,h) logits.

class RegionUNet {
  public:
    explicit RegionUNet(RegionNetConfig cfg = {}) : cfg_(cfg) {
        using namespace detail_nets;
        enc1_ = make_block(ps_, "enc1", 1, cfg.w1);
        enc2_ = make_block(ps_, "enc2", cfg.w1, cfg.w2);
        bott_ = make_block(ps_, "bott", cfg.w2, cfg.w3);
        dec2_ = make_block(ps_, "dec2", cfg.w3 + cfg.w2, cfg.w2);
        dec1_ = make_block(ps_, "dec1", cfg.w2 + cfg.w1, cfg.w1);
        head_ = make_conv(ps_, "head", cfg.classes, cfg.w1, 1);
    }

    void init(Rng& rng) { detail_nets::init_params(ps_, rng); }

    Tensor forward(const Tensor& x) const {
        detail_nets::check_chw(x, 1, "region_forward");
        int h = x.shape()[1];
        if (h % 4 != 0 || h < 8)
            throw std::invalid_argument(msg("region_forward: h must be a multiple of 4 and >= 8, got ", h));
        ++trace::region_forward_calls();
        Tensor e1 = enc1_(x);
        Tensor e2 = enc2_(avgpool2(e1));
        Tensor b = bott_(avgpool2(e2));
        Tensor d2 = dec2_(concat({upsample_nearest2(b), e2}, 0));
        Tensor d1 = dec1_(concat({upsample_nearest2(d2), e1}, 0));
        return head_(d1);
    }

    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const RegionNetConfig& config() const { return cfg_; }

  private:
    RegionNetConfig cfg_;
    ParamStore ps_;
    detail_nets::Block enc1_, enc2_, bott_, dec2_, dec1_;
    detail_nets::Conv head_;
};

// ---------------------------------------------------------------------------
// Gain-map VAE. encode: (1,h,h) -> latent (zc,h/4,h/4); decode back through a
// sigmoid so reconstructions live in [0,1] like normalized gains.

struct VaeOut {
    Tensor mu, logvar, z;
};

class Vae {
  public:
    explicit Vae(VaeConfig cfg = {}) : cfg_(cfg) {
        using namespace detail_nets;
        ec1_ = make_conv(ps_, "ec1", cfg.w1, 1, 3);
        en1_ = make_norm_c(ps_, "en1", cfg.w1);
        ec2_ = make_conv(ps_, "ec2", cfg.w2, cfg.w1, 3);
        en2_ = make_norm_c(ps_, "en2", cfg.w2);
        ec3_ = make_conv(ps_, "ec3", cfg.w2, cfg.w2, 3);
        en3_ = make_norm_c(ps_, "en3", cfg.w2);
        mu_head_ = make_conv(ps_, "mu", cfg.zc, cfg.w2, 1);
        lv_head_ = make_conv(ps_, "logvar", cfg.zc, cfg.w2, 1);
        dc1_ = make_conv(ps_, "dc1", cfg.w2, cfg.zc, 3);
        dn1_ = make_norm_c(ps_, "dn1", cfg.w2);
        dc2_ = make_conv(ps_, "dc2", cfg.w1, cfg.w2, 3);
        dn2_ = make_norm_c(ps_, "dn2", cfg.w1);
        dc3_ = make_conv(ps_, "dc3", cfg.w1, cfg.w1, 3);
        dn3_ = make_norm_c(ps_, "dn3", cfg.w1);
        out_ = make_conv(ps_, "out", 1, cfg.w1, 3);
    }

    void init(Rng& rng) { detail_nets::init_params(ps_, rng); }

    // eps == nullptr gives the deterministic embedding z = mu; otherwise the
    // reparameterized sample z = mu + exp(logvar/2) * eps. logvar is clamped
    // so the variance stays representable.
    VaeOut encode(const Tensor& x, const Tensor* eps = nullptr) const {
        detail_nets::check_chw(x, 1, "vae_encode");
        int h = x.shape()[1];
        if (h % 4 != 0 || h < 8)
            throw std::invalid_argument(msg("vae_encode: h must be a multiple of 4 and >= 8, got ", h));
        Tensor e = silu(en1_(ec1_(x)));
        e = silu(en2_(ec2_(avgpool2(e))));
        e = silu(en3_(ec3_(avgpool2(e))));
        VaeOut out;
        out.mu = mu_head_(e);
        out.logvar = clamp(lv_head_(e), -30.0, 20.0);
        if (eps) {
            if (eps->shape() != out.mu.shape())
                throw std::invalid_argument(msg("vae_encode: eps shape ", shape_str(eps->shape()),
                                                " does not match latent ", shape_str(out.mu.shape())));
            out.z = add(out.mu, mul(::ckm::exp(mul_scalar(out.logvar, 0.5)), *eps));
        } else {
            out.z = out.mu;
        }
        return out;
    }

    Tensor decode(const Tensor& z) const {
        detail_nets::check_chw(z, cfg_.zc, "vae_decode");
        Tensor d = silu(dn1_(dc1_(z)));
        d = silu(dn2_(dc2_(upsample_nearest2(d))));
        d = silu(dn3_(dc3_(upsample_nearest2(d))));
        return sigmoid(out_(d));
    }

    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const VaeConfig& config() const { return cfg_; }

  private:
    VaeConfig cfg_;
    ParamStore ps_;
    detail_nets::Conv ec1_, ec2_, ec3_, mu_head_, lv_head_, dc1_, dc2_, dc3_, out_;
    detail_nets::Norm en1_, en2_, en3_, dn1_, dn2_, dn3_;
};

// ---------------------------------------------------------------------------
// Condition encoder: patch embedding of the stacked (building, tx, vehicle)
// maps followed by windowed self-attention blocks, producing n=(h/patch)^2
// tokens of width d_i. Windows are plain (not shifted).

class CondEncoder {
  public:
    explicit CondEncoder(CondEncConfig cfg = {}) : cfg_(cfg) {
        using namespace detail_nets;
        if (cfg.h % cfg.patch != 0)
            throw std::invalid_argument(msg("cond encoder: h=", cfg.h, " not divisible by patch=", cfg.patch));
        g_ = cfg.h / cfg.patch;
        n_ = g_ * g_;
        weff_ = std::min(cfg.window, g_);
        if (g_ % weff_ != 0)
            throw std::invalid_argument(msg("cond encoder: token grid ", g_, " not divisible by window ", weff_));
        patch_ = make_conv(ps_, "patch", cfg.d_i, 3, cfg.patch, cfg.patch, 0);
        pos_ = reg(ps_, "tok.pos", {n_, cfg.d_i});
        for (int bi = 0; bi < cfg.blocks; ++bi) {
            std::string p = msg("blk", bi);
            AttnBlock b;
            b.ln1 = make_norm_t(ps_, p + ".ln1", cfg.d_i);
            b.wq = reg(ps_, p + ".wq.w", {cfg.d_i, cfg.d_i});
            b.wk = reg(ps_, p + ".wk.w", {cfg.d_i, cfg.d_i});
            b.wv = reg(ps_, p + ".wv.w", {cfg.d_i, cfg.d_i});
            b.wo = reg(ps_, p + ".wo.w", {cfg.d_i, cfg.d_i});
            b.ln2 = make_norm_t(ps_, p + ".ln2", cfg.d_i);
            b.fc1 = make_linear(ps_, p + ".fc1", cfg.d_i, cfg.mlp_mult * cfg.d_i);
            b.fc2 = make_linear(ps_, p + ".fc2", cfg.mlp_mult * cfg.d_i, cfg.d_i);
            blocks_.push_back(b);
        }
        proj_ = make_linear(ps_, "proj", cfg.d_i, cfg.d_i);
        build_window_index();
    }

    void init(Rng& rng) { detail_nets::init_params(ps_, rng); }

    int tokens() const { return n_; }

    Tensor forward(const Tensor& cond) const {
        detail_nets::check_chw(cond, 3, "cond_encode");
        if (cond.shape()[1] != cfg_.h)
            throw std::invalid_argument(msg("cond_encode: expected h=", cfg_.h, ", got ", cond.shape()[1]));
        Tensor pe = patch_(cond);                                // [d_i, g, g]
        Tensor tok = transpose(reshape(pe, {cfg_.d_i, n_}));     // [n, d_i]
        tok = add(tok, pos_);
        for (const auto& b : blocks_) {
            tok = add(tok, window_attn(b, b.ln1(tok)));
            tok = add(tok, b.fc2(silu(b.fc1(b.ln2(tok)))));
        }
        return proj_(tok);
    }

    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const CondEncConfig& config() const { return cfg_; }

  private:
    struct AttnBlock {
        detail_nets::Norm ln1, ln2;
        Tensor wq, wk, wv, wo;
        detail_nets::Linear fc1, fc2;
    };

    void build_window_index() {
        int gw = g_ / weff_;
        perm_.clear();
        for (int wr = 0; wr < gw; ++wr)
            for (int wc = 0; wc < gw; ++wc)
                for (int r = 0; r < weff_; ++r)
                    for (int c = 0; c < weff_; ++c)
                        perm_.push_back((wr * weff_ + r) * g_ + wc * weff_ + c);
        inv_.assign(perm_.size(), 0);
        for (size_t i = 0; i < perm_.size(); ++i) inv_[(size_t)perm_[i]] = (int)i;
    }

    Tensor window_attn(const AttnBlock& b, const Tensor& x) const {
        int wsz = weff_ * weff_;
        int nwin = n_ / wsz;
        std::vector<Tensor> outs;
        outs.reserve((size_t)nwin);
        for (int w = 0; w < nwin; ++w) {
            std::vector<int> idx(perm_.begin() + (size_t)w * wsz, perm_.begin() + (size_t)(w + 1) * wsz);
            Tensor xw = gather_rows(x, idx);
            outs.push_back(detail_nets::scaled_attention(xw, xw, b.wq, b.wk, b.wv, b.wo, cfg_.d_i).out);
        }
        return gather_rows(concat(outs, 0), inv_);
    }

    CondEncConfig cfg_;
    int g_ = 0, n_ = 0, weff_ = 0;
    ParamStore ps_;
    detail_nets::Conv patch_;
    Tensor pos_;
    std::vector<AttnBlock> blocks_;
    detail_nets::Linear proj_;
    std::vector<int> perm_, inv_;
};

// ---------------------------------------------------------------------------
// Conditional denoising UNet over the latent. Predicts x0 (not eps). Three
// resolutions; cross-attention against the condition tokens at the two
// coarsest ones. Queries come from the flattened feature map, keys/values
// from the tokens, scores scaled by 1/sqrt(d_n).

class DiffusionUNet {
  public:
    explicit DiffusionUNet(UNetConfig cfg = {}) : cfg_(cfg) {
        using namespace detail_nets;
        stem_ = make_conv(ps_, "stem", cfg.w1, cfg.zc, 3);
        down1_ = make_res(ps_, "down1", cfg.w1, cfg.w1);
        down2_ = make_res(ps_, "down2", cfg.w1, cfg.w2);
        attn8_ = make_attn(ps_, "attn8", cfg.w2);
        mid_ = make_res(ps_, "mid", cfg.w2, cfg.w3);
        attn4_ = make_attn(ps_, "attn4", cfg.w3);
        up2_ = make_res(ps_, "up2", cfg.w3 + cfg.w2, cfg.w2);
        up1_ = make_res(ps_, "up1", cfg.w2 + cfg.w1, cfg.w1);
        head_norm_ = make_norm_c(ps_, "head_n", cfg.w1);
        head_ = make_conv(ps_, "head", cfg.zc, cfg.w1, 3);
    }

    void init(Rng& rng) { detail_nets::init_params(ps_, rng); }

    Tensor forward(const Tensor& z_t, int t, const Tensor& tokens) const {
        detail_nets::check_chw(z_t, cfg_.zc, "unet_forward");
        int hl = z_t.shape()[1];
        if (hl % 4 != 0 || hl < 4)
            throw std::invalid_argument(msg("unet_forward: latent side must be a multiple of 4 and >= 4, got ", hl));
        if (t < 1 || t > cfg_.T)
            throw std::invalid_argument(msg("unet_forward: t=", t, " outside [1,", cfg_.T, "]"));
        const auto& ts = tokens.shape();
        if (ts.size() != 2 || ts[1] != cfg_.d_i)
            throw std::invalid_argument(msg("unet_forward: tokens must be (n,", cfg_.d_i, "), got ", shape_str(ts)));
        Tensor temb = detail_nets::time_embedding(t, cfg_.temb);

        Tensor s1 = res_fwd(down1_, stem_(z_t), temb);            // [w1, hl]
        Tensor s2 = res_fwd(down2_, avgpool2(s1), temb);          // [w2, hl/2]
        s2 = cross_attn(attn8_, s2, tokens);
        Tensor m = res_fwd(mid_, avgpool2(s2), temb);             // [w3, hl/4]
        m = cross_attn(attn4_, m, tokens);
        Tensor u2 = res_fwd(up2_, concat({upsample_nearest2(m), s2}, 0), temb);
        Tensor u1 = res_fwd(up1_, concat({upsample_nearest2(u2), s1}, 0), temb);
        return head_(silu(head_norm_(u1)));
    }

    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const UNetConfig& config() const { return cfg_; }

  private:
    struct Res {
        detail_nets::Conv c1, c2;
        detail_nets::Norm n1, n2;
        detail_nets::Linear t1, t2;  // per-block time MLP: temb -> temb -> cout
        detail_nets::Conv skip;      // 1x1, only when cin != cout
        bool has_skip = false;
        int cout = 0;
    };

    struct Attn {
        Tensor wq, wk, wv, wo;  // [C,d_n], [d_i,d_n], [d_i,d_n], [d_n,C]
        detail_nets::Norm norm;
    };

    Res make_res(ParamStore& ps, const std::string& pfx, int cin, int cout) {
        using namespace detail_nets;
        Res r;
        r.c1 = make_conv(ps, pfx + ".c1", cout, cin, 3);
        r.n1 = make_norm_c(ps, pfx + ".n1", cout);
        r.t1 = make_linear(ps, pfx + ".t1", cfg_.temb, cfg_.temb);
        r.t2 = make_linear(ps, pfx + ".t2", cfg_.temb, cout);
        r.c2 = make_conv(ps, pfx + ".c2", cout, cout, 3);
        r.n2 = make_norm_c(ps, pfx + ".n2", cout);
        r.has_skip = cin != cout;
        if (r.has_skip) r.skip = make_conv(ps, pfx + ".skip", cout, cin, 1);
        r.cout = cout;
        return r;
    }

    Attn make_attn(ParamStore& ps, const std::string& pfx, int c) {
        using namespace detail_nets;
        Attn a;
        a.wq = reg(ps, pfx + ".wq.w", {c, cfg_.d_n});
        a.wk = reg(ps, pfx + ".wk.w", {cfg_.d_i, cfg_.d_n});
        a.wv = reg(ps, pfx + ".wv.w", {cfg_.d_i, cfg_.d_n});
        a.wo = reg(ps, pfx + ".wo.w", {cfg_.d_n, c});
        a.norm = make_norm_c(ps, pfx + ".n", c);
        return a;
    }

    Tensor res_fwd(const Res& r, const Tensor& x, const Tensor& temb) const {
        Tensor h1 = silu(r.n1(r.c1(x)));
        Tensor tv = r.t2(silu(r.t1(temb)));            // [1, cout]
        h1 = add(h1, reshape(tv, {r.cout, 1, 1}));
        Tensor h2 = silu(r.n2(r.c2(h1)));
        return add(h2, r.has_skip ? r.skip(x) : x);
    }

    Tensor cross_attn(const Attn& a, const Tensor& feat, const Tensor& tokens) const {
        const auto& sh = feat.shape();
        int c = sh[0], hw = sh[1] * sh[2];
        Tensor phi = transpose(reshape(a.norm(feat), {c, hw}));  // [hw, C]
        Tensor o = detail_nets::scaled_attention(phi, tokens, a.wq, a.wk, a.wv, a.wo, cfg_.d_n).out;
        return add(feat, reshape(transpose(o), {c, sh[1], sh[2]}));
    }

    UNetConfig cfg_;
    ParamStore ps_;
    detail_nets::Conv stem_, head_;
    detail_nets::Norm head_norm_;
    Res down1_, down2_, mid_, up2_, up1_;
    Attn attn8_, attn4_;
};

// ---------------------------------------------------------------------------
// Conditioning stack -> (3,h,h) tensor: building mask, tx one-hot, vehicle
// mask (zeros when the scene has none).

inline Tensor cond_to_tensor(const CondStack& cs) {
    int h = cs.h();
    size_t hw = (size_t)h * h;
    std::vector<double> v(3 * hw, 0.0);
    std::copy(cs.building.values().begin(), cs.building.values().end(), v.begin());
    std::copy(cs.tx.values().begin(), cs.tx.values().end(), v.begin() + (long)hw);
    if (cs.vehicle)
        std::copy(cs.vehicle->values().begin(), cs.vehicle->values().end(), v.begin() + (long)(2 * hw));
    return Tensor::constant({3, h, h}, v);
}

// ---------------------------------------------------------------------------
// Checkpoint container. Layout: magic "CKPT1", kind byte, config-hash string,
// flags byte (bit0 = training state present), parameter blob, then optionally
// step counter + optimizer blob + RNG state string.

struct TrainState {
    long step = 0;
    std::string optimizer;  // AdamW::serialize bytes
    std::string rng;        // Rng::serialize()
};

namespace detail_nets {

inline void write_str(std::ostream& os, const std::string& s) {
    detail::write_u64(os, (uint64_t)s.size());
    os.write(s.data(), (std::streamsize)s.size());
}

inline std::string read_str(std::istream& is, const char* what) {
    auto n = detail::read_pod<uint64_t>(is, what);
    if (n > (1ull << 32)) throw std::runtime_error(msg("checkpoint: implausible ", what, " length ", n));
    std::string s((size_t)n, '\0');
    if (n && !is.read(s.data(), (std::streamsize)n))
        throw std::runtime_error(msg("checkpoint: truncated while reading ", what));
    return s;
}

}  // namespace detail_nets

inline void save_checkpoint(const std::string& path, NetKind kind, const std::string& config_hash,
                            const ParamStore& ps, const TrainState* ts = nullptr) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error(msg("cannot write checkpoint ", path));
    os.write("CKPT1", 5);
    uint8_t k = (uint8_t)kind;
    os.write(reinterpret_cast<char*>(&k), 1);
    detail_nets::write_str(os, config_hash);
    uint8_t flags = ts ? 1 : 0;
    os.write(reinterpret_cast<char*>(&flags), 1);
    ps.save_blob(os);
    if (ts) {
        detail::write_u64(os, (uint64_t)ts->step);
        detail_nets::write_str(os, ts->optimizer);
        detail_nets::write_str(os, ts->rng);
    }
    if (!os) throw std::runtime_error(msg("short write on checkpoint ", path));
}

// Loads parameters into `ps` (names/shapes must match registration). Pass an
// empty expected hash to skip the compatibility check. Returns true when the
// file carried training state and `ts` was filled.
inline bool load_checkpoint(const std::string& path, NetKind kind, const std::string& expect_hash,
                            ParamStore& ps, TrainState* ts = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error(msg("cannot open checkpoint ", path));
    char magic[5];
    if (!is.read(magic, 5) || std::string(magic, 5) != "CKPT1")
        throw std::runtime_error(msg("not a CKPT1 file: ", path));
    auto k = detail::read_pod<uint8_t>(is, "kind");
    if (k != (uint8_t)kind)
        throw std::runtime_error(msg("checkpoint ", path, " holds a ", kind_name((NetKind)k),
                                     " network, expected ", kind_name(kind)));
    std::string hash = detail_nets::read_str(is, "config hash");
    if (!expect_hash.empty() && hash != expect_hash)
        throw std::runtime_error(msg("checkpoint ", path, " config hash ", hash,
                                     " does not match expected ", expect_hash));
    auto flags = detail::read_pod<uint8_t>(is, "flags");
    ps.load_blob(is);
    if ((flags & 1) && ts) {
        ts->step = (long)detail::read_pod<uint64_t>(is, "step");
        ts->optimizer = detail_nets::read_str(is, "optimizer state");
        ts->rng = detail_nets::read_str(is, "rng state");
        return true;
    }
    return false;
}

}  // namespace ckm
