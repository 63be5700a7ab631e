#pragma once

// Three-stage training protocol: (1) region segmenter, (2) gain-map VAE,
// (3) physics-regularized conditional latent diffusion, plus sampling and
// evaluation on top of the trained checkpoints. Every stage is bit-
// deterministic in (config, seed) and resumable from a state checkpoint.

#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ckm/common.hpp"
#include "ckm/config.hpp"
#include "ckm/data.hpp"
#include "ckm/diffusion.hpp"
#include "ckm/metrics.hpp"
#include "ckm/nets.hpp"
#include "ckm/optim.hpp"
#include "ckm/physics.hpp"
#include "ckm/rng.hpp"

namespace ckm {

enum class Stage { region, vae, diffusion };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::region: return "region";
        case Stage::vae: return "vae";
        default: return "diffusion";
    }
}

struct TrainConfig {
    Stage stage = Stage::region;
    int epochs = 30;     // stages 1-2 iterate epochs over the train split
    long steps = 20000;  // stage 3 counts optimizer updates directly
    double lr = 1e-4;
    int batch = 2;
    int grad_accum = 2;
    int T = 1000;
    int subseq_len_training = 2;    // I = 1
    bool ddim_fresh_noise = false;  // in-loop DDIM from fresh z_T instead of the step's z_t
    double kl_weight = 1e-6;
    PhysicsWeights physics;
    uint64_t seed = 1;
    std::string manifest;
    std::string ckpt_dir;
    std::string region_ckpt;  // stage-3 prerequisites
    std::string vae_ckpt;
    std::string resume;        // state checkpoint (stages 1-2) or run dir (stage 3)
    long checkpoint_every = 0;  // state-save cadence in updates; 0 = final only
    int val_max = 256;          // cap on validation samples per pass
    int h = 64;
    RegionNetConfig region_net;
    VaeConfig vae;
    CondEncConfig cond;
    UNetConfig unet;

    void validate() const {
        if (batch < 1 || grad_accum < 1)
            throw std::invalid_argument("train: batch and grad_accum must be >= 1");
        if (lr <= 0) throw std::invalid_argument("train: lr must be positive");
        if (subseq_len_training < 2)
            throw std::invalid_argument("train: training subsequence length must be >= 2");
        if (T < 2) throw std::invalid_argument("train: T must be >= 2");
        if (manifest.empty()) throw std::invalid_argument("train: no dataset manifest configured");
        if (ckpt_dir.empty()) throw std::invalid_argument("train: no checkpoint dir configured");
        if (stage == Stage::diffusion && (region_ckpt.empty() || vae_ckpt.empty()))
            throw std::invalid_argument(
                "train: stage 3 requires region and vae checkpoints (train.region_ckpt, train.vae_ckpt)");
        physics.validate();
    }

    static TrainConfig from_config(const KvConfig& cfg, Stage stage) {
        TrainConfig t;
        t.stage = stage;
        t.epochs = (int)cfg.get_int("train.epochs", 30);
        t.steps = cfg.get_int("train.steps", 20000);
        t.lr = cfg.get_f64("train.lr", 1e-4);
        t.batch = (int)cfg.get_int("train.batch", 2);
        t.grad_accum = (int)cfg.get_int("train.grad_accum", 2);
        t.T = (int)cfg.get_int("diffusion.T", 1000);
        t.subseq_len_training = (int)cfg.get_int("diffusion.subseq_len_training", 2);
        t.ddim_fresh_noise = cfg.get_bool("diffusion.fresh_noise", false);
        t.kl_weight = cfg.get_f64("vae.kl_weight", 1e-6);
        t.physics = PhysicsWeights::from_config(cfg);
        t.manifest = cfg.get_str("data.manifest", "");
        t.region_ckpt = cfg.get_str("train.region_ckpt", "");
        t.vae_ckpt = cfg.get_str("train.vae_ckpt", "");
        t.resume = cfg.get_str("train.resume", "");
        t.checkpoint_every = cfg.get_int("train.checkpoint_every", 0);
        t.val_max = (int)cfg.get_int("train.val_max", 256);
        t.h = (int)cfg.get_int("grid.h", 64);
        t.region_net = RegionNetConfig::from_config(cfg);
        t.vae = VaeConfig::from_config(cfg);
        t.cond = CondEncConfig::from_config(cfg);
        t.cond.h = t.h;
        t.unet = UNetConfig::from_config(cfg);
        t.unet.T = t.T;
        t.unet.zc = t.vae.zc;
        return t;
    }
};

// Hash over everything that defines network shapes and the diffusion horizon;
// checkpoints carry it so mismatched architectures are rejected at load time.
inline std::string model_hash(const TrainConfig& c) {
    std::ostringstream os;
    os << "cond.blocks=" << c.cond.blocks << "\ncond.d_i=" << c.cond.d_i
       << "\ncond.mlp_mult=" << c.cond.mlp_mult << "\ncond.patch=" << c.cond.patch
       << "\ncond.window=" << c.cond.window << "\ndiffusion.T=" << c.T << "\ngrid.h=" << c.h
       << "\nregion_net.classes=" << c.region_net.classes << "\nregion_net.w1=" << c.region_net.w1
       << "\nregion_net.w2=" << c.region_net.w2 << "\nregion_net.w3=" << c.region_net.w3
       << "\nunet.d_i=" << c.unet.d_i << "\nunet.d_n=" << c.unet.d_n << "\nunet.w1=" << c.unet.w1
       << "\nunet.w2=" << c.unet.w2 << "\nunet.w3=" << c.unet.w3 << "\nvae.w1=" << c.vae.w1
       << "\nvae.w2=" << c.vae.w2 << "\nvae.zc=" << c.vae.zc << "\n";
    return hex64(fnv1a(os.str()));
}

namespace detail_train {

inline int log_level() {
    static int lv = [] {
        const char* e = std::getenv("CKM_LOG");
        return e ? std::atoi(e) : 0;
    }();
    return lv;
}

template <typename... A>
void logln(int lvl, A&&... a) {
    if (log_level() >= lvl) std::cerr << "[ckm] " << msg(std::forward<A>(a)...) << std::endl;
}

inline std::vector<Sample> load_split(const Manifest& m, const std::string& split,
                                      bool with_region) {
    std::vector<Sample> out;
    for (const ManifestEntry* e : m.split(split)) out.push_back(load_sample(m, *e, with_region));
    return out;
}

inline std::vector<size_t> epoch_shuffle(size_t n, uint64_t seed, long epoch, uint64_t tag) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    Rng r(derive_seed(seed, tag, (uint64_t)epoch));
    for (size_t i = n - 1; i > 0; --i) {
        size_t j = (size_t)r.uniform_int(0, (int)i);
        std::swap(idx[i], idx[j]);
    }
    return idx;
}

inline Tensor gain_tensor(const GridMap& g) {
    return Tensor::constant({1, g.h(), g.h()}, g.values());
}

// Per-cell cross-entropy against the oracle class map.
inline Tensor cross_entropy_region(const Tensor& logits, const GridMap& region) {
    int classes = logits.shape()[0], h = logits.shape()[1];
    std::vector<double> mask((size_t)classes * h * h, 0.0);
    for (int i = 0; i < h * h; ++i) {
        int c = (int)region.values()[(size_t)i];
        mask[(size_t)c * h * h + i] = 1.0;
    }
    Tensor onehot = Tensor::constant(logits.shape(), std::move(mask));
    Tensor logp = ::ckm::log(softmax(logits, 0));
    return mul_scalar(sum(mul(logp, onehot)), -1.0 / ((double)h * h));
}

inline double pixel_accuracy(const Tensor& logits, const GridMap& region) {
    int classes = logits.shape()[0], h = logits.shape()[1];
    int hit = 0;
    for (int i = 0; i < h * h; ++i) {
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (logits.value()[(size_t)c * h * h + i] > logits.value()[(size_t)best * h * h + i])
                best = c;
        if (best == (int)region.values()[(size_t)i]) ++hit;
    }
    return (double)hit / (h * h);
}

struct CsvLog {
    std::ofstream f;

    CsvLog(const std::string& path, const std::string& header, bool append) {
        f.open(path, append ? std::ios::app : std::ios::out);
        if (!f) throw std::runtime_error(msg("cannot open training log ", path));
        f.precision(17);
        if (!append) f << header << "\n";
    }
};

inline std::string opt_state(const AdamW& opt) {
    std::ostringstream os;
    opt.serialize(os);
    return os.str();
}

inline void opt_restore(AdamW& opt, const std::string& blob, const ParamStore& ps) {
    std::istringstream is(blob);
    opt.deserialize(is, ps);
}

}  // namespace detail_train

struct TrainResult {
    std::string ckpt;       // final parameter checkpoint
    std::string cond_ckpt;  // stage 3 only: the condition encoder's
    long steps = 0;
    double val_metric = 0.0;  // stage 1: pixel accuracy; 2: recon RMSE; 3: smoothed total loss
    std::string log_csv;
};

// ---------------------------------------------------------------------------
// Stage 1: region segmenter on oracle labels.

inline TrainResult train_region(const TrainConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(cfg.ckpt_dir);
    Manifest m = load_manifest(cfg.manifest);
    std::vector<Sample> train = detail_train::load_split(m, "train", true);
    std::vector<Sample> val = detail_train::load_split(m, "val", true);
    if (train.empty()) throw std::runtime_error("train_region: empty train split");
    for (const auto& s : train)
        if (!s.region) throw std::runtime_error("train_region: dataset lacks region labels");

    std::string hash = model_hash(cfg);
    RegionUNet net(cfg.region_net);
    Rng init_rng(derive_seed(cfg.seed, 0x5247, 0));
    net.init(init_rng);
    AdamW opt(cfg.lr);

    long step = 0;
    if (!cfg.resume.empty()) {
        TrainState ts;
        if (!load_checkpoint(cfg.resume, NetKind::region, hash, net.params(), &ts))
            throw std::runtime_error(msg("train_region: ", cfg.resume, " has no training state"));
        detail_train::opt_restore(opt, ts.optimizer, net.params());
        step = ts.step;
    }

    long per_epoch = std::max<long>(1, (long)train.size() / cfg.batch);
    long total = (long)cfg.epochs * per_epoch;
    std::string csv_path = cfg.ckpt_dir + "/train_log.csv";
    detail_train::CsvLog log(csv_path, "step,loss", step > 0);

    long cached_epoch = -1;
    std::vector<size_t> order;
    for (long u = step; u < total; ++u) {
        long epoch = u / per_epoch, pos = u % per_epoch;
        if (epoch != cached_epoch) {
            order = detail_train::epoch_shuffle(train.size(), cfg.seed, epoch, 0x5248);
            cached_epoch = epoch;
        }
        Tensor acc = Tensor::scalar(0.0);
        for (int b = 0; b < cfg.batch; ++b) {
            const Sample& s = train[order[(size_t)(pos * cfg.batch + b) % train.size()]];
            Tensor logits = net.forward(detail_train::gain_tensor(s.gain));
            acc = add(acc, detail_train::cross_entropy_region(logits, *s.region));
        }
        Tensor loss = mul_scalar(acc, 1.0 / cfg.batch);
        double lv = loss.item();
        if (!std::isfinite(lv)) throw std::runtime_error(msg("train_region: loss diverged at step ", u + 1));
        backward(loss);
        opt.step(net.params());
        net.params().zero_grad();
        log.f << (u + 1) << "," << lv << "\n";
        if (cfg.checkpoint_every > 0 && (u + 1) % cfg.checkpoint_every == 0 && u + 1 < total) {
            TrainState ts{u + 1, detail_train::opt_state(opt), ""};
            save_checkpoint(cfg.ckpt_dir + "/state_region.ckpt", NetKind::region, hash, net.params(), &ts);
        }
        detail_train::logln(2, "region step ", u + 1, "/", total, " loss ", lv);
        if (epoch != (u + 1) / per_epoch) detail_train::logln(1, "region epoch ", epoch + 1, " done");
    }

    double acc_sum = 0.0;
    size_t nval = std::min<size_t>(val.size(), (size_t)cfg.val_max);
    for (size_t i = 0; i < nval; ++i) {
        Tensor logits = net.forward(detail_train::gain_tensor(val[i].gain));
        acc_sum += detail_train::pixel_accuracy(logits, *val[i].region);
    }
    TrainResult res;
    res.val_metric = nval ? acc_sum / (double)nval : 0.0;
    res.steps = total;
    res.ckpt = cfg.ckpt_dir + "/region.ckpt";
    res.log_csv = csv_path;
    save_checkpoint(res.ckpt, NetKind::region, hash, net.params());
    TrainState ts{total, detail_train::opt_state(opt), ""};
    save_checkpoint(cfg.ckpt_dir + "/state_region.ckpt", NetKind::region, hash, net.params(), &ts);
    detail_train::logln(1, "region training done, val pixel accuracy ", res.val_metric);
    return res;
}

// ---------------------------------------------------------------------------
// Stage 2: VAE on gain maps.

inline TrainResult train_vae(const TrainConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(cfg.ckpt_dir);
    Manifest m = load_manifest(cfg.manifest);
    std::vector<Sample> train = detail_train::load_split(m, "train", false);
    std::vector<Sample> val = detail_train::load_split(m, "val", false);
    if (train.empty()) throw std::runtime_error("train_vae: empty train split");

    std::string hash = model_hash(cfg);
    Vae net(cfg.vae);
    Rng init_rng(derive_seed(cfg.seed, 0x5641, 0));
    net.init(init_rng);
    Rng flow(derive_seed(cfg.seed, 0x5641, 1));  // reparameterization noise
    AdamW opt(cfg.lr);

    long step = 0;
    if (!cfg.resume.empty()) {
        TrainState ts;
        if (!load_checkpoint(cfg.resume, NetKind::vae, hash, net.params(), &ts))
            throw std::runtime_error(msg("train_vae: ", cfg.resume, " has no training state"));
        detail_train::opt_restore(opt, ts.optimizer, net.params());
        flow = Rng::deserialize(ts.rng);
        step = ts.step;
    }

    long per_epoch = std::max<long>(1, (long)train.size() / cfg.batch);
    long total = (long)cfg.epochs * per_epoch;
    std::string csv_path = cfg.ckpt_dir + "/train_log.csv";
    detail_train::CsvLog log(csv_path, "step,recon,kl,loss", step > 0);

    long cached_epoch = -1;
    std::vector<size_t> order;
    std::vector<int> zshape = {cfg.vae.zc, cfg.h / 4, cfg.h / 4};
    for (long u = step; u < total; ++u) {
        long epoch = u / per_epoch, pos = u % per_epoch;
        if (epoch != cached_epoch) {
            order = detail_train::epoch_shuffle(train.size(), cfg.seed, epoch, 0x5642);
            cached_epoch = epoch;
        }
        Tensor racc = Tensor::scalar(0.0), kacc = Tensor::scalar(0.0);
        for (int b = 0; b < cfg.batch; ++b) {
            const Sample& s = train[order[(size_t)(pos * cfg.batch + b) % train.size()]];
            Tensor x0 = detail_train::gain_tensor(s.gain);
            Tensor eps = randn(flow, zshape);
            VaeOut out = net.encode(x0, &eps);
            racc = add(racc, mse_mean(net.decode(out.z), x0));
            kacc = add(kacc, kl_divergence(out.mu, out.logvar));
        }
        Tensor recon = mul_scalar(racc, 1.0 / cfg.batch);
        Tensor kl = mul_scalar(kacc, 1.0 / cfg.batch);
        Tensor loss = add(recon, mul_scalar(kl, cfg.kl_weight));
        double lv = loss.item();
        if (!std::isfinite(lv)) throw std::runtime_error(msg("train_vae: loss diverged at step ", u + 1));
        backward(loss);
        opt.step(net.params());
        net.params().zero_grad();
        log.f << (u + 1) << "," << recon.item() << "," << kl.item() << "," << lv << "\n";
        if (cfg.checkpoint_every > 0 && (u + 1) % cfg.checkpoint_every == 0 && u + 1 < total) {
            TrainState ts{u + 1, detail_train::opt_state(opt), flow.serialize()};
            save_checkpoint(cfg.ckpt_dir + "/state_vae.ckpt", NetKind::vae, hash, net.params(), &ts);
        }
        detail_train::logln(2, "vae step ", u + 1, "/", total, " loss ", lv);
    }

    double se = 0.0;
    size_t nval = std::min<size_t>(val.size(), (size_t)cfg.val_max);
    for (size_t i = 0; i < nval; ++i) {
        Tensor x0 = detail_train::gain_tensor(val[i].gain);
        se += mse_mean(net.decode(net.encode(x0).z), x0).item();
    }
    TrainResult res;
    res.val_metric = nval ? std::sqrt(se / (double)nval) : 0.0;
    res.steps = total;
    res.ckpt = cfg.ckpt_dir + "/vae.ckpt";
    res.log_csv = csv_path;
    save_checkpoint(res.ckpt, NetKind::vae, hash, net.params());
    TrainState ts{total, detail_train::opt_state(opt), flow.serialize()};
    save_checkpoint(cfg.ckpt_dir + "/state_vae.ckpt", NetKind::vae, hash, net.params(), &ts);
    detail_train::logln(1, "vae training done, val recon rmse ", res.val_metric);
    return res;
}

// ---------------------------------------------------------------------------
// Stage 3: conditional latent diffusion with the physics-inspired losses.
// Region net and VAE are loaded frozen; the condition encoder and the
// denoising UNet train jointly. Per micro-sample the step draws (index, t,
// noise) from one flowing stream, so lambda settings do not perturb the data
// path and runs with different lambdas stay sample-aligned.

inline TrainResult train_diffusion(const TrainConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(cfg.ckpt_dir);
    Manifest m = load_manifest(cfg.manifest);
    std::vector<Sample> train = detail_train::load_split(m, "train", false);
    if (train.empty()) throw std::runtime_error("train_diffusion: empty train split");

    std::string hash = model_hash(cfg);
    RegionUNet region(cfg.region_net);
    load_checkpoint(cfg.region_ckpt, NetKind::region, hash, region.params());
    Vae vae(cfg.vae);
    load_checkpoint(cfg.vae_ckpt, NetKind::vae, hash, vae.params());
    CondEncoder cond(cfg.cond);
    DiffusionUNet unet(cfg.unet);
    Rng rc(derive_seed(cfg.seed, 0x4446, 0)), ru(derive_seed(cfg.seed, 0x4446, 1));
    cond.init(rc);
    unet.init(ru);
    AdamW opt_u(cfg.lr), opt_c(cfg.lr);
    Rng flow(derive_seed(cfg.seed, 0x4446, 2));

    long step = 0;
    if (!cfg.resume.empty()) {
        TrainState tu, tc;
        if (!load_checkpoint(cfg.resume + "/state_unet.ckpt", NetKind::unet, hash, unet.params(), &tu) ||
            !load_checkpoint(cfg.resume + "/state_cond.ckpt", NetKind::cond, hash, cond.params(), &tc))
            throw std::runtime_error(msg("train_diffusion: ", cfg.resume, " lacks training state"));
        detail_train::opt_restore(opt_u, tu.optimizer, unet.params());
        detail_train::opt_restore(opt_c, tc.optimizer, cond.params());
        flow = Rng::deserialize(tu.rng);
        step = tu.step;
    }

    NoiseSchedule sched = cosine_schedule(cfg.T);
    RegionFn region_fn = [&region](const Tensor& x) { return region.forward(x); };
    DenoiseFn net_fn = [&unet](const Tensor& z, int t, const Tensor& tok) {
        return unet.forward(z, t, tok);
    };
    const bool any_phys =
        cfg.physics.lambda_edge > 0 || cfg.physics.lambda_region > 0 || cfg.physics.lambda_mulfea > 0;

    std::string csv_path = cfg.ckpt_dir + "/train_log.csv";
    detail_train::CsvLog log(csv_path, "step,l_z0,l_edge,l_region,l_mulfea,l_total", step > 0);

    auto save_state = [&](long at) {
        TrainState tu{at, detail_train::opt_state(opt_u), flow.serialize()};
        save_checkpoint(cfg.ckpt_dir + "/state_unet.ckpt", NetKind::unet, hash, unet.params(), &tu);
        TrainState tc{at, detail_train::opt_state(opt_c), ""};
        save_checkpoint(cfg.ckpt_dir + "/state_cond.ckpt", NetKind::cond, hash, cond.params(), &tc);
    };

    std::deque<double> tail;  // smoothed total over the last 100 steps
    for (long u = step; u < cfg.steps; ++u) {
        double s_z0 = 0, s_edge = 0, s_region = 0, s_mulfea = 0, s_total = 0;
        for (int a = 0; a < cfg.grad_accum; ++a) {
            Batch z0s, preds, x0s, xhats;
            for (int b = 0; b < cfg.batch; ++b) {
                const Sample& s = train[(size_t)flow.uniform_int(0, (int)train.size() - 1)];
                Tensor x0 = detail_train::gain_tensor(s.gain);
                Tensor tokens = cond.forward(cond_to_tensor(s.cond));
                Tensor z0 = detach(vae.encode(x0).z);
                int t = flow.uniform_int(1, cfg.T);
                Tensor eps = randn(flow, z0.shape());
                Tensor z_t = forward_noise(z0, t, eps, sched);
                Tensor pred = unet.forward(z_t, t, tokens);
                z0s.push_back(z0);
                preds.push_back(pred);
                if (any_phys) {
                    Tensor zhat0;
                    if (cfg.ddim_fresh_noise) {
                        Tensor zT = randn(flow, z0.shape());
                        SubSequence sub = SubSequence::uniform(cfg.T, cfg.subseq_len_training);
                        zhat0 = ddim_sample(zT, sub, net_fn, tokens, sched);
                    } else if (t > 1) {
                        // DDIM over {1, t}, reusing this step's prediction as
                        // the first sampler evaluation.
                        Tensor eps_t = x0_to_eps(z_t, pred, t, sched);
                        Tensor z_1 = forward_noise(pred, 1, eps_t, sched);
                        zhat0 = unet.forward(z_1, 1, tokens);
                    } else {
                        zhat0 = pred;
                    }
                    x0s.push_back(x0);
                    xhats.push_back(vae.decode(zhat0));
                }
            }
            LossBreakdown lb = total_loss(z0s, preds, x0s, xhats, region_fn, cfg.physics);
            double tv = lb.total.item();
            if (!std::isfinite(tv))
                throw std::runtime_error(msg("train_diffusion: loss diverged at step ", u + 1));
            backward(mul_scalar(lb.total, 1.0 / cfg.grad_accum));
            s_z0 += lb.l_z0.item();
            s_edge += lb.l_edge.item();
            s_region += lb.l_region.item();
            s_mulfea += lb.l_mulfea.item();
            s_total += tv;
        }
        opt_u.step(unet.params());
        opt_c.step(cond.params());
        unet.params().zero_grad();
        cond.params().zero_grad();
        vae.params().zero_grad();
        region.params().zero_grad();
        double inv = 1.0 / cfg.grad_accum;
        log.f << (u + 1) << "," << s_z0 * inv << "," << s_edge * inv << "," << s_region * inv << ","
              << s_mulfea * inv << "," << s_total * inv << "\n";
        tail.push_back(s_total * inv);
        if (tail.size() > 100) tail.pop_front();
        if (cfg.checkpoint_every > 0 && (u + 1) % cfg.checkpoint_every == 0 && u + 1 < cfg.steps)
            save_state(u + 1);
        detail_train::logln(2, "diffusion step ", u + 1, "/", cfg.steps, " total ", s_total * inv);
    }

    TrainResult res;
    res.steps = cfg.steps;
    res.val_metric = tail.empty() ? 0.0 : std::accumulate(tail.begin(), tail.end(), 0.0) / tail.size();
    res.ckpt = cfg.ckpt_dir + "/unet.ckpt";
    res.cond_ckpt = cfg.ckpt_dir + "/cond.ckpt";
    res.log_csv = csv_path;
    save_checkpoint(res.ckpt, NetKind::unet, hash, unet.params());
    save_checkpoint(res.cond_ckpt, NetKind::cond, hash, cond.params());
    save_state(cfg.steps);
    detail_train::logln(1, "diffusion training done, smoothed total ", res.val_metric);
    return res;
}

// ---------------------------------------------------------------------------
// Generation: z_T ~ N(0,I) -> DDIM over a uniform subsequence -> decode.

struct SampleCkpts {
    std::string vae, cond, unet;
};

inline GridMap sample_cgm(const CondStack& cond_stack, const SampleCkpts& ck, const TrainConfig& cfg,
                          int subseq_len, uint64_t seed) {
    if (cond_stack.h() != cfg.h)
        throw std::invalid_argument(msg("sample_cgm: condition grid h=", cond_stack.h(),
                                        " does not match configured h=", cfg.h));
    std::string hash = model_hash(cfg);
    Vae vae(cfg.vae);
    load_checkpoint(ck.vae, NetKind::vae, hash, vae.params());
    CondEncoder cond(cfg.cond);
    load_checkpoint(ck.cond, NetKind::cond, hash, cond.params());
    DiffusionUNet unet(cfg.unet);
    load_checkpoint(ck.unet, NetKind::unet, hash, unet.params());

    NoiseSchedule sched = cosine_schedule(cfg.T);
    SubSequence sub = SubSequence::uniform(cfg.T, subseq_len);
    Rng rng(derive_seed(seed, 0x534D, 0));
    Tensor z_T = randn(rng, {cfg.vae.zc, cfg.h / 4, cfg.h / 4});
    Tensor tokens = cond.forward(cond_to_tensor(cond_stack));
    DenoiseFn fn = [&unet](const Tensor& z, int t, const Tensor& tok) {
        return unet.forward(z, t, tok);
    };
    Tensor z0 = ddim_sample(z_T, sub, fn, tokens, sched);
    Tensor x = vae.decode(z0);
    return GridMap(cfg.h, Role::gain, x.value());
}

// Samples one CGM per condition in the manifest split and aggregates metrics.
// Per-sample seeds derive from (seed, entry id), so reports are reproducible
// and insensitive to evaluation order.
inline EvalReport evaluate(const std::string& manifest_path, const SampleCkpts& ck,
                           const TrainConfig& cfg, uint64_t seed, const std::string& out_dir,
                           int subseq_len = 5, int pgm_dumps = 4, const std::string& split = "test") {
    Manifest m = load_manifest(manifest_path);
    auto entries = m.split(split);
    if (entries.empty()) throw std::runtime_error(msg("evaluate: no '", split, "' entries in manifest"));
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
    std::vector<EvalPair> pairs;
    std::vector<int> ids;
    for (size_t i = 0; i < entries.size(); ++i) {
        Sample s = load_sample(m, *entries[i], false);
        GridMap pred =
            sample_cgm(s.cond, ck, cfg, subseq_len, derive_seed(seed, 0x4556, (uint64_t)entries[i]->id));
        if (!out_dir.empty() && (int)i < pgm_dumps)
            write_side_by_side_pgm(s.gain, pred,
                                   out_dir + "/pair_" + std::to_string(entries[i]->id) + ".pgm");
        ids.push_back(entries[i]->id);
        pairs.push_back({std::move(s.gain), std::move(pred)});
        detail_train::logln(2, "evaluated sample ", entries[i]->id, " (", i + 1, "/", entries.size(), ")");
    }
    EvalReport rep = make_report(pairs, ids, model_hash(cfg));
    if (!out_dir.empty()) {
        write_report_csv(rep, out_dir + "/eval.csv");
        std::ofstream sf(out_dir + "/summary.txt");
        sf << report_summary(rep);
        if (!sf) throw std::runtime_error("evaluate: cannot write summary");
    }
    return rep;
}

}  // namespace ckm
