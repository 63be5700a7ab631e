#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "ckm/nets.hpp"
#include "ckm/rng.hpp"
#include "test_util.hpp"

using namespace ckm;

namespace {

Tensor randt(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
    size_t n = 1;
    for (int d : shape) n *= (size_t)d;
    Rng rng(derive_seed(9100, seed));
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return Tensor::constant(std::move(shape), std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.value()[i] - b.value()[i]));
    return m;
}

// Finite-difference check of every registered parameter against the grads of
// one backward pass. Probes a handful of cells per tensor; also asserts that
// every parameter received a gradient at all (full connectivity).
template <typename MakeLoss>
void check_param_grads(ParamStore& ps, MakeLoss make_loss, double hstep = 1e-5, double tol = 1e-4,
                       int max_probe = 3) {
    Tensor loss = make_loss();
    backward(loss);
    struct Rec {
        std::string name;
        Tensor t;
        std::vector<double> g;
    };
    std::vector<Rec> recs;
    for (const auto& it : ps.items()) {
        Tensor t = it.second;
        ASSERT_TRUE(t.has_grad()) << "no gradient reached " << it.first;
        recs.push_back({it.first, t, t.grad()});
    }
    ps.zero_grad();
    uint64_t ctr = 0x5eed;
    for (auto& r : recs) {
        size_t n = r.t.numel();
        size_t probes = std::min<size_t>((size_t)max_probe, n);
        for (size_t p = 0; p < probes; ++p) {
            size_t i = n <= (size_t)max_probe ? p : splitmix64(ctr++) % n;
            std::vector<double> v = r.t.value();
            double orig = v[i];
            v[i] = orig + hstep;
            r.t.set_value(v);
            double lp = make_loss().item();
            v[i] = orig - hstep;
            r.t.set_value(v);
            double lm = make_loss().item();
            v[i] = orig;
            r.t.set_value(v);
            double fd = (lp - lm) / (2.0 * hstep);
            double denom = std::max({1.0, std::abs(fd), std::abs(r.g[i])});
            EXPECT_LE(std::abs(fd - r.g[i]) / denom, tol) << r.name << "[" << i << "]";
        }
    }
}

CondStack make_cond(int h, int tx_r, int tx_c, bool with_vehicle, uint64_t seed) {
    Rng rng(derive_seed(9200, seed));
    std::vector<double> b((size_t)h * h, 0.0);
    for (auto& v : b) v = rng.uniform() < 0.2 ? 1.0 : 0.0;
    b[(size_t)tx_r * h + tx_c] = 0.0;
    std::vector<double> t((size_t)h * h, 0.0);
    t[(size_t)tx_r * h + tx_c] = 1.0;
    std::optional<GridMap> veh;
    if (with_vehicle) {
        std::vector<double> vv((size_t)h * h, 0.0);
        for (size_t i = 0; i < vv.size(); ++i)
            if (b[i] == 0.0 && t[i] == 0.0 && rng.uniform() < 0.05) vv[i] = 1.0;
        veh = GridMap(h, Role::vehicle, vv);
    }
    return CondStack(GridMap(h, Role::building, b), GridMap(h, Role::tx, t), veh);
}

}  // namespace

TEST(Attention, RowsAreStochasticAndZeroTokensGiveZeroOutput) {
    int nq = 6, nkv = 5, d = 8, dn = 8;
    Tensor q_rows = randt({nq, d}, 1);
    Tensor kv = randt({nkv, d}, 2);
    Tensor wq = randt({d, dn}, 3, 0.5), wk = randt({d, dn}, 4, 0.5);
    Tensor wv = randt({d, dn}, 5, 0.5), wo = randt({dn, d}, 6, 0.5);
    auto res = detail_nets::scaled_attention(q_rows, kv, wq, wk, wv, wo, dn);
    ASSERT_EQ(res.a.shape(), (std::vector<int>{nq, nkv}));
    ASSERT_EQ(res.out.shape(), (std::vector<int>{nq, d}));
    for (int r = 0; r < nq; ++r) {
        double s = 0.0;
        for (int c = 0; c < nkv; ++c) s += res.a.value()[(size_t)r * nkv + c];
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // All-zero keys/values: scores collapse to a uniform row over zero values.
    Tensor kv0 = Tensor::constant({nkv, d}, std::vector<double>((size_t)nkv * d, 0.0));
    auto res0 = detail_nets::scaled_attention(q_rows, kv0, wq, wk, wv, wo, dn);
    for (int c = 0; c < nkv; ++c) EXPECT_DOUBLE_EQ(res0.a.value()[c], 1.0 / nkv);
    for (size_t i = 0; i < res0.out.numel(); ++i) EXPECT_DOUBLE_EQ(res0.out.value()[i], 0.0);
}

TEST(TimeEmbedding, MatchesClosedFormAndSeparatesSteps) {
    Tensor e = detail_nets::time_embedding(7, 64);
    ASSERT_EQ(e.shape(), (std::vector<int>{1, 64}));
    EXPECT_NEAR(e.value()[0], std::sin(7.0), 1e-15);
    EXPECT_NEAR(e.value()[32], std::cos(7.0), 1e-15);
    for (double v : e.value()) EXPECT_LE(std::abs(v), 1.0);
    Tensor e2 = detail_nets::time_embedding(8, 64);
    EXPECT_GT(max_abs_diff(e, e2), 1e-3);
}

TEST(KlDivergence, StandardNormalIsZeroAndValuesMatch) {
    Tensor mu = Tensor::constant({2, 2}, {0, 0, 0, 0});
    Tensor lv = Tensor::constant({2, 2}, {0, 0, 0, 0});
    EXPECT_DOUBLE_EQ(kl_divergence(mu, lv).item(), 0.0);
    Tensor mu2 = Tensor::constant({1, 1}, {0.7});
    Tensor lv2 = Tensor::constant({1, 1}, {-0.4});
    double want = 0.5 * (0.49 + std::exp(-0.4) - 1.0 + 0.4);
    EXPECT_NEAR(kl_divergence(mu2, lv2).item(), want, 1e-12);
}

TEST(CondToTensor, StacksBuildingTxVehiclePlanes) {
    CondStack cs = make_cond(8, 2, 3, true, 1);
    Tensor t = cond_to_tensor(cs);
    ASSERT_EQ(t.shape(), (std::vector<int>{3, 8, 8}));
    for (int i = 0; i < 64; ++i) {
        EXPECT_DOUBLE_EQ(t.value()[(size_t)i], cs.building.values()[(size_t)i]);
        EXPECT_DOUBLE_EQ(t.value()[64 + (size_t)i], cs.tx.values()[(size_t)i]);
        EXPECT_DOUBLE_EQ(t.value()[128 + (size_t)i], cs.vehicle->values()[(size_t)i]);
    }
    CondStack cs2 = make_cond(8, 2, 3, false, 2);
    Tensor t2 = cond_to_tensor(cs2);
    for (int i = 0; i < 64; ++i) EXPECT_DOUBLE_EQ(t2.value()[128 + (size_t)i], 0.0);
}

TEST(RegionNet, ShapesTraceAndDeterminism) {
    RegionUNet net;
    Rng rng(11);
    net.init(rng);
    trace::reset();
    Tensor x = randt({1, 64, 64}, 10, 0.3);
    Tensor y = net.forward(x);
    EXPECT_EQ(trace::region_forward_calls(), 1);
    ASSERT_EQ(y.shape(), (std::vector<int>{4, 64, 64}));
    Tensor y2 = net.forward(x);
    EXPECT_EQ(max_abs_diff(y, y2), 0.0);
    EXPECT_EQ(trace::region_forward_calls(), 2);
    EXPECT_THROW(net.forward(randt({2, 64, 64}, 11)), std::invalid_argument);
    EXPECT_THROW(net.forward(randt({1, 6, 6}, 12)), std::invalid_argument);
}

TEST(RegionNet, SeededInitReproducesAndGradsCheckOut) {
    RegionUNet a, b;
    Rng r1(7), r2(7), r3(8);
    a.init(r1);
    b.init(r2);
    Tensor x = randt({1, 16, 16}, 20, 0.3);
    EXPECT_EQ(max_abs_diff(a.forward(x), b.forward(x)), 0.0);
    b.init(r3);
    EXPECT_GT(max_abs_diff(a.forward(x), b.forward(x)), 1e-6);

    Tensor target = randt({4, 16, 16}, 21);
    check_param_grads(a.params(), [&] { return mse_mean(a.forward(x), target); });
}

TEST(Vae, LatentGeometryAndOutputRange) {
    Vae vae;
    Rng rng(12);
    vae.init(rng);
    Tensor x = randt({1, 64, 64}, 30, 0.2);
    VaeOut out = vae.encode(x);
    ASSERT_EQ(out.mu.shape(), (std::vector<int>{3, 16, 16}));
    ASSERT_EQ(out.logvar.shape(), (std::vector<int>{3, 16, 16}));
    ASSERT_EQ(out.z.shape(), (std::vector<int>{3, 16, 16}));
    EXPECT_EQ(max_abs_diff(out.z, out.mu), 0.0);  // deterministic mode
    Tensor xhat = vae.decode(out.z);
    ASSERT_EQ(xhat.shape(), (std::vector<int>{1, 64, 64}));
    for (double v : xhat.value()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    EXPECT_THROW(vae.encode(randt({1, 10, 10}, 31)), std::invalid_argument);
    EXPECT_THROW(vae.decode(randt({1, 16, 16}, 32)), std::invalid_argument);
}

TEST(Vae, ReparameterizationAndCollapsedVarianceLimit) {
    Vae vae;
    Rng rng(13);
    vae.init(rng);
    Tensor x = randt({1, 16, 16}, 40, 0.2);
    Tensor eps = randt({3, 4, 4}, 41);
    VaeOut out = vae.encode(x, &eps);
    // z = mu + exp(logvar/2) * eps, cell by cell.
    for (size_t i = 0; i < out.z.numel(); ++i) {
        double want = out.mu.value()[i] + std::exp(0.5 * out.logvar.value()[i]) * eps.value()[i];
        EXPECT_NEAR(out.z.value()[i], want, 1e-12);
    }
    Tensor bad_eps = randt({3, 8, 8}, 42);
    EXPECT_THROW(vae.encode(x, &bad_eps), std::invalid_argument);

    // Drive the logvar head to -inf; the clamp pins it at -30 and the sample
    // collapses onto the mean.
    Tensor lw = vae.params().get("logvar.w");
    lw.set_value(std::vector<double>(lw.numel(), 0.0));
    Tensor lb = vae.params().get("logvar.b");
    lb.set_value(std::vector<double>(lb.numel(), -1e9));
    VaeOut pinned = vae.encode(x, &eps);
    for (double v : pinned.logvar.value()) EXPECT_DOUBLE_EQ(v, -30.0);
    double eps_max = 0.0;
    for (double v : eps.value()) eps_max = std::max(eps_max, std::abs(v));
    EXPECT_LE(max_abs_diff(pinned.z, pinned.mu), 1.01 * std::exp(-15.0) * eps_max);
}

TEST(Vae, GradsCheckOutThroughReconAndKl) {
    Vae vae;
    Rng rng(14);
    vae.init(rng);
    Tensor x = randt({1, 16, 16}, 50, 0.2);
    Tensor eps = randt({3, 4, 4}, 51);
    check_param_grads(vae.params(), [&] {
        VaeOut out = vae.encode(x, &eps);
        Tensor recon = mse_mean(vae.decode(out.z), x);
        return add(recon, mul_scalar(kl_divergence(out.mu, out.logvar), 0.1));
    });
}

TEST(CondEncoder, TokenGeometryAndTxSensitivity) {
    CondEncoder enc;  // h=64, patch 8 -> 64 tokens of width 64
    Rng rng(15);
    enc.init(rng);
    EXPECT_EQ(enc.tokens(), 64);
    CondStack cs = make_cond(64, 10, 20, true, 3);
    Tensor tok = enc.forward(cond_to_tensor(cs));
    ASSERT_EQ(tok.shape(), (std::vector<int>{64, 64}));
    Tensor tok2 = enc.forward(cond_to_tensor(cs));
    EXPECT_EQ(max_abs_diff(tok, tok2), 0.0);

    // Moving the transmitter must change the token field - both for a move
    // across patches and for one inside a single 8x8 patch.
    CondStack far = CondStack(cs.building, GridMap(64, Role::tx, [&] {
                                  std::vector<double> t((size_t)64 * 64, 0.0);
                                  t[(size_t)40 * 64 + 50] = 1.0;
                                  return t;
                              }()),
                              cs.vehicle);
    EXPECT_GT(max_abs_diff(tok, enc.forward(cond_to_tensor(far))), 0.0);
    CondStack near = CondStack(cs.building, GridMap(64, Role::tx, [&] {
                                   std::vector<double> t((size_t)64 * 64, 0.0);
                                   t[(size_t)10 * 64 + 21] = 1.0;
                                   return t;
                               }()),
                               cs.vehicle);
    EXPECT_GT(max_abs_diff(tok, enc.forward(cond_to_tensor(near))), 0.0);

    EXPECT_THROW(enc.forward(randt({3, 32, 32}, 60)), std::invalid_argument);
    EXPECT_THROW(enc.forward(randt({2, 64, 64}, 61)), std::invalid_argument);
}

TEST(CondEncoder, GradsCheckOutOnTinyGrid) {
    CondEncConfig cfg;
    cfg.h = 16;  // 2x2 token grid, window shrinks to fit
    CondEncoder enc(cfg);
    Rng rng(16);
    enc.init(rng);
    Tensor cond = randt({3, 16, 16}, 70, 0.5);
    Tensor target = randt({4, 64}, 71);
    check_param_grads(enc.params(), [&] { return mse_mean(enc.forward(cond), target); });
}

TEST(DiffusionUNet, ShapeTimeAndTokenValidation) {
    DiffusionUNet net;
    Rng rng(17);
    net.init(rng);
    Tensor z = randt({3, 16, 16}, 80);
    Tensor tok = randt({64, 64}, 81, 0.3);
    Tensor out = net.forward(z, 500, tok);
    ASSERT_EQ(out.shape(), (std::vector<int>{3, 16, 16}));
    EXPECT_EQ(max_abs_diff(out, net.forward(z, 500, tok)), 0.0);
    // Different t reaches the features through the per-block time MLPs.
    EXPECT_GT(max_abs_diff(out, net.forward(z, 501, tok)), 0.0);
    // All-zero tokens are legal: attention contributes exactly nothing.
    Tensor tok0 = Tensor::constant({64, 64}, std::vector<double>((size_t)64 * 64, 0.0));
    Tensor out0 = net.forward(z, 500, tok0);
    for (double v : out0.value()) EXPECT_TRUE(std::isfinite(v));

    EXPECT_THROW(net.forward(z, 0, tok), std::invalid_argument);
    EXPECT_THROW(net.forward(z, 1001, tok), std::invalid_argument);
    EXPECT_THROW(net.forward(randt({3, 6, 6}, 82), 5, tok), std::invalid_argument);
    EXPECT_THROW(net.forward(z, 5, randt({64, 32}, 83)), std::invalid_argument);
}

TEST(DiffusionUNet, ZeroTokenAttentionMatchesTokenFreeBaseline) {
    // With row-stochastic attention over zero values the cross-attention
    // blocks must reduce to identity residuals: token content that is all
    // zeros cannot steer the prediction, whatever the attention weights are.
    DiffusionUNet net;
    Rng rng(18);
    net.init(rng);
    Tensor z = randt({3, 8, 8}, 90);
    Tensor tok0 = Tensor::constant({10, 64}, std::vector<double>((size_t)10 * 64, 0.0));
    Tensor a = net.forward(z, 3, tok0);
    // Scrambling wk/wv must not matter when tokens are zero.
    for (const char* name : {"attn8.wk.w", "attn8.wv.w", "attn4.wk.w", "attn4.wv.w"}) {
        Tensor w = net.params().get(name);
        std::vector<double> v = w.value();
        for (auto& x : v) x = 3.0 * x + 0.17;
        w.set_value(v);
    }
    Tensor b = net.forward(z, 3, tok0);
    EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(DiffusionUNet, GradsCheckOutIncludingInput) {
    UNetConfig cfg;
    DiffusionUNet net(cfg);
    Rng rng(19);
    net.init(rng);
    Tensor z = Tensor::param({3, 4, 4}, randt({3, 4, 4}, 100).value());
    Tensor tok = randt({6, 64}, 101, 0.3);
    Tensor target = randt({3, 4, 4}, 102);
    auto make_loss = [&] { return mse_mean(net.forward(z, 17, tok), target); };

    check_param_grads(net.params(), make_loss);
    z.zero_grad();  // the backward inside check_param_grads also reached z

    // Gradient w.r.t. the latent input, the path the sampling chain uses.
    Tensor loss = make_loss();
    backward(loss);
    ASSERT_TRUE(z.has_grad());
    std::vector<double> g = z.grad();
    z.zero_grad();
    net.params().zero_grad();
    double hstep = 1e-5;
    for (size_t i = 0; i < z.numel(); i += 7) {
        std::vector<double> v = z.value();
        double orig = v[i];
        v[i] = orig + hstep;
        z.set_value(v);
        double lp = make_loss().item();
        v[i] = orig - hstep;
        z.set_value(v);
        double lm = make_loss().item();
        v[i] = orig;
        z.set_value(v);
        double fd = (lp - lm) / (2.0 * hstep);
        EXPECT_LE(std::abs(fd - g[i]) / std::max({1.0, std::abs(fd), std::abs(g[i])}), 1e-4) << i;
    }
}

TEST(ParamCounts, PinnedForDefaultConfigs) {
    EXPECT_EQ(RegionUNet().params().total_params(), 118676u);
    EXPECT_EQ(Vae().params().total_params(), 86503u);
    EXPECT_EQ(CondEncoder().params().total_params(), 87040u);
    EXPECT_EQ(DiffusionUNet().params().total_params(), 591811u);
}

TEST(Checkpoint, RoundTripsParamsAndTrainingState) {
    TempDir tmp("ckpt");
    RegionUNet a;
    Rng rng(21);
    a.init(rng);
    Tensor x = randt({1, 16, 16}, 110, 0.3);
    Tensor ya = a.forward(x);

    AdamW opt(1e-3);
    std::ostringstream os;
    opt.serialize(os);
    TrainState ts;
    ts.step = 1234;
    ts.optimizer = os.str();
    ts.rng = Rng(99).serialize();
    save_checkpoint(tmp.file("r.ckpt"), NetKind::region, "hash-abc", a.params(), &ts);

    RegionUNet b;
    TrainState got;
    bool had = load_checkpoint(tmp.file("r.ckpt"), NetKind::region, "hash-abc", b.params(), &got);
    EXPECT_TRUE(had);
    EXPECT_EQ(got.step, 1234);
    EXPECT_EQ(got.optimizer, ts.optimizer);
    EXPECT_EQ(got.rng, ts.rng);
    EXPECT_EQ(max_abs_diff(ya, b.forward(x)), 0.0);

    // Without training state the flag byte says so.
    save_checkpoint(tmp.file("p.ckpt"), NetKind::region, "hash-abc", a.params());
    RegionUNet c;
    TrainState none;
    EXPECT_FALSE(load_checkpoint(tmp.file("p.ckpt"), NetKind::region, "hash-abc", c.params(), &none));
    EXPECT_EQ(max_abs_diff(ya, c.forward(x)), 0.0);
}

TEST(Checkpoint, RejectsMismatchesAndGarbage) {
    TempDir tmp("ckpt_bad");
    Vae v;
    Rng rng(22);
    v.init(rng);
    save_checkpoint(tmp.file("v.ckpt"), NetKind::vae, "h1", v.params());

    Vae w;
    EXPECT_THROW(load_checkpoint(tmp.file("v.ckpt"), NetKind::unet, "h1", w.params()), std::runtime_error);
    EXPECT_THROW(load_checkpoint(tmp.file("v.ckpt"), NetKind::vae, "h2", w.params()), std::runtime_error);
    EXPECT_NO_THROW(load_checkpoint(tmp.file("v.ckpt"), NetKind::vae, "", w.params()));  // hash check skipped
    EXPECT_THROW(load_checkpoint(tmp.file("missing.ckpt"), NetKind::vae, "h1", w.params()), std::runtime_error);

    write_file_bytes(tmp.file("junk.ckpt"), "NOTAckpt-file");
    EXPECT_THROW(load_checkpoint(tmp.file("junk.ckpt"), NetKind::vae, "h1", w.params()), std::runtime_error);
    std::string bytes = read_file_bytes(tmp.file("v.ckpt"));
    write_file_bytes(tmp.file("trunc.ckpt"), bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_checkpoint(tmp.file("trunc.ckpt"), NetKind::vae, "h1", w.params()), std::runtime_error);

    // A region checkpoint cannot be loaded into a VAE even with matching kind
    // byte forged: the parameter blob names will not line up.
    RegionUNet r;
    Rng rng2(23);
    r.init(rng2);
    save_checkpoint(tmp.file("r.ckpt"), NetKind::vae, "h1", r.params());
    EXPECT_THROW(load_checkpoint(tmp.file("r.ckpt"), NetKind::vae, "h1", w.params()), std::runtime_error);
}
