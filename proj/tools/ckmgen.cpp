// ckmgen — one binary for the whole pipeline: synthesize propagation data,
// train the three stages, sample gain maps, evaluate, and run the loss-term
// ablation grid.  Every subcommand writes into a fresh run directory and
// leaves a run_manifest.txt behind; all randomness flows from --seed.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ckm/config.hpp"
#include "ckm/data.hpp"
#include "ckm/grid.hpp"
#include "ckm/metrics.hpp"
#include "ckm/propagation.hpp"
#include "ckm/training.hpp"

extern "C" void openblas_set_num_threads(int);

namespace fs = std::filesystem;
using namespace ckm;

namespace {

struct Opts {
    std::string config;
    std::string out;
    uint64_t seed = 0;
    int steps = 5;  // sampling subsequence length (sample/eval/ablate)
    int device_threads = 0;
    std::string split = "test";
};

std::string timestamp() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// A run directory must start out empty; nothing is ever overwritten.
void prepare_run_dir(const std::string& out) {
    fs::path p(out);
    if (fs::exists(p)) {
        if (!fs::is_directory(p)) throw std::runtime_error(msg(out, " is not a directory"));
        if (!fs::is_empty(p))
            throw std::runtime_error(msg("run directory ", out, " already exists and is not empty"));
    } else {
        fs::create_directories(p);
    }
}

// The run manifest is the one file that may differ between identical reruns
// (it carries wall-clock timestamps); every listed output is byte-stable.
struct RunLog {
    std::string command, config_hash, started;
    uint64_t seed = 0;
    std::string config_echo;
    std::vector<std::string> outputs;

    void write(const std::string& dir) const {
        std::ofstream f(dir + "/run_manifest.txt");
        if (!f) throw std::runtime_error(msg("cannot write run manifest in ", dir));
        f << "command: " << command << "\n"
          << "config_hash: " << config_hash << "\n"
          << "seed: " << seed << "\n"
          << "started: " << started << "\n"
          << "finished: " << timestamp() << "\n";
        for (const auto& o : outputs) f << "output: " << o << "\n";
        f << "config_echo:\n";
        std::istringstream echo(config_echo);
        for (std::string line; std::getline(echo, line);) f << "  " << line << "\n";
        if (!f) throw std::runtime_error("run manifest write failed");
    }
};

RunLog begin_run(const std::string& command, const KvConfig& cfg, const Opts& o) {
    prepare_run_dir(o.out);
    RunLog rl;
    rl.command = command;
    rl.config_hash = cfg.hash();
    rl.seed = o.seed;
    rl.started = timestamp();
    rl.config_echo = cfg.to_text();
    return rl;
}

std::string req_str(const KvConfig& cfg, const std::string& key) {
    if (!cfg.has(key)) throw std::runtime_error(msg("config is missing required key '", key, "'"));
    return cfg.get_str(key, "");
}

int run_dataset(const Opts& o) {
    KvConfig cfg = KvConfig::parse_file(o.config);
    DatasetConfig dc = DatasetConfig::from_config(cfg);
    dc.seed = o.seed;
    dc.validate();
    RunLog rl = begin_run("dataset", cfg, o);
    std::string manifest = generate_dataset(dc, o.out, cfg.hash());
    rl.outputs.push_back(manifest);
    rl.write(o.out);
    std::cout << "dataset: " << dc.n_samples() << " samples (" << (dc.dynamic() ? "dynamic" : "static")
              << ") -> " << manifest << "\n";
    return 0;
}

int run_train(const Opts& o, Stage stage) {
    KvConfig cfg = KvConfig::parse_file(o.config);
    TrainConfig tc = TrainConfig::from_config(cfg, stage);
    tc.seed = o.seed;
    RunLog rl = begin_run(msg("train-", stage_name(stage)), cfg, o);
    tc.ckpt_dir = o.out;
    TrainResult r;
    switch (stage) {
        case Stage::region: r = train_region(tc); break;
        case Stage::vae: r = train_vae(tc); break;
        case Stage::diffusion: r = train_diffusion(tc); break;
    }
    rl.outputs.push_back(r.ckpt);
    if (!r.cond_ckpt.empty()) rl.outputs.push_back(r.cond_ckpt);
    rl.outputs.push_back(r.log_csv);
    rl.write(o.out);
    std::cout << "train-" << stage_name(stage) << ": " << r.steps << " steps, val_metric "
              << r.val_metric << "\n";
    return 0;
}

void check_subseq(int steps) {
    if (steps < 2)
        throw std::invalid_argument(
            msg("--steps ", steps, " is too short; the subsequence includes both endpoints, so at least 2"));
}

int run_sample(const Opts& o) {
    check_subseq(o.steps);
    KvConfig cfg = KvConfig::parse_file(o.config);
    TrainConfig tc = TrainConfig::from_config(cfg, Stage::diffusion);
    SampleCkpts ck{req_str(cfg, "sample.vae_ckpt"), req_str(cfg, "sample.cond_ckpt"),
                   req_str(cfg, "sample.unet_ckpt")};
    Manifest m = load_manifest(req_str(cfg, "sample.manifest"));
    int want = (int)cfg.get_int("sample.id", 0);
    const ManifestEntry* entry = nullptr;
    for (const auto& e : m.entries)
        if (e.id == want) entry = &e;
    if (!entry) throw std::runtime_error(msg("sample.id ", want, " not found in manifest"));
    Sample s = load_sample(m, *entry, false);

    RunLog rl = begin_run("sample", cfg, o);
    GridMap map = sample_cgm(s.cond, ck, tc, o.steps, o.seed);
    std::string ckm = o.out + "/map.ckm", pgm = o.out + "/map.pgm";
    save_map(map, ckm);
    save_pgm(map, pgm);
    rl.outputs = {ckm, pgm};
    rl.write(o.out);
    std::cout << "sample: id " << want << " -> " << ckm << "\n";
    return 0;
}

int run_eval(const Opts& o) {
    check_subseq(o.steps);
    KvConfig cfg = KvConfig::parse_file(o.config);
    TrainConfig tc = TrainConfig::from_config(cfg, Stage::diffusion);
    SampleCkpts ck{req_str(cfg, "eval.vae_ckpt"), req_str(cfg, "eval.cond_ckpt"),
                   req_str(cfg, "eval.unet_ckpt")};
    std::string manifest = req_str(cfg, "eval.manifest");
    int pgm_dumps = (int)cfg.get_int("eval.pgm_dumps", 4);

    RunLog rl = begin_run("eval", cfg, o);
    EvalReport rep = evaluate(manifest, ck, tc, o.seed, o.out, o.steps, pgm_dumps, o.split);
    rl.outputs = {o.out + "/eval.csv", o.out + "/summary.txt"};
    rl.write(o.out);
    std::cout << report_summary(rep);
    return 0;
}

int run_ablate(const Opts& o) {
    check_subseq(o.steps);
    KvConfig cfg = KvConfig::parse_file(o.config);
    TrainConfig base = TrainConfig::from_config(cfg, Stage::diffusion);
    base.seed = o.seed;
    RunLog rl = begin_run("ablate", cfg, o);

    // Table-shaped grid over which loss terms are switched on; the "on"
    // weights come from the configured physics.* values.
    struct Row {
        const char* name;
        bool edge, region, mulfea;
    };
    const Row rows[] = {{"none", false, false, false},   {"edge", true, false, false},
                        {"region", false, true, false},  {"mulfea", false, false, true},
                        {"edge+region", true, true, false}, {"edge+mulfea", true, false, true},
                        {"region+mulfea", false, true, true}, {"all", true, true, true}};

    std::string csv_path = o.out + "/ablation.csv";
    std::ofstream csv(csv_path);
    csv.precision(17);
    csv << "config,nmse,rmse,psnr_db\n";
    for (const Row& row : rows) {
        TrainConfig tc = base;
        tc.physics.lambda_edge = row.edge ? base.physics.lambda_edge : 0.0;
        tc.physics.lambda_region = row.region ? base.physics.lambda_region : 0.0;
        tc.physics.lambda_mulfea = row.mulfea ? base.physics.lambda_mulfea : 0.0;
        tc.ckpt_dir = o.out + "/rows/" + row.name;
        TrainResult r = train_diffusion(tc);
        SampleCkpts ck{base.vae_ckpt, r.cond_ckpt, r.ckpt};
        EvalReport rep = evaluate(base.manifest, ck, tc, o.seed, tc.ckpt_dir + "/eval", o.steps,
                                  /*pgm_dumps=*/0, o.split);
        csv << row.name << "," << rep.nmse << "," << rep.rmse << "," << rep.psnr_db << "\n";
        csv.flush();
        std::cout << "ablate[" << row.name << "]: nmse " << rep.nmse << "\n";
    }
    if (!csv) throw std::runtime_error("ablation csv write failed");
    csv.close();
    rl.outputs = {csv_path};
    rl.write(o.out);
    std::cout << "ablate: 8 rows -> " << csv_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ckmgen: latent-diffusion channel-gain-map pipeline (data, training, sampling, evaluation)"};
    app.name("ckmgen");  // keep --help output independent of the invocation path
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.footer("Environment: CKM_LOG=<level> raises log verbosity on stderr.");

    Opts o;
    auto add_common = [&](CLI::App* sc, bool with_steps, bool with_split) {
        sc->add_option("--config", o.config, "flat key=value config file")
            ->required()
            ->check(CLI::ExistingFile);
        sc->add_option("--out", o.out, "fresh run directory (created; must be empty if present)")->required();
        sc->add_option("--seed", o.seed, "master seed; every subsystem stream is derived from it");
        if (with_steps)
            sc->add_option("--steps", o.steps, "sampling subsequence length, endpoints included");
        if (with_split) sc->add_option("--split", o.split, "manifest split to evaluate");
        sc->add_option("--device-threads", o.device_threads, "BLAS threads (0 keeps the single-thread default)");
    };

    CLI::App* sc_dataset = app.add_subcommand("dataset", "synthesize a propagation dataset + manifest");
    CLI::App* sc_region = app.add_subcommand("train-region", "stage 1: train the region segmenter");
    CLI::App* sc_vae = app.add_subcommand("train-vae", "stage 2: train the gain-map autoencoder");
    CLI::App* sc_diff =
        app.add_subcommand("train-diffusion", "stage 3: train the conditional latent diffusion model");
    CLI::App* sc_sample = app.add_subcommand("sample", "generate one gain map for a manifest condition");
    CLI::App* sc_eval = app.add_subcommand("eval", "sample a whole split and report error metrics");
    CLI::App* sc_ablate = app.add_subcommand("ablate", "8-row loss-term grid: train + evaluate each subset");
    add_common(sc_dataset, false, false);
    add_common(sc_region, false, false);
    add_common(sc_vae, false, false);
    add_common(sc_diff, false, false);
    add_common(sc_sample, true, false);
    add_common(sc_eval, true, true);
    add_common(sc_ablate, true, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (o.device_threads > 0) openblas_set_num_threads(o.device_threads);
        if (sc_dataset->parsed()) return run_dataset(o);
        if (sc_region->parsed()) return run_train(o, Stage::region);
        if (sc_vae->parsed()) return run_train(o, Stage::vae);
        if (sc_diff->parsed()) return run_train(o, Stage::diffusion);
        if (sc_sample->parsed()) return run_sample(o);
        if (sc_eval->parsed()) return run_eval(o);
        if (sc_ablate->parsed()) return run_ablate(o);
    } catch (const std::exception& e) {
        std::cerr << "ckmgen: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
