#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ckm/config.hpp"
#include "ckm/grid.hpp"
#include "ckm/rng.hpp"

namespace ckm {

struct PropagationParams {
    double pl0_db = 30.0;
    double n_exp = 2.5;
    double d0_cells = 1.0;
    double wall_penalty_db = 15.0;
    double vehicle_penalty_db = 5.0;
    double pl_min_db = 30.0;
    double pl_max_db = 160.0;
    double shadow_sigma_db = 0.0;

    void validate() const {
        if (n_exp <= 0.0) throw std::invalid_argument("PropagationParams: n_exp must be > 0");
        if (d0_cells <= 0.0) throw std::invalid_argument("PropagationParams: d0_cells must be > 0");
        if (wall_penalty_db < 0.0 || vehicle_penalty_db < 0.0)
            throw std::invalid_argument("PropagationParams: penalties must be >= 0");
        if (!(pl_min_db < pl_max_db))
            throw std::invalid_argument(msg("PropagationParams: need pl_min < pl_max, got [",
                                            pl_min_db, ",", pl_max_db, "]"));
        if (shadow_sigma_db < 0.0)
            throw std::invalid_argument("PropagationParams: shadow_sigma_db must be >= 0");
    }
};

struct RegionThresholds {
    double t_slight_db = 6.0;
    double t_heavy_db = 20.0;

    void validate() const {
        if (!(0.0 < t_slight_db && t_slight_db < t_heavy_db))
            throw std::invalid_argument(msg("RegionThresholds: need 0 < t_slight < t_heavy, got (",
                                            t_slight_db, ",", t_heavy_db, ")"));
    }
};

inline double log_distance_pl(double dist_cells, const PropagationParams& p) {
    if (dist_cells < 0.0) throw std::invalid_argument("log_distance_pl: negative distance");
    double d = std::max(dist_cells, p.d0_cells);
    return p.pl0_db + 10.0 * p.n_exp * std::log10(d / p.d0_cells);
}

// All cells visited by the integer Bresenham walk from a to b, inclusive.
inline std::vector<std::pair<int, int>> bresenham_cells(int r0, int c0, int r1, int c1) {
    std::vector<std::pair<int, int>> cells;
    int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
    int sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
    int err = dc - dr;
    int r = r0, c = c0;
    cells.reserve(std::max(dr, dc) + 1);
    for (;;) {
        cells.emplace_back(r, c);
        if (r == r1 && c == c1) break;
        int e2 = 2 * err;
        if (e2 >= -dr) {
            err -= dr;
            c += sc;
        }
        if (e2 <= dc) {
            err += dc;
            r += sr;
        }
    }
    return cells;
}

namespace detail {

// Endpoints are ordered before rasterizing so the walked cell set, and with
// it every crossing count, is the same in both directions.
inline std::vector<std::pair<int, int>> canonical_segment(int r0, int c0, int r1, int c1) {
    if (std::make_pair(r0, c0) > std::make_pair(r1, c1)) {
        std::swap(r0, r1);
        std::swap(c0, c1);
    }
    return bresenham_cells(r0, c0, r1, c1);
}

}  // namespace detail

// Number of free-to-building transitions along the segment: a one-cell-thick
// wall costs one crossing no matter how deep the run of building cells behind
// its front face is.
inline int wall_crossings(const GridMap& building, int r0, int c0, int r1, int c1) {
    if (building.role() != Role::building)
        throw std::invalid_argument("wall_crossings: map role must be building");
    auto cells = detail::canonical_segment(r0, c0, r1, c1);
    int count = 0;
    bool inside = building(cells[0].first, cells[0].second) != 0.0;
    for (size_t i = 1; i < cells.size(); ++i) {
        bool cur = building(cells[i].first, cells[i].second) != 0.0;
        if (cur && !inside) ++count;
        inside = cur;
    }
    return count;
}

inline int vehicle_crossings(const GridMap& vehicle, int r0, int c0, int r1, int c1) {
    if (vehicle.role() != Role::vehicle)
        throw std::invalid_argument("vehicle_crossings: map role must be vehicle");
    int count = 0;
    for (auto [r, c] : detail::canonical_segment(r0, c0, r1, c1))
        if (vehicle(r, c) != 0.0) ++count;
    return count;
}

// Dominant-path model: per cell, log-distance reference plus penetration
// penalties counted on the straight ray from the transmitter, plus optional
// i.i.d. log-normal shadowing. Building cells saturate at pl_max_db.
// Shadowing draws happen in row-major order over non-building cells only, so
// the output is a pure function of (cond, params, rng state).
inline GridMap simulate_dominant_path(const CondStack& cond, const PropagationParams& params,
                                      Rng& rng) {
    params.validate();
    int h = cond.h();
    auto [tr, tc] = cond.tx_cell();
    if (cond.building(tr, tc) != 0.0)
        throw std::invalid_argument(msg("simulate_dominant_path: tx cell (", tr, ",", tc,
                                        ") lies inside a building"));
    std::vector<double> pl(static_cast<size_t>(h) * h);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < h; ++c) {
            size_t i = static_cast<size_t>(r) * h + c;
            if (cond.building(r, c) != 0.0) {
                pl[i] = params.pl_max_db;
                continue;
            }
            double d = std::hypot(double(r - tr), double(c - tc));
            double v = log_distance_pl(d, params);
            v += params.wall_penalty_db * wall_crossings(cond.building, tr, tc, r, c);
            if (cond.vehicle)
                v += params.vehicle_penalty_db * vehicle_crossings(*cond.vehicle, tr, tc, r, c);
            if (params.shadow_sigma_db > 0.0) v += params.shadow_sigma_db * rng.normal();
            pl[i] = v;
        }
    }
    return normalize_gain(pl, h, params.pl_min_db, params.pl_max_db);
}

// Classifies each cell by the gap between the stored loss and the log-distance
// reference: LoS, slightly shadowed, heavily shadowed; buildings override.
inline GridMap region_oracle(const GridMap& gain, const CondStack& cond,
                             const PropagationParams& params, const RegionThresholds& th) {
    th.validate();
    if (gain.role() != Role::gain) throw std::invalid_argument("region_oracle: not a gain map");
    if (!gain.calibration())
        throw std::invalid_argument("region_oracle: gain map carries no dB calibration");
    if (gain.h() != cond.h())
        throw std::invalid_argument(msg("region_oracle: grid sizes differ: gain h=", gain.h(),
                                        " cond h=", cond.h()));
    int h = gain.h();
    auto [tr, tc] = cond.tx_cell();
    std::vector<double> pl_db = denormalize_gain(gain);
    std::vector<double> cls(static_cast<size_t>(h) * h);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < h; ++c) {
            size_t i = static_cast<size_t>(r) * h + c;
            if (cond.building(r, c) != 0.0) {
                cls[i] = 3.0;
                continue;
            }
            double delta = pl_db[i] - log_distance_pl(std::hypot(double(r - tr), double(c - tc)), params);
            cls[i] = delta <= th.t_slight_db ? 0.0 : (delta <= th.t_heavy_db ? 1.0 : 2.0);
        }
    }
    return GridMap(h, Role::region, std::move(cls));
}

struct DatasetConfig {
    int n_maps = 2000;
    int h = 64;
    int buildings_min = 3;
    int buildings_max = 7;
    int building_side_min = 6;
    int building_side_max = 16;
    int vehicles_min = 0;  // both 0 for a static dataset
    int vehicles_max = 0;
    int vehicle_side = 2;
    int txs_per_map = 1;
    uint64_t seed = 1;
    double split_train = 0.8;
    double split_val = 0.1;
    double split_test = 0.1;
    PropagationParams params;
    RegionThresholds thresholds;

    bool dynamic() const { return vehicles_max > 0; }
    int n_samples() const { return n_maps * txs_per_map; }

    void validate() const {
        params.validate();
        thresholds.validate();
        if (n_maps <= 0 || txs_per_map <= 0)
            throw std::invalid_argument("DatasetConfig: n_maps and txs_per_map must be positive");
        if (h < 8) throw std::invalid_argument(msg("DatasetConfig: grid side ", h, " too small"));
        if (buildings_min < 0 || buildings_min > buildings_max)
            throw std::invalid_argument("DatasetConfig: bad building count range");
        if (building_side_min < 1 || building_side_min > building_side_max ||
            building_side_max >= h)
            throw std::invalid_argument("DatasetConfig: bad building side range");
        if (vehicles_min < 0 || vehicles_min > vehicles_max)
            throw std::invalid_argument("DatasetConfig: bad vehicle count range");
        if (vehicle_side < 1 || vehicle_side >= h)
            throw std::invalid_argument("DatasetConfig: bad vehicle side");
        double s = split_train + split_val + split_test;
        if (split_train < 0 || split_val < 0 || split_test < 0 || std::abs(s - 1.0) > 1e-9)
            throw std::invalid_argument(msg("DatasetConfig: split fractions sum to ", s, ", not 1"));
    }

    static DatasetConfig from_config(const KvConfig& cfg) {
        DatasetConfig d;
        d.n_maps = static_cast<int>(cfg.get_int("dataset.n_maps", d.n_maps));
        d.h = static_cast<int>(cfg.get_int("dataset.h", d.h));
        d.buildings_min = static_cast<int>(cfg.get_int("dataset.buildings_min", d.buildings_min));
        d.buildings_max = static_cast<int>(cfg.get_int("dataset.buildings_max", d.buildings_max));
        d.building_side_min =
            static_cast<int>(cfg.get_int("dataset.building_side_min", d.building_side_min));
        d.building_side_max =
            static_cast<int>(cfg.get_int("dataset.building_side_max", d.building_side_max));
        d.vehicles_min = static_cast<int>(cfg.get_int("dataset.vehicles_min", d.vehicles_min));
        d.vehicles_max = static_cast<int>(cfg.get_int("dataset.vehicles_max", d.vehicles_max));
        d.vehicle_side = static_cast<int>(cfg.get_int("dataset.vehicle_side", d.vehicle_side));
        d.txs_per_map = static_cast<int>(cfg.get_int("dataset.txs_per_map", d.txs_per_map));
        d.seed = cfg.get_u64("dataset.seed", d.seed);
        d.split_train = cfg.get_f64("dataset.split_train", d.split_train);
        d.split_val = cfg.get_f64("dataset.split_val", d.split_val);
        d.split_test = cfg.get_f64("dataset.split_test", d.split_test);
        d.params.pl0_db = cfg.get_f64("prop.pl0_db", d.params.pl0_db);
        d.params.n_exp = cfg.get_f64("prop.n_exp", d.params.n_exp);
        d.params.d0_cells = cfg.get_f64("prop.d0_cells", d.params.d0_cells);
        d.params.wall_penalty_db = cfg.get_f64("prop.wall_db", d.params.wall_penalty_db);
        d.params.vehicle_penalty_db = cfg.get_f64("prop.vehicle_db", d.params.vehicle_penalty_db);
        d.params.pl_min_db = cfg.get_f64("prop.pl_min_db", d.params.pl_min_db);
        d.params.pl_max_db = cfg.get_f64("prop.pl_max_db", d.params.pl_max_db);
        d.params.shadow_sigma_db = cfg.get_f64("prop.shadow_sigma_db", d.params.shadow_sigma_db);
        d.thresholds.t_slight_db = cfg.get_f64("region.t_slight_db", d.thresholds.t_slight_db);
        d.thresholds.t_heavy_db = cfg.get_f64("region.t_heavy_db", d.thresholds.t_heavy_db);
        d.validate();
        return d;
    }
};

namespace detail {

inline GridMap random_buildings(const DatasetConfig& cfg, Rng& rng) {
    std::vector<double> b(static_cast<size_t>(cfg.h) * cfg.h, 0.0);
    int count = static_cast<int>(rng.uniform_int(cfg.buildings_min, cfg.buildings_max));
    for (int k = 0; k < count; ++k) {
        int bw = static_cast<int>(rng.uniform_int(cfg.building_side_min, cfg.building_side_max));
        int bh = static_cast<int>(rng.uniform_int(cfg.building_side_min, cfg.building_side_max));
        int r0 = static_cast<int>(rng.uniform_int(0, cfg.h - bh));
        int c0 = static_cast<int>(rng.uniform_int(0, cfg.h - bw));
        for (int r = r0; r < r0 + bh; ++r)
            for (int c = c0; c < c0 + bw; ++c) b[static_cast<size_t>(r) * cfg.h + c] = 1.0;
    }
    return GridMap(cfg.h, Role::building, std::move(b));
}

inline std::pair<int, int> random_free_cell(const GridMap& building, Rng& rng) {
    int h = building.h();
    for (int attempt = 0; attempt < 100000; ++attempt) {
        int r = static_cast<int>(rng.uniform_int(0, h - 1));
        int c = static_cast<int>(rng.uniform_int(0, h - 1));
        if (building(r, c) == 0.0) return {r, c};
    }
    throw std::runtime_error("random_free_cell: grid appears to have no free cell");
}

// Vehicle blocks are kept off buildings and off the tx cell.
inline GridMap random_vehicles(const DatasetConfig& cfg, const GridMap& building, int tx_r,
                               int tx_c, Rng& rng) {
    int h = cfg.h;
    std::vector<double> v(static_cast<size_t>(h) * h, 0.0);
    int count = static_cast<int>(rng.uniform_int(cfg.vehicles_min, cfg.vehicles_max));
    int side = cfg.vehicle_side;
    for (int k = 0; k < count; ++k) {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            int r0 = static_cast<int>(rng.uniform_int(0, h - side));
            int c0 = static_cast<int>(rng.uniform_int(0, h - side));
            bool ok = true;
            for (int r = r0; ok && r < r0 + side; ++r)
                for (int c = c0; ok && c < c0 + side; ++c)
                    if (building(r, c) != 0.0 || (r == tx_r && c == tx_c)) ok = false;
            if (!ok) continue;
            for (int r = r0; r < r0 + side; ++r)
                for (int c = c0; c < c0 + side; ++c) v[static_cast<size_t>(r) * h + c] = 1.0;
            break;
        }
    }
    return GridMap(h, Role::vehicle, std::move(v));
}

inline std::string sample_stem(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%06d", id);
    return buf;
}

}  // namespace detail

// Builds one sample (condition stack, simulated gain, oracle region map) from
// the dataset-level seed. The double indexing keeps per-sample streams
// independent, so samples can be produced in any order or in parallel.
inline Sample generate_sample(const DatasetConfig& cfg, int map_index, int tx_index) {
    Rng layout_rng(derive_seed(cfg.seed, 1, static_cast<uint64_t>(map_index)));
    GridMap building = detail::random_buildings(cfg, layout_rng);
    Rng rng(derive_seed(cfg.seed, 2, static_cast<uint64_t>(map_index),
                        static_cast<uint64_t>(tx_index)));
    auto [tr, tc] = detail::random_free_cell(building, rng);
    std::optional<GridMap> vehicle;
    if (cfg.dynamic()) vehicle = detail::random_vehicles(cfg, building, tr, tc, rng);
    CondStack cond(building, make_tx_map(cfg.h, tr, tc), std::move(vehicle));
    GridMap gain = simulate_dominant_path(cond, cfg.params, rng);
    GridMap region = region_oracle(gain, cond, cfg.params, cfg.thresholds);
    return Sample(std::move(cond), std::move(gain), std::move(region));
}

inline const char* split_of(const DatasetConfig& cfg, int sample_index) {
    int n = cfg.n_samples();
    int n_val = static_cast<int>(std::llround(cfg.split_val * n));
    int n_test = static_cast<int>(std::llround(cfg.split_test * n));
    int n_train = n - n_val - n_test;
    if (sample_index < n_train) return "train";
    if (sample_index < n_train + n_val) return "val";
    return "test";
}

// Writes every sample in CKM1 format plus a tab-separated manifest. A rerun
// with the same config produces byte-identical files.
inline std::string generate_dataset(const DatasetConfig& cfg, const std::string& out_dir,
                                    const std::string& config_hash) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::string manifest_path = (fs::path(out_dir) / "manifest.tsv").string();
    std::ofstream mf(manifest_path);
    if (!mf) throw std::runtime_error(msg("generate_dataset: cannot open ", manifest_path));
    mf << "# ckm dataset manifest v1\n";
    mf << "# config_hash " << config_hash << "\n";
    mf << "# dynamic " << (cfg.dynamic() ? 1 : 0) << "\n";
    mf << "# n " << cfg.n_samples() << "\n";
    for (int m = 0; m < cfg.n_maps; ++m) {
        for (int t = 0; t < cfg.txs_per_map; ++t) {
            int id = m * cfg.txs_per_map + t;
            Sample s = generate_sample(cfg, m, t);
            std::string stem = detail::sample_stem(id);
            auto rel = [&stem](const char* kind) { return stem + "." + kind + ".ckm"; };
            save_map(s.gain, (fs::path(out_dir) / rel("gain")).string());
            save_map(s.cond.building, (fs::path(out_dir) / rel("building")).string());
            save_map(s.cond.tx, (fs::path(out_dir) / rel("tx")).string());
            save_map(*s.region, (fs::path(out_dir) / rel("region")).string());
            if (s.cond.vehicle)
                save_map(*s.cond.vehicle, (fs::path(out_dir) / rel("vehicle")).string());
            auto [tr, tc] = s.cond.tx_cell();
            mf << id << '\t' << split_of(cfg, id) << '\t' << rel("gain") << '\t' << rel("building")
               << '\t' << rel("tx") << '\t' << rel("region");
            if (cfg.dynamic()) mf << '\t' << rel("vehicle");
            mf << '\t' << tr << '\t' << tc << '\n';
        }
    }
    mf.flush();
    if (!mf) throw std::runtime_error(msg("generate_dataset: write failed for ", manifest_path));
    return manifest_path;
}

}  // namespace ckm
