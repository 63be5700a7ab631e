#pragma once

// Reconstruction metrics over batches of (ground truth, prediction) map pairs
// and the evaluation report container. MSE_n is a sum over cells; NMSE divides
// by per-sample ground-truth energy; RMSE and PSNR work on the per-pixel mean
// (PSNR would otherwise depend on the grid side, which the published numbers
// rule out).

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ckm/common.hpp"
#include "ckm/grid.hpp"

namespace ckm {

inline double mse_n(const GridMap& x0, const GridMap& pred) {
    if (x0.h() != pred.h())
        throw std::invalid_argument(msg("mse_n: grid sides differ, ", x0.h(), " vs ", pred.h()));
    double s = 0.0;
    for (size_t i = 0; i < x0.values().size(); ++i) {
        double d = x0.values()[i] - pred.values()[i];
        s += d * d;
    }
    return s;
}

struct EvalPair {
    GridMap truth;
    GridMap pred;
};

constexpr double kPsnrCapDb = 99.0;

struct PerSampleEval {
    int id = 0;
    double mse = 0.0;        // summed over cells
    double energy = 0.0;     // sum of squared ground-truth cells
    double pixel_mse = 0.0;  // mse / h^2
    double psnr_db = 0.0;
};

inline PerSampleEval eval_one(int id, const GridMap& truth, const GridMap& pred,
                              double max_val = 1.0) {
    PerSampleEval r;
    r.id = id;
    r.mse = mse_n(truth, pred);
    for (double v : truth.values()) r.energy += v * v;
    if (r.energy <= 0.0)
        throw std::invalid_argument(msg("metrics: sample ", id, " has zero ground-truth energy"));
    r.pixel_mse = r.mse / ((double)truth.h() * truth.h());
    r.psnr_db = r.pixel_mse > 0.0
                    ? std::min(kPsnrCapDb, 10.0 * std::log10(max_val * max_val / r.pixel_mse))
                    : kPsnrCapDb;
    return r;
}

inline double nmse(const std::vector<EvalPair>& batch) {
    if (batch.empty()) throw std::invalid_argument("nmse: empty batch");
    double s = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        PerSampleEval r = eval_one((int)i, batch[i].truth, batch[i].pred);
        s += r.mse / r.energy;
    }
    return s / (double)batch.size();
}

inline double rmse(const std::vector<EvalPair>& batch) {
    if (batch.empty()) throw std::invalid_argument("rmse: empty batch");
    double s = 0.0;
    for (const auto& p : batch)
        s += mse_n(p.truth, p.pred) / ((double)p.truth.h() * p.truth.h());
    return std::sqrt(s / (double)batch.size());
}

inline double psnr(const std::vector<EvalPair>& batch, double max_val = 1.0) {
    if (batch.empty()) throw std::invalid_argument("psnr: empty batch");
    double s = 0.0;
    for (size_t i = 0; i < batch.size(); ++i)
        s += eval_one((int)i, batch[i].truth, batch[i].pred, max_val).psnr_db;
    return s / (double)batch.size();
}

// PSNR of a pooled per-pixel RMSE; pooled-PSNR == -20*log10(pooled-RMSE) for
// max_val 1.
inline double pooled_psnr_from_rmse(double rmse_val, double max_val = 1.0) {
    if (rmse_val <= 0.0) return kPsnrCapDb;
    return std::min(kPsnrCapDb, 20.0 * std::log10(max_val / rmse_val));
}

struct EvalReport {
    size_t n_samples = 0;
    double nmse = 0.0;
    double rmse = 0.0;
    double psnr_db = 0.0;
    std::vector<PerSampleEval> rows;
    std::string config_hash;

    // Aggregates recomputed from the per-sample rows; construction goes
    // through here so the report invariant holds by construction.
    static EvalReport from_rows(std::vector<PerSampleEval> rows, std::string config_hash) {
        if (rows.empty()) throw std::invalid_argument("EvalReport: no rows");
        EvalReport rep;
        rep.rows = std::move(rows);
        rep.config_hash = std::move(config_hash);
        rep.n_samples = rep.rows.size();
        double se = 0.0, sp = 0.0, sn = 0.0;
        for (const auto& r : rep.rows) {
            sn += r.mse / r.energy;
            se += r.pixel_mse;
            sp += r.psnr_db;
        }
        rep.nmse = sn / (double)rep.n_samples;
        rep.rmse = std::sqrt(se / (double)rep.n_samples);
        rep.psnr_db = sp / (double)rep.n_samples;
        return rep;
    }
};

inline EvalReport make_report(const std::vector<EvalPair>& batch, const std::vector<int>& ids,
                              const std::string& config_hash) {
    if (ids.size() != batch.size())
        throw std::invalid_argument("make_report: ids and batch sizes differ");
    std::vector<PerSampleEval> rows;
    rows.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i)
        rows.push_back(eval_one(ids[i], batch[i].truth, batch[i].pred));
    return EvalReport::from_rows(std::move(rows), config_hash);
}

inline void write_report_csv(const EvalReport& rep, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error(msg("write_report_csv: cannot open ", path));
    f.precision(17);
    f << "id,mse_n,energy,nmse,psnr_db\n";
    for (const auto& r : rep.rows)
        f << r.id << "," << r.mse << "," << r.energy << "," << r.mse / r.energy << ","
          << r.psnr_db << "\n";
    if (!f) throw std::runtime_error(msg("write_report_csv: short write on ", path));
}

inline std::string report_summary(const EvalReport& rep) {
    std::ostringstream os;
    os.precision(10);
    os << "samples " << rep.n_samples << "\n"
       << "nmse " << rep.nmse << "\n"
       << "rmse " << rep.rmse << "\n"
       << "psnr_db " << rep.psnr_db << "\n"
       << "config_hash " << rep.config_hash << "\n";
    return os.str();
}

// Side-by-side P5 dump: ground truth | prediction | absolute error, one row of
// three h-by-h panels separated by a single white column.
inline void write_side_by_side_pgm(const GridMap& truth, const GridMap& pred,
                                   const std::string& path) {
    if (truth.h() != pred.h())
        throw std::invalid_argument("write_side_by_side_pgm: grid sides differ");
    int h = truth.h(), w = 3 * h + 2;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(msg("write_side_by_side_pgm: cannot open ", path));
    f << "P5\n" << w << " " << h << "\n255\n";
    auto px = [](double v) {
        int b = (int)std::lround(255.0 * std::min(1.0, std::max(0.0, v)));
        return (unsigned char)b;
    };
    for (int r = 0; r < h; ++r) {
        std::vector<unsigned char> row;
        row.reserve((size_t)w);
        for (int c = 0; c < h; ++c) row.push_back(px(truth(r, c)));
        row.push_back(255);
        for (int c = 0; c < h; ++c) row.push_back(px(pred(r, c)));
        row.push_back(255);
        for (int c = 0; c < h; ++c) row.push_back(px(std::abs(truth(r, c) - pred(r, c))));
        f.write(reinterpret_cast<const char*>(row.data()), (std::streamsize)row.size());
    }
    if (!f) throw std::runtime_error(msg("write_side_by_side_pgm: short write on ", path));
}

}  // namespace ckm
