#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ckm/common.hpp"

namespace ckm {

enum class Role : uint8_t {
    gain = 0,
    building = 1,
    tx = 2,
    vehicle = 3,
    sparse = 4,
    region = 5,
};

inline const char* role_name(Role r) {
    switch (r) {
        case Role::gain: return "gain";
        case Role::building: return "building";
        case Role::tx: return "tx";
        case Role::vehicle: return "vehicle";
        case Role::sparse: return "sparse";
        case Role::region: return "region";
    }
    return "?";
}

struct Calibration {
    double pl_min_db = 0.0;
    double pl_max_db = 0.0;
};

// One h-by-h scalar field with a role tag. Values are validated against the
// role on construction and the object is immutable afterwards.
class GridMap {
public:
    GridMap(int h, Role role, std::vector<double> values,
            std::optional<Calibration> cal = std::nullopt)
        : h_(h), role_(role), values_(std::move(values)), cal_(cal) {
        if (h_ <= 0) throw std::invalid_argument(msg("GridMap: h must be positive, got ", h_));
        if (values_.size() != static_cast<size_t>(h_) * h_)
            throw std::invalid_argument(msg("GridMap: expected ", static_cast<size_t>(h_) * h_,
                                            " values, got ", values_.size()));
        validate();
    }

    static GridMap zeros(int h, Role role) {
        std::vector<double> v(static_cast<size_t>(h) * h, 0.0);
        if (role == Role::tx)
            throw std::invalid_argument("GridMap::zeros: a tx map cannot be all zero");
        return GridMap(h, role, std::move(v));
    }

    int h() const { return h_; }
    Role role() const { return role_; }
    const std::vector<double>& values() const { return values_; }
    const std::optional<Calibration>& calibration() const { return cal_; }

    double operator()(int row, int col) const {
        return values_[static_cast<size_t>(row) * h_ + col];
    }

    bool in_bounds(int row, int col) const {
        return row >= 0 && row < h_ && col >= 0 && col < h_;
    }

private:
    void validate() const {
        for (double v : values_)
            if (!std::isfinite(v))
                throw std::invalid_argument(msg("GridMap(", role_name(role_), "): non-finite value"));
        switch (role_) {
            case Role::building:
            case Role::vehicle:
                for (double v : values_)
                    if (v != 0.0 && v != 1.0)
                        throw std::invalid_argument(
                            msg("GridMap(", role_name(role_), "): values must be 0 or 1, got ", v));
                break;
            case Role::tx: {
                int ones = 0;
                for (double v : values_) {
                    if (v != 0.0 && v != 1.0)
                        throw std::invalid_argument(msg("GridMap(tx): values must be 0 or 1, got ", v));
                    if (v == 1.0) ++ones;
                }
                if (ones != 1)
                    throw std::invalid_argument(msg("GridMap(tx): expected exactly one 1, got ", ones));
                break;
            }
            case Role::gain:
                for (double v : values_)
                    if (v < 0.0 || v > 1.0)
                        throw std::invalid_argument(
                            msg("GridMap(gain): values must lie in [0,1], got ", v));
                break;
            case Role::region:
                for (double v : values_)
                    if (v != 0.0 && v != 1.0 && v != 2.0 && v != 3.0)
                        throw std::invalid_argument(
                            msg("GridMap(region): values must be in {0,1,2,3}, got ", v));
                break;
            case Role::sparse:
                break;
        }
    }

    int h_;
    Role role_;
    std::vector<double> values_;
    std::optional<Calibration> cal_;
};

// The condition tuple: building layout, transmitter location and, for dynamic
// scenes, vehicle locations.
struct CondStack {
    GridMap building;
    GridMap tx;
    std::optional<GridMap> vehicle;

    CondStack(GridMap b, GridMap t, std::optional<GridMap> v = std::nullopt)
        : building(std::move(b)), tx(std::move(t)), vehicle(std::move(v)) {
        if (building.role() != Role::building)
            throw std::invalid_argument("CondStack: first map must have role building");
        if (tx.role() != Role::tx)
            throw std::invalid_argument("CondStack: second map must have role tx");
        if (vehicle && vehicle->role() != Role::vehicle)
            throw std::invalid_argument("CondStack: third map must have role vehicle");
        if (tx.h() != building.h() || (vehicle && vehicle->h() != building.h()))
            throw std::invalid_argument(msg("CondStack: grid sizes differ: building h=", building.h(),
                                            " tx h=", tx.h()));
    }

    int h() const { return building.h(); }

    std::pair<int, int> tx_cell() const {
        for (int r = 0; r < tx.h(); ++r)
            for (int c = 0; c < tx.h(); ++c)
                if (tx(r, c) == 1.0) return {r, c};
        throw std::logic_error("CondStack: tx map has no 1 cell");
    }
};

// One dataset record.
struct Sample {
    CondStack cond;
    GridMap gain;
    std::optional<GridMap> region;

    Sample(CondStack c, GridMap g, std::optional<GridMap> reg = std::nullopt)
        : cond(std::move(c)), gain(std::move(g)), region(std::move(reg)) {
        if (gain.role() != Role::gain) throw std::invalid_argument("Sample: gain map role mismatch");
        if (gain.h() != cond.h()) throw std::invalid_argument("Sample: gain grid size mismatch");
        if (region) {
            if (region->role() != Role::region)
                throw std::invalid_argument("Sample: region map role mismatch");
            if (region->h() != cond.h())
                throw std::invalid_argument("Sample: region grid size mismatch");
        }
    }
};

// Maps physical path loss in dB onto [0,1]. Out-of-range inputs clamp.
inline GridMap normalize_gain(const std::vector<double>& pl_db, int h, double pl_min_db,
                              double pl_max_db) {
    if (!(pl_min_db < pl_max_db))
        throw std::invalid_argument(
            msg("normalize_gain: degenerate range [", pl_min_db, ",", pl_max_db, "]"));
    if (!std::isfinite(pl_min_db) || !std::isfinite(pl_max_db))
        throw std::invalid_argument("normalize_gain: non-finite range");
    std::vector<double> out(pl_db.size());
    for (size_t i = 0; i < pl_db.size(); ++i) {
        if (!std::isfinite(pl_db[i]))
            throw std::invalid_argument(msg("normalize_gain: non-finite input at index ", i));
        double v = (pl_db[i] - pl_min_db) / (pl_max_db - pl_min_db);
        out[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
    return GridMap(h, Role::gain, std::move(out), Calibration{pl_min_db, pl_max_db});
}

inline std::vector<double> denormalize_gain(const GridMap& m) {
    if (m.role() != Role::gain) throw std::invalid_argument("denormalize_gain: not a gain map");
    if (!m.calibration()) throw std::invalid_argument("denormalize_gain: map has no calibration");
    const auto& c = *m.calibration();
    std::vector<double> out(m.values().size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = c.pl_min_db + m.values()[i] * (c.pl_max_db - c.pl_min_db);
    return out;
}

inline GridMap make_tx_map(int h, int row, int col) {
    if (row < 0 || row >= h || col < 0 || col >= h)
        throw std::invalid_argument(msg("make_tx_map: cell (", row, ",", col,
                                        ") outside grid of side ", h));
    std::vector<double> v(static_cast<size_t>(h) * h, 0.0);
    v[static_cast<size_t>(row) * h + col] = 1.0;
    return GridMap(h, Role::tx, std::move(v));
}

// Binary map format CKM1:
//   "CKM1"  magic
//   u32 LE  grid side h
//   u8      role code
//   u8      flags, bit0 = has calibration
//   2x f64  calibration (pl_min_db, pl_max_db), present iff flag set
//   h*h f64 LE row-major payload
inline void save_map(const GridMap& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(msg("save_map: cannot open ", path));
    f.write("CKM1", 4);
    uint32_t h = static_cast<uint32_t>(m.h());
    f.write(reinterpret_cast<const char*>(&h), 4);
    uint8_t role = static_cast<uint8_t>(m.role());
    uint8_t flags = m.calibration() ? 1 : 0;
    f.write(reinterpret_cast<const char*>(&role), 1);
    f.write(reinterpret_cast<const char*>(&flags), 1);
    if (m.calibration()) {
        f.write(reinterpret_cast<const char*>(&m.calibration()->pl_min_db), 8);
        f.write(reinterpret_cast<const char*>(&m.calibration()->pl_max_db), 8);
    }
    f.write(reinterpret_cast<const char*>(m.values().data()),
            static_cast<std::streamsize>(m.values().size() * 8));
    if (!f) throw std::runtime_error(msg("save_map: write failed for ", path));
}

inline GridMap load_map(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(msg("load_map: cannot open ", path));
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "CKM1", 4) != 0)
        throw std::runtime_error(msg("load_map: ", path, ": bad magic"));
    uint32_t h = 0;
    uint8_t role = 0, flags = 0;
    if (!f.read(reinterpret_cast<char*>(&h), 4) || !f.read(reinterpret_cast<char*>(&role), 1) ||
        !f.read(reinterpret_cast<char*>(&flags), 1))
        throw std::runtime_error(msg("load_map: ", path, ": truncated header"));
    if (h == 0 || h > (1u << 16))
        throw std::runtime_error(msg("load_map: ", path, ": implausible grid side ", h));
    if (role > 5) throw std::runtime_error(msg("load_map: ", path, ": unknown role code ", int(role)));
    if (flags > 1) throw std::runtime_error(msg("load_map: ", path, ": unknown flags ", int(flags)));
    std::optional<Calibration> cal;
    if (flags & 1) {
        Calibration c;
        if (!f.read(reinterpret_cast<char*>(&c.pl_min_db), 8) ||
            !f.read(reinterpret_cast<char*>(&c.pl_max_db), 8))
            throw std::runtime_error(msg("load_map: ", path, ": truncated calibration"));
        cal = c;
    }
    std::vector<double> values(static_cast<size_t>(h) * h);
    if (!f.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * 8)))
        throw std::runtime_error(msg("load_map: ", path, ": truncated payload"));
    for (double v : values)
        if (!std::isfinite(v))
            throw std::runtime_error(msg("load_map: ", path, ": non-finite payload"));
    return GridMap(static_cast<int>(h), static_cast<Role>(role), std::move(values), cal);
}

// 8-bit PGM (P5) export. Values are clamped to [0,1] and quantized with
// round-half-up, so 0.5 maps to pixel 128.
inline void save_pgm(const GridMap& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(msg("save_pgm: cannot open ", path));
    f << "P5\n" << m.h() << " " << m.h() << "\n255\n";
    std::vector<unsigned char> row(m.values().size());
    for (size_t i = 0; i < row.size(); ++i) {
        double v = m.values()[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        row[i] = static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!f) throw std::runtime_error(msg("save_pgm: write failed for ", path));
}

}  // namespace ckm
