#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ckm/grid.hpp"

namespace ckm {

struct ManifestEntry {
    int id = 0;
    std::string split;
    std::string gain, building, tx, region, vehicle;  // vehicle empty on static sets
    int tx_row = 0, tx_col = 0;
};

struct Manifest {
    std::string base_dir;
    std::string config_hash;
    bool dynamic = false;
    std::vector<ManifestEntry> entries;

    std::vector<const ManifestEntry*> split(const std::string& name) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& e : entries)
            if (e.split == name) out.push_back(&e);
        return out;
    }
};

inline Manifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(msg("load_manifest: cannot open ", path));
    Manifest m;
    m.base_dir = std::filesystem::path(path).parent_path().string();
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream hs(line.substr(1));
            std::string key;
            hs >> key;
            if (key == "config_hash")
                hs >> m.config_hash;
            else if (key == "dynamic") {
                int d = 0;
                hs >> d;
                m.dynamic = d != 0;
            }
            continue;
        }
        std::vector<std::string> cols;
        std::istringstream ls(line);
        std::string col;
        while (std::getline(ls, col, '\t')) cols.push_back(col);
        size_t expected = m.dynamic ? 9u : 8u;
        if (cols.size() != expected)
            throw std::runtime_error(msg("load_manifest: ", path, " line ", lineno, ": expected ",
                                         expected, " columns, got ", cols.size()));
        ManifestEntry e;
        size_t i = 0;
        try {
            e.id = std::stoi(cols[i++]);
            e.split = cols[i++];
            e.gain = cols[i++];
            e.building = cols[i++];
            e.tx = cols[i++];
            e.region = cols[i++];
            if (m.dynamic) e.vehicle = cols[i++];
            e.tx_row = std::stoi(cols[i++]);
            e.tx_col = std::stoi(cols[i]);
        } catch (const std::exception&) {
            throw std::runtime_error(msg("load_manifest: ", path, " line ", lineno, ": bad record"));
        }
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw std::runtime_error(msg("load_manifest: ", path, " line ", lineno,
                                         ": unknown split '", e.split, "'"));
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty())
        throw std::runtime_error(msg("load_manifest: ", path, " lists no samples"));
    return m;
}

inline Sample load_sample(const Manifest& m, const ManifestEntry& e, bool with_region = true) {
    namespace fs = std::filesystem;
    auto at = [&m](const std::string& rel) { return (fs::path(m.base_dir) / rel).string(); };
    GridMap building = load_map(at(e.building));
    GridMap tx = load_map(at(e.tx));
    std::optional<GridMap> vehicle;
    if (!e.vehicle.empty()) vehicle = load_map(at(e.vehicle));
    CondStack cond(std::move(building), std::move(tx), std::move(vehicle));
    GridMap gain = load_map(at(e.gain));
    std::optional<GridMap> region;
    if (with_region) region = load_map(at(e.region));
    return Sample(std::move(cond), std::move(gain), std::move(region));
}

}  // namespace ckm
