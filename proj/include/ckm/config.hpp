#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "ckm/common.hpp"

namespace ckm {

// Flat key=value configuration with dotted section prefixes, e.g.
//   physics.lambda_edge=0.001
// '#' starts a comment, blank lines are ignored.
class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse_text(const std::string& text, const std::string& origin = "<string>") {
        KvConfig cfg;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(
                    msg(origin, ":", lineno, ": expected key=value, got \"", trimmed, "\""));
            std::string key = trim(trimmed.substr(0, eq));
            std::string val = trim(trimmed.substr(eq + 1));
            if (key.empty())
                throw std::runtime_error(msg(origin, ":", lineno, ": empty key"));
            cfg.values_[key] = val;
        }
        return cfg;
    }

    static KvConfig parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error(msg("config: cannot open ", path));
        std::ostringstream buf;
        buf << f.rdbuf();
        return parse_text(buf.str(), path);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, const std::string& val) { values_[key] = val; }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }

    double get_f64(const std::string& key, double dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            size_t pos = 0;
            double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw std::runtime_error(msg("config: key ", key, ": not a number: \"", it->second, "\""));
        }
    }

    long long get_int(const std::string& key, long long dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            size_t pos = 0;
            long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw std::runtime_error(msg("config: key ", key, ": not an integer: \"", it->second, "\""));
        }
    }

    uint64_t get_u64(const std::string& key, uint64_t dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            size_t pos = 0;
            uint64_t v = std::stoull(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw std::runtime_error(msg("config: key ", key, ": not an integer: \"", it->second, "\""));
        }
    }

    bool get_bool(const std::string& key, bool dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        const std::string& v = it->second;
        if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
        if (v == "0" || v == "false" || v == "no" || v == "off") return false;
        throw std::runtime_error(msg("config: key ", key, ": not a boolean: \"", v, "\""));
    }

    // Canonical text form: keys in sorted order, one per line.
    std::string to_text() const {
        std::ostringstream os;
        for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
        return os.str();
    }

    std::string hash() const { return hex64(fnv1a(to_text())); }

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace ckm
