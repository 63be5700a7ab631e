#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ckm {

// Build an error message from stream-formattable pieces.
template <typename... Args>
std::string msg(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

// FNV-1a, used for config hashes.
inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// Call counters used by tests to confirm which compute paths ran.
namespace trace {
inline long& region_forward_calls() {
    static long n = 0;
    return n;
}
inline long& pyramid_calls() {
    static long n = 0;
    return n;
}
inline void reset() {
    region_forward_calls() = 0;
    pyramid_calls() = 0;
}
}  // namespace trace

}  // namespace ckm
