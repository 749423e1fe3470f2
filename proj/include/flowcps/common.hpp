#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

namespace flowcps {

/// A point in state space; treated as a dense real vector of fixed dimension.
using Vec = std::vector<double>;

inline Vec zeros(std::size_t dim) { return Vec(dim, 0.0); }

inline double squared_norm(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

inline double norm(const Vec& v) { return std::sqrt(squared_norm(v)); }

inline double squared_distance(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

/// Number of representable doubles between a and b (0 if bitwise equal,
/// ~0ull if either is NaN). Used by tests asserting ulp-level agreement.
inline std::uint64_t ulp_distance(double a, double b) {
    if (std::isnan(a) || std::isnan(b)) return ~0ull;
    auto ordered = [](double x) -> std::uint64_t {
        const std::uint64_t u = std::bit_cast<std::uint64_t>(x);
        // map to a monotone unsigned key: negatives below positives
        return (u >> 63) ? (0x8000000000000000ull - (u & 0x7fffffffffffffffull))
                         : (u + 0x8000000000000000ull);
    };
    const std::uint64_t ka = ordered(a);
    const std::uint64_t kb = ordered(b);
    return ka > kb ? ka - kb : kb - ka;
}

/// Round-trip safe decimal rendering (17 significant digits).
inline std::string fmt17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

/// Short rendering for names and messages.
inline std::string fmt_short(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%g", x);
    return buf;
}

}  // namespace flowcps
