#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "flowcps/common.hpp"

namespace flowcps {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Stream splitting rule used everywhere randomness is needed: a component
/// that owns `seed` hands stream `id` the seed derive_seed(seed, id).
/// Nested components chain derive_seed calls, so no two streams collide.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ (stream * 0x9e3779b97f4a7c15ull + 0x6a09e667f3bcc909ull));
}

/// Deterministic random source. Normal draws use Box-Muller on top of the
/// engine's raw 64-bit output, so sequences do not depend on the standard
/// library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal draw.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    Vec normal_vec(std::size_t dim) {
        Vec v(dim);
        for (auto& x : v) x = normal();
        return v;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace flowcps
