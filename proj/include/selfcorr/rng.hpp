#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace selfcorr {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic RNG. mt19937_64 is fully specified by the standard, and the
// helpers below avoid std::uniform_*_distribution (whose outputs are
// implementation-defined), so streams reproduce across platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

    // Independent substream for (tag, index) under a master seed.
    static Rng stream(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
        return Rng(splitmix64(master ^ fnv1a64(tag)) ^ splitmix64(index * 0x9e3779b97f4a7c15ULL + 1));
    }

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, n). Modulo bias is below 2^-57 for the ranges used here.
    std::uint64_t uniform_u64(std::uint64_t n) { return eng_() % n; }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(uniform_u64(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform01() < p; }

    double normal() {
        // Box-Muller, one value per call pair cached.
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace selfcorr
