#pragma once

#include <cmath>
#include <cstdint>

namespace cmab {

// Splittable counter-based generator. Each draw hashes (seed, counter),
// so streams derived via split() are independent of how many draws the
// parent has made. Identical seeds give bit-identical streams.
struct RngState {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    explicit RngState(std::uint64_t s = 0) : seed(s) {}

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

    std::uint64_t next_u64() {
        std::uint64_t c = counter++;
        return mix(seed ^ mix(c + 0xA0761D6478BD642FULL));
    }

    RngState split(std::uint64_t stream) const {
        return RngState(mix(seed ^ mix(stream + 0xE7037ED1A0B428DBULL)));
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in (0, 1]; safe as a log argument.
    double next_double_open() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Box-Muller; deterministic, one fresh pair per call.
    double next_normal() {
        double u1 = next_double_open();
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t next_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }
};

}  // namespace cmab
