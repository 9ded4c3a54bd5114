#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace catmerge {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Counter-based 64-bit generator.
///
///   key      = mix64(seed + 0x9e3779b97f4a7c15 * (stream + 1))
///   output_n = mix64(key + 0x9e3779b97f4a7c15 * n),  n = 1, 2, ...
///
/// Streams are split by hashing a stream id into the key, so independent
/// substreams (per task, per purpose) never share state. Uniforms take the top
/// 53 bits; normals use Box-Muller on two consecutive uniforms and return the
/// cosine branch first, then the cached sine branch.
class CounterRng {
public:
    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix64(seed + kGolden * (stream + 1))) {}

    /// Independent child stream; deterministic in (this key, id).
    CounterRng split(std::uint64_t id) const { return CounterRng(key_, id + 0x5bd1e995ULL); }

    std::uint64_t next_u64() { return mix64(key_ + kGolden * ++counter_); }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1].
    double uniform_open_low() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open_low();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace catmerge
