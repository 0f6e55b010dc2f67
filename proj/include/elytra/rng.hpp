#pragma once

#include <cstdint>
#include <random>

namespace elytra {

/// SplitMix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept;
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t sub) noexcept;

/// Deterministic generator. The engine (mt19937_64) is fully specified by the
/// standard and all conversions below are done here rather than through
/// <random> distributions, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 bits of resolution; exact integer scaling.
    double uniform();
    float uniform(float lo, float hi);
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    bool coin() { return (next_u64() >> 63) != 0; }
    /// Standard normal via Box–Muller.
    double normal();
    /// N(0, stddev²) truncated at ±2·stddev by rejection.
    float truncated_normal(float stddev);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace elytra
