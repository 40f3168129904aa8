#pragma once

#include <cstdint>
#include <limits>

namespace pssl {

/// Counter-based generator: output k is splitmix64(seed + k * kGamma).
/// Streams are forked by hashing (seed, worker_id), so any worker can
/// rebuild its stream from the parent seed alone.
class Rng {
public:
    using result_type = std::uint64_t;
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()() { return next_u64(); }

    std::uint64_t next_u64();
    /// [0, 1) with 53 random bits.
    double next_double();
    /// Uniform on [lo, hi); lo >= hi is a parameter error.
    double uniform(double lo, double hi);
    /// Uniform on [lo, hi], degenerate ranges allowed (returns lo).
    double uniform_closed_range(double lo, double hi);
    /// Uniform integer in [0, n), unbiased.
    std::uint64_t below(std::uint64_t n);
    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t integer(std::int64_t lo, std::int64_t hi);
    double normal();
    /// Normal truncated to [-2 sigma, 2 sigma] by resampling.
    double truncated_normal(double sigma);
    bool bernoulli(double p);

    Rng fork(std::uint64_t worker_id) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace pssl
