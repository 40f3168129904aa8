#include "pssl/rng.hpp"

#include <cmath>
#include <numbers>

#include "pssl/errors.hpp"

namespace pssl {

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() {
    ++counter_;
    return mix64(seed_ + counter_ * kGamma);
}

double Rng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    if (!(lo < hi)) throw ParameterError("rng uniform requires lo < hi");
    return lo + (hi - lo) * next_double();
}

double Rng::uniform_closed_range(double lo, double hi) {
    if (lo == hi) return lo;
    return uniform(lo, hi);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw ParameterError("rng below(0)");
    // Rejection on the top of the range removes modulo bias.
    const std::uint64_t limit = max() - (max() % n);
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

std::int64_t Rng::integer(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw ParameterError("rng integer requires lo <= hi");
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
}

double Rng::normal() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double sigma) {
    for (;;) {
        const double z = normal();
        if (std::abs(z) <= 2.0) return z * sigma;
    }
}

bool Rng::bernoulli(double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return next_double() < p;
}

Rng Rng::fork(std::uint64_t worker_id) const {
    return Rng(mix64(mix64(seed_) ^ mix64(worker_id + 0x632BE59BD9B4E019ULL)));
}

}  // namespace pssl
