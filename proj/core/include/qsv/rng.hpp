#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace qsv {

namespace detail {
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}
}  // namespace detail

/// FNV-1a 64-bit hash, used to derive stream ids from parameter names.
inline uint64_t hash_name(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Counter-based random generator. A draw is a pure function of
/// (seed, stream, counter), so identical coordinates yield identical values
/// no matter how calls interleave across frames, batch items, or threads.
class Rng {
public:
    Rng(uint64_t seed, uint64_t stream, uint64_t counter = 0)
        : seed_(seed), stream_(stream), counter_(counter) {}

    uint64_t seed() const { return seed_; }
    uint64_t stream() const { return stream_; }
    uint64_t counter() const { return counter_; }

    /// A generator over the same seed with a different stream id.
    Rng fork(uint64_t stream) const { return Rng(seed_, stream, 0); }
    Rng fork(std::string_view name) const { return fork(hash_name(name)); }

    uint64_t next_u64() { return word(counter_++); }

    /// Uniform on the open interval (0, 1); never returns 0 or 1 exactly.
    double next_uniform() {
        const uint64_t x = next_u64() >> 11;  // 53 bits
        return (static_cast<double>(x) + 0.5) * 0x1p-53;
    }

    /// Uniform on [lo, hi).
    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_uniform();
    }

    /// Integer uniform on [0, n). n must be > 0.
    uint64_t next_below(uint64_t n) {
        // 64-bit multiply-shift; bias is negligible for the n used here.
        return static_cast<uint64_t>(
            (static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller. Consumes two counters per draw.
    double next_gaussian() {
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Standard Gumbel: -log(-log u), u ~ U(0,1) open.
    double next_gumbel() { return -std::log(-std::log(next_uniform())); }

private:
    uint64_t word(uint64_t counter) const {
        uint64_t x = detail::splitmix64(seed_ ^ 0x2545f4914f6cdd1dull);
        x = detail::splitmix64(x ^ stream_);
        return detail::splitmix64(x ^ counter);
    }

    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_;
};

}  // namespace qsv
