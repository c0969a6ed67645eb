#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace metashift {

namespace detail {

// SplitMix64 finalizer (Vigna). Used for seeding and stream derivation.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl64(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace detail

// Deterministic, splittable random generator: xoshiro256++ seeded through
// SplitMix64. All draws are fully specified here (no std::*_distribution),
// so streams reproduce bit-for-bit across runs and platforms.
//
// Splitting: child(tag) derives an independent stream from the parent's
// construction seed and the tag alone, so the derived stream does not
// depend on how much the parent has been consumed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = detail::splitmix64_next(sm);
    }

    std::uint64_t seed() const { return seed_; }

    Rng child(std::uint64_t tag) const {
        std::uint64_t sm = seed_ ^ 0x6a09e667f3bcc909ULL;
        std::uint64_t mixed = detail::splitmix64_next(sm) ^ (tag * 0x9e3779b97f4a7c15ULL + 1);
        return Rng(detail::splitmix64_next(mixed));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl64(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Unbiased integer in [0, bound) by rejection.
    std::uint64_t next_below(std::uint64_t bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Standard normal via Box-Muller; consumes two uniforms per pair.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - next_double();  // (0, 1]
        const double u2 = next_double();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

private:
    std::array<std::uint64_t, 4> state_{};
    std::uint64_t seed_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace metashift
