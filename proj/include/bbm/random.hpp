#pragma once

#include <cstdint>

namespace bbm {

namespace detail {

// Stafford "mix13" finaliser of SplitMix64: a bijective avalanche on 64 bits.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline constexpr std::uint64_t GOLDEN_GAMMA = 0x9e3779b97f4a7c15ull;

// Gamma hygiene from SplittableRandom: keep the increment odd and reject
// values whose bit transitions are too regular.
inline constexpr std::uint64_t fix_gamma(std::uint64_t g) {
    g |= 1ull;
    const std::uint64_t flips = g ^ (g >> 1);
    int pop = 0;
    for (int i = 0; i < 64; ++i) pop += int((flips >> i) & 1ull);
    return (pop < 24) ? (g ^ 0xaaaaaaaaaaaaaaaaull) : g;
}

} // namespace detail

/// Counter-based splittable random stream.
///
/// A stream is a 128-bit key (base, gamma) plus a draw counter; output n is
/// mix64(base + n*gamma). The same (master seed, derivation path) always
/// yields the same sequence no matter when or on which worker it is drawn,
/// and child streams derived with distinct keys are statistically
/// independent. Streams are value types: copy freely, never share.
class RandomStream {
public:
    RandomStream() : RandomStream(0) {}

    explicit RandomStream(std::uint64_t master_seed) {
        base_  = detail::mix64(master_seed ^ 0x5851f42d4c957f2dull);
        gamma_ = detail::fix_gamma(detail::mix64(base_ ^ detail::GOLDEN_GAMMA));
        ctr_   = 0;
    }

    /// Derive an independent child stream; `key` is one step of the
    /// derivation path (replica index, child index, purpose tag, ...).
    RandomStream child(std::uint64_t key) const {
        RandomStream c;
        const std::uint64_t h = detail::mix64(key ^ gamma_);
        c.base_  = detail::mix64(base_ + (h ^ detail::GOLDEN_GAMMA));
        c.gamma_ = detail::fix_gamma(detail::mix64(c.base_ ^ h));
        c.ctr_   = 0;
        return c;
    }

    std::uint64_t next_u64() { return detail::mix64(base_ + gamma_ * ++ctr_); }

    /// Uniform on the open interval (0,1); never returns 0 or 1, so it is
    /// safe under log().
    double next_unit() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1p-53;
    }

    /// One-shot value addressed by (key, index): does not advance the
    /// stream. Used where draws must be indexable rather than sequential.
    double unit_at(std::uint64_t key, std::uint64_t index) const {
        const std::uint64_t z =
            detail::mix64(detail::mix64(base_ ^ key) + gamma_ * (index + 1));
        return (static_cast<double>(z >> 11) + 0.5) * 0x1p-53;
    }

    std::uint64_t key_lo() const { return base_; }
    std::uint64_t key_hi() const { return gamma_; }

private:
    std::uint64_t base_ = 0;
    std::uint64_t gamma_ = 1;
    std::uint64_t ctr_ = 0;
};

} // namespace bbm
