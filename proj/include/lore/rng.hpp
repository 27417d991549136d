#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace lore {

// Deterministic keyed random streams. Standard-library distributions are
// not bit-pinned across implementations, so stochastic merge methods and
// the synthetic generator draw from these instead. Streams are keyed by
// (seed, labels, indices) so per-parameter work can run on any thread
// without changing results.

namespace detail {

inline constexpr std::uint64_t splitmix64_next(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

/// splitmix64 generator with hash-combined sub-stream keys.
class RandomStream {
  public:
    explicit RandomStream(std::uint64_t seed) : state_(seed) {
        // decorrelate adjacent integer seeds
        (void)detail::splitmix64_next(state_);
    }

    /// Derive an independent stream from key parts.
    RandomStream fork(std::uint64_t part) const {
        RandomStream s(*this);
        s.mix(part);
        return s;
    }
    RandomStream fork(std::string_view part) const { return fork(detail::fnv1a64(part)); }
    template <typename First, typename Second, typename... Rest>
    RandomStream fork(First first, Second second, Rest... rest) const {
        return fork(first).fork(second, rest...);
    }

    std::uint64_t next_u64() { return detail::splitmix64_next(state_); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via the polar (Marsaglia) method.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double factor = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * factor;
        have_spare_ = true;
        return u * factor;
    }

  private:
    void mix(std::uint64_t part) {
        state_ ^= part + 0x9e3779b97f4a7c15ULL + (state_ << 6) + (state_ >> 2);
        (void)detail::splitmix64_next(state_);
    }

    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace lore
