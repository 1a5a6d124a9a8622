#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace mapd {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace detail

// Deterministic, platform-independent random stream (splitmix64 core).
// std::mt19937 distributions are avoided on purpose: their output is not
// pinned across standard library implementations.
class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : state_(seed) {
        // burn a couple of outputs so nearby seeds decorrelate
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        // rejection sampling keeps the distribution exact
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(uniform_index(
                        static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    // standard normal via Box-Muller (cached second value)
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925287 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = uniform_index(i);
            std::swap(first[i - 1], first[j]);
        }
    }

  private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Counter-based seed fan-out: child streams are independent of each other
// and of how many siblings were derived before them.
class SeedSplitter {
  public:
    explicit SeedSplitter(std::uint64_t root) : root_(root) {}

    std::uint64_t child(std::string_view name) const {
        std::uint64_t s = root_ ^ detail::fnv1a64(name);
        return detail::splitmix64(s);
    }

    std::uint64_t child(std::string_view name, std::uint64_t index) const {
        std::uint64_t s = root_ ^ detail::fnv1a64(name) ^ (0x9E3779B97F4A7C15ULL * (index + 1));
        return detail::splitmix64(s);
    }

    SeedSplitter split(std::string_view name) const { return SeedSplitter(child(name)); }

    std::uint64_t root() const { return root_; }

  private:
    std::uint64_t root_;
};

}  // namespace mapd
