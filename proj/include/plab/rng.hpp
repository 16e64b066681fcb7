#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace plab {

// Deterministic random source. All sampling is defined in terms of raw
// mt19937_64 draws so that streams are bit-reproducible across standard
// library implementations (std::normal_distribution et al. are not).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1) with 53 bits of precision.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller. Consumes exactly two uniforms per call
    // (no cached spare) so the draw sequence is position-independent.
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n). Lemire multiply-shift; bias is O(n / 2^64).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(gen_()) * n) >> 64);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

private:
    std::mt19937_64 gen_;
};

namespace detail {
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (const char c : s) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}
}  // namespace detail

// Named substream derivation. Every source of randomness in the project is a
// substream of one root seed: derive(root, "init"), derive(root, "task", k),
// derive(root, "probe"), derive(root, "bandit"), ...
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
    return detail::splitmix64(root ^ detail::fnv1a(label));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                                 std::uint64_t index) {
    return detail::splitmix64(derive_seed(root, label) + 0x632be59bd9b4e019ull * (index + 1));
}

inline Rng derive_rng(std::uint64_t root, std::string_view label) {
    return Rng(derive_seed(root, label));
}

inline Rng derive_rng(std::uint64_t root, std::string_view label, std::uint64_t index) {
    return Rng(derive_seed(root, label, index));
}

}  // namespace plab
