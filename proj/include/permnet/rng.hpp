#pragma once

#include <cstdint>
#include <vector>

namespace permnet {

/// Deterministic 64-bit generator (splitmix64). Pinned here so dataset
/// generation and parameter init do not depend on the standard library's
/// implementation-defined distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Unbiased draw from [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling over the largest multiple of n
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    int below_int(int n) { return static_cast<int>(below(static_cast<std::uint64_t>(n))); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Uniform random permutation of 0..n-1.
    std::vector<int> permutation(int n) {
        std::vector<int> p(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
        shuffle(p);
        return p;
    }

private:
    std::uint64_t state_;
};

/// Per-example seed derivation: a pure function of (master, index), so
/// generation order never matters.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) {
    Rng r(master ^ (0xD1B54A32D192ED03ull * (index + 1)));
    return r.next_u64();
}

} // namespace permnet
