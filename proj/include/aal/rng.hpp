#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "aal/error.hpp"

namespace aal {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seeded random stream. Draws are produced by std::mt19937_64 (whose output
/// sequence is fixed by the standard); the distributions below are implemented
/// here so the same seed gives the same draws on every standard library.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t position() const { return position_; }

    std::uint64_t next_u64() {
        ++position_;
        return engine_();
    }

    /// Uniform real in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi], both ends inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        require(lo <= hi, "uniform_int: empty range");
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) {
            return static_cast<std::int64_t>(next_u64());
        }
        // Rejection sampling on the largest multiple of span.
        const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % span);
        std::uint64_t r;
        do {
            r = next_u64();
        } while (r >= limit);
        return lo + static_cast<std::int64_t>(r % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Box-Muller; one value per call keeps the stream position simple.
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    /// Independent child stream; the parent is not advanced.
    RngStream substream(std::uint64_t index) const {
        return RngStream(splitmix64(seed_ ^ splitmix64(index + 0x5851f42d4c957f2dULL)));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// `count` distinct values from [0, n), in random order.
    std::vector<int> sample_without_replacement(int n, int count) {
        require(count >= 0 && count <= n, "sample_without_replacement: count exceeds population");
        if (static_cast<long long>(count) * 8 < n) {
            // Sparse draw: rejection against the picks so far.
            std::vector<int> picked;
            picked.reserve(static_cast<std::size_t>(count));
            while (static_cast<int>(picked.size()) < count) {
                const auto v = static_cast<int>(uniform_int(0, n - 1));
                if (std::find(picked.begin(), picked.end(), v) == picked.end()) {
                    picked.push_back(v);
                }
            }
            return picked;
        }
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            idx[static_cast<std::size_t>(i)] = i;
        }
        // Partial Fisher-Yates.
        for (int i = 0; i < count; ++i) {
            const auto j = static_cast<int>(uniform_int(i, n - 1));
            std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        }
        idx.resize(static_cast<std::size_t>(count));
        return idx;
    }

private:
    std::uint64_t seed_;
    std::uint64_t position_ = 0;
    std::mt19937_64 engine_;
};

}  // namespace aal
