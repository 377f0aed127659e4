// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/error.hpp"

namespace fedsim {

// Every random decision in the library flows through Rng so that a run is a
// pure function of its seeds. The engine is std::mt19937_64 (its raw output
// is pinned by the standard); the samplers below are hand-rolled because the
// standard-library distributions are implementation-defined. The exact
// algorithms are part of the file-format-level contract: external re-runs of
// a documented sampling recipe must reproduce draws bit for bit.
//
//   uniform():      53-bit mantissa draw, (next_u64() >> 11) * 2^-53.
//   uniform_open(): same but mapped to (0,1): rejects exact zeros.
//   normal():       Box-Muller, sqrt(-2 ln u1) * cos(2 pi u2) with u1,u2
//                   drawn in that order from uniform_open()/uniform().
//   gamma(a):       Marsaglia-Tsang squeeze for a >= 1; for a < 1 it draws
//                   g ~ gamma(a+1) first, then u ~ uniform_open(), and
//                   returns g * u^(1/a).
//   uniform_int(n): threshold rejection on next_u64() to avoid modulo bias.
//   shuffle:        Fisher-Yates from the back, j = uniform_int(i+1).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in (0, 1).
    double uniform_open() {
        double u;
        do {
            u = uniform();
        } while (u == 0.0);
        return u;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw ValueError("uniform_int: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t u;
        do {
            u = next_u64();
        } while (u >= limit);
        return u % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller.
    double normal() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Gamma(alpha, 1) via Marsaglia-Tsang, with the u^(1/alpha) boost for
    /// alpha < 1.
    double gamma(double alpha) {
        if (!(alpha > 0.0)) throw ValueError("gamma: alpha must be positive");
        if (alpha < 1.0) {
            const double g = gamma(alpha + 1.0);
            const double u = uniform_open();
            return g * std::pow(u, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            const double x = normal();
            const double t = 1.0 + c * x;
            if (t <= 0.0) continue;
            const double v = t * t * t;
            const double u = uniform_open();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices drawn uniformly from [0, n), returned in ascending
    /// order (partial Fisher-Yates over the index vector).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw ValueError("sample_without_replacement: k exceeds population");
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(uniform_int(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        return idx;
    }

private:
    std::mt19937_64 engine_;
};

/// SplitMix64 finalizer; the mixing primitive for stream derivation.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// FNV-1a over raw bytes, used to fold string identifiers (client ids) into
/// stream derivations.
constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Stream tags. Seeds for distinct purposes are derived by folding a tag and
// any indices into the master seed, so that per-(round, client) streams are
// independent of execution order: serial and parallel schedules consume
// identical bits.
namespace streams {
inline constexpr std::uint64_t kSynthetic = 0x731;
inline constexpr std::uint64_t kFold = 0x732;
inline constexpr std::uint64_t kDirichlet = 0x733;
inline constexpr std::uint64_t kMissingModality = 0x734;
inline constexpr std::uint64_t kMissingLabel = 0x735;
inline constexpr std::uint64_t kTransition = 0x736;
inline constexpr std::uint64_t kErroneousLabel = 0x737;
inline constexpr std::uint64_t kModelInit = 0x738;
inline constexpr std::uint64_t kCohort = 0x739;
inline constexpr std::uint64_t kClient = 0x73A;
} // namespace streams

inline std::uint64_t derive_stream(std::uint64_t master, std::uint64_t tag,
                                   std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t s = mix64(master);
    s = mix64(s ^ mix64(tag));
    s = mix64(s ^ mix64(a));
    s = mix64(s ^ mix64(b));
    return s;
}

} // namespace fedsim
