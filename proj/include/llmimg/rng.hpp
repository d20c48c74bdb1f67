#pragma once

// Deterministic, platform-stable pseudo-randomness.
//
// Everything random in this project (mock weights, context embeddings,
// replica draws, test fixtures) is derived from splitmix64 so that a given
// seed reproduces the same bytes on every platform and at every call order.
// Gaussian variates come from Box-Muller over 53-bit uniforms; the only
// platform dependence left is libm rounding in log/sqrt/sin/cos, which is
// sub-ulp on conforming implementations.

#include <cmath>
#include <cstdint>
#include <string_view>

namespace llmimg {

struct SplitMix64 {
    uint64_t state;

    explicit SplitMix64(uint64_t seed) : state(seed) {}

    uint64_t next() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform double in (0, 1]; never 0, so log() is always finite.
    double next_unit() {
        return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
    }

    // Uniform integer in [0, n) via a 128-bit multiply; deterministic,
    // rejection-free (bias ~ n / 2^64 is irrelevant at our n).
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }
};

// Domain separation: derive an independent stream seed from (seed, tag).
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
    SplitMix64 s(seed ^ (tag + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2)));
    s.next();
    return s.next();
}

class GaussianStream {
  public:
    explicit GaussianStream(uint64_t seed) : uniform_(seed) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_.next_unit();
        const double u2 = uniform_.next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * kPi * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

  private:
    static constexpr double kPi = 3.14159265358979323846;
    SplitMix64 uniform_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// FNV-1a 64-bit; used for context hashing, prompt digests and file digests.
inline uint64_t fnv1a64(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

}  // namespace llmimg
