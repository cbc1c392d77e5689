#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace sb {

// splitmix64 step; used for seeding and stream derivation.
inline std::uint64_t splitmix64_next(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// FNV-1a over arbitrary bytes; stable across platforms, used for tag mixing
// and content hashing (config hashes, checkpoint checksums).
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(s.data(), s.size(), h);
}

// Derives a substream seed from a root seed, a purpose tag, and up to two
// integer qualifiers (step index, stream id, ...). Same inputs -> same seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag,
                              std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t x = seed ^ fnv1a(tag);
    std::uint64_t h = splitmix64_next(x);
    x ^= a + 0x9e3779b97f4a7c15ULL;
    h ^= splitmix64_next(x);
    x ^= b + 0xd1b54a32d192ed03ULL;
    h ^= splitmix64_next(x);
    return h;
}

// xoshiro256++ with all distribution transforms spelled out in-repo, so
// every draw is reproducible bit-for-bit from the engine state alone.
class Rng {
public:
    using State = std::array<std::uint64_t, 4>;

    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t x = seed;
        for (auto& w : state_) w = splitmix64_next(x);
    }

    static Rng from_stream(std::uint64_t seed, std::string_view tag,
                           std::uint64_t a = 0, std::uint64_t b = 0) {
        return Rng(mix_seed(seed, tag, a, b));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller. No cached spare: the engine state is
    // the entire RNG state, which keeps checkpoints exact.
    double normal() {
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    // Uniform integer in [0, n). Lemire multiply-shift; the modulo bias at
    // 64 bits is negligible for the small n used here.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

    bool operator==(const Rng& other) const { return state_ == other.state_; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    State state_{};
};

}  // namespace sb
