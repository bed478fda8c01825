#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace dact {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Mixes a global seed with a stream label (e.g. a tensor name) into an
// independent sub-seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + stream);
    splitmix64(s);
    return splitmix64(s);
}

inline uint64_t mix_seed(uint64_t seed, std::string_view name) {
    return mix_seed(seed, fnv1a64(name));
}

// xoshiro256++ with a fully serializable 4-word state. std::normal_distribution
// is implementation-defined, so the Gaussian sampler is a fixed Box-Muller
// transform; every draw consumes exactly two engine outputs, which keeps the
// stream position well-defined for checkpoint resume.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Lemire's multiply-shift; slight bias is
    // irrelevant at n << 2^64 and the mapping stays deterministic.
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    double normal() {
        // u1 in (0, 1] so the log is finite.
        const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // N(0, std^2) truncated at +-2 std, the initializer convention.
    double trunc_normal(double std_dev) {
        double z = normal();
        while (std::abs(z) > 2.0) z = normal();
        return z * std_dev;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent child stream.
    Rng split(uint64_t stream) { return Rng(mix_seed(next_u64(), stream)); }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> s_{};
};

}  // namespace dact
