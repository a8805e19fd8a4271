#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace refgen {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z          = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z          = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
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

/*
 * xoshiro256** seeded through splitmix64. All sampling goes through this
 * class; std::random distributions are implementation-defined and would
 * break byte-identical reruns, so they are not used anywhere.
 *
 * Substreams: child(tag) derives an independent stream from (seed, tag),
 * which is how one root seed fans out to stages, samples, and steps.
 */
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t sm = seed;
        for (auto& s : s_)
            s = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t      = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0, 1)
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), n >= 1
    int64_t uniform_int(int64_t n) {
        return (int64_t)(((__uint128_t)next_u64() * (uint64_t)n) >> 64);
    }

    bool coin(double p) { return uniform() < p; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r  = std::sqrt(-2.0 * std::log(u1));
        double th = 6.283185307179586476925286766559 * u2;
        spare_     = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    Rng child(std::string_view tag) const {
        uint64_t m = seed_ ^ (0x9e3779b97f4a7c15ULL + fnv1a64(tag));
        return Rng(splitmix64(m));
    }

    Rng child(uint64_t n) const {
        uint64_t m = seed_ ^ (0xd1b54a32d192ed03ULL + n * 0x2545f4914f6cdd1dULL);
        return Rng(splitmix64(m));
    }

    uint64_t seed() const { return seed_; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t seed_;
    uint64_t s_[4];
    double spare_    = 0.0;
    bool has_spare_ = false;
};

}  // namespace refgen
