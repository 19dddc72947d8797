#pragma once

#include <cmath>
#include <cstdint>

#include "mdsep/tensor.hpp"

namespace mdsep {

// xoshiro256++ seeded through splitmix64. Fixed algorithm so that identical
// seeds yield identical streams on every platform and build.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t s = seed;
        for (auto& word : state_) word = splitmix64(s);
        have_cached_normal_ = false;
    }

    std::uint64_t seed() const { return seed_; }

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

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n). Modulo bias is negligible for the n used here but we
    // reject to keep the stream unbiased and fully specified.
    std::uint64_t next_below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; both outputs of each transform are used.
    double normal() {
        if (have_cached_normal_) {
            have_cached_normal_ = false;
            return cached_normal_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        cached_normal_ = r * std::sin(theta);
        have_cached_normal_ = true;
        return r * std::cos(theta);
    }

    // Derive an independent generator; used to give each dataset split and
    // epoch its own stream.
    Rng fork(std::uint64_t stream_id) const {
        std::uint64_t s = seed_ ^ (0x9e3779b97f4a7c15ull * (stream_id + 1));
        return Rng(splitmix_once(s));
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& s) {
        std::uint64_t z = (s += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static std::uint64_t splitmix_once(std::uint64_t s) { return splitmix64(s); }

    std::uint64_t seed_;
    std::uint64_t state_[4];
    bool have_cached_normal_;
    double cached_normal_ = 0.0;
};

// He-normal initialization: zero mean, stddev sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_init(const std::vector<std::size_t>& shape, std::size_t fan_in, Rng& rng) {
    if (fan_in == 0) throw ConfigError("he_init: fan_in must be >= 1");
    Tensor<T> t(shape);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(stddev * rng.normal());
    return t;
}

}  // namespace mdsep
