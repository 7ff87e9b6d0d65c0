#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace freeseg {

// xoshiro256++ with splitmix64 seeding. Hand-rolled so that streams are
// bit-reproducible across compilers and standard libraries; std::*
// distributions are implementation-defined and would break checkpoint
// resume guarantees.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : s_) s = splitmix64(x);
    }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
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
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi], inclusive. Rejection-free Lemire-style
    // reduction is overkill here; modulo bias is < 2^-32 for our ranges but
    // we still debias for exactness of the chi-square sanity test.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return lo + static_cast<int64_t>(v % span);
    }

    // Standard normal via Box-Muller. No spare caching, so the full RNG
    // state is exactly the four words below (matters for checkpoint resume).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent deterministic stream, e.g. one per scene.
    Rng fork(uint64_t stream) const {
        uint64_t x = s_[0] ^ (0x6a09e667f3bcc909ull + stream * 0x2545f4914f6cdd1dull);
        Rng out(0);
        for (auto& s : out.s_) s = splitmix64(x);
        return out;
    }

    std::array<uint64_t, 4> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void set_state(const std::array<uint64_t, 4>& st) {
        for (int i = 0; i < 4; ++i) s_[i] = st[i];
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> s_{};
};

} // namespace freeseg
