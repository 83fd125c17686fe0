#pragma once

#include <cmath>
#include <cstdint>

namespace volt3d {

// Strong type for RNG seeds. Identical seed + identical draw sequence gives a
// bitwise identical stream on every platform.
struct Seed {
    std::uint64_t value = 0;
};

// Deterministic generator: xoshiro256** seeded through splitmix64, normals via
// the trigonometric Box-Muller transform (one spare cached, no rejection).
// All draws happen in double precision; float tensors truncate afterwards, so
// the stream is reproducible across dtypes of downstream consumers.
class Rng {
public:
    explicit Rng(Seed seed) {
        std::uint64_t x = seed.value;
        for (auto& word : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            word = z ^ (z >> 31);
        }
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1), 53 mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal draw.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Derives an independent stream for item `index` of a keyed collection, so
// sample i is a function of (seed, i) only, independent of generation order.
inline Seed subseed(Seed base, std::uint64_t index) {
    std::uint64_t z = base.value ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Seed{z ^ (z >> 31)};
}

}  // namespace volt3d
