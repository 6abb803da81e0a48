#pragma once

#include <cstdint>
#include <string_view>

namespace stdai {

// FNV-1a over bytes; used for seed derivation and config hashing.
std::uint64_t fnv1a64(std::string_view bytes,
                      std::uint64_t h = 14695981039346656037ull);

// xoshiro256++ seeded through splitmix64. Self-contained so that streams are
// bit-reproducible across platforms and standard-library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    double uniform();                         // [0, 1)
    double uniform(double lo, double hi);     // [lo, hi)
    int uniform_int(int lo, int hi);          // inclusive bounds
    double normal();                          // mean 0, sd 1 (Box-Muller)

    // Independent stream derived from this generator's seed and a label.
    // Forking does not advance this generator.
    Rng fork(std::string_view label) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t state_[4];
    std::uint64_t seed_ = 0;
};

}  // namespace stdai
