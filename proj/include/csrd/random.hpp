#pragma once

#include <cstdint>
#include <random>

namespace csrd {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Hierarchical seed derivation (run -> member -> patch, run -> iteration ...).
/// Children depend only on the parent key and the child index, so work can be
/// reordered or resumed without changing any draw.
class SeedStream {
public:
    explicit SeedStream(std::uint64_t seed = 0) : key_(splitmix64(seed)) {}

    SeedStream child(std::uint64_t index) const {
        SeedStream s;
        s.key_ = splitmix64(key_ ^ splitmix64(index + 0x632be59bd9b4e019ULL));
        return s;
    }
    Rng engine() const { return Rng(key_); }
    std::uint64_t key() const noexcept { return key_; }

private:
    std::uint64_t key_ = 0;
};

} // namespace csrd
