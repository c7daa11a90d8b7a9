#pragma once

#include <cstdint>
#include <random>

namespace sepctl {

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent stream `stream` derived from a user-facing seed.
inline Engine make_engine(std::uint64_t seed, std::uint64_t stream) {
    return Engine(splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x5bd1e995ULL)));
}

// Stream identifiers used across the library.
namespace streams {
inline constexpr std::uint64_t initial_state = 1;
inline constexpr std::uint64_t noise = 2;
inline constexpr std::uint64_t noise_resample = 3;
inline constexpr std::uint64_t test_data = 4;
}  // namespace streams

}  // namespace sepctl
