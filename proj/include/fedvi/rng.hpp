#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fedvi {

using Rng = std::mt19937_64;

/// Counter-derived generator: the same (seed, ids...) always yields the same
/// stream, independent of how many other streams were drawn before it.
Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> ids);

std::uint64_t splitmix64(std::uint64_t x);

std::vector<double> standard_normal(std::size_t n, Rng& rng);

// Stream tags used across the simulator.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kCohort = 2;
inline constexpr std::uint64_t kClient = 3;
inline constexpr std::uint64_t kData = 4;
inline constexpr std::uint64_t kBound = 5;
}  // namespace stream

}  // namespace fedvi
