#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vf {

// Seed derivation: every component draws from its own stream, derived from
// the root seed and a component name so that adding a consumer never shifts
// another consumer's numbers.
//
//   derive_seed(root, name) = splitmix64(root ^ fnv1a64(name))
std::uint64_t fnv1a64(std::string_view bytes) noexcept;
std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t root, std::string_view component) noexcept;

// Portable random stream. std::mt19937_64 is fully specified by the standard;
// the distributions below are written out so that draws are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller (one draw per call, no caching).
  double normal();

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace vf
