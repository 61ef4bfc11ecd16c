#include "vf/error.hpp"
#include "vf/rng.hpp"

#include <cmath>
#include <numbers>

namespace vf {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Degenerate: return "degenerate-input";
    case ErrorKind::Id: return "id";
    case ErrorKind::Length: return "length";
    case ErrorKind::Cache: return "cache";
    case ErrorKind::Format: return "format";
    case ErrorKind::Duplicate: return "duplicate";
    case ErrorKind::SingleToken: return "single-token";
    case ErrorKind::Pattern: return "pattern";
    case ErrorKind::Alignment: return "alignment";
    case ErrorKind::Config: return "config";
    case ErrorKind::Training: return "training";
    case ErrorKind::Input: return "input";
  }
  return "unknown";
}

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Usage:
    case ErrorKind::Config:
      return 1;
    case ErrorKind::Numeric:
    case ErrorKind::Training:
      return 3;
    default:
      return 2;
  }
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view component) noexcept {
  return splitmix64(root ^ fnv1a64(component));
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace vf
