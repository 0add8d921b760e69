#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "mccl/common.hpp"

namespace mccl {

/// Deterministic random stream. Wraps std::mt19937_64 but maps bits to
/// distributions by hand so sequences do not depend on the standard
/// library's (implementation-defined) distribution code.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [lo, hi] inclusive, via rejection-free modulo of a
  /// 64-bit draw (bias < 2^-50 for the small ranges used here).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(eng_() % span);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Standard normal via Box-Muller; the spare value is discarded so the
  /// draw count per call is fixed.
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::mt19937_64 eng_;
};

// Purpose-split stream tags: every consumer derives its own seed with
// mix64(master, tag, ...indices), so adding a consumer never shifts another
// stream's sequence.
namespace stream {
inline constexpr std::uint64_t kScene = 0x5ce9e;
inline constexpr std::uint64_t kSplit = 0x59117;
inline constexpr std::uint64_t kInit = 0x1417;
inline constexpr std::uint64_t kOrder = 0x02de2;
inline constexpr std::uint64_t kGeoLabeled = 0x6e01;
inline constexpr std::uint64_t kGeoUnlabeled = 0x6e02;
inline constexpr std::uint64_t kPhoto = 0x9607;
inline constexpr std::uint64_t kMask = 0xa5c;
inline constexpr std::uint64_t kNoise = 0x01ce;
}  // namespace stream

}  // namespace mccl
