#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace odelearn {

/// Purpose tags for deriving independent random streams from one run seed.
/// Keeps every consumer (IC sampling, validation sets, window offsets, ...)
/// on its own reproducible stream regardless of what the others draw.
enum class StreamPurpose : std::uint64_t {
  NetInit = 1,
  TrainIcs = 2,
  Validation = 3,
  Windows = 4,
  DatasetIcs = 5,
  CoordPick = 6,
  Generic = 7,
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

/// Deterministic random stream. Wraps std::mt19937_64 (whose raw output is
/// pinned by the standard) and derives doubles from the raw bits directly, so
/// sequences are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  static Rng stream(std::uint64_t run_seed, StreamPurpose purpose,
                    std::uint64_t index = 0) {
    std::uint64_t s = detail::splitmix64(run_seed);
    s = detail::splitmix64(s ^ (static_cast<std::uint64_t>(purpose) * 0xd6e8feb86659fd93ULL));
    s = detail::splitmix64(s ^ (index * 0xa3b195354a39b70dULL));
    return Rng(s);
  }

  std::uint64_t raw() { return gen_(); }

  /// Uniform on [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t x = gen_();
    while (x >= limit) x = gen_();
    return x % n;
  }

 private:
  std::mt19937_64 gen_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace odelearn
