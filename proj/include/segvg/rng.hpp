#pragma once

#include <cstdint>
#include <cmath>
#include <string>

namespace segvg {

/// Splittable counter-based generator. Every stream is fully determined by
/// (seed, split path), so runs are bit-reproducible regardless of call order
/// between independent streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x5851f42d4c957f2dULL)) {}

  /// Derives an independent child stream. Children with different tags never
  /// collide with each other or with the parent.
  Rng split(std::uint64_t tag) const {
    Rng child(0);
    child.key_ = mix(key_ ^ mix(tag + 0x9e3779b97f4a7c15ULL));
    child.counter_ = 0;
    return child;
  }

  Rng split(const std::string& tag) const {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : tag) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return split(h);
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  int range_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  /// Box-Muller; consumes two uniforms per call.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::uint64_t j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace segvg
