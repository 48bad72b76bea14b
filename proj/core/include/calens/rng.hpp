#pragma once

#include <cmath>
#include <cstdint>

namespace calens {

// SplitMix64 output mix (Steele, Lea & Flood 2014).
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Counter-based generator: a SplitMix64 stream. State advances by the golden
// gamma and each output is an independent bijective mix of the counter, so
// identical seeds give identical sequences on every platform. All sampling in
// the library (uniform, normal, lognormal) goes through this class; nothing
// uses std::<random> distributions, whose outputs differ across standard
// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Independent substream for (seed, stream). Used to give replications,
  // folds and per-draw batches disjoint deterministic randomness.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(mix64(mix64(seed + 0x9E3779B97F4A7C15ULL) ^
                     mix64(stream + 0x7F4A7C15D1B54A32ULL)));
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix64(state_);
  }

  // Uniform on the open interval (0,1); 53-bit resolution.
  double uniform01() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  int uniform_int(int n) {  // 0..n-1
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace calens
