#pragma once

#include <cmath>
#include <cstdint>

#include "lamo/tensor.hpp"

namespace lamo {

/// Counter-based generator: output = finalize(key, counter). The same
/// (seed, stream) pair yields the same draw sequence on every platform;
/// streams are independent and cheap to fork per sample / per parameter.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key1_(mix(mix(seed) ^ (0x9E3779B97F4A7C15ULL * (stream + 1)))), key2_(mix(key1_ ^ 0xD1B54A32D192ED03ULL)) {}

  std::uint64_t next_u64() {
    std::uint64_t v = mix(counter_++ + key1_);
    return mix(v ^ key2_);
  }

  /// Uniform double in [0, 1) with 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + next_double() * (hi - lo); }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal() {
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  template <class S>
  void fill_uniform(Tensor<S>& t, double lo, double hi) {
    for (S& v : t.data) v = static_cast<S>(uniform(lo, hi));
  }

  template <class S>
  void fill_normal(Tensor<S>& t, double mean = 0.0, double stddev = 1.0) {
    for (S& v : t.data) v = static_cast<S>(mean + stddev * normal());
  }

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key1_;
  std::uint64_t key2_;
  std::uint64_t counter_ = 0;
};

/// Seeded in-place Fisher-Yates shuffle.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace lamo
