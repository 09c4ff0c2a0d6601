#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace cgfed {

// Stream derivation and sampling primitives are pinned here so that every
// consumer (simulator, privacy layer, partitioner) is bit-reproducible from
// a seed alone. Only the mt19937_64 engine from <random> is used; all
// distributions are implemented below because the standard leaves
// distribution algorithms implementation-defined.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Decorrelated child seed from a base seed and up to three stream tags
// (e.g. round, client id, purpose).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a,
                              std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  h = splitmix64(h ^ c);
  return h;
}

class Rng {
public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform double in [0, 1): top 53 bits of one engine draw.
  double uniform01() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_below: n == 0");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t x = eng_();
      if (x >= threshold) return x % n;
    }
  }

  // Standard normal via Box-Muller. Consumes exactly two uniform draws and
  // discards the sine branch, so the draw sequence is trivial to replicate.
  double normal() {
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Gamma(alpha, 1) via Marsaglia-Tsang; alpha < 1 uses the boost
  // g(alpha) = g(alpha + 1) * (1 - U)^(1/alpha).
  double gamma(double alpha) {
    if (alpha <= 0.0) throw std::invalid_argument("gamma: alpha <= 0");
    if (alpha < 1.0) {
      const double g = gamma(alpha + 1.0);
      const double u = 1.0 - uniform01();  // (0, 1]
      return g * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      const double x = normal();
      const double t = 1.0 + c * x;
      if (t <= 0.0) continue;
      const double v = t * t * t;
      const double u = uniform01();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Fisher-Yates over [first, last) using uniform_below.
  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = uniform_below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

private:
  std::mt19937_64 eng_;
};

}  // namespace cgfed
