#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace tam {

/// Deterministic random stream. All distribution sampling is implemented
/// in-house (uniform, normal, gamma, beta) so that results depend only on
/// the seed, never on the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  /// Derives an independent substream from (seed, path...). Streams with
  /// different paths never interleave, so skipping a consumer does not
  /// shift any other consumer's draws.
  static Rng stream(uint64_t seed, std::initializer_list<uint64_t> path) {
    uint64_t h = seed;
    for (uint64_t p : path) h = mix(h ^ mix(p));
    return Rng(mix(h));
  }

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    // rejection sampling to avoid modulo bias
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    // Box-Muller; fresh pair each call keeps the stream stateless.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  /// Marsaglia-Tsang gamma sampler, shape alpha > 0, scale 1.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      const double u = uniform();
      return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    const double ga = gamma(a);
    const double gb = gamma(b);
    return ga / (ga + gb);
  }

  /// In-place Fisher-Yates shuffle.
  template <typename Container>
  void shuffle(Container& c) {
    for (size_t i = c.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(c[i - 1], c[j]);
    }
  }

 private:
  // splitmix64 finalizer
  static uint64_t mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace tam
