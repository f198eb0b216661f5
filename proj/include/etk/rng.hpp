#pragma once

// Seeded random source used by every stochastic component.
//
// Engine: std::mt19937_64, whose output sequence is fixed by the C++ standard.
// The distributions in <random> are implementation-defined, so conversions are
// done here:
//   uniform()  = (next() >> 11) * 2^-53            in [0, 1)
//   normal()   = Box-Muller on (1 - uniform(), uniform()), cosine branch only
//   below(n)   = next() % n                        (n small; bias negligible)
// Child streams are derived with SplitMix64 so that components can own
// independent generators from one experiment seed.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace etk {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next() { return engine_(); }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(next() % n); }
  bool bernoulli(double p) { return uniform() < p; }

  std::vector<double> normals(std::size_t n, double sigma = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = sigma * normal();
    return v;
  }

  /// Independent stream keyed by (this seed, tag).
  Rng fork(std::uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag + 0x51ED27ULL))); }

  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace etk
