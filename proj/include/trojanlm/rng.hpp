#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace trojanlm {

/// Seeded random stream. Every consumer derives its own stream from the root
/// seed and a purpose name, so results do not depend on call interleaving.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  /// Independent substream named by purpose (and optionally an index).
  Rng derive(std::string_view purpose, uint64_t index = 0) const;

  uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

uint64_t fnv1a64(std::string_view s);

}  // namespace trojanlm
