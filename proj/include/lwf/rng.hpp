#pragma once

#include <cstdint>

namespace lwf {

// Counter-based generator: the n-th output is splitmix64's finaliser applied to
// key + n * 0x9E3779B97F4A7C15. Sequences depend only on (key, counter), so
// they are identical across platforms and any position can be reproduced.
// derive() gives independent child streams (experiment -> run -> epoch -> batch).
class Rng {
 public:
  explicit Rng(std::uint64_t key = 0, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller (consumes two draws per call).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  Rng derive(std::uint64_t stream) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace lwf
