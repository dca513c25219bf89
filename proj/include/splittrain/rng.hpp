#pragma once

#include <cstdint>
#include <random>

namespace splittrain {

// Portable draws on top of mt19937_64: the std distributions are
// implementation-defined, these are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Independent stream for (seed, key), e.g. one per sample index.
  static Rng stream(std::uint64_t seed, std::uint64_t key);

  std::uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n);  // [0, n)
  double normal();

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace splittrain
