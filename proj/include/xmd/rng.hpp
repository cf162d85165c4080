#pragma once

#include <cstdint>

namespace xmd {

// Counter-based deterministic generator (splitmix64 core). The same seed
// produces the same stream on every platform; substreams are derived by
// mixing a stream id into the seed.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  // Uniform integer in [0, n), n >= 1. Unbiased via rejection.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller; consumes two uniforms per call.
  double normal();

  static SeededRng derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t state_;
};

}  // namespace xmd
