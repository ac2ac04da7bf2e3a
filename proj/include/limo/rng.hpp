#pragma once

#include <cstdint>
#include <string_view>

namespace limo {

// Deterministic stream generator built on SplitMix64: the state advances by a
// fixed odd increment and every output is a bit-mix of that counter, so an
// identical seed yields an identical u64 sequence on every platform.
// Gaussians are produced by Box-Muller over the uniform stream (two uniforms
// consumed per draw).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double next_double();  // uniform in [0, 1), 53-bit resolution
  double next_gaussian();
  double next_gaussian(double stddev);

  // Independent substream keyed by a label; does not advance this stream.
  Rng derive(std::string_view label) const;

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace limo
