#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace medal {

/// Seeded generator used everywhere randomness is consumed. Draws are built
/// from raw 64-bit outputs so sequences do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 1) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Index drawn proportionally to non-negative weights. Falls back to the
  /// first positive weight when rounding leaves the draw past the end.
  std::size_t categorical(std::span<const double> weights);

  /// Seed for an independent child generator (one draw).
  std::uint64_t fork_seed() { return engine_() ^ 0x9e3779b97f4a7c15ULL; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace medal
