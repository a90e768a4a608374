#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "recap/error.hpp"

namespace recap {

/// Tags separating the independent random streams used by the library.
enum class Phase : std::uint32_t {
  value = 1,      // token value draws
  choice = 2,     // Gumbel noise for confidence-based selection
  select = 3,     // uniform selection keys
  diffusion = 4,  // reverse-diffusion noise
  train = 5,      // masking ratio, masked positions, condition dropout
  init = 6,       // parameter initialisation
  data = 7,       // synthetic dataset generation
  drift = 8,      // drift-probe position draws
  misc = 9,
};

/// Counter-based random stream. Every draw is a pure function of
/// (seed, phase, step, position, draw index); streams hold no mutable state.
class RandomStream {
 public:
  constexpr RandomStream() = default;
  constexpr RandomStream(std::uint64_t seed, Phase phase, std::uint64_t step = 0,
                         std::uint64_t position = 0)
      : seed_(seed), phase_(phase), step_(step), position_(position) {}

  constexpr std::uint64_t seed() const noexcept { return seed_; }
  constexpr Phase phase() const noexcept { return phase_; }
  constexpr std::uint64_t step() const noexcept { return step_; }
  constexpr std::uint64_t position() const noexcept { return position_; }

  constexpr RandomStream with_phase(Phase p) const noexcept {
    return {seed_, p, step_, position_};
  }
  constexpr RandomStream with_step(std::uint64_t s) const noexcept {
    return {seed_, phase_, s, position_};
  }
  constexpr RandomStream with_position(std::uint64_t p) const noexcept {
    return {seed_, phase_, step_, p};
  }

  constexpr std::uint64_t bits(std::uint64_t index) const noexcept {
    std::uint64_t h = mix(seed_ ^ 0x6a09e667f3bcc908ULL);
    h = mix(h ^ (static_cast<std::uint64_t>(phase_) * 0xbb67ae8584caa73bULL));
    h = mix(h ^ (step_ * 0x3c6ef372fe94f82bULL + 0x1ULL));
    h = mix(h ^ (position_ * 0xa54ff53a5f1d36f1ULL + 0x2ULL));
    return mix(h ^ (index * 0x510e527fade682d1ULL + 0x3ULL));
  }

  /// Uniform in the open interval (0, 1).
  double uniform(std::uint64_t index) const noexcept {
    const double u = (static_cast<double>(bits(index) >> 11) + 0.5) * 0x1.0p-53;
    return std::clamp(u, kTiny, 1.0 - kTiny);
  }

  /// Standard normal (Box–Muller, cosine branch) from draws 2i and 2i+1.
  double normal(std::uint64_t index) const noexcept {
    const double u1 = uniform(2 * index);
    const double u2 = uniform(2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Standard Gumbel draw −log(−log u).
  double gumbel(std::uint64_t index) const noexcept {
    return -std::log(-std::log(uniform(index)));
  }

  /// Integer uniform in [0, n).
  std::uint64_t below(std::uint64_t index, std::uint64_t n) const noexcept {
    return static_cast<std::uint64_t>(uniform(index) * static_cast<double>(n)) % n;
  }

 private:
  static constexpr double kTiny = 0x1.0p-54;

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_ = 0;
  Phase phase_ = Phase::misc;
  std::uint64_t step_ = 0;
  std::uint64_t position_ = 0;
};

/// n i.i.d. standard Gumbel draws.
inline std::vector<double> gumbel_noise(const RandomStream& stream, std::size_t n) {
  if (n < 1) throw DomainError("gumbel_noise: n must be at least 1");
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = stream.gumbel(i);
  return g;
}

}  // namespace recap
