#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "recap/pipeline/dataset.hpp"

namespace recap {

inline constexpr std::size_t kMinQualitySamples = 100;

/// Σ |p − q| over all cells; lies in [0, 2].
inline double total_variation(const Matrix<double>& p, const Matrix<double>& q) {
  detail::require_shape(p.rows() == q.rows() && p.cols() == q.cols(), "TV: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p.values()[i] - q.values()[i]);
  return s;
}

/// TV distance between the samples' horizontal-neighbour co-occurrence and
/// the generator's. Conditioned samples are compared against the class
/// mixture weighted by their condition histogram; unconditioned ones
/// against the uniform mixture.
inline double quality_statistic(std::span<const TokenGrid> samples, const DatasetSpec& spec) {
  if (samples.size() < kMinQualitySamples)
    throw DomainError("quality statistic needs at least " + std::to_string(kMinQualitySamples) +
                      " samples, got " + std::to_string(samples.size()));
  std::vector<double> weights(spec.classes, 0.0);
  std::size_t conditioned = 0;
  for (const auto& g : samples)
    if (auto c = g.condition(); c && *c >= 0 && static_cast<std::size_t>(*c) < spec.classes) {
      weights[static_cast<std::size_t>(*c)] += 1;
      ++conditioned;
    }
  const auto hat = empirical_cooccurrence(samples, spec.side, spec.vocab);
  if (conditioned == samples.size()) {
    for (auto& w : weights) w /= static_cast<double>(conditioned);
    return total_variation(hat, analytic_cooccurrence(spec, std::span<const double>(weights)));
  }
  return total_variation(hat, analytic_cooccurrence(spec));
}

}  // namespace recap
