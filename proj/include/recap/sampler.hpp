#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "recap/error.hpp"
#include "recap/numerics/kernels.hpp"
#include "recap/numerics/matrix.hpp"
#include "recap/numerics/random.hpp"

namespace recap {

/// Draws one value per row of `logits` from softmax(logits / τ1) by
/// inverse-CDF sampling. Row r uses stream.with_position(positions[r]).
template <typename T>
std::vector<int> sample_values(const Matrix<T>& logits, std::span<const std::size_t> positions,
                               double tau1, const RandomStream& stream) {
  if (!(tau1 > 0)) throw DomainError("sampling temperature must be positive");
  detail::require_shape(logits.rows() == positions.size(), "one logit row per position");
  std::vector<int> out(positions.size());
  std::vector<double> row(logits.cols());
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (std::size_t v = 0; v < row.size(); ++v) row[v] = static_cast<double>(logits(r, v));
    const auto p = softmax(std::span<const double>(row), tau1);
    const double u = stream.with_position(positions[r]).uniform(0);
    double acc = 0;
    std::size_t pick = p.size() - 1;
    while (pick > 0 && p[pick] == 0.0) --pick;
    for (std::size_t v = 0; v < p.size(); ++v) {
      acc += p[v];
      if (u < acc) {
        pick = v;
        break;
      }
    }
    out[r] = static_cast<int>(pick);
  }
  return out;
}

/// Confidence C_i = log softmax(logits_i)[value_i] of each candidate.
struct ConfidenceTable {
  std::vector<std::size_t> positions;
  std::vector<double> scores;

  std::size_t size() const { return positions.size(); }
  double at(std::size_t pos) const {
    for (std::size_t i = 0; i < positions.size(); ++i)
      if (positions[i] == pos) return scores[i];
    throw DomainError("position " + std::to_string(pos) + " has no confidence score");
  }
};

template <typename T>
ConfidenceTable confidence_scores(const Matrix<T>& logits, std::span<const std::size_t> positions,
                                  std::span<const int> values) {
  detail::require_shape(logits.rows() == positions.size() && values.size() == positions.size(),
                        "confidence: one logit row and one value per position");
  ConfidenceTable t;
  t.positions.assign(positions.begin(), positions.end());
  std::vector<double> row(logits.cols());
  for (std::size_t r = 0; r < positions.size(); ++r) {
    if (values[r] < 0 || static_cast<std::size_t>(values[r]) >= logits.cols())
      throw DomainError("confidence: value out of vocabulary");
    for (std::size_t v = 0; v < row.size(); ++v) row[v] = static_cast<double>(logits(r, v));
    t.scores.push_back(std::min(0.0, log_softmax(std::span<const double>(row))[values[r]]));
  }
  return t;
}

namespace detail {

/// Indices of the k largest keys, ordered by key descending, ties by position.
inline std::vector<std::size_t> top_k_by_key(const std::vector<std::size_t>& positions,
                                             const std::vector<double>& keys, std::size_t k) {
  std::vector<std::size_t> idx(positions.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (keys[a] != keys[b]) return keys[a] > keys[b];
    return positions[a] < positions[b];
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(positions[idx[i]]);
  return out;
}

}  // namespace detail

/// Samples k positions without replacement with probability ∝
/// softmax(C / τ2) via perturbed keys C_i/τ2 + g_i. The result is ordered by
/// descending key.
inline std::vector<std::size_t> gumbel_top_k(const ConfidenceTable& table, double tau2,
                                             std::size_t k, const RandomStream& stream) {
  if (k > table.size()) throw DomainError("gumbel_top_k: k exceeds the candidate count");
  if (!(tau2 > 0)) throw DomainError("choice temperature must be positive");
  std::vector<double> keys(table.size());
  for (std::size_t i = 0; i < table.size(); ++i)
    keys[i] = table.scores[i] / tau2 + stream.with_position(table.positions[i]).gumbel(0);
  return detail::top_k_by_key(table.positions, keys, k);
}

/// Uniform sample of k positions without replacement: the k positions with
/// the smallest keyed uniforms, in that order.
inline std::vector<std::size_t> select_uniform(std::span<const std::size_t> masked, std::size_t k,
                                               const RandomStream& stream) {
  if (k > masked.size()) throw DomainError("select_uniform: k exceeds the masked count");
  std::vector<std::size_t> pos(masked.begin(), masked.end());
  std::vector<double> keys(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) keys[i] = -stream.with_position(pos[i]).uniform(0);
  return detail::top_k_by_key(pos, keys, k);
}

/// Blocks S_t^(0..l) of a group target set.
struct TargetPlan {
  std::vector<std::vector<std::size_t>> blocks;
};

/// Sorts S_t by descending confidence (ties by ascending position) and cuts
/// it into consecutive blocks of the given sizes.
inline TargetPlan partition_targets(std::span<const std::size_t> targets,
                                    const ConfidenceTable& table,
                                    std::span<const std::size_t> sizes) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != targets.size())
    throw DimensionError("partition sizes sum to " + std::to_string(total) + ", targets hold " +
                         std::to_string(targets.size()));
  std::vector<std::size_t> pos(targets.begin(), targets.end());
  std::vector<double> keys;
  for (auto p : pos) keys.push_back(table.at(p));
  auto sorted = detail::top_k_by_key(pos, keys, pos.size());
  TargetPlan plan;
  std::size_t at = 0;
  for (auto n : sizes) {
    plan.blocks.emplace_back(sorted.begin() + static_cast<std::ptrdiff_t>(at),
                             sorted.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
  }
  return plan;
}

/// Classifier-free guidance: uncond + scale · (cond − uncond).
template <typename T>
Matrix<T> cfg_combine(const Matrix<T>& cond, const Matrix<T>& uncond, double scale) {
  detail::require_shape(cond.rows() == uncond.rows() && cond.cols() == uncond.cols(),
                        "cfg_combine: shape mismatch");
  if (!(scale >= 0)) throw DomainError("guidance scale must be non-negative");
  Matrix<T> out(cond.rows(), cond.cols());
  const T s = static_cast<T>(scale);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T u = uncond.values()[i];
    out.values()[i] = u + s * (cond.values()[i] - u);
  }
  return out;
}

enum class Selector { confidence, uniform };

/// Sampler section of a configuration document.
struct SamplerConfig {
  Selector selector = Selector::confidence;
  double cfg_scale = 1.0;
  bool cfg = false;              // run guided (conditional + null) passes
  bool resample_locals = true;   // redraw values of later blocks from Local-FE outputs
};

inline void from_json(const nlohmann::json& j, SamplerConfig& c) {
  c = SamplerConfig{};
  try {
    const std::string sel = j.value("selector", std::string("confidence"));
    if (sel == "confidence") c.selector = Selector::confidence;
    else if (sel == "uniform") c.selector = Selector::uniform;
    else throw ConfigError("unknown selector '" + sel + "'");
    c.cfg_scale = j.value("cfg_scale", c.cfg_scale);
    c.cfg = j.value("cfg", c.cfg_scale != 1.0);
    c.resample_locals = j.value("resample_locals", c.resample_locals);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sampler config: ") + e.what());
  }
  if (!(c.cfg_scale >= 0)) throw ConfigError("sampler: cfg_scale must be non-negative");
}

inline void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = {{"selector", c.selector == Selector::uniform ? "uniform" : "confidence"},
       {"cfg_scale", c.cfg_scale},
       {"cfg", c.cfg},
       {"resample_locals", c.resample_locals}};
}

}  // namespace recap
