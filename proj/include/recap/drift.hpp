#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "recap/diffusion/head.hpp"
#include "recap/model/forward.hpp"
#include "recap/sampler.hpp"

namespace recap {

/// Where newly unmasked positions get their values from.
enum class DriftFill { ground_truth, model_sampled };

/// Context-feature stability for one context size K. Entry i of each vector
/// belongs to update_counts[i].
struct DriftCurve {
  std::size_t K = 0;
  std::vector<std::size_t> update_counts;
  std::vector<double> mean_similarity;  // layer mean
  std::vector<double> layer_std;        // population std over layers
  std::vector<std::vector<double>> per_layer;
  std::size_t n_samples = 0;
};

struct DriftOptions {
  DriftFill fill = DriftFill::ground_truth;
  std::size_t diffusion_steps = 64;  // model_sampled fill in continuous mode
};

/// Cosine similarity in double precision, clamped to [-1, 1]. Identical
/// inputs give exactly 1 since sqrt(x·x) rounds back to x.
template <typename A, typename B>
double cosine_similarity(std::span<const A> a, std::span<const B> b) {
  detail::require_shape(a.size() == b.size(), "cosine_similarity: length mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  if (aa == 0 || bb == 0) return aa == bb ? 1.0 : 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

/// Per layer, the mean of the attention inputs (LN1 output feeding Q/K/V)
/// over the rows holding `context`. Encoder layers come first for
/// encoder_decoder, then decoder layers.
template <typename T>
std::vector<std::vector<double>> pooled_context_features(const ForwardRecord<T>& rec,
                                                         std::span<const std::size_t> context) {
  std::vector<std::vector<double>> out;
  auto pool = [&](const StackRecord<T>& st) {
    std::vector<std::size_t> rows;
    for (auto pos : context) {
      const auto it = std::find(st.ids.begin(), st.ids.end(), pos);
      if (it == st.ids.end()) throw CacheError("context position missing from the record");
      rows.push_back(static_cast<std::size_t>(it - st.ids.begin()));
    }
    for (const auto& tap : st.layers) {
      std::vector<double> v(tap.attn_input.cols(), 0.0);
      for (auto r : rows)
        for (std::size_t c = 0; c < v.size(); ++c) v[c] += static_cast<double>(tap.attn_input(r, c));
      for (auto& x : v) x /= static_cast<double>(rows.size());
      out.push_back(std::move(v));
    }
  };
  if (rec.arch == Arch::encoder_decoder) pool(rec.encoder);
  pool(rec.decoder);
  return out;
}

namespace detail {

inline void summarise_layers(DriftCurve& c) {
  c.mean_similarity.assign(c.per_layer.size(), 0.0);
  c.layer_std.assign(c.per_layer.size(), 0.0);
  for (std::size_t i = 0; i < c.per_layer.size(); ++i) {
    const auto& s = c.per_layer[i];
    double mean = 0;
    for (double v : s) mean += v;
    mean /= static_cast<double>(s.size());
    double var = 0;
    for (double v : s) var += (v - mean) * (v - mean);
    c.mean_similarity[i] = mean;
    c.layer_std[i] = std::sqrt(var / static_cast<double>(s.size()));
  }
}

}  // namespace detail

/// Drift with explicit positions: `context` are the K visible positions and
/// the first m entries of `updates` are unmasked for update count m.
template <typename T>
DriftCurve drift_probe_at(const ModelParams<T>& params, const ModelConfig& cfg,
                          const TokenGrid& sample, std::span<const std::size_t> context,
                          std::span<const std::size_t> updates,
                          std::span<const std::size_t> update_counts, const RandomStream& stream,
                          std::optional<int> condition = std::nullopt,
                          const DriftOptions& opt = {}) {
  const std::size_t n = cfg.seq_len;
  detail::require_shape(sample.length() == n, "drift_probe: sample length mismatch");
  if (sample.masked_count() != 0) throw DomainError("drift_probe: sample must be fully valued");
  if (context.empty()) throw DomainError("drift_probe: K must be at least 1");
  std::size_t max_m = 0;
  for (auto m : update_counts) max_m = std::max(max_m, m);
  if (context.size() + max_m > n || max_m > updates.size())
    throw DomainError("drift_probe: K plus update counts exceed N");
  std::vector<bool> seen(n, false);
  for (auto span : {context, updates})
    for (auto i : span) {
      if (i >= n || seen[i]) throw DomainError("drift_probe: positions must be distinct and < N");
      seen[i] = true;
    }

  TokenGrid base = cfg.token_mode == TokenMode::discrete
                       ? TokenGrid::masked_discrete(n)
                       : TokenGrid::masked_continuous(n, cfg.token_dim);
  for (auto i : context) base.copy_position(sample, i);
  const auto rec0 = forward_full(params, cfg, base, condition);
  const auto ref = pooled_context_features(rec0, context);

  // Values for the update positions: the sample itself, or draws from the
  // model's prediction given only the context.
  TokenGrid fill = sample;
  if (opt.fill == DriftFill::model_sampled) {
    std::vector<std::size_t> rest(updates.begin(),
                                  updates.begin() + static_cast<std::ptrdiff_t>(max_m));
    std::sort(rest.begin(), rest.end());
    const RandomStream ds = stream.with_phase(Phase::drift);
    if (cfg.token_mode == TokenMode::discrete) {
      Matrix<T> logits(rest.size(), rec0.outputs.cols());
      for (std::size_t r = 0; r < rest.size(); ++r)
        for (std::size_t c = 0; c < logits.cols(); ++c) logits(r, c) = rec0.outputs(rest[r], c);
      const auto v = sample_values(logits, std::span<const std::size_t>(rest), 1.0,
                                   RandomStream(ds.bits(1), Phase::drift));
      for (std::size_t r = 0; r < rest.size(); ++r) fill.set_id(rest[r], v[r]);
    } else {
      if (!params.diffusion || !cfg.diffusion)
        throw ConfigError("drift_probe: continuous model has no diffusion head");
      const NoiseSchedule sched(*cfg.diffusion);
      for (auto i : rest) {
        const auto x = sample_token(*params.diffusion, *cfg.diffusion, sched,
                                    std::span<const T>(rec0.outputs.row(i)), opt.diffusion_steps,
                                    RandomStream(ds.bits(2), Phase::drift).with_position(i));
        fill.set_vector(i, std::span<const double>(x));
      }
    }
  }

  DriftCurve curve;
  curve.K = context.size();
  curve.n_samples = 1;
  curve.update_counts.assign(update_counts.begin(), update_counts.end());
  for (auto m : update_counts) {
    std::vector<double> sims(ref.size(), 1.0);
    if (m > 0) {
      TokenGrid g = base;
      for (std::size_t r = 0; r < m; ++r) g.copy_position(fill, updates[r]);
      const auto rec = forward_full(params, cfg, g, condition);
      const auto now = pooled_context_features(rec, context);
      for (std::size_t l = 0; l < ref.size(); ++l)
        sims[l] = cosine_similarity(std::span<const double>(ref[l]), std::span<const double>(now[l]));
    }
    curve.per_layer.push_back(std::move(sims));
  }
  detail::summarise_layers(curve);
  return curve;
}

/// Drift of pooled context features as more positions of `sample` get
/// unmasked. K context positions and one growing update set are drawn
/// uniformly without replacement; update sets are nested across m.
template <typename T>
DriftCurve drift_probe(const ModelParams<T>& params, const ModelConfig& cfg,
                       const TokenGrid& sample, std::size_t K,
                       std::span<const std::size_t> update_counts, const RandomStream& stream,
                       std::optional<int> condition = std::nullopt, const DriftOptions& opt = {}) {
  const std::size_t n = cfg.seq_len;
  std::size_t max_m = 0;
  for (auto m : update_counts) max_m = std::max(max_m, m);
  if (K < 1) throw DomainError("drift_probe: K must be at least 1");
  if (K + max_m > n) throw DomainError("drift_probe: K plus update counts exceed N");
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  const auto order = select_uniform(std::span<const std::size_t>(all), n,
                                    RandomStream(stream.with_phase(Phase::drift).bits(0), Phase::drift));
  std::vector<std::size_t> context(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(K));
  std::sort(context.begin(), context.end());
  const std::span<const std::size_t> updates(order.data() + K, max_m);
  return drift_probe_at(params, cfg, sample, std::span<const std::size_t>(context), updates,
                        update_counts, stream, condition, opt);
}

/// Sample-averaged curve: per-layer similarities are averaged over samples
/// in order, then summarised over layers. Sample e uses stream step e.
template <typename T>
DriftCurve drift_average(const ModelParams<T>& params, const ModelConfig& cfg,
                         std::span<const TokenGrid> samples, std::size_t K,
                         std::span<const std::size_t> update_counts, const RandomStream& stream,
                         std::span<const std::optional<int>> conditions = {},
                         const DriftOptions& opt = {}) {
  if (samples.empty()) throw DomainError("drift_average: no samples");
  if (!conditions.empty())
    detail::require_shape(conditions.size() == samples.size(), "drift_average: condition count");
  DriftCurve acc;
  for (std::size_t e = 0; e < samples.size(); ++e) {
    const auto c = drift_probe(params, cfg, samples[e], K, update_counts, stream.with_step(e),
                               conditions.empty() ? std::nullopt : conditions[e], opt);
    if (e == 0) {
      acc = c;
      continue;
    }
    for (std::size_t i = 0; i < c.per_layer.size(); ++i)
      for (std::size_t l = 0; l < c.per_layer[i].size(); ++l) acc.per_layer[i][l] += c.per_layer[i][l];
  }
  acc.n_samples = samples.size();
  if (samples.size() > 1)
    for (auto& s : acc.per_layer)
      for (auto& v : s) v /= static_cast<double>(samples.size());
  detail::summarise_layers(acc);
  return acc;
}

inline void write_drift_csv(std::span<const DriftCurve> curves, std::ostream& os) {
  os << "K,m,mean_similarity,layer_std,n_samples\n";
  os.precision(17);
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.update_counts.size(); ++i)
      os << c.K << ',' << c.update_counts[i] << ',' << c.mean_similarity[i] << ','
         << c.layer_std[i] << ',' << c.n_samples << '\n';
}

inline void write_drift_csv(std::span<const DriftCurve> curves, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open " + path + " for writing");
  write_drift_csv(curves, f);
}

}  // namespace recap
