#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <vector>

#include "json.hpp"
#include "recap/model/backprop.hpp"
#include "recap/pipeline/dataset.hpp"
#include "recap/sampler.hpp"

namespace recap {

/// Plain momentum SGD on the masked-token objective.
struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  double learning_rate = 0.2;
  double momentum = 0.9;
  double grad_clip = 1.0;      // global-norm clip, 0 disables
  double min_mask_ratio = 0.2; // r = cos(π u / 2), truncated to [min, 1]
  double cond_dropout = 0.1;   // probability of training on the null condition
  bool conditional = true;     // feed dataset labels as conditions
  double final_lr_fraction = 0.1;  // cosine decay of the step size over all epochs
  std::size_t diffusion_draws = 4; // (t, ε) draws per masked token, continuous mode
  double head_lr_scale = 1.0;      // step-size multiplier for the diffusion head

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must lie in [0, 1)");
    if (!(min_mask_ratio > 0 && min_mask_ratio <= 1))
      throw ConfigError("train: min_mask_ratio must lie in (0, 1]");
    if (!(cond_dropout >= 0 && cond_dropout <= 1))
      throw ConfigError("train: cond_dropout must lie in [0, 1]");
    if (!(final_lr_fraction > 0 && final_lr_fraction <= 1))
      throw ConfigError("train: final_lr_fraction must lie in (0, 1]");
    if (diffusion_draws < 1) throw ConfigError("train: diffusion_draws must be at least 1");
    if (!(head_lr_scale > 0)) throw ConfigError("train: head_lr_scale must be positive");
  }

  double rate_at(std::size_t epoch) const {
    if (epochs <= 1) return learning_rate;
    const double f = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    const double c = 0.5 * (1 + std::cos(std::numbers::pi * std::min(f, 1.0)));
    return learning_rate * (final_lr_fraction + (1 - final_lr_fraction) * c);
  }
};

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.min_mask_ratio = j.value("min_mask_ratio", c.min_mask_ratio);
    c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
    c.conditional = j.value("conditional", c.conditional);
    c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
    c.diffusion_draws = j.value("diffusion_draws", c.diffusion_draws);
    c.head_lr_scale = j.value("head_lr_scale", c.head_lr_scale);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"momentum", c.momentum},
       {"grad_clip", c.grad_clip},
       {"min_mask_ratio", c.min_mask_ratio},
       {"cond_dropout", c.cond_dropout},
       {"conditional", c.conditional},
       {"final_lr_fraction", c.final_lr_fraction},
       {"diffusion_draws", c.diffusion_draws},
       {"head_lr_scale", c.head_lr_scale}};
}

/// Masking ratio r = cos(π u / 2), truncated below at min_ratio.
inline double mask_ratio(double u, double min_ratio) {
  return std::clamp(std::cos(std::numbers::pi * u / 2.0), min_ratio, 1.0);
}

/// A training input: `clean` with a random r-fraction of positions masked.
inline TokenGrid mask_example(const TokenGrid& clean, double min_ratio, const RandomStream& s) {
  const std::size_t n = clean.length();
  const double r = mask_ratio(s.uniform(0), min_ratio);
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(r * static_cast<double>(n))), 1, n);
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  TokenGrid in = clean;
  for (auto i : select_uniform(std::span<const std::size_t>(all), k,
                               RandomStream(s.bits(1), Phase::train)))
    in.mask(i);
  return in;
}

template <typename T>
struct TrainState {
  ModelParams<T> velocity;
  std::size_t epoch = 0;

  explicit TrainState(const ModelConfig& cfg) : velocity(zero_like<T>(cfg)) {}
};

/// One pass over `data` in a fresh random order. Returns the mean masked loss.
template <typename T>
double train_epoch(ModelParams<T>& params, const ModelConfig& cfg, const Dataset& data,
                   const TrainConfig& tc, const RandomStream& stream, TrainState<T>& state) {
  if (data.empty()) throw DomainError("train_epoch: empty dataset");
  tc.validate();
  for (const auto& ex : data)
    detail::require_shape(ex.tokens.length() == cfg.seq_len, "training grid length mismatch");
  const RandomStream es = stream.with_phase(Phase::train).with_step(state.epoch);
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto order = select_uniform(std::span<const std::size_t>(idx), idx.size(),
                                    RandomStream(es.bits(0), Phase::train));
  const T lr = static_cast<T>(tc.rate_at(state.epoch));
  const T mu = static_cast<T>(tc.momentum);
  double total = 0;
  std::size_t seen = 0;
  auto grads = zero_like<T>(cfg);
  for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
    grads.for_each([](const std::string&, Matrix<T>& m) { m.fill(T{0}); });
    const std::size_t end = std::min(order.size(), b + tc.batch_size);
    for (std::size_t i = b; i < end; ++i) {
      const auto& ex = data[order[i]];
      const RandomStream xs(es.bits(1 + order[i]), Phase::train);
      const TokenGrid input = mask_example(ex.tokens, tc.min_mask_ratio, xs);
      std::optional<int> cond;
      if (tc.conditional && xs.uniform(2) >= tc.cond_dropout) cond = ex.label;
      total += static_cast<double>(
          masked_loss(params, cfg, input, ex.tokens, cond, RandomStream(xs.bits(3), Phase::diffusion),
                      &grads, tc.diffusion_draws)
              .loss);
      ++seen;
    }
    const T inv = T{1} / static_cast<T>(end - b);
    double norm2 = 0;
    grads.for_each([&](const std::string&, Matrix<T>& m) {
      for (auto& v : m.values()) {
        v *= inv;
        norm2 += static_cast<double>(v) * static_cast<double>(v);
      }
    });
    T scale = T{1};
    if (tc.grad_clip > 0 && std::sqrt(norm2) > tc.grad_clip)
      scale = static_cast<T>(tc.grad_clip / std::sqrt(norm2));
    std::vector<Matrix<T>*> gs;
    grads.for_each([&](const std::string&, Matrix<T>& m) { gs.push_back(&m); });
    std::size_t k = 0;
    std::vector<Matrix<T>*> vs;
    state.velocity.for_each([&](const std::string&, Matrix<T>& m) { vs.push_back(&m); });
    params.for_each([&](const std::string& name, Matrix<T>& w) {
      auto& g = *gs[k];
      auto& v = *vs[k];
      ++k;
      const T step = name.starts_with("diffusion.") ? lr * static_cast<T>(tc.head_lr_scale) : lr;
      for (std::size_t i = 0; i < w.size(); ++i) {
        v.values()[i] = mu * v.values()[i] + scale * g.values()[i];
        w.values()[i] -= step * v.values()[i];
      }
    });
  }
  ++state.epoch;
  return total / static_cast<double>(seen);
}

/// Runs tc.epochs epochs and returns the per-epoch mean losses.
template <typename T>
std::vector<double> train_model(ModelParams<T>& params, const ModelConfig& cfg, const Dataset& data,
                                const TrainConfig& tc, const RandomStream& stream,
                                const std::function<void(std::size_t, double)>& on_epoch = {}) {
  TrainState<T> state(cfg);
  std::vector<double> losses;
  for (std::size_t e = 0; e < tc.epochs; ++e) {
    losses.push_back(train_epoch(params, cfg, data, tc, stream, state));
    if (on_epoch) on_epoch(e, losses.back());
  }
  return losses;
}

/// Mean masked loss over `data` without updating anything.
template <typename T>
double evaluate_loss(const ModelParams<T>& params, const ModelConfig& cfg, const Dataset& data,
                     const TrainConfig& tc, const RandomStream& stream) {
  if (data.empty()) throw DomainError("evaluate_loss: empty dataset");
  double total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const RandomStream xs(stream.with_phase(Phase::train).with_step(i).bits(0), Phase::train);
    const TokenGrid input = mask_example(data[i].tokens, tc.min_mask_ratio, xs);
    std::optional<int> cond;
    if (tc.conditional) cond = data[i].label;
    total += static_cast<double>(
        masked_loss(params, cfg, input, data[i].tokens, cond,
                    RandomStream(xs.bits(3), Phase::diffusion), static_cast<ModelParams<T>*>(nullptr),
                    tc.diffusion_draws)
            .loss);
  }
  return total / static_cast<double>(data.size());
}

}  // namespace recap
