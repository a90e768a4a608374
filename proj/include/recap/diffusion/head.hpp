#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "recap/diffusion/params.hpp"
#include "recap/error.hpp"
#include "recap/numerics/kernels.hpp"
#include "recap/numerics/random.hpp"

namespace recap {

/// Linear β schedule. The endpoints describe a 1000-step chain; they are
/// scaled by 1000 / t_d so the short chain still ends close to pure noise.
struct NoiseSchedule {
  std::vector<double> betas;       // β_1..β_T at index t-1
  std::vector<double> alpha_bars;  // ᾱ_t at index t-1

  explicit NoiseSchedule(const DiffusionConfig& cfg) {
    cfg.validate();
    const double scale = 1000.0 / static_cast<double>(cfg.t_d);
    const double lo = cfg.beta_start * scale, hi = std::min(cfg.beta_end * scale, 0.999);
    double ab = 1.0;
    for (std::size_t t = 0; t < cfg.t_d; ++t) {
      const double f = cfg.t_d == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(cfg.t_d - 1);
      const double b = lo + f * (hi - lo);
      betas.push_back(b);
      ab *= 1.0 - b;
      alpha_bars.push_back(ab);
    }
  }

  std::size_t steps() const { return betas.size(); }
  /// ᾱ_t with ᾱ_0 = 1.
  double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bars.at(t - 1); }
};

/// Sinusoidal features of an integer timestep.
template <typename T>
std::vector<T> time_embedding(std::size_t t, std::size_t dim) {
  std::vector<T> e(dim);
  const std::size_t half = dim / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    e[k] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
    e[half + k] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
  }
  return e;
}

/// Activations of one ε_θ evaluation, kept for the backward pass.
template <typename T>
struct HeadTape {
  std::vector<std::vector<T>> inputs;  // input to each layer
  std::vector<std::vector<T>> pre;     // pre-activation of each hidden layer
};

/// ε̂ = ε_θ(x_t | t, z): a GELU MLP over concat(x_t, temb(t), z).
template <typename T>
std::vector<T> predict_noise(const DiffusionHeadParams<T>& p, const DiffusionConfig& cfg,
                             std::span<const T> x_t, std::size_t t, std::span<const T> z,
                             HeadTape<T>* tape = nullptr) {
  detail::require_shape(x_t.size() == cfg.token_dim && z.size() == cfg.z_dim,
                        "diffusion head: input shape does not match the config");
  detail::require_shape(p.weights.size() == cfg.hidden.size() + 1,
                        "diffusion head: parameters do not match the config");
  std::vector<T> h;
  h.reserve(cfg.input_dim());
  h.insert(h.end(), x_t.begin(), x_t.end());
  auto temb = time_embedding<T>(t, cfg.time_embed_dim);
  h.insert(h.end(), temb.begin(), temb.end());
  h.insert(h.end(), z.begin(), z.end());
  if (tape) {
    tape->inputs.clear();
    tape->pre.clear();
  }
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const auto& w = p.weights[l];
    std::vector<T> a(p.biases[l].values());
    for (std::size_t i = 0; i < h.size(); ++i) {
      const T hi = h[i];
      const T* wi = w.data() + i * w.cols();
      for (std::size_t j = 0; j < a.size(); ++j) a[j] += hi * wi[j];
    }
    if (tape) tape->inputs.push_back(h);
    if (l + 1 == p.weights.size()) return a;
    if (tape) tape->pre.push_back(a);
    for (auto& v : a) v = gelu(v);
    h = std::move(a);
  }
  return h;
}

/// Backward of predict_noise given dL/dε̂. Accumulates into `grads` and
/// returns dL/dz.
template <typename T>
std::vector<T> predict_noise_backward(const DiffusionHeadParams<T>& p, const DiffusionConfig& cfg,
                                      const HeadTape<T>& tape, std::vector<T> dout,
                                      DiffusionHeadParams<T>& grads) {
  for (std::size_t l = p.weights.size(); l-- > 0;) {
    const auto& w = p.weights[l];
    const auto& in = tape.inputs[l];
    auto& gw = grads.weights[l];
    for (std::size_t j = 0; j < dout.size(); ++j) grads.biases[l].values()[j] += dout[j];
    std::vector<T> din(in.size(), T{0});
    for (std::size_t i = 0; i < in.size(); ++i) {
      const T* wi = w.data() + i * w.cols();
      T* gi = gw.data() + i * w.cols();
      T s{0};
      for (std::size_t j = 0; j < dout.size(); ++j) {
        gi[j] += in[i] * dout[j];
        s += wi[j] * dout[j];
      }
      din[i] = s;
    }
    if (l > 0) {
      const auto& pre = tape.pre[l - 1];
      for (std::size_t i = 0; i < din.size(); ++i) din[i] *= gelu_derivative(pre[i]);
    }
    dout = std::move(din);
  }
  const std::size_t off = cfg.token_dim + cfg.time_embed_dim;
  return std::vector<T>(dout.begin() + static_cast<std::ptrdiff_t>(off), dout.end());
}

template <typename T>
struct DiffusionLoss {
  T loss{0};
  std::vector<T> dz;  // dL/dz
};

/// Noise-prediction loss ‖ε − ε_θ(x_t | t, z)‖² for one token with t drawn
/// uniformly from [1, T_d]. Gradients are added into `grads` when given.
template <typename T>
DiffusionLoss<T> diffusion_loss(const DiffusionHeadParams<T>& p, const DiffusionConfig& cfg,
                                const NoiseSchedule& sched, std::span<const T> z,
                                std::span<const double> x, const RandomStream& stream,
                                DiffusionHeadParams<T>* grads = nullptr) {
  detail::require_shape(x.size() == cfg.token_dim, "diffusion loss: token width mismatch");
  const std::size_t t = 1 + static_cast<std::size_t>(stream.below(0, sched.steps()));
  const double ab = sched.alpha_bar(t);
  std::vector<T> eps(cfg.token_dim), xt(cfg.token_dim);
  for (std::size_t i = 0; i < cfg.token_dim; ++i) {
    eps[i] = static_cast<T>(stream.normal(1 + i));
    xt[i] = static_cast<T>(std::sqrt(ab) * x[i] + std::sqrt(1.0 - ab) * static_cast<double>(eps[i]));
  }
  HeadTape<T> tape;
  auto pred = predict_noise(p, cfg, std::span<const T>(xt), t, z, grads ? &tape : nullptr);
  DiffusionLoss<T> out;
  std::vector<T> dout(cfg.token_dim);
  for (std::size_t i = 0; i < cfg.token_dim; ++i) {
    const T e = pred[i] - eps[i];
    out.loss += e * e;
    dout[i] = T{2} * e;
  }
  if (grads) out.dz = predict_noise_backward(p, cfg, tape, std::move(dout), *grads);
  return out;
}

/// Retained timesteps of a `steps`-step strided chain: round(i·T_d/steps).
inline std::vector<std::size_t> strided_timesteps(std::size_t t_d, std::size_t steps) {
  if (steps < 1 || steps > t_d) throw DomainError("diffusion steps must lie in [1, t_d]");
  std::vector<std::size_t> ts(steps);
  for (std::size_t i = 1; i <= steps; ++i)
    ts[i - 1] = static_cast<std::size_t>(std::llround(static_cast<double>(i * t_d) /
                                                      static_cast<double>(steps)));
  return ts;
}

/// Optional classifier-free guidance inside the reverse chain.
template <typename T>
struct NoiseGuidance {
  std::span<const T> z_uncond;
  double scale = 1.0;
};

/// Ancestral reverse diffusion from x ~ N(0, I) over `steps` evenly spaced
/// retained timesteps. Draw 0..token_dim-1 seed the start; step i uses
/// draws (i+1)·token_dim onward.
template <typename T>
std::vector<double> sample_token(const DiffusionHeadParams<T>& p, const DiffusionConfig& cfg,
                                 const NoiseSchedule& sched, std::span<const T> z,
                                 std::size_t steps, const RandomStream& stream,
                                 std::optional<NoiseGuidance<T>> guide = {}) {
  const auto ts = strided_timesteps(sched.steps(), steps);
  const std::size_t k = cfg.token_dim;
  std::vector<T> x(k);
  for (std::size_t i = 0; i < k; ++i) x[i] = static_cast<T>(stream.normal(i));
  for (std::size_t i = ts.size(); i-- > 0;) {
    const std::size_t t = ts[i];
    const double ab = sched.alpha_bar(t);
    const double ab_prev = i == 0 ? 1.0 : sched.alpha_bar(ts[i - 1]);
    const double beta = 1.0 - ab / ab_prev;
    auto eps = predict_noise(p, cfg, std::span<const T>(x), t, z);
    if (guide) {
      auto eu = predict_noise(p, cfg, std::span<const T>(x), t, guide->z_uncond);
      for (std::size_t c = 0; c < k; ++c)
        eps[c] = eu[c] + static_cast<T>(guide->scale) * (eps[c] - eu[c]);
    }
    const double coef = beta / std::sqrt(1.0 - ab);
    const double inv = 1.0 / std::sqrt(1.0 - beta);
    const double sigma = i == 0 ? 0.0 : std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    for (std::size_t c = 0; c < k; ++c) {
      double v = inv * (static_cast<double>(x[c]) - coef * static_cast<double>(eps[c]));
      if (sigma > 0) v += sigma * stream.normal((i + 1) * k + c);
      x[c] = static_cast<T>(v);
    }
  }
  return std::vector<double>(x.begin(), x.end());
}

}  // namespace recap
