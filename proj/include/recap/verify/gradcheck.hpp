#pragma once

// Central finite-difference checks of the hand-derived gradients.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "recap/model/backprop.hpp"

namespace recap::verify {

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;  // name and values of the worst entry
};

/// |a − f| / max(|a|, |f|, floor). The floor sits above the round-off of a
/// central difference, about 1e-16·|L|/h, so vanishing gradients do not
/// turn cancellation noise into large relative errors.
inline double fd_relative(double analytic, double numeric, double loss = 1.0) {
  const double floor = 1e-5 * std::max(1.0, std::abs(loss));
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Checks up to `per_array` entries of every parameter array (plus any
/// diffusion head) of the masked loss against central differences.
inline GradCheck check_masked_loss_gradients(const ModelParams<double>& params,
                                             const ModelConfig& cfg, const TokenGrid& input,
                                             const TokenGrid& clean, std::optional<int> cond,
                                             const RandomStream& stream,
                                             std::size_t per_array = 6, double h = 1e-5) {
  auto grads = zero_like<double>(cfg);
  const double loss = masked_loss(params, cfg, input, clean, cond, stream, &grads).loss;
  std::vector<Matrix<double>*> g_arrays;
  grads.for_each([&](const std::string&, Matrix<double>& m) { g_arrays.push_back(&m); });
  ModelParams<double> probe = params;
  GradCheck out;
  std::size_t k = 0;
  std::vector<std::pair<std::string, Matrix<double>*>> arrays;
  probe.for_each([&](const std::string& n, Matrix<double>& m) { arrays.push_back({n, &m}); });
  for (auto& [name, m] : arrays) {
    const Matrix<double>& g = *g_arrays[k++];
    const std::size_t n = m->size();
    const std::size_t stride = std::max<std::size_t>(1, n / per_array);
    for (std::size_t i = (k * 7) % stride; i < n; i += stride) {
      double& w = m->values()[i];
      const double w0 = w;
      w = w0 + h;
      const double lp = masked_loss(probe, cfg, input, clean, cond, stream).loss;
      w = w0 - h;
      const double lm = masked_loss(probe, cfg, input, clean, cond, stream).loss;
      w = w0;
      const double e = fd_relative(g.values()[i], (lp - lm) / (2 * h), loss);
      ++out.checked;
      if (e > out.max_rel_error) {
        out.max_rel_error = e;
        out.worst = name + "[" + std::to_string(i) + "] analytic " +
                    std::to_string(g.values()[i]) + " numeric " + std::to_string((lp - lm) / (2 * h));
      }
    }
  }
  return out;
}

/// Diffusion-loss gradients for head weights and the latent z.
inline GradCheck check_diffusion_gradients(const DiffusionHeadParams<double>& params,
                                           const DiffusionConfig& cfg,
                                           const std::vector<double>& z,
                                           const std::vector<double>& x,
                                           const RandomStream& stream, double h = 1e-5) {
  const NoiseSchedule sched(cfg);
  DiffusionHeadParams<double> grads(cfg);
  auto res = diffusion_loss(params, cfg, sched, std::span<const double>(z),
                            std::span<const double>(x), stream, &grads);
  GradCheck out;
  auto loss_at = [&](const DiffusionHeadParams<double>& p, const std::vector<double>& zz) {
    return diffusion_loss(p, cfg, sched, std::span<const double>(zz), std::span<const double>(x),
                          stream)
        .loss;
  };
  auto note = [&](double a, double f, const std::string& what) {
    ++out.checked;
    const double e = fd_relative(a, f, res.loss);
    if (e > out.max_rel_error) {
      out.max_rel_error = e;
      out.worst = what + " analytic " + std::to_string(a) + " numeric " + std::to_string(f);
    }
  };
  DiffusionHeadParams<double> probe = params;
  for (std::size_t l = 0; l < probe.weights.size(); ++l) {
    for (auto* pair : {&probe.weights[l], &probe.biases[l]}) {
      const bool is_w = pair == &probe.weights[l];
      const auto& g = is_w ? grads.weights[l] : grads.biases[l];
      const std::size_t stride = std::max<std::size_t>(1, pair->size() / 12);
      for (std::size_t i = 0; i < pair->size(); i += stride) {
        double& w = pair->values()[i];
        const double w0 = w;
        w = w0 + h;
        const double lp = loss_at(probe, z);
        w = w0 - h;
        const double lm = loss_at(probe, z);
        w = w0;
        note(g.values()[i], (lp - lm) / (2 * h),
             "diffusion." + std::to_string(l) + (is_w ? ".w[" : ".b[") + std::to_string(i) + "]");
      }
    }
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    auto zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    note(res.dz[i], (loss_at(params, zp) - loss_at(params, zm)) / (2 * h),
         "z[" + std::to_string(i) + "]");
  }
  return out;
}

}  // namespace recap::verify
