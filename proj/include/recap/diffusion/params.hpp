#pragma once

#include <string>
#include <vector>

#include "recap/model/config.hpp"
#include "recap/numerics/matrix.hpp"

namespace recap {

/// Weights of the denoising MLP ε_θ(x_t | t, z). Layer i maps widths[i] to
/// widths[i+1]; the input width is token_dim + time_embed_dim + z_dim and
/// the output width is token_dim.
template <typename T>
struct DiffusionHeadParams {
  std::vector<Matrix<T>> weights;
  std::vector<Matrix<T>> biases;

  DiffusionHeadParams() = default;
  explicit DiffusionHeadParams(const DiffusionConfig& cfg) {
    std::vector<std::size_t> widths{cfg.input_dim()};
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(cfg.token_dim);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      weights.emplace_back(widths[i], widths[i + 1]);
      biases.emplace_back(1, widths[i + 1]);
    }
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t i = 0; i < self.weights.size(); ++i) {
      f("diffusion." + std::to_string(i) + ".w", self.weights[i]);
      f("diffusion." + std::to_string(i) + ".b", self.biases[i]);
    }
  }
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  bool operator==(const DiffusionHeadParams&) const = default;
};

}  // namespace recap
