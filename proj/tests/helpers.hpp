#pragma once

#include <optional>
#include <vector>

#include "recap/grid.hpp"
#include "recap/model/config.hpp"
#include "recap/model/params.hpp"
#include "recap/numerics/random.hpp"
#include "recap/verify/oracles.hpp"

namespace recap::testing {

inline ModelConfig small_config(Arch arch = Arch::decoder_only, std::size_t n = 8,
                                std::size_t d = 16, std::size_t layers = 2,
                                std::size_t vocab = 11) {
  ModelConfig c;
  c.arch = arch;
  c.seq_len = n;
  c.embed_dim = d;
  c.heads = 2;
  c.layers = layers;
  c.decoder_layers = layers;
  c.vocab = vocab;
  c.num_conditions = 3;
  return c;
}

/// Random weights with a live output head and perturbed norm parameters.
template <typename T>
ModelParams<T> random_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_params<double>(cfg, seed, false, 0.5);
  std::uint64_t k = 0;
  p.for_each([&](const std::string& name, Matrix<double>& m) {
    RandomStream s(seed, Phase::misc, k++);
    const bool gain = name.find("gain") != std::string::npos;
    const bool bias = name.find("bias") != std::string::npos || name.ends_with(".b") ||
                      name.ends_with("b1") || name.ends_with("b2");
    if (gain || bias)
      for (std::size_t i = 0; i < m.size(); ++i)
        m.values()[i] = (gain ? 1.0 : 0.0) + 0.2 * s.normal(i);
  });
  return p.template cast<T>();
}

/// Random discrete grid with roughly `masked_frac` of positions masked.
inline TokenGrid random_grid(const ModelConfig& cfg, std::uint64_t seed, double masked_frac,
                             std::optional<int> cond = {}) {
  RandomStream s(seed, Phase::misc, 99);
  TokenGrid g = TokenGrid::masked_discrete(cfg.seq_len, cond);
  for (std::size_t i = 0; i < cfg.seq_len; ++i)
    if (s.uniform(2 * i) >= masked_frac)
      g.set_id(i, static_cast<int>(s.below(2 * i + 1, cfg.vocab)));
  return g;
}

inline double rel_err(const Matrix<double>& a, const verify::Rows& b,
                      const std::vector<std::size_t>& rows) {
  double num = 0, den = 0;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) {
      num = std::max(num, std::abs(a(r, c) - b[rows[r]][c]));
      den = std::max(den, std::abs(b[rows[r]][c]));
    }
  return num / std::max(den, 1e-300);
}

}  // namespace recap::testing
