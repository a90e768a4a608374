#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "recap/diffusion/params.hpp"
#include "recap/model/config.hpp"
#include "recap/numerics/matrix.hpp"
#include "recap/numerics/random.hpp"

namespace recap {

/// One pre-norm transformer block: x += Attn(LN1(x)); x += MLP(LN2(x)).
template <typename T>
struct BlockParams {
  Matrix<T> ln1_gain, ln1_bias;
  Matrix<T> wq, wk, wv, wo;
  Matrix<T> ln2_gain, ln2_bias;
  Matrix<T> w1, b1, w2, b2;

  BlockParams() = default;
  BlockParams(std::size_t d, std::size_t hidden)
      : ln1_gain(1, d, T{1}), ln1_bias(1, d), wq(d, d), wk(d, d), wv(d, d), wo(d, d),
        ln2_gain(1, d, T{1}), ln2_bias(1, d), w1(d, hidden), b1(1, hidden), w2(hidden, d),
        b2(1, d) {}

  template <typename Self, typename F>
  static void visit(Self& s, const std::string& prefix, F&& f) {
    f(prefix + "ln1.gain", s.ln1_gain);
    f(prefix + "ln1.bias", s.ln1_bias);
    f(prefix + "attn.wq", s.wq);
    f(prefix + "attn.wk", s.wk);
    f(prefix + "attn.wv", s.wv);
    f(prefix + "attn.wo", s.wo);
    f(prefix + "ln2.gain", s.ln2_gain);
    f(prefix + "ln2.bias", s.ln2_bias);
    f(prefix + "mlp.w1", s.w1);
    f(prefix + "mlp.b1", s.b1);
    f(prefix + "mlp.w2", s.w2);
    f(prefix + "mlp.b2", s.b2);
  }

  bool operator==(const BlockParams&) const = default;
};

/// Complete weight set of the toy masked generative transformer.
///
/// decoder_only: x_i = embed(x_i or [MASK]) + pos_i + cond, then `blocks`.
/// encoder_decoder: `blocks` form the encoder over the condition slot and
/// the unmasked tokens (followed by enc_norm); `decoder_blocks` run over all
/// positions, fed the encoder outputs at unmasked slots and the mask
/// embedding elsewhere, plus dec_pos.
template <typename T>
struct ModelParams {
  Matrix<T> token_embed;  // V×d (discrete) or token_dim×d (continuous input projection)
  Matrix<T> input_bias;   // 1×d, continuous only
  Matrix<T> pos_embed;    // N×d
  Matrix<T> mask_embed;   // 1×d
  Matrix<T> cond_embed;   // (num_conditions + 1)×d, last row is the null condition
  std::vector<BlockParams<T>> blocks;
  Matrix<T> enc_norm_gain, enc_norm_bias;  // encoder_decoder only
  Matrix<T> dec_pos_embed;                 // encoder_decoder only
  std::vector<BlockParams<T>> decoder_blocks;
  Matrix<T> final_norm_gain, final_norm_bias;
  Matrix<T> head_w, head_b;  // d×output_dim, 1×output_dim
  std::optional<DiffusionHeadParams<T>> diffusion;

  ModelParams() = default;

  /// Zero-filled parameters with the shapes implied by `cfg` (norm gains 1).
  explicit ModelParams(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim, h = cfg.mlp_hidden();
    if (cfg.token_mode == TokenMode::discrete) {
      token_embed = Matrix<T>(cfg.vocab, d);
    } else {
      token_embed = Matrix<T>(cfg.token_dim, d);
      input_bias = Matrix<T>(1, d);
    }
    pos_embed = Matrix<T>(cfg.seq_len, d);
    mask_embed = Matrix<T>(1, d);
    cond_embed = Matrix<T>(cfg.num_conditions + 1, d);
    blocks.assign(cfg.layers, BlockParams<T>(d, h));
    if (cfg.arch == Arch::encoder_decoder) {
      enc_norm_gain = Matrix<T>(1, d, T{1});
      enc_norm_bias = Matrix<T>(1, d);
      dec_pos_embed = Matrix<T>(cfg.seq_len, d);
      decoder_blocks.assign(cfg.decoder_layers, BlockParams<T>(d, h));
    }
    final_norm_gain = Matrix<T>(1, d, T{1});
    final_norm_bias = Matrix<T>(1, d);
    head_w = Matrix<T>(d, cfg.output_dim());
    head_b = Matrix<T>(1, cfg.output_dim());
    if (cfg.diffusion) diffusion = DiffusionHeadParams<T>(*cfg.diffusion);
  }

  /// Visits every array in checkpoint order. Empty optional arrays are skipped.
  template <typename Self, typename F>
  static void visit(Self& s, F&& f) {
    f("token_embed", s.token_embed);
    if (!s.input_bias.empty()) f("input_bias", s.input_bias);
    f("pos_embed", s.pos_embed);
    f("mask_embed", s.mask_embed);
    f("cond_embed", s.cond_embed);
    for (std::size_t l = 0; l < s.blocks.size(); ++l)
      BlockParams<T>::visit(s.blocks[l], "blocks." + std::to_string(l) + ".", f);
    if (!s.decoder_blocks.empty()) {
      f("enc_norm.gain", s.enc_norm_gain);
      f("enc_norm.bias", s.enc_norm_bias);
      f("dec_pos_embed", s.dec_pos_embed);
      for (std::size_t l = 0; l < s.decoder_blocks.size(); ++l)
        BlockParams<T>::visit(s.decoder_blocks[l], "decoder_blocks." + std::to_string(l) + ".", f);
    }
    f("final_norm.gain", s.final_norm_gain);
    f("final_norm.bias", s.final_norm_bias);
    f("head.w", s.head_w);
    f("head.b", s.head_b);
    if (s.diffusion) s.diffusion->for_each(f);
  }
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  template <typename U>
  ModelParams<U> cast() const;

  bool operator==(const ModelParams&) const = default;
};

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  std::vector<Matrix<U>> arrays;
  for_each([&](const std::string&, const Matrix<T>& m) { arrays.push_back(m.template cast<U>()); });
  // Rebuild the structure, then copy arrays in visit order.
  out.blocks.resize(blocks.size());
  out.decoder_blocks.resize(decoder_blocks.size());
  if (!input_bias.empty()) out.input_bias = Matrix<U>(1, 1);
  if (diffusion) {
    out.diffusion = DiffusionHeadParams<U>();
    out.diffusion->weights.resize(diffusion->weights.size());
    out.diffusion->biases.resize(diffusion->biases.size());
  }
  std::size_t k = 0;
  out.for_each([&](const std::string&, Matrix<U>& m) { m = std::move(arrays[k++]); });
  return out;
}

/// Fixed sin-cos features of the row and column of each position (square N),
/// or of the flat index otherwise. Columns beyond the last full group stay 0.
template <typename T>
void fill_sincos_positions(Matrix<T>& m) {
  const std::size_t n = m.rows(), d = m.cols();
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  const bool square = side * side == n;
  const std::size_t width = square ? 4 : 2, groups = d / width;
  m.fill(T{0});
  for (std::size_t i = 0; i < n; ++i) {
    const double coord[2] = {static_cast<double>(square ? i / side : i),
                             static_cast<double>(square ? i % side : 0)};
    for (std::size_t f = 0; f < groups; ++f) {
      const double w =
          std::pow(100.0, -static_cast<double>(f) / static_cast<double>(std::max<std::size_t>(groups, 1)));
      for (std::size_t a = 0; a < width / 2; ++a) {
        m(i, width * f + 2 * a) = static_cast<T>(std::sin(coord[a] * w));
        m(i, width * f + 2 * a + 1) = static_cast<T>(std::cos(coord[a] * w));
      }
    }
  }
}

/// Random initialisation: normal(0, 1/sqrt(fan_in)) for projections,
/// normal(0, embed_std) for embedding tables. Positional tables start from
/// sin-cos features; random ones make local attention very slow to learn. The output head starts at zero
/// when `zero_head` is set, which makes initial logits uniform.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed, bool zero_head = true,
                           double embed_std = 0.5) {
  ModelParams<T> p(cfg);
  std::uint64_t tensor = 0;
  auto fill_normal = [&](Matrix<T>& m, double stddev) {
    RandomStream s(seed, Phase::init, tensor++);
    for (std::size_t i = 0; i < m.size(); ++i)
      m.values()[i] = static_cast<T>(stddev * s.normal(i));
  };
  const double d = static_cast<double>(cfg.embed_dim);
  const double h = static_cast<double>(cfg.mlp_hidden());
  fill_normal(p.token_embed, cfg.token_mode == TokenMode::discrete
                                 ? embed_std
                                 : 1.0 / std::sqrt(static_cast<double>(cfg.token_dim)));
  fill_sincos_positions(p.pos_embed);
  ++tensor;
  fill_normal(p.mask_embed, embed_std);
  fill_normal(p.cond_embed, embed_std);
  auto init_block = [&](BlockParams<T>& b) {
    fill_normal(b.wq, 1.0 / std::sqrt(d));
    fill_normal(b.wk, 1.0 / std::sqrt(d));
    fill_normal(b.wv, 1.0 / std::sqrt(d));
    fill_normal(b.wo, 1.0 / std::sqrt(d));
    fill_normal(b.w1, 1.0 / std::sqrt(d));
    fill_normal(b.w2, 1.0 / std::sqrt(h));
  };
  for (auto& b : p.blocks) init_block(b);
  for (auto& b : p.decoder_blocks) init_block(b);
  if (cfg.arch == Arch::encoder_decoder) fill_sincos_positions(p.dec_pos_embed);
  if (!zero_head) fill_normal(p.head_w, 1.0 / std::sqrt(d));
  if (p.diffusion) {
    for (std::size_t i = 0; i < p.diffusion->weights.size(); ++i) {
      auto& w = p.diffusion->weights[i];
      const bool last = i + 1 == p.diffusion->weights.size();
      fill_normal(w, (last ? 0.1 : 1.0) / std::sqrt(static_cast<double>(w.rows())));
    }
  }
  return p;
}

/// Checks that every array has the shape `cfg` implies.
template <typename T>
void check_shapes(const ModelParams<T>& p, const ModelConfig& cfg) {
  ModelParams<T> ref(cfg);
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> want, got;
  ref.for_each([&](const std::string& n, const Matrix<T>& m) {
    want.push_back({n, {m.rows(), m.cols()}});
  });
  p.for_each([&](const std::string& n, const Matrix<T>& m) {
    got.push_back({n, {m.rows(), m.cols()}});
  });
  if (want != got) throw DimensionError("model parameters do not match the configuration");
  p.for_each([&](const std::string& n, const Matrix<T>& m) {
    if (!all_finite(m)) throw DomainError("non-finite values in parameter " + n);
  });
}

}  // namespace recap
