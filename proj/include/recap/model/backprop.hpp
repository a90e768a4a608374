#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "recap/diffusion/head.hpp"
#include "recap/model/forward.hpp"

namespace recap {

/// Parameter-shaped container of zeros, used to accumulate gradients.
template <typename T>
ModelParams<T> zero_like(const ModelConfig& cfg) {
  ModelParams<T> g(cfg);
  g.for_each([](const std::string&, Matrix<T>& m) { m.fill(T{0}); });
  return g;
}

/// params += scale · other, array by array.
template <typename T>
void axpy(ModelParams<T>& params, T scale, const ModelParams<T>& other) {
  std::vector<const Matrix<T>*> src;
  other.for_each([&](const std::string&, const Matrix<T>& m) { src.push_back(&m); });
  std::size_t k = 0;
  params.for_each([&](const std::string&, Matrix<T>& m) {
    const auto& o = *src.at(k++);
    for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] += scale * o.values()[i];
  });
}

namespace detail {

template <typename T>
void add_colsum(const Matrix<T>& dy, Matrix<T>& acc) {
  for (std::size_t i = 0; i < dy.rows(); ++i)
    for (std::size_t j = 0; j < dy.cols(); ++j) acc.data()[j] += dy(i, j);
}

template <typename T>
void add_into(Matrix<T>& acc, const Matrix<T>& m) {
  for (std::size_t i = 0; i < m.size(); ++i) acc.values()[i] += m.values()[i];
}

/// Row-wise layer-norm backward; returns dx and accumulates gain/bias grads.
template <typename T>
Matrix<T> layer_norm_backward(const LayerNormStats<T>& st, const Matrix<T>& gain,
                              const Matrix<T>& dy, Matrix<T>& dgain, Matrix<T>& dbias) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix<T> dx(n, d);
  std::vector<T> dxh(d);
  for (std::size_t i = 0; i < n; ++i) {
    T mean_d{0}, mean_dx{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T g = dy(i, j);
      dgain.data()[j] += g * st.xhat(i, j);
      dbias.data()[j] += g;
      dxh[j] = g * gain.data()[j];
      mean_d += dxh[j];
      mean_dx += dxh[j] * st.xhat(i, j);
    }
    mean_d /= static_cast<T>(d);
    mean_dx /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(i, j) = st.rstd[i] * (dxh[j] - mean_d - st.xhat(i, j) * mean_dx);
  }
  return dx;
}

/// Backward of one full self-attention block; returns dL/dx_in.
template <typename T>
Matrix<T> block_backward(const BlockParams<T>& b, std::size_t heads, const BlockTape<T>& tp,
                         const Matrix<T>& dout, BlockParams<T>& g) {
  const std::size_t n = dout.rows(), d = dout.cols(), dk = d / heads;
  // MLP branch
  add_colsum(dout, g.b2);
  add_into(g.w2, matmul_tn(tp.act, dout));
  Matrix<T> da = matmul_nt(dout, b.w2);
  for (std::size_t i = 0; i < da.size(); ++i)
    da.values()[i] *= gelu_derivative(tp.pre_act.values()[i]);
  add_colsum(da, g.b1);
  add_into(g.w1, matmul_tn(tp.h2, da));
  Matrix<T> dh2 = matmul_nt(da, b.w1);
  Matrix<T> dmid = layer_norm_backward(tp.ln2, b.ln2_gain, dh2, g.ln2_gain, g.ln2_bias);
  add_into(dmid, dout);
  // attention branch
  add_into(g.wo, matmul_tn(tp.attn, dmid));
  Matrix<T> dattn = matmul_nt(dmid, b.wo);
  Matrix<T> dq(n, d), dkey(n, d), dv(n, d);
  const T scale = T{1} / std::sqrt(static_cast<T>(dk));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dk;
    const Matrix<T>& P = tp.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<T> dp(n);
      T dot_pp{0};
      for (std::size_t j = 0; j < n; ++j) {
        T s{0};
        for (std::size_t c = 0; c < dk; ++c) s += dattn(i, off + c) * tp.v(j, off + c);
        dp[j] = s;
        dot_pp += s * P(i, j);
        for (std::size_t c = 0; c < dk; ++c) dv(j, off + c) += P(i, j) * dattn(i, off + c);
      }
      for (std::size_t j = 0; j < n; ++j) {
        const T ds = P(i, j) * (dp[j] - dot_pp) * scale;
        for (std::size_t c = 0; c < dk; ++c) {
          dq(i, off + c) += ds * tp.k(j, off + c);
          dkey(j, off + c) += ds * tp.q(i, off + c);
        }
      }
    }
  }
  add_into(g.wq, matmul_tn(tp.h1, dq));
  add_into(g.wk, matmul_tn(tp.h1, dkey));
  add_into(g.wv, matmul_tn(tp.h1, dv));
  Matrix<T> dh1 = matmul_nt(dq, b.wq);
  matmul_accumulate(dkey, transpose(b.wk), dh1);
  matmul_accumulate(dv, transpose(b.wv), dh1);
  Matrix<T> dx = layer_norm_backward(tp.ln1, b.ln1_gain, dh1, g.ln1_gain, g.ln1_bias);
  add_into(dx, dmid);
  return dx;
}

template <typename T>
Matrix<T> stack_backward(const std::vector<BlockParams<T>>& blocks, std::size_t heads,
                         const std::vector<BlockTape<T>>& tapes, Matrix<T> dx,
                         std::vector<BlockParams<T>>& grads) {
  for (std::size_t l = blocks.size(); l-- > 0;)
    dx = block_backward(blocks[l], heads, tapes[l], dx, grads[l]);
  return dx;
}

template <typename T>
void embed_value_backward(const ModelConfig& cfg, const TokenGrid& grid, std::size_t i,
                          std::span<const T> dx, ModelParams<T>& g) {
  const std::size_t d = cfg.embed_dim;
  if (cfg.token_mode == TokenMode::discrete) {
    auto row = g.token_embed.row(static_cast<std::size_t>(grid.id(i)));
    for (std::size_t c = 0; c < d; ++c) row[c] += dx[c];
  } else {
    auto x = grid.vector(i);
    for (std::size_t c = 0; c < d; ++c) g.input_bias(0, c) += dx[c];
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) g.token_embed(r, c) += static_cast<T>(x[r]) * dx[c];
  }
}

}  // namespace detail

/// Accumulates into `grads` the gradient of a loss whose derivative with
/// respect to the N × output_dim outputs of forward_full is `doutputs`.
template <typename T>
void backward_full(const ModelParams<T>& params, const ModelConfig& cfg,
                   const ForwardRecord<T>& rec, const ForwardTape<T>& tape,
                   const Matrix<T>& doutputs, ModelParams<T>& grads) {
  const std::size_t N = cfg.seq_len, d = cfg.embed_dim;
  detail::require_shape(doutputs.rows() == N && doutputs.cols() == cfg.output_dim(),
                        "backward: output gradient shape mismatch");
  detail::add_colsum(doutputs, grads.head_b);
  detail::add_into(grads.head_w, matmul_tn(tape.final_hidden, doutputs));
  Matrix<T> dh = matmul_nt(doutputs, params.head_w);
  Matrix<T> dpos = detail::layer_norm_backward(tape.final_norm, params.final_norm_gain, dh,
                                               grads.final_norm_gain, grads.final_norm_bias);
  const auto& grid = rec.entry;

  if (cfg.arch == Arch::decoder_only) {
    Matrix<T> dx = detail::stack_backward(params.blocks, cfg.heads, tape.decoder, dpos,
                                          grads.blocks);
    for (std::size_t i = 0; i < N; ++i) {
      auto r = dx.row(i);
      if (grid.is_masked(i)) {
        for (std::size_t c = 0; c < d; ++c) grads.mask_embed(0, c) += r[c];
      } else {
        detail::embed_value_backward(cfg, grid, i, std::span<const T>(r), grads);
      }
      for (std::size_t c = 0; c < d; ++c) {
        grads.pos_embed(i, c) += r[c];
        grads.cond_embed(rec.condition, c) += r[c];
      }
    }
    return;
  }

  Matrix<T> dlast(N + 1, d);
  std::copy(dpos.values().begin(), dpos.values().end(), dlast.values().begin());
  Matrix<T> dx = detail::stack_backward(params.decoder_blocks, cfg.heads, tape.decoder, dlast,
                                        grads.decoder_blocks);
  const auto& ids = rec.encoder.ids;
  Matrix<T> denc(ids.size(), d);
  std::size_t r = 0;
  for (std::size_t i = 0; i < N; ++i) {
    auto xi = dx.row(i);
    for (std::size_t c = 0; c < d; ++c) grads.dec_pos_embed(i, c) += xi[c];
    if (grid.is_masked(i)) {
      for (std::size_t c = 0; c < d; ++c) grads.mask_embed(0, c) += xi[c];
    } else {
      std::copy(xi.begin(), xi.end(), denc.row(r++).begin());
    }
  }
  {
    auto slot = dx.row(N);
    std::copy(slot.begin(), slot.end(), denc.row(ids.size() - 1).begin());
  }
  Matrix<T> de = detail::layer_norm_backward(tape.enc_norm, params.enc_norm_gain, denc,
                                             grads.enc_norm_gain, grads.enc_norm_bias);
  Matrix<T> dein = detail::stack_backward(params.blocks, cfg.heads, tape.encoder, de,
                                          grads.blocks);
  for (std::size_t row = 0; row + 1 < ids.size(); ++row) {
    auto g = dein.row(row);
    detail::embed_value_backward(cfg, grid, ids[row], std::span<const T>(g), grads);
    for (std::size_t c = 0; c < d; ++c) grads.pos_embed(ids[row], c) += g[c];
  }
  auto gs = dein.row(ids.size() - 1);
  for (std::size_t c = 0; c < d; ++c) grads.cond_embed(rec.condition, c) += gs[c];
}

/// Mean training loss over the masked positions of `input`.
template <typename T>
struct MaskedLoss {
  T loss{0};
  std::size_t count = 0;
};

/// Masked-prediction loss of one example. `input` is the partially masked
/// grid, `clean` the complete example. Discrete mode: mean cross-entropy
/// over masked positions. Continuous mode: mean per-token diffusion loss.
/// Gradients are accumulated into `grads` when it is non-null. Each masked
/// token averages `diffusion_draws` independent (t, ε) draws.
template <typename T>
MaskedLoss<T> masked_loss(const ModelParams<T>& params, const ModelConfig& cfg,
                          const TokenGrid& input, const TokenGrid& clean,
                          std::optional<int> condition, const RandomStream& stream,
                          ModelParams<T>* grads = nullptr, std::size_t diffusion_draws = 1) {
  detail::require_shape(clean.length() == cfg.seq_len && clean.masked_count() == 0,
                        "training example must be complete and match seq_len");
  ForwardTape<T> tape;
  auto rec = forward_full(params, cfg, input, condition, grads ? &tape : nullptr);
  const auto masked = input.masked_positions();
  MaskedLoss<T> out;
  out.count = masked.size();
  if (masked.empty()) return out;
  const T inv = T{1} / static_cast<T>(masked.size());
  Matrix<T> dout(cfg.seq_len, cfg.output_dim());

  if (cfg.token_mode == TokenMode::discrete) {
    for (auto i : masked) {
      auto ls = log_softmax(std::span<const T>(rec.outputs.row(i)));
      const auto y = static_cast<std::size_t>(clean.id(i));
      detail::require(y < cfg.vocab, "training token out of vocabulary");
      out.loss -= ls[y] * inv;
      if (grads) {
        for (std::size_t v = 0; v < cfg.vocab; ++v)
          dout(i, v) = (std::exp(ls[v]) - (v == y ? T{1} : T{0})) * inv;
      }
    }
  } else {
    if (!params.diffusion || !cfg.diffusion)
      throw ConfigError("continuous training needs a diffusion head");
    if (diffusion_draws < 1) throw DomainError("masked_loss: diffusion_draws must be at least 1");
    const NoiseSchedule sched(*cfg.diffusion);
    std::optional<DiffusionHeadParams<T>> head_grads;
    if (grads) head_grads = DiffusionHeadParams<T>(*cfg.diffusion);
    const T w = inv / static_cast<T>(diffusion_draws);
    for (auto i : masked) {
      auto z = rec.outputs.row(i);
      for (std::size_t r = 0; r < diffusion_draws; ++r) {
        const RandomStream ds = r == 0 ? stream.with_position(i) : stream.with_position(i).with_step(r);
        auto l = diffusion_loss(*params.diffusion, *cfg.diffusion, sched, std::span<const T>(z),
                                clean.vector(i), ds, head_grads ? &*head_grads : nullptr);
        out.loss += l.loss * w;
        if (grads)
          for (std::size_t c = 0; c < l.dz.size(); ++c) dout(i, c) += l.dz[c] * w;
      }
    }
    if (grads) {
      auto& dst = *grads->diffusion;
      for (std::size_t l = 0; l < dst.weights.size(); ++l) {
        for (std::size_t k = 0; k < dst.weights[l].size(); ++k)
          dst.weights[l].values()[k] += w * head_grads->weights[l].values()[k];
        for (std::size_t k = 0; k < dst.biases[l].size(); ++k)
          dst.biases[l].values()[k] += w * head_grads->biases[l].values()[k];
      }
    }
  }
  if (grads) {
    backward_full(params, cfg, rec, tape, dout, *grads);
  }
  return out;
}

}  // namespace recap
