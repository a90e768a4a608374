#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "recap/grid.hpp"
#include "recap/model/config.hpp"
#include "recap/model/params.hpp"
#include "recap/numerics/kernels.hpp"

namespace recap {

/// Per-row state saved by a block when training (input to backward).
template <typename T>
struct BlockTape {
  Matrix<T> x_in;
  LayerNormStats<T> ln1;
  Matrix<T> h1, q, k, v;
  std::vector<Matrix<T>> probs;  // one (n_query × n_context) matrix per head
  Matrix<T> attn;                // concatenated head outputs, before wo
  Matrix<T> x_mid;
  LayerNormStats<T> ln2;
  Matrix<T> h2, pre_act, act;
};

/// Multi-head scaled dot-product attention of `q` rows over the context
/// rows of `k` / `v`. Heads occupy contiguous column blocks.
template <typename T>
Matrix<T> multi_head_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                               std::size_t heads, std::vector<Matrix<T>>* probs_out = nullptr) {
  detail::require_shape(q.cols() == k.cols() && k.cols() == v.cols() && k.rows() == v.rows(),
                        "attention: operand shapes disagree");
  detail::require_shape(heads > 0 && q.cols() % heads == 0, "attention: bad head count");
  const std::size_t nq = q.rows(), nc = k.rows(), d = q.cols(), dk = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dk));
  Matrix<T> out(nq, d);
  if (probs_out) probs_out->clear();
  Matrix<T> kt(dk, nc);
  Matrix<T> scores(nq, nc);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dk;
    for (std::size_t j = 0; j < nc; ++j)
      for (std::size_t c = 0; c < dk; ++c) kt(c, j) = k(j, off + c);
    scores.fill(T{0});
    for (std::size_t i = 0; i < nq; ++i) {
      T* si = scores.data() + i * nc;
      const T* qi = q.data() + i * d + off;
      for (std::size_t c = 0; c < dk; ++c) {
        const T qc = qi[c];
        const T* kc = kt.data() + c * nc;
        for (std::size_t j = 0; j < nc; ++j) si[j] += qc * kc[j];
      }
      for (std::size_t j = 0; j < nc; ++j) si[j] *= scale;
    }
    softmax_rows(scores);
    for (std::size_t i = 0; i < nq; ++i) {
      T* oi = out.data() + i * d + off;
      const T* pi = scores.data() + i * nc;
      for (std::size_t j = 0; j < nc; ++j) {
        const T p = pi[j];
        const T* vj = v.data() + j * d + off;
        for (std::size_t c = 0; c < dk; ++c) oi[c] += p * vj[c];
      }
    }
    if (probs_out) probs_out->push_back(scores);
  }
  return out;
}

/// Query/key/value projections of the normalised rows.
template <typename T>
struct Projections {
  Matrix<T> h1, q, k, v;
};

template <typename T>
Projections<T> project_qkv(const BlockParams<T>& b, const Matrix<T>& x, T eps,
                           LayerNormStats<T>* stats = nullptr) {
  Projections<T> p;
  p.h1 = layer_norm_rows(x, b.ln1_gain, b.ln1_bias, eps, stats);
  p.q = matmul(p.h1, b.wq);
  p.k = matmul(p.h1, b.wk);
  p.v = matmul(p.h1, b.wv);
  return p;
}

/// x += attn · wo; x += MLP(LN2(x)). Fills the MLP part of `tape` when given.
template <typename T>
void finish_block(const BlockParams<T>& b, const Matrix<T>& attn, Matrix<T>& x, T eps,
                  BlockTape<T>* tape = nullptr) {
  matmul_accumulate(attn, b.wo, x);
  if (tape) tape->x_mid = x;
  LayerNormStats<T> stats;
  Matrix<T> h2 = layer_norm_rows(x, b.ln2_gain, b.ln2_bias, eps, tape ? &stats : nullptr);
  Matrix<T> a = matmul(h2, b.w1);
  add_row_bias(a, b.b1);
  Matrix<T> g(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) g.values()[i] = gelu(a.values()[i]);
  matmul_accumulate(g, b.w2, x);
  add_row_bias(x, b.b2);
  if (tape) {
    tape->ln2 = std::move(stats);
    tape->h2 = std::move(h2);
    tape->pre_act = std::move(a);
    tape->act = std::move(g);
  }
}

/// Taps of one layer kept for cache construction and drift probing.
template <typename T>
struct LayerTap {
  Matrix<T> residual;    // block input
  Matrix<T> attn_input;  // LN1 output, the pre-QKV features
  Matrix<T> keys, values;
};

/// Full self-attention block over all rows of x (updated in place).
template <typename T>
void block_forward(const BlockParams<T>& b, std::size_t heads, T eps, Matrix<T>& x,
                   LayerTap<T>* tap = nullptr, BlockTape<T>* tape = nullptr) {
  if (tape) tape->x_in = x;
  LayerNormStats<T> stats;
  Projections<T> p = project_qkv(b, x, eps, tape ? &stats : nullptr);
  Matrix<T> attn = multi_head_attention(p.q, p.k, p.v, heads, tape ? &tape->probs : nullptr);
  if (tap) {
    tap->residual = x;
    tap->attn_input = p.h1;
    tap->keys = p.k;
    tap->values = p.v;
  }
  finish_block(b, attn, x, eps, tape);
  if (tape) {
    tape->ln1 = std::move(stats);
    tape->h1 = std::move(p.h1);
    tape->q = std::move(p.q);
    tape->k = std::move(p.k);
    tape->v = std::move(p.v);
    tape->attn = std::move(attn);
  }
}

/// Everything one transformer stack produced during a full evaluation.
template <typename T>
struct StackRecord {
  std::vector<std::size_t> ids;  // row id of every row (position, or the condition slot)
  std::vector<LayerTap<T>> layers;
  Matrix<T> output;  // residual stream after the last block

  std::size_t rows() const { return ids.size(); }
};

/// Result of forward_full: per-position outputs plus every layer tap.
template <typename T>
struct ForwardRecord {
  Arch arch = Arch::decoder_only;
  TokenGrid entry;             // grid the evaluation was run on
  std::size_t condition = 0;   // resolved condition index (null index when unconditional)
  StackRecord<T> encoder;      // encoder_decoder only
  Matrix<T> encoder_output;    // enc_norm(encoder.output), rows follow encoder.ids
  StackRecord<T> decoder;      // rows 0..N-1 (+ condition slot for encoder_decoder)
  Matrix<T> outputs;           // N × output_dim: logits or latents z
};

namespace detail {

template <typename T>
std::size_t resolve_condition(const ModelConfig& cfg, std::optional<int> condition) {
  if (!condition) return cfg.null_condition();
  if (*condition < 0 || static_cast<std::size_t>(*condition) > cfg.num_conditions)
    throw DomainError("unknown condition id " + std::to_string(*condition));
  return static_cast<std::size_t>(*condition);
}

template <typename T>
void check_grid(const ModelConfig& cfg, const TokenGrid& grid) {
  require_shape(grid.length() == cfg.seq_len, "grid length does not match seq_len");
  if (cfg.token_mode == TokenMode::discrete) {
    require_shape(!grid.continuous(), "continuous grid given to a discrete model");
    for (std::size_t i = 0; i < grid.length(); ++i)
      if (!grid.is_masked(i) &&
          (grid.id(i) < 0 || static_cast<std::size_t>(grid.id(i)) >= cfg.vocab))
        throw DomainError("token id out of vocabulary at position " + std::to_string(i));
  } else {
    require_shape(grid.continuous() && grid.token_dim() == cfg.token_dim,
                  "grid token_dim does not match the model");
  }
}

/// Writes the value embedding of position i (no positional term) into out.
template <typename T>
void embed_value(const ModelParams<T>& p, const ModelConfig& cfg, const TokenGrid& grid,
                 std::size_t i, std::span<T> out) {
  const std::size_t d = cfg.embed_dim;
  if (cfg.token_mode == TokenMode::discrete) {
    auto row = p.token_embed.row(static_cast<std::size_t>(grid.id(i)));
    std::copy(row.begin(), row.end(), out.begin());
  } else {
    auto x = grid.vector(i);
    for (std::size_t c = 0; c < d; ++c) out[c] = p.input_bias(0, c);
    for (std::size_t r = 0; r < x.size(); ++r) {
      const T xr = static_cast<T>(x[r]);
      for (std::size_t c = 0; c < d; ++c) out[c] += xr * p.token_embed(r, c);
    }
  }
}

/// decoder_only input row for position i.
template <typename T>
void decoder_only_input(const ModelParams<T>& p, const ModelConfig& cfg, const TokenGrid& grid,
                        std::size_t i, std::size_t cond, std::span<T> out) {
  if (grid.is_masked(i)) {
    auto m = p.mask_embed.row(0);
    std::copy(m.begin(), m.end(), out.begin());
  } else {
    embed_value(p, cfg, grid, i, out);
  }
  for (std::size_t c = 0; c < cfg.embed_dim; ++c)
    out[c] += p.pos_embed(i, c) + p.cond_embed(cond, c);
}

/// encoder_decoder encoder input row for an unmasked position i.
template <typename T>
void encoder_input(const ModelParams<T>& p, const ModelConfig& cfg, const TokenGrid& grid,
                   std::size_t i, std::span<T> out) {
  embed_value(p, cfg, grid, i, out);
  for (std::size_t c = 0; c < cfg.embed_dim; ++c) out[c] += p.pos_embed(i, c);
}

template <typename T, typename Tape = void>
Matrix<T> output_head(const ModelParams<T>& p, const ModelConfig& cfg, const Matrix<T>& x,
                      Tape* tape = nullptr) {
  LayerNormStats<T>* stats = nullptr;
  if constexpr (!std::is_void_v<Tape>) stats = tape ? &tape->final_norm : nullptr;
  Matrix<T> h = layer_norm_rows(x, p.final_norm_gain, p.final_norm_bias,
                                static_cast<T>(cfg.norm_epsilon), stats);
  Matrix<T> out = matmul(h, p.head_w);
  add_row_bias(out, p.head_b);
  if constexpr (!std::is_void_v<Tape>)
    if (tape) tape->final_hidden = std::move(h);
  return out;
}

template <typename T>
void run_stack(const std::vector<BlockParams<T>>& blocks, const ModelConfig& cfg, Matrix<T>& x,
               StackRecord<T>* rec, std::vector<BlockTape<T>>* tapes = nullptr) {
  const T eps = static_cast<T>(cfg.norm_epsilon);
  if (rec) rec->layers.resize(blocks.size());
  if (tapes) tapes->resize(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l)
    block_forward(blocks[l], cfg.heads, eps, x, rec ? &rec->layers[l] : nullptr,
                  tapes ? &(*tapes)[l] : nullptr);
  if (rec) rec->output = x;
}

}  // namespace detail

/// Everything the backward pass needs beyond the ForwardRecord.
template <typename T>
struct ForwardTape {
  std::vector<BlockTape<T>> encoder, decoder;
  LayerNormStats<T> enc_norm, final_norm;
  Matrix<T> final_hidden;  // normalised rows fed to the output head
};

/// Full evaluation of the model on `grid`. Returns outputs for every
/// position together with all per-layer taps needed to build a cache.
template <typename T>
ForwardRecord<T> forward_full(const ModelParams<T>& params, const ModelConfig& cfg,
                              const TokenGrid& grid, std::optional<int> condition,
                              ForwardTape<T>* tape = nullptr) {
  detail::check_grid<T>(cfg, grid);
  const std::size_t N = cfg.seq_len, d = cfg.embed_dim;
  ForwardRecord<T> rec;
  rec.arch = cfg.arch;
  rec.entry = grid;
  rec.entry.set_condition(condition);
  rec.condition = detail::resolve_condition<T>(cfg, condition);

  if (cfg.arch == Arch::decoder_only) {
    Matrix<T> x(N, d);
    for (std::size_t i = 0; i < N; ++i)
      detail::decoder_only_input(params, cfg, grid, i, rec.condition, x.row(i));
    rec.decoder.ids.resize(N);
    for (std::size_t i = 0; i < N; ++i) rec.decoder.ids[i] = i;
    detail::run_stack(params.blocks, cfg, x, &rec.decoder, tape ? &tape->decoder : nullptr);
    rec.outputs = detail::output_head(params, cfg, x, tape);
    return rec;
  }

  // Encoder over the unmasked positions followed by the condition slot.
  const auto visible = grid.unmasked_positions();
  Matrix<T> e(visible.size() + 1, d);
  for (std::size_t r = 0; r < visible.size(); ++r)
    detail::encoder_input(params, cfg, grid, visible[r], e.row(r));
  {
    auto slot = params.cond_embed.row(rec.condition);
    std::copy(slot.begin(), slot.end(), e.row(visible.size()).begin());
  }
  rec.encoder.ids = visible;
  rec.encoder.ids.push_back(cfg.condition_slot());
  detail::run_stack(params.blocks, cfg, e, &rec.encoder, tape ? &tape->encoder : nullptr);
  rec.encoder_output = layer_norm_rows(e, params.enc_norm_gain, params.enc_norm_bias,
                                       static_cast<T>(cfg.norm_epsilon),
                                       tape ? &tape->enc_norm : nullptr);

  // Decoder over all positions plus the condition slot.
  Matrix<T> x(N + 1, d);
  std::size_t r = 0;
  for (std::size_t i = 0; i < N; ++i) {
    auto xi = x.row(i);
    if (grid.is_masked(i)) {
      auto m = params.mask_embed.row(0);
      std::copy(m.begin(), m.end(), xi.begin());
    } else {
      auto src = rec.encoder_output.row(r++);
      std::copy(src.begin(), src.end(), xi.begin());
    }
    for (std::size_t c = 0; c < d; ++c) xi[c] += params.dec_pos_embed(i, c);
  }
  {
    auto src = rec.encoder_output.row(visible.size());
    std::copy(src.begin(), src.end(), x.row(N).begin());
  }
  rec.decoder.ids.resize(N + 1);
  for (std::size_t i = 0; i <= N; ++i) rec.decoder.ids[i] = i;
  detail::run_stack(params.decoder_blocks, cfg, x, &rec.decoder, tape ? &tape->decoder : nullptr);
  Matrix<T> positions(N, d);
  std::copy(x.values().begin(), x.values().begin() + static_cast<std::ptrdiff_t>(N * d),
            positions.values().begin());
  rec.outputs = detail::output_head(params, cfg, positions, tape);
  return rec;
}

}  // namespace recap
