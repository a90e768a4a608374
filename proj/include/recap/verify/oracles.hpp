#pragma once

// Straight-line double-precision reference evaluations used by the test
// suite and the `verify` subcommand. Nothing here calls the production
// kernels; every sum is an explicit loop.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "recap/grid.hpp"
#include "recap/model/config.hpp"
#include "recap/model/params.hpp"

namespace recap::verify {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

inline Vec row_of(const Matrix<double>& m, std::size_t r) {
  return Vec(m.row(r).begin(), m.row(r).end());
}

inline Vec vec_mat(const Vec& x, const Matrix<double>& w) {
  Vec y(w.cols(), 0.0);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w(i, j);
    y[j] = s;
  }
  return y;
}

inline Vec oracle_layer_norm(const Vec& x, const Matrix<double>& g, const Matrix<double>& b,
                             double eps) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = (x[i] - mean) / std::sqrt(var + eps) * g(0, i) + b(0, i);
  return y;
}

/// Per-row residual stream of one stack, keyed by row id.
struct OracleStack {
  std::vector<std::size_t> ids;
  std::vector<Rows> layer_inputs;  // [layer][row]
  Rows final;                      // after the last block
};

struct OracleResult {
  OracleStack encoder, decoder;
  Rows encoder_output;  // rows follow encoder.ids
  Rows outputs;         // rows 0..N-1
};

namespace detail {

inline std::size_t find_row(const std::vector<std::size_t>& ids, std::size_t id) {
  for (std::size_t r = 0; r < ids.size(); ++r)
    if (ids[r] == id) return r;
  return ids.size();
}

/// One pre-norm block over all rows of `x`, written out term by term.
inline void oracle_block(const BlockParams<double>& b, std::size_t heads, double eps, Rows& x) {
  const std::size_t n = x.size(), d = x[0].size(), dk = d / heads;
  Rows q(n), k(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec h = oracle_layer_norm(x[i], b.ln1_gain, b.ln1_bias, eps);
    q[i] = vec_mat(h, b.wq);
    k[i] = vec_mat(h, b.wk);
    v[i] = vec_mat(h, b.wv);
  }
  Rows attn(n, Vec(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec s(n);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        double dotv = 0;
        for (std::size_t c = 0; c < dk; ++c) dotv += q[i][h * dk + c] * k[j][h * dk + c];
        s[j] = dotv / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& sj : s) z += (sj = std::exp(sj - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < dk; ++c) attn[i][h * dk + c] += s[j] / z * v[j][h * dk + c];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    Vec o = vec_mat(attn[i], b.wo);
    for (std::size_t c = 0; c < d; ++c) x[i][c] += o[c];
    Vec h2 = oracle_layer_norm(x[i], b.ln2_gain, b.ln2_bias, eps);
    Vec a = vec_mat(h2, b.w1);
    for (std::size_t c = 0; c < a.size(); ++c) {
      const double pre = a[c] + b.b1(0, c);
      a[c] = 0.5 * pre * (1.0 + std::erf(pre / std::sqrt(2.0)));
    }
    Vec m = vec_mat(a, b.w2);
    for (std::size_t c = 0; c < d; ++c) x[i][c] += m[c] + b.b2(0, c);
  }
}

/// Runs a stack; rows whose id is in `frozen` (and not in `targets`) are
/// overwritten by the frozen activations before every block and at the end.
inline OracleStack oracle_stack(const std::vector<BlockParams<double>>& blocks,
                                const ModelConfig& cfg, std::vector<std::size_t> ids, Rows x,
                                const OracleStack* frozen, const std::vector<bool>& is_target) {
  OracleStack st;
  st.ids = ids;
  auto overwrite = [&](Rows& rows, const std::function<const Rows&()>& src) {
    if (!frozen) return;
    const Rows& s = src();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < is_target.size() && is_target[ids[r]]) continue;
      const std::size_t fr = find_row(frozen->ids, ids[r]);
      if (fr < frozen->ids.size()) rows[r] = s[fr];
    }
  };
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    overwrite(x, [&]() -> const Rows& { return frozen->layer_inputs[l]; });
    st.layer_inputs.push_back(x);
    oracle_block(blocks[l], cfg.heads, cfg.norm_epsilon, x);
  }
  overwrite(x, [&]() -> const Rows& { return frozen->final; });
  st.final = x;
  return st;
}

inline Vec oracle_value_embedding(const ModelParams<double>& p, const ModelConfig& cfg,
                                  const TokenGrid& g, std::size_t i) {
  const std::size_t d = cfg.embed_dim;
  Vec e(d, 0.0);
  if (cfg.token_mode == TokenMode::discrete) {
    e = row_of(p.token_embed, static_cast<std::size_t>(g.id(i)));
  } else {
    auto x = g.vector(i);
    for (std::size_t c = 0; c < d; ++c) {
      double s = p.input_bias(0, c);
      for (std::size_t r = 0; r < x.size(); ++r) s += x[r] * p.token_embed(r, c);
      e[c] = s;
    }
  }
  return e;
}

}  // namespace detail

/// Reference forward. With `frozen` set, every row outside `targets` is
/// pinned to the activations recorded in `frozen` (the frozen-context
/// oracle); in the encoder the context is frozen's rows plus any target
/// that holds a value but was not encoded there.
inline OracleResult oracle_forward(const ModelParams<double>& p, const ModelConfig& cfg,
                                   const TokenGrid& g, std::optional<int> condition,
                                   const OracleResult* frozen = nullptr,
                                   std::span<const std::size_t> targets = {}) {
  const std::size_t N = cfg.seq_len, d = cfg.embed_dim;
  const std::size_t cond = condition ? static_cast<std::size_t>(*condition) : cfg.num_conditions;
  std::vector<bool> is_target(N + 1, false);
  for (auto t : targets) is_target[t] = true;
  OracleResult res;
  Rows dec_in(N, Vec(d));
  std::vector<std::size_t> dec_ids(N);
  for (std::size_t i = 0; i < N; ++i) dec_ids[i] = i;

  if (cfg.arch == Arch::decoder_only) {
    for (std::size_t i = 0; i < N; ++i) {
      Vec e = g.is_masked(i) ? row_of(p.mask_embed, 0) : detail::oracle_value_embedding(p, cfg, g, i);
      for (std::size_t c = 0; c < d; ++c) e[c] += p.pos_embed(i, c) + p.cond_embed(cond, c);
      dec_in[i] = e;
    }
    res.decoder = detail::oracle_stack(p.blocks, cfg, dec_ids, dec_in,
                                       frozen ? &frozen->decoder : nullptr, is_target);
  } else {
    std::vector<std::size_t> enc_ids;
    if (frozen) {
      enc_ids = frozen->encoder.ids;
      for (auto t : targets)
        if (!g.is_masked(t) && detail::find_row(enc_ids, t) == enc_ids.size()) enc_ids.push_back(t);
    } else {
      for (std::size_t i = 0; i < N; ++i)
        if (!g.is_masked(i)) enc_ids.push_back(i);
      enc_ids.push_back(N);
    }
    Rows enc_in;
    for (auto id : enc_ids) {
      if (id == N) {
        enc_in.push_back(row_of(p.cond_embed, cond));
      } else if (g.is_masked(id)) {
        enc_in.push_back(Vec(d, 0.0));  // frozen row, overwritten below
      } else {
        Vec e = detail::oracle_value_embedding(p, cfg, g, id);
        for (std::size_t c = 0; c < d; ++c) e[c] += p.pos_embed(id, c);
        enc_in.push_back(e);
      }
    }
    // Encoder rows already encoded in `frozen` stay frozen even when targeted.
    std::vector<bool> enc_fresh(N + 1, false);
    for (auto id : enc_ids)
      enc_fresh[id] = !frozen || detail::find_row(frozen->encoder.ids, id) == frozen->encoder.ids.size();
    res.encoder = detail::oracle_stack(p.blocks, cfg, enc_ids, enc_in,
                                       frozen ? &frozen->encoder : nullptr, enc_fresh);
    for (const auto& r : res.encoder.final)
      res.encoder_output.push_back(oracle_layer_norm(r, p.enc_norm_gain, p.enc_norm_bias,
                                                     cfg.norm_epsilon));
    for (std::size_t i = 0; i < N; ++i) {
      Vec e = g.is_masked(i) ? row_of(p.mask_embed, 0)
                             : res.encoder_output[detail::find_row(enc_ids, i)];
      for (std::size_t c = 0; c < d; ++c) e[c] += p.dec_pos_embed(i, c);
      dec_in[i] = e;
    }
    dec_in.push_back(res.encoder_output[detail::find_row(enc_ids, N)]);
    dec_ids.push_back(N);
    res.decoder = detail::oracle_stack(p.decoder_blocks, cfg, dec_ids, dec_in,
                                       frozen ? &frozen->decoder : nullptr, is_target);
  }
  for (std::size_t i = 0; i < N; ++i) {
    Vec h = oracle_layer_norm(res.decoder.final[i], p.final_norm_gain, p.final_norm_bias,
                              cfg.norm_epsilon);
    Vec o = vec_mat(h, p.head_w);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += p.head_b(0, c);
    res.outputs.push_back(o);
  }
  return res;
}

/// Folds the target rows of `step` into `base`, mirroring a cache commit.
inline OracleResult merge_frozen(const OracleResult& base, const OracleResult& step,
                                 std::span<const std::size_t> targets) {
  OracleResult out = base;
  auto fold = [&](OracleStack& dst, const OracleStack& src, auto&& take) {
    for (std::size_t r = 0; r < src.ids.size(); ++r) {
      const std::size_t id = src.ids[r];
      if (!take(id)) continue;
      std::size_t fr = detail::find_row(dst.ids, id);
      if (fr == dst.ids.size()) {
        dst.ids.push_back(id);
        for (auto& li : dst.layer_inputs) li.push_back({});
        dst.final.push_back({});
      }
      for (std::size_t l = 0; l < dst.layer_inputs.size(); ++l)
        dst.layer_inputs[l][fr] = src.layer_inputs[l][r];
      dst.final[fr] = src.final[r];
    }
  };
  auto in_targets = [&](std::size_t id) {
    return std::find(targets.begin(), targets.end(), id) != targets.end();
  };
  fold(out.decoder, step.decoder, in_targets);
  if (!step.encoder.ids.empty()) {
    const auto before = base.encoder.ids;
    auto fresh = [&](std::size_t id) {
      return in_targets(id) && detail::find_row(before, id) == before.size();
    };
    fold(out.encoder, step.encoder, fresh);
    for (std::size_t r = 0; r < step.encoder.ids.size(); ++r)
      if (fresh(step.encoder.ids[r])) out.encoder_output.push_back(step.encoder_output[r]);
  }
  return out;
}

}  // namespace recap::verify
