#pragma once

#include <span>
#include <vector>

#include "recap/kvcache.hpp"
#include "recap/model/forward.hpp"

namespace recap {

/// Output of a Local-FE: target outputs plus the recomputed rows that
/// `commit` writes back into the cache.
template <typename T>
struct PartialRecord {
  std::vector<std::size_t> targets;  // ascending, rows of `outputs`
  Matrix<T> outputs;                 // |targets| × output_dim
  std::vector<Matrix<T>> keys, values;  // decoder stack, rows follow targets
  // encoder_decoder: targets encoded during this call (newly decoded tokens)
  std::vector<std::size_t> encoded;
  std::vector<Matrix<T>> encoder_keys, encoder_values;
  Matrix<T> encoder_output;
  TokenGrid grid;
};

namespace detail {

/// Runs one stack over `x` (rows = fresh_ids) attending to fresh rows plus
/// the cached and working rows not listed in fresh_ids.
template <typename T>
void run_partial_stack(const std::vector<BlockParams<T>>& blocks, const ModelConfig& cfg,
                       const StackCache<T>& sc, std::span<const std::size_t> fresh_ids,
                       Matrix<T>& x, std::vector<Matrix<T>>& keys_out,
                       std::vector<Matrix<T>>& values_out) {
  require_shape(sc.layers() == blocks.size(), "cache does not cover every layer");
  const T eps = static_cast<T>(cfg.norm_epsilon);
  const std::size_t bound = cfg.seq_len + 1;
  std::vector<std::uint8_t> exclude(bound, 0);
  for (auto id : fresh_ids) exclude[id] = 1;
  keys_out.clear();
  values_out.clear();
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    Projections<T> p = project_qkv(blocks[l], x, eps);
    const LayerKVCache<T> ctx_rows = context_rows(sc.cached[l], sc.working[l], exclude);
    AttentionContext<T> ctx = assemble_attention_context(ctx_rows, fresh_ids, p.k, p.v, bound);
    Matrix<T> attn = multi_head_attention(p.q, ctx.keys, ctx.values, cfg.heads);
    finish_block(blocks[l], attn, x, eps);
    keys_out.push_back(std::move(p.k));
    values_out.push_back(std::move(p.v));
  }
}

}  // namespace detail

/// Local-FE: recomputes every layer at `targets` only; attention for the
/// target queries runs over the fresh target rows plus all other rows held
/// in `cache`. Non-target positions of `grid` must match `cache.base`.
template <typename T>
PartialRecord<T> forward_partial(const ModelParams<T>& params, const ModelConfig& cfg,
                                 const TokenGrid& grid, std::span<const std::size_t> targets,
                                 const DecodingCache<T>& cache) {
  detail::check_grid<T>(cfg, grid);
  if (cache.arch != cfg.arch || cache.seq_len != cfg.seq_len ||
      cache.decoder.layers() != cfg.decoder_stack_layers() ||
      cache.encoder.layers() != cfg.encoder_layers())
    throw CacheError("cache was built for a different model configuration");
  const std::size_t N = cfg.seq_len, d = cfg.embed_dim;
  PartialRecord<T> out;
  out.targets = detail::sorted_unique_targets(targets, N);
  out.grid = grid;
  for (auto t : out.targets)
    if (!cache.is_target(t))
      throw CacheError("target " + std::to_string(t) + " overlaps the cached complement");
  {
    std::vector<std::uint8_t> is_t(N, 0);
    for (auto t : out.targets) is_t[t] = 1;
    for (std::size_t i = 0; i < N; ++i)
      if (!is_t[i] && !grid.same_position(cache.base, i))
        throw CacheError("grid differs from the cached base state at non-target position " +
                         std::to_string(i));
  }
  const std::size_t n = out.targets.size();
  Matrix<T> x(n, d);

  if (cfg.arch == Arch::decoder_only) {
    for (std::size_t r = 0; r < n; ++r)
      detail::decoder_only_input(params, cfg, grid, out.targets[r], cache.condition, x.row(r));
  } else {
    // Encoder side: encode tokens that gained a value since they entered the cache.
    std::vector<long> enc_row(N + 1, -1);
    for (std::size_t r = 0; r < cache.encoder_ids.size(); ++r)
      enc_row[cache.encoder_ids[r]] = static_cast<long>(r);
    for (auto t : out.targets) {
      if (grid.is_masked(t)) {
        if (enc_row[t] >= 0) throw CacheError("an encoded token cannot be re-masked");
      } else if (enc_row[t] < 0) {
        out.encoded.push_back(t);
      } else if (!grid.same_position(cache.base, t)) {
        throw CacheError("an encoded token cannot change its value");
      }
    }
    Matrix<T> e(out.encoded.size(), d);
    for (std::size_t r = 0; r < out.encoded.size(); ++r)
      detail::encoder_input(params, cfg, grid, out.encoded[r], e.row(r));
    if (!out.encoded.empty()) {
      detail::run_partial_stack(params.blocks, cfg, cache.encoder,
                                std::span<const std::size_t>(out.encoded), e, out.encoder_keys,
                                out.encoder_values);
      out.encoder_output = layer_norm_rows(e, params.enc_norm_gain, params.enc_norm_bias,
                                           static_cast<T>(cfg.norm_epsilon));
    } else {
      out.encoder_output = Matrix<T>(0, d);
    }
    std::size_t fresh = 0;
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t t = out.targets[r];
      auto xr = x.row(r);
      if (grid.is_masked(t)) {
        auto m = params.mask_embed.row(0);
        std::copy(m.begin(), m.end(), xr.begin());
      } else if (enc_row[t] < 0) {
        auto src = out.encoder_output.row(fresh++);
        std::copy(src.begin(), src.end(), xr.begin());
      } else {
        auto src = cache.encoder_output.row(static_cast<std::size_t>(enc_row[t]));
        std::copy(src.begin(), src.end(), xr.begin());
      }
      for (std::size_t c = 0; c < d; ++c) xr[c] += params.dec_pos_embed(t, c);
    }
  }

  const auto& dec_blocks = cfg.arch == Arch::decoder_only ? params.blocks : params.decoder_blocks;
  detail::run_partial_stack(dec_blocks, cfg, cache.decoder,
                            std::span<const std::size_t>(out.targets), x, out.keys, out.values);
  out.outputs = detail::output_head(params, cfg, x);
  return out;
}

/// Writes a Local-FE's recomputed rows into the working context so later
/// sub-steps see the values it was evaluated on.
template <typename T>
void commit(DecodingCache<T>& cache, const PartialRecord<T>& rec) {
  const std::size_t N = cache.seq_len;
  for (std::size_t l = 0; l < cache.decoder.working.size(); ++l) {
    auto& w = cache.decoder.working[l];
    std::vector<long> row(N + 1, -1);
    for (std::size_t r = 0; r < w.ids.size(); ++r) row[w.ids[r]] = static_cast<long>(r);
    for (std::size_t i = 0; i < rec.targets.size(); ++i) {
      const long r = row[rec.targets[i]];
      if (r < 0) throw CacheError("committed target has no working row");
      auto ks = rec.keys[l].row(i);
      auto vs = rec.values[l].row(i);
      std::copy(ks.begin(), ks.end(), w.keys.row(static_cast<std::size_t>(r)).begin());
      std::copy(vs.begin(), vs.end(), w.values.row(static_cast<std::size_t>(r)).begin());
    }
  }
  if (!rec.encoded.empty()) {
    for (std::size_t l = 0; l < cache.encoder.working.size(); ++l) {
      auto& w = cache.encoder.working[l];
      w.keys = vstack(w.keys, rec.encoder_keys[l]);
      w.values = vstack(w.values, rec.encoder_values[l]);
      w.ids.insert(w.ids.end(), rec.encoded.begin(), rec.encoded.end());
    }
    cache.encoder_output = vstack(cache.encoder_output, rec.encoder_output);
    cache.encoder_ids.insert(cache.encoder_ids.end(), rec.encoded.begin(), rec.encoded.end());
  }
  for (auto t : rec.targets) cache.base.copy_position(rec.grid, t);
}

}  // namespace recap
