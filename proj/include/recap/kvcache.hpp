#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "recap/error.hpp"
#include "recap/grid.hpp"
#include "recap/model/forward.hpp"
#include "recap/numerics/matrix.hpp"

namespace recap {

/// Keys and values of one layer for a set of row ids.
template <typename T>
struct LayerKVCache {
  std::size_t layer = 0;
  Matrix<T> keys, values;
  std::vector<std::size_t> ids;

  std::size_t rows() const { return ids.size(); }
};

/// Cached rows of one transformer stack. `cached` is fixed for the whole
/// group; `working` holds rows that change between sub-steps (the group
/// targets in the decoder, tokens appended during the group in the encoder).
template <typename T>
struct StackCache {
  std::vector<LayerKVCache<T>> cached;
  std::vector<LayerKVCache<T>> working;

  std::size_t layers() const { return cached.size(); }
};

/// Everything a Local-FE needs for one grouped decoding stage.
template <typename T>
struct DecodingCache {
  Arch arch = Arch::decoder_only;
  std::size_t seq_len = 0;
  std::size_t condition = 0;
  std::uint64_t entry_fingerprint = 0;
  std::vector<std::size_t> targets;  // S_t, ascending
  TokenGrid base;                    // the grid state the working rows describe
  StackCache<T> encoder;             // encoder_decoder only
  StackCache<T> decoder;
  // encoder_decoder: normalised encoder output for every id in the encoder context
  Matrix<T> encoder_output;
  std::vector<std::size_t> encoder_ids;

  bool is_target(std::size_t pos) const {
    return std::binary_search(targets.begin(), targets.end(), pos);
  }

  /// Rejects a grid that is not the state this cache was built from.
  void check_entry(const TokenGrid& grid) const {
    if (grid.fingerprint() != entry_fingerprint)
      throw CacheError("grid fingerprint does not match the cached entry state");
  }
};

namespace detail {

template <typename T>
LayerKVCache<T> slice_layer(const LayerTap<T>& tap, std::size_t layer,
                            const std::vector<std::size_t>& row_ids,
                            const std::vector<std::size_t>& rows) {
  LayerKVCache<T> c;
  c.layer = layer;
  c.keys = gather_rows(tap.keys, std::span<const std::size_t>(rows));
  c.values = gather_rows(tap.values, std::span<const std::size_t>(rows));
  c.ids.reserve(rows.size());
  for (auto r : rows) c.ids.push_back(row_ids[r]);
  return c;
}

inline std::vector<std::size_t> sorted_unique_targets(std::span<const std::size_t> t,
                                                      std::size_t n) {
  std::vector<std::size_t> out(t.begin(), t.end());
  std::sort(out.begin(), out.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] >= n) throw DomainError("target position " + std::to_string(out[i]) +
                                       " out of range");
    if (i > 0 && out[i] == out[i - 1])
      throw DomainError("duplicate target position " + std::to_string(out[i]));
  }
  return out;
}

}  // namespace detail

/// Splits the K/V rows of a Full-FE into the cached complement of
/// `target_set` and working rows for the targets themselves.
template <typename T>
DecodingCache<T> build_cache(const ForwardRecord<T>& record,
                             std::span<const std::size_t> target_set) {
  const std::size_t N = record.entry.length();
  DecodingCache<T> cache;
  cache.arch = record.arch;
  cache.seq_len = N;
  cache.condition = record.condition;
  cache.entry_fingerprint = record.entry.fingerprint();
  cache.targets = detail::sorted_unique_targets(target_set, N);
  cache.base = record.entry;

  const auto& dec = record.decoder;
  std::vector<std::size_t> keep, work;
  for (std::size_t r = 0; r < dec.rows(); ++r)
    (cache.is_target(dec.ids[r]) ? work : keep).push_back(r);
  for (std::size_t l = 0; l < dec.layers.size(); ++l) {
    cache.decoder.cached.push_back(detail::slice_layer(dec.layers[l], l, dec.ids, keep));
    cache.decoder.working.push_back(detail::slice_layer(dec.layers[l], l, dec.ids, work));
  }

  if (record.arch == Arch::encoder_decoder) {
    const auto& enc = record.encoder;
    std::vector<std::size_t> all(enc.rows());
    for (std::size_t r = 0; r < all.size(); ++r) all[r] = r;
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
      cache.encoder.cached.push_back(detail::slice_layer(enc.layers[l], l, enc.ids, all));
      LayerKVCache<T> empty;
      empty.layer = l;
      empty.keys = Matrix<T>(0, enc.layers[l].keys.cols());
      empty.values = Matrix<T>(0, enc.layers[l].values.cols());
      cache.encoder.working.push_back(std::move(empty));
    }
    cache.encoder_output = record.encoder_output;
    cache.encoder_ids = enc.ids;
  }
  return cache;
}

/// Attention context for one layer: fresh rows first, then cached rows.
template <typename T>
struct AttentionContext {
  Matrix<T> keys, values;
  std::vector<std::size_t> ids;  // row → position (or condition slot) id
};

/// Concatenates freshly computed rows with cached rows. `id_bound` is one
/// past the largest legal id; duplicate ids raise CacheError.
template <typename T>
AttentionContext<T> assemble_attention_context(const LayerKVCache<T>& cache,
                                               std::span<const std::size_t> fresh_ids,
                                               const Matrix<T>& fresh_k, const Matrix<T>& fresh_v,
                                               std::size_t id_bound) {
  detail::require_shape(fresh_k.rows() == fresh_ids.size() && fresh_v.rows() == fresh_ids.size(),
                        "fresh key/value rows do not match their ids");
  detail::require_shape(cache.keys.rows() == cache.ids.size() &&
                            cache.values.rows() == cache.ids.size(),
                        "cached key/value rows do not match their ids");
  const std::size_t d = cache.rows() > 0 ? cache.keys.cols() : fresh_k.cols();
  detail::require_shape(fresh_ids.empty() || fresh_k.cols() == d, "key width mismatch");
  std::vector<std::uint8_t> seen(id_bound, 0);
  auto mark = [&](std::size_t id) {
    if (id >= id_bound) throw CacheError("context id " + std::to_string(id) + " out of range");
    if (seen[id]) throw CacheError("duplicate context id " + std::to_string(id));
    seen[id] = 1;
  };
  for (auto id : fresh_ids) mark(id);
  for (auto id : cache.ids) mark(id);

  AttentionContext<T> ctx;
  const std::size_t n = fresh_ids.size() + cache.rows();
  ctx.keys = Matrix<T>(n, d);
  ctx.values = Matrix<T>(n, d);
  ctx.ids.reserve(n);
  auto append = [&](const Matrix<T>& k, const Matrix<T>& v, std::size_t at) {
    std::copy(k.values().begin(), k.values().end(), ctx.keys.values().begin() +
                                                         static_cast<std::ptrdiff_t>(at * d));
    std::copy(v.values().begin(), v.values().end(), ctx.values.values().begin() +
                                                         static_cast<std::ptrdiff_t>(at * d));
  };
  if (!fresh_ids.empty()) append(fresh_k, fresh_v, 0);
  if (cache.rows() > 0) append(cache.keys, cache.values, fresh_ids.size());
  ctx.ids.insert(ctx.ids.end(), fresh_ids.begin(), fresh_ids.end());
  ctx.ids.insert(ctx.ids.end(), cache.ids.begin(), cache.ids.end());
  return ctx;
}

/// Merges the fixed and working rows of one layer, leaving out `exclude`.
template <typename T>
LayerKVCache<T> context_rows(const LayerKVCache<T>& cached, const LayerKVCache<T>& working,
                             const std::vector<std::uint8_t>& exclude) {
  LayerKVCache<T> out;
  out.layer = cached.layer;
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < working.rows(); ++r)
    if (working.ids[r] >= exclude.size() || !exclude[working.ids[r]]) keep.push_back(r);
  for (auto id : cached.ids)
    if (id < exclude.size() && exclude[id])
      throw CacheError("target " + std::to_string(id) + " overlaps the cached complement");
  if (keep.empty()) return cached;
  const std::size_t d = cached.keys.cols() > 0 ? cached.keys.cols() : working.keys.cols();
  out.keys = Matrix<T>(cached.rows() + keep.size(), d);
  out.values = Matrix<T>(cached.rows() + keep.size(), d);
  std::copy(cached.keys.values().begin(), cached.keys.values().end(), out.keys.values().begin());
  std::copy(cached.values.values().begin(), cached.values.values().end(),
            out.values.values().begin());
  out.ids = cached.ids;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const std::size_t r = cached.rows() + i;
    auto ks = working.keys.row(keep[i]);
    auto vs = working.values.row(keep[i]);
    std::copy(ks.begin(), ks.end(), out.keys.row(r).begin());
    std::copy(vs.begin(), vs.end(), out.values.row(r).begin());
    out.ids.push_back(working.ids[keep[i]]);
  }
  return out;
}

}  // namespace recap
