#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <vector>

#include "recap/error.hpp"

namespace recap {

/// The evolving sequence being decoded: each position is either masked or
/// holds a value (a vocabulary id, or a token_dim-vector in continuous mode).
class TokenGrid {
 public:
  TokenGrid() = default;

  /// All-masked discrete grid.
  static TokenGrid masked_discrete(std::size_t length, std::optional<int> condition = {}) {
    TokenGrid g;
    g.length_ = length;
    g.token_dim_ = 0;
    g.masked_.assign(length, 1);
    g.ids_.assign(length, -1);
    g.condition_ = condition;
    return g;
  }

  /// All-masked continuous grid.
  static TokenGrid masked_continuous(std::size_t length, std::size_t token_dim,
                                     std::optional<int> condition = {}) {
    detail::require(token_dim > 0, "continuous grid needs token_dim > 0");
    TokenGrid g;
    g.length_ = length;
    g.token_dim_ = token_dim;
    g.masked_.assign(length, 1);
    g.values_.assign(length * token_dim, 0.0);
    g.condition_ = condition;
    return g;
  }

  static TokenGrid from_ids(std::vector<int> ids, std::optional<int> condition = {}) {
    TokenGrid g = masked_discrete(ids.size(), condition);
    g.ids_ = std::move(ids);
    std::fill(g.masked_.begin(), g.masked_.end(), 0);
    return g;
  }

  static TokenGrid from_vectors(std::size_t token_dim, std::vector<double> values,
                                std::optional<int> condition = {}) {
    detail::require(token_dim > 0 && values.size() % token_dim == 0,
                    "continuous values length must be a multiple of token_dim");
    TokenGrid g = masked_continuous(values.size() / token_dim, token_dim, condition);
    g.values_ = std::move(values);
    std::fill(g.masked_.begin(), g.masked_.end(), 0);
    return g;
  }

  std::size_t length() const noexcept { return length_; }
  bool continuous() const noexcept { return token_dim_ > 0; }
  std::size_t token_dim() const noexcept { return token_dim_; }
  std::optional<int> condition() const noexcept { return condition_; }
  void set_condition(std::optional<int> c) { condition_ = c; }

  bool is_masked(std::size_t i) const { return masked_.at(i) != 0; }

  int id(std::size_t i) const {
    detail::require(!continuous(), "id() on a continuous grid");
    return ids_.at(i);
  }

  std::span<const double> vector(std::size_t i) const {
    detail::require(continuous(), "vector() on a discrete grid");
    return {values_.data() + i * token_dim_, token_dim_};
  }

  void set_id(std::size_t i, int v) {
    detail::require(!continuous(), "set_id on a continuous grid");
    masked_.at(i) = 0;
    ids_.at(i) = v;
  }

  void set_vector(std::size_t i, std::span<const double> v) {
    detail::require(continuous() && v.size() == token_dim_, "set_vector: bad token");
    masked_.at(i) = 0;
    std::copy(v.begin(), v.end(), values_.begin() + static_cast<std::ptrdiff_t>(i * token_dim_));
  }

  void mask(std::size_t i) {
    masked_.at(i) = 1;
    if (continuous()) {
      std::fill_n(values_.begin() + static_cast<std::ptrdiff_t>(i * token_dim_), token_dim_, 0.0);
    } else {
      ids_[i] = -1;
    }
  }

  /// Copies the state (masked or value) of position i from another grid.
  void copy_position(const TokenGrid& from, std::size_t i) {
    if (from.is_masked(i)) {
      mask(i);
    } else if (continuous()) {
      set_vector(i, from.vector(i));
    } else {
      set_id(i, from.id(i));
    }
  }

  /// True when position i is in the same state in both grids.
  bool same_position(const TokenGrid& o, std::size_t i) const {
    if (is_masked(i) != o.is_masked(i)) return false;
    if (is_masked(i)) return true;
    if (continuous()) {
      auto a = vector(i), b = o.vector(i);
      return std::equal(a.begin(), a.end(), b.begin());
    }
    return id(i) == o.id(i);
  }

  std::vector<std::size_t> masked_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < length_; ++i)
      if (masked_[i]) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> unmasked_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < length_; ++i)
      if (!masked_[i]) out.push_back(i);
    return out;
  }

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(masked_.begin(), masked_.end(), 1));
  }

  const std::vector<int>& ids() const noexcept { return ids_; }
  const std::vector<double>& values() const noexcept { return values_; }

  /// FNV-1a hash over mask flags, values and condition.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
      }
    };
    feed(&length_, sizeof length_);
    feed(masked_.data(), masked_.size());
    if (continuous()) {
      feed(values_.data(), values_.size() * sizeof(double));
    } else {
      feed(ids_.data(), ids_.size() * sizeof(int));
    }
    const int c = condition_.value_or(-1);
    feed(&c, sizeof c);
    return h;
  }

  bool operator==(const TokenGrid&) const = default;

 private:
  std::size_t length_ = 0;
  std::size_t token_dim_ = 0;
  std::vector<std::uint8_t> masked_;
  std::vector<int> ids_;
  std::vector<double> values_;
  std::optional<int> condition_;
};

}  // namespace recap
