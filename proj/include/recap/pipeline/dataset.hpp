#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "recap/error.hpp"
#include "recap/grid.hpp"
#include "recap/numerics/matrix.hpp"
#include "recap/numerics/random.hpp"

namespace recap {

enum class Generator { checkerboard_markov, blockwise_palette };

/// Synthetic token-grid source. Grids are side × side, row-major.
///
/// checkerboard_markov: token = 2·color + parity. Parity is the class-shifted
/// checkerboard (r + c + class) mod 2; colors follow a Markov chain along each
/// row that keeps its color with probability `stay` and otherwise steps by a
/// class-dependent stride.
///
/// blockwise_palette: 2×2 blocks share one token drawn uniformly from the
/// class palette [class·P, (class+1)·P), P = vocab / classes.
///
/// Each token is then replaced by a uniform token with probability `noise`.
struct DatasetSpec {
  std::size_t side = 8;
  std::size_t vocab = 8;
  Generator generator = Generator::checkerboard_markov;
  std::size_t classes = 4;
  double noise = 0.0;
  double stay = 0.85;
  bool continuous = false;   // emit codebook vectors instead of ids
  std::size_t token_dim = 3;

  std::size_t length() const { return side * side; }
  std::size_t colors() const { return vocab / 2; }
  std::size_t palette() const { return vocab / classes; }

  void validate() const {
    if (side < 2) throw ConfigError("dataset: side must be at least 2");
    if (classes < 1) throw ConfigError("dataset: classes must be at least 1");
    if (!(noise >= 0.0 && noise < 0.5)) throw ConfigError("dataset: noise must lie in [0, 0.5)");
    if (generator == Generator::checkerboard_markov) {
      if (vocab < 4 || vocab % 2 != 0)
        throw ConfigError("checkerboard_markov needs an even vocabulary of at least 4");
      if (!(stay >= 0.0 && stay <= 1.0)) throw ConfigError("dataset: stay must lie in [0, 1]");
    } else {
      if (side % 2 != 0) throw ConfigError("blockwise_palette needs an even side");
      if (vocab % classes != 0 || vocab / classes < 1)
        throw ConfigError("blockwise_palette needs vocab divisible by classes");
    }
    if (continuous && (token_dim < 1 || token_dim >= 63 || (std::size_t{1} << token_dim) < vocab))
      throw ConfigError("dataset: 2^token_dim must cover the vocabulary");
  }

  /// Color stride for class k.
  std::size_t stride(std::size_t k) const {
    return colors() > 1 ? 1 + k % (colors() - 1) : 0;
  }
};

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s = DatasetSpec{};
  try {
    s.side = j.value("side", s.side);
    s.vocab = j.value("vocab", s.vocab);
    const std::string g = j.value("generator", std::string("checkerboard_markov"));
    if (g == "checkerboard_markov") s.generator = Generator::checkerboard_markov;
    else if (g == "blockwise_palette") s.generator = Generator::blockwise_palette;
    else throw ConfigError("unknown generator '" + g + "'");
    s.classes = j.value("classes", s.classes);
    s.noise = j.value("noise", s.noise);
    s.stay = j.value("stay", s.stay);
    s.continuous = j.value("continuous", s.continuous);
    s.token_dim = j.value("token_dim", s.token_dim);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset config: ") + e.what());
  }
  s.validate();
}

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"side", s.side},
       {"vocab", s.vocab},
       {"generator", s.generator == Generator::blockwise_palette ? "blockwise_palette"
                                                                 : "checkerboard_markov"},
       {"classes", s.classes},
       {"noise", s.noise},
       {"stay", s.stay},
       {"continuous", s.continuous},
       {"token_dim", s.token_dim}};
}

struct Example {
  TokenGrid tokens;  // complete grid
  int label = 0;
};

using Dataset = std::vector<Example>;

/// Codeword of token id v: the binary digits of v mapped to ±1.
inline std::vector<double> codeword(std::size_t v, std::size_t token_dim) {
  std::vector<double> w(token_dim);
  for (std::size_t b = 0; b < token_dim; ++b) w[b] = (v >> b) & 1 ? 1.0 : -1.0;
  return w;
}

/// Nearest codeword id among the first `vocab` (ties go to the lower id).
inline int quantize(std::span<const double> x, std::size_t vocab) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < vocab; ++v) {
    double d = 0;
    for (std::size_t b = 0; b < x.size(); ++b) {
      const double c = (v >> b) & 1 ? 1.0 : -1.0;
      d += (x[b] - c) * (x[b] - c);
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(v);
    }
  }
  return best;
}

/// Token ids of any grid: ids directly, or quantised vectors.
inline std::vector<int> token_ids(const TokenGrid& g, std::size_t vocab) {
  if (!g.continuous()) return g.ids();
  std::vector<int> ids(g.length());
  for (std::size_t i = 0; i < g.length(); ++i) ids[i] = quantize(g.vector(i), vocab);
  return ids;
}

inline TokenGrid encode_tokens(const DatasetSpec& spec, const std::vector<int>& ids,
                               std::optional<int> condition = {}) {
  if (!spec.continuous) return TokenGrid::from_ids(ids, condition);
  std::vector<double> values;
  for (int v : ids) {
    const auto w = codeword(static_cast<std::size_t>(v), spec.token_dim);
    values.insert(values.end(), w.begin(), w.end());
  }
  return TokenGrid::from_vectors(spec.token_dim, std::move(values), condition);
}

/// Clean token ids of one grid for class k.
inline std::vector<int> generate_ids(const DatasetSpec& spec, std::size_t k,
                                     const RandomStream& s) {
  const std::size_t n = spec.side;
  std::vector<int> ids(spec.length());
  if (spec.generator == Generator::checkerboard_markov) {
    const std::size_t colors = spec.colors();
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t color = s.with_position(r * n).below(0, colors);
      for (std::size_t c = 0; c < n; ++c) {
        if (c > 0 && s.with_position(r * n + c).uniform(0) >= spec.stay)
          color = (color + spec.stride(k)) % colors;
        ids[r * n + c] = static_cast<int>(2 * color + (r + c + k) % 2);
      }
    }
  } else {
    const std::size_t p = spec.palette();
    for (std::size_t br = 0; br < n / 2; ++br)
      for (std::size_t bc = 0; bc < n / 2; ++bc) {
        const int v = static_cast<int>(k * p + s.with_position(br * n + bc).below(1, p));
        for (std::size_t dr = 0; dr < 2; ++dr)
          for (std::size_t dc = 0; dc < 2; ++dc) ids[(2 * br + dr) * n + 2 * bc + dc] = v;
      }
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto e = s.with_position(i);
    if (spec.noise > 0 && e.uniform(2) < spec.noise)
      ids[i] = static_cast<int>(e.below(3, spec.vocab));
  }
  return ids;
}

/// `count` examples; example e has class e mod classes and its own stream step.
inline Dataset generate_dataset(const DatasetSpec& spec, std::size_t count,
                                const RandomStream& stream) {
  spec.validate();
  Dataset out;
  out.reserve(count);
  for (std::size_t e = 0; e < count; ++e) {
    const std::size_t k = e % spec.classes;
    const auto ids = generate_ids(spec, k, stream.with_phase(Phase::data).with_step(e));
    out.push_back({encode_tokens(spec, ids), static_cast<int>(k)});
  }
  return out;
}

/// Exact distribution of horizontally adjacent token pairs (a, b) for one
/// class, pooled over every pair position: entry (a, b).
inline Matrix<double> class_cooccurrence(const DatasetSpec& spec, std::size_t k) {
  const std::size_t V = spec.vocab, n = spec.side;
  Matrix<double> clean(V, V);
  const double pairs = static_cast<double>(n * (n - 1));
  if (spec.generator == Generator::checkerboard_markov) {
    const std::size_t C = spec.colors();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c + 1 < n; ++c) {
        const std::size_t pa = (r + c + k) % 2, pb = 1 - pa;
        for (std::size_t a = 0; a < C; ++a) {
          const std::size_t moved = (a + spec.stride(k)) % C;
          const double w = 1.0 / static_cast<double>(C) / pairs;
          clean(2 * a + pa, 2 * a + pb) += w * spec.stay;
          clean(2 * a + pa, 2 * moved + pb) += w * (1.0 - spec.stay);
        }
      }
  } else {
    const std::size_t P = spec.palette();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c + 1 < n; ++c)
        for (std::size_t a = 0; a < P; ++a) {
          if (c % 2 == 0) {
            clean(k * P + a, k * P + a) += 1.0 / static_cast<double>(P) / pairs;
          } else {
            for (std::size_t b = 0; b < P; ++b)
              clean(k * P + a, k * P + b) += 1.0 / static_cast<double>(P * P) / pairs;
          }
        }
  }
  if (spec.noise == 0) return clean;
  // Independent per-token corruption: K(x | x0) = (1 − ε)[x = x0] + ε / V.
  const double e = spec.noise, u = e / static_cast<double>(V);
  Matrix<double> left(V, V), out(V, V);
  for (std::size_t a = 0; a < V; ++a)
    for (std::size_t b = 0; b < V; ++b) {
      double s = 0;
      for (std::size_t a0 = 0; a0 < V; ++a0) s += ((a == a0 ? 1 - e : 0) + u) * clean(a0, b);
      left(a, b) = s;
    }
  for (std::size_t a = 0; a < V; ++a)
    for (std::size_t b = 0; b < V; ++b) {
      double s = 0;
      for (std::size_t b0 = 0; b0 < V; ++b0) s += left(a, b0) * ((b == b0 ? 1 - e : 0) + u);
      out(a, b) = s;
    }
  return out;
}

/// Mixture of class co-occurrences; uniform class weights by default.
inline Matrix<double> analytic_cooccurrence(const DatasetSpec& spec,
                                            std::span<const double> class_weights = {}) {
  spec.validate();
  if (!class_weights.empty() && class_weights.size() != spec.classes)
    throw DimensionError("class weights must have one entry per class");
  Matrix<double> out(spec.vocab, spec.vocab);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    const double w =
        class_weights.empty() ? 1.0 / static_cast<double>(spec.classes) : class_weights[k];
    const auto m = class_cooccurrence(spec, k);
    for (std::size_t i = 0; i < m.size(); ++i) out.values()[i] += w * m.values()[i];
  }
  return out;
}

/// Empirical horizontal co-occurrence of a set of complete grids.
inline Matrix<double> empirical_cooccurrence(std::span<const TokenGrid> grids, std::size_t side,
                                             std::size_t vocab) {
  Matrix<double> out(vocab, vocab);
  std::size_t total = 0;
  for (const auto& g : grids) {
    detail::require_shape(g.length() == side * side, "grid size does not match the dataset");
    if (g.masked_count() != 0) throw DomainError("co-occurrence of an incomplete grid");
    const auto ids = token_ids(g, vocab);
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c + 1 < side; ++c) {
        const int a = ids[r * side + c], b = ids[r * side + c + 1];
        if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= vocab ||
            static_cast<std::size_t>(b) >= vocab)
          throw DomainError("token outside the vocabulary");
        out(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) += 1;
        ++total;
      }
  }
  if (total > 0)
    for (auto& v : out.values()) v /= static_cast<double>(total);
  return out;
}

inline void write_dataset(const Dataset& data, std::ostream& f) {
  for (const auto& ex : data) {
    nlohmann::json tokens = nlohmann::json::array();
    for (std::size_t i = 0; i < ex.tokens.length(); ++i) {
      if (ex.tokens.continuous()) {
        auto v = ex.tokens.vector(i);
        tokens.push_back(std::vector<double>(v.begin(), v.end()));
      } else {
        tokens.push_back(ex.tokens.id(i));
      }
    }
    f << nlohmann::json{{"tokens", tokens}, {"class", ex.label}}.dump() << '\n';
  }
}

inline void write_dataset(const Dataset& data, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  write_dataset(data, f);
  if (!f) throw Error("failed writing '" + path + "'");
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open dataset '" + path + "'");
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto& t = j.at("tokens");
      Example ex;
      ex.label = j.value("class", 0);
      if (!t.empty() && t[0].is_array()) {
        const std::size_t dim = t[0].size();
        std::vector<double> values;
        for (const auto& v : t) {
          if (v.size() != dim) throw ConfigError("ragged token vectors");
          for (double x : v) values.push_back(x);
        }
        ex.tokens = TokenGrid::from_vectors(dim, std::move(values));
      } else {
        ex.tokens = TokenGrid::from_ids(t.get<std::vector<int>>());
      }
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace recap
