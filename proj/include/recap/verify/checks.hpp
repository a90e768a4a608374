#pragma once

// The invariant suite behind `recap verify`: frozen-context equivalence,
// zero-local degeneracy, schedule tables, Gumbel-top-k sampling and
// gradient checks.

#include <boost/math/distributions/chi_squared.hpp>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "recap/pipeline/decode.hpp"
#include "recap/verify/gradcheck.hpp"
#include "recap/verify/oracles.hpp"

namespace recap::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

namespace detail {

template <typename F>
CheckResult timed(std::string name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  try {
    r = body();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("threw: ") + e.what();
  }
  r.name = std::move(name);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Weights with a live head and perturbed norm gains/biases, so no layer
/// is an identity by accident.
inline ModelParams<double> probe_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_params<double>(cfg, seed, false, 0.5);
  std::uint64_t k = 0;
  p.for_each([&](const std::string& name, Matrix<double>& m) {
    RandomStream s(seed, Phase::misc, 1000 + k++);
    const bool gain = name.find("gain") != std::string::npos;
    const bool bias = name.find("bias") != std::string::npos;
    if (name.find("pos_embed") != std::string::npos)
      for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] += 0.3 * s.normal(i);
    if (gain || bias)
      for (std::size_t i = 0; i < m.size(); ++i)
        m.values()[i] = (gain ? 1.0 : 0.0) + 0.2 * s.normal(i);
  });
  return p;
}

inline double normwise(const Matrix<double>& got, const Rows& want,
                       const std::vector<std::size_t>& rows) {
  double num = 0, den = 0;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < got.cols(); ++c) {
      num = std::max(num, std::abs(got(r, c) - want[rows[r]][c]));
      den = std::max(den, std::abs(want[rows[r]][c]));
    }
  return num / std::max(den, 1e-300);
}

}  // namespace detail

/// forward_partial against the frozen-context oracle on random instances
/// with N ≤ 32, d ≤ 64 and at most 4 layers.
inline CheckResult check_frozen_context(std::size_t instances = 50, std::uint64_t seed = 1) {
  return detail::timed("frozen-context equivalence", [&] {
    double worst64 = 0, worst32 = 0;
    const std::size_t dims[] = {16, 32, 64};
    for (std::size_t i = 0; i < instances; ++i) {
      RandomStream s(seed, Phase::misc, 7, i);
      ModelConfig cfg;
      cfg.arch = i % 2 ? Arch::encoder_decoder : Arch::decoder_only;
      cfg.seq_len = 8 + s.below(0, 25);
      cfg.embed_dim = dims[s.below(1, 3)];
      cfg.heads = s.below(2, 2) ? 4 : 2;
      cfg.layers = 1 + s.below(3, 4);
      cfg.decoder_layers = 1 + s.below(4, 4);
      cfg.vocab = 5 + s.below(5, 12);
      cfg.num_conditions = 3;
      const auto p64 = detail::probe_params(cfg, seed * 1000 + i);
      const auto p32 = p64.cast<float>();
      const std::optional<int> cond =
          s.below(6, 2) ? std::optional<int>(static_cast<int>(s.below(7, 3))) : std::nullopt;

      const double frac = 0.3 + 0.6 * s.uniform(8);
      TokenGrid entry = TokenGrid::masked_discrete(cfg.seq_len);
      for (std::size_t j = 0; j < cfg.seq_len; ++j)
        if (s.with_position(j).uniform(9) >= frac)
          entry.set_id(j, static_cast<int>(s.with_position(j).below(10, cfg.vocab)));
      auto masked = entry.masked_positions();
      if (masked.empty()) {
        entry.mask(0);
        masked = entry.masked_positions();
      }
      const std::size_t g = 1 + s.below(11, std::min<std::size_t>(8, masked.size()));
      std::vector<std::size_t> group(masked.begin(), masked.begin() + static_cast<std::ptrdiff_t>(g));
      TokenGrid grid = entry;
      for (std::size_t j = 0; j < (g + 1) / 2; ++j)
        grid.set_id(group[j], static_cast<int>(s.with_position(group[j]).below(12, cfg.vocab)));

      const auto frozen = oracle_forward(p64, cfg, entry, cond);
      const auto ref = oracle_forward(p64, cfg, grid, cond, &frozen, group);
      auto c64 = build_cache(forward_full(p64, cfg, entry, cond), group);
      const auto r64 = forward_partial(p64, cfg, grid, group, c64);
      worst64 = std::max(worst64, detail::normwise(r64.outputs, ref.outputs, r64.targets));
      auto c32 = build_cache(forward_full(p32, cfg, entry, cond), group);
      const auto r32 = forward_partial(p32, cfg, grid, group, c32);
      worst32 = std::max(worst32, detail::normwise(r32.outputs.cast<double>(), ref.outputs, r32.targets));
    }
    std::ostringstream d;
    d << instances << " instances, max rel err f64 " << worst64 << " (< 1e-10), f32 " << worst32
      << " (< 1e-5)";
    return CheckResult{"", worst64 < 1e-10 && worst32 < 1e-5, d.str()};
  });
}

/// decode_recap with no Local-FEs reproduces decode_baseline bit for bit.
template <typename T>
CheckResult check_zero_local_degeneracy(const ModelParams<T>& params, const ModelConfig& cfg,
                                        std::size_t seeds = 20, std::size_t steps = 12,
                                        const DecodeOptions& opt = {}) {
  return detail::timed("zero-local degeneracy", [&] {
    ScheduleConfig sc;
    sc.T = steps;
    const auto base = sc.base(cfg.seq_len);
    const auto grouped = sc.grouped(cfg.seq_len);
    std::size_t same = 0;
    for (std::size_t k = 0; k < seeds; ++k) {
      const RandomStream s(k, Phase::value);
      const std::optional<int> cond =
          cfg.num_conditions ? std::optional<int>(static_cast<int>(k % cfg.num_conditions))
                             : std::nullopt;
      const auto a = decode_baseline(params, cfg, base, opt, cond, s);
      const auto b = decode_recap(params, cfg, grouped, opt, cond, s);
      same += a.grid == b.grid && a.ledger.nfe() == b.ledger.nfe() &&
              a.ledger.attn_flops() == b.ledger.attn_flops();
    }
    return CheckResult{"", same == seeds,
                       std::to_string(same) + "/" + std::to_string(seeds) + " seeds identical"};
  });
}

/// Cosine and polynomial tables against direct formula evaluation, and the
/// grouped structures (u, T, T′) = (8, 12, 4) and (10, 15, 5).
inline CheckResult check_schedule_tables() {
  return detail::timed("schedule tables", [] {
    std::vector<std::string> bad;
    auto oracle = [](std::size_t T, std::size_t L, auto&& f) {
      std::vector<std::size_t> counts;
      std::size_t prev = L;
      for (std::size_t t = 1; t <= T; ++t) {
        const std::size_t m = t == T ? 0 : static_cast<std::size_t>(std::floor(f(t) * static_cast<double>(L)));
        counts.push_back(prev - m);
        prev = m;
      }
      return counts;
    };
    const auto cos_want = oracle(8, 256, [](std::size_t t) { return std::cos(M_PI * t / 16.0); });
    const std::vector<std::size_t> cos_table{5, 15, 24, 31, 39, 45, 48, 49};
    const auto cos_got = cosine_schedule(8, 256).decode_counts;
    if (cos_got != cos_want || cos_got != cos_table) bad.push_back("cosine T=8 L=256");
    const auto poly_want =
        oracle(4, 100, [](std::size_t t) { return 1.0 - std::pow(t / 4.0, 2.5); });
    const std::vector<std::size_t> poly_table{4, 14, 31, 51};
    const auto poly_got = polynomial_schedule(4, 100, 2.5).decode_counts;
    if (poly_got != poly_want || poly_got != poly_table) bad.push_back("polynomial T=4 L=100");
    auto grouped_ok = [](std::size_t T, std::size_t Tp, std::size_t u, std::size_t total) {
      const auto g = build_grouped_schedule(T, Tp, u, cosine_schedule(T + Tp, 256),
                                            GroupPattern::tail_singles);
      if (g.steps.size() != total || g.group_count() != T) return false;
      for (std::size_t k = 0; k < T; ++k)
        if (g.locals[k] != (k >= u ? 1u : 0u)) return false;
      std::size_t n = 0;
      for (const auto& s : g.steps) n += s.decode_count;
      return n == 256;
    };
    if (!grouped_ok(12, 4, 8, 16)) bad.push_back("grouped 8|12|4");
    if (!grouped_ok(15, 5, 10, 20)) bad.push_back("grouped 10|15|5");
    std::string d = bad.empty() ? "all tables match" : "mismatch:";
    for (const auto& b : bad) d += " " + b;
    return CheckResult{"", bad.empty(), d};
  });
}

/// Unordered-set probabilities of sequential softmax(s/τ) draws without
/// replacement, by enumerating every ordered draw.
inline std::map<std::set<std::size_t>, double> enumerate_subsets(const std::vector<double>& scores,
                                                                 double tau, std::size_t k) {
  std::map<std::set<std::size_t>, double> out;
  std::function<void(std::set<std::size_t>, double)> rec = [&](std::set<std::size_t> taken,
                                                               double p) {
    if (taken.size() == k) {
      out[taken] += p;
      return;
    }
    double z = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (!taken.count(i)) z += std::exp(scores[i] / tau);
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (!taken.count(i)) {
        auto t = taken;
        t.insert(i);
        rec(t, p * std::exp(scores[i] / tau) / z);
      }
  };
  rec({}, 1.0);
  return out;
}

/// Pearson chi-square p-value of observed set counts against `expected`.
inline double chi_square_p(const std::map<std::set<std::size_t>, double>& expected,
                           const std::map<std::set<std::size_t>, std::size_t>& counts,
                           std::size_t n) {
  double stat = 0;
  for (const auto& [s, p] : expected) {
    const double e = p * static_cast<double>(n);
    const auto it = counts.find(s);
    const double o = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    stat += (o - e) * (o - e) / e;
  }
  for (const auto& [s, c] : counts)
    if (!expected.count(s)) return 0.0;
  boost::math::chi_squared dist(static_cast<double>(expected.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

inline CheckResult check_gumbel_top_k(std::size_t draws = 200000, std::uint64_t seed = 42) {
  return detail::timed("gumbel top-k chi-square", [&] {
    ConfidenceTable t;
    t.positions = {0, 1, 2, 3};
    t.scores = {0.0, -1.0, -2.0, -3.0};
    std::map<std::set<std::size_t>, std::size_t> counts;
    for (std::size_t d = 0; d < draws; ++d) {
      const auto s = gumbel_top_k(t, 1.0, 2, RandomStream(seed, Phase::choice, d));
      counts[{s.begin(), s.end()}]++;
    }
    const double p = chi_square_p(enumerate_subsets(t.scores, 1.0, 2), counts, draws);
    std::ostringstream d;
    d << "4 items, k=2, " << draws << " draws, p = " << p << " (> 0.01)";
    return CheckResult{"", p > 0.01, d.str()};
  });
}

/// Discrete masked cross-entropy (both architectures) and diffusion-head
/// loss gradients against central differences in double precision.
inline CheckResult check_gradients() {
  return detail::timed("gradient checks", [] {
    double worst = 0;
    std::string where;
    auto note = [&](const GradCheck& g, const std::string& what) {
      if (g.max_rel_error > worst) {
        worst = g.max_rel_error;
        where = what + ": " + g.worst;
      }
    };
    for (Arch arch : {Arch::decoder_only, Arch::encoder_decoder}) {
      ModelConfig cfg;
      cfg.arch = arch;
      cfg.seq_len = 8;
      cfg.embed_dim = 8;
      cfg.heads = 2;
      cfg.layers = 2;
      cfg.decoder_layers = 2;
      cfg.vocab = 5;
      cfg.num_conditions = 3;
      const auto p = detail::probe_params(cfg, 11);
      TokenGrid clean = TokenGrid::masked_discrete(8);
      RandomStream s(4, Phase::misc);
      for (std::size_t i = 0; i < 8; ++i) clean.set_id(i, static_cast<int>(s.below(i, 5)));
      TokenGrid in = clean;
      for (std::size_t i : {1u, 2u, 5u, 6u}) in.mask(i);
      note(check_masked_loss_gradients(p, cfg, in, clean, 2, RandomStream(1, Phase::train)),
           arch == Arch::decoder_only ? "decoder_only" : "encoder_decoder");
    }
    DiffusionConfig dc;
    dc.z_dim = 6;
    dc.hidden = {10, 10};
    DiffusionHeadParams<double> hp(dc);
    RandomStream s(4, Phase::init);
    std::uint64_t k = 0;
    hp.for_each([&](const std::string&, Matrix<double>& m) {
      for (auto& v : m.values()) v = 0.5 * s.normal(k++);
    });
    const std::vector<double> z{0.3, -0.2, 0.9, 0.1, -1.1, 0.4}, x{1, -1, 1};
    for (std::uint64_t seed = 0; seed < 5; ++seed)
      note(check_diffusion_gradients(hp, dc, z, x, RandomStream(seed, Phase::diffusion)),
           "diffusion head");
    std::ostringstream d;
    d << "max rel err " << worst << " (< 1e-4)";
    if (worst >= 1e-4) d << " at " << where;
    return CheckResult{"", worst < 1e-4, d.str()};
  });
}

/// All invariant checks in order. Degeneracy runs on the given model.
template <typename T>
std::vector<CheckResult> run_invariant_suite(const ModelParams<T>& params, const ModelConfig& cfg) {
  return {check_frozen_context(), check_zero_local_degeneracy(params, cfg), check_schedule_tables(),
          check_gumbel_top_k(), check_gradients()};
}

}  // namespace recap::verify
