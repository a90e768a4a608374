#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "recap/error.hpp"

namespace recap {

/// How many tokens each decoding step reveals, plus per-step temperatures.
struct StepSchedule {
  std::size_t total_steps = 0;
  std::size_t length = 0;                 // L
  std::vector<std::size_t> remaining;     // m_0..m_S, m_0 = L, m_S = 0
  std::vector<std::size_t> decode_counts; // n̂_1..n̂_S at index s-1
  std::vector<double> tau1;               // sampling temperature per step
  std::vector<double> tau2;               // choice temperature per step
};

namespace detail {

/// Forces every step to reveal at least one token when L ≥ steps by
/// pushing a step's deficit onto the following steps.
inline void enforce_progress(std::vector<std::size_t>& m) {
  const std::size_t S = m.size() - 1;
  if (m[0] < S) return;
  for (std::size_t t = 1; t < S; ++t) {
    const std::size_t cap = m[t - 1] - 1;
    m[t] = std::max(std::min(m[t], cap), S - t);
  }
}

inline StepSchedule from_remaining(std::vector<std::size_t> m) {
  enforce_progress(m);
  StepSchedule s;
  s.total_steps = m.size() - 1;
  s.length = m[0];
  s.remaining = std::move(m);
  for (std::size_t t = 1; t < s.remaining.size(); ++t)
    s.decode_counts.push_back(s.remaining[t - 1] - s.remaining[t]);
  s.tau1.assign(s.total_steps, 1.0);
  s.tau2.assign(s.total_steps, 1.0);
  return s;
}

}  // namespace detail

/// m_t = floor(cos(πt / 2T) · L), m_T = 0.
inline StepSchedule cosine_schedule(std::size_t T, std::size_t L) {
  if (T < 1 || L < 1) throw DomainError("cosine_schedule needs T >= 1 and L >= 1");
  std::vector<std::size_t> m(T + 1, 0);
  for (std::size_t t = 0; t < T; ++t)
    m[t] = static_cast<std::size_t>(std::floor(
        std::cos(std::numbers::pi * static_cast<double>(t) / (2.0 * static_cast<double>(T))) *
        static_cast<double>(L)));
  m[0] = L;
  return detail::from_remaining(std::move(m));
}

/// m_t = floor((1 − (t/T)^exponent) · L), m_T = 0.
inline StepSchedule polynomial_schedule(std::size_t T, std::size_t L, double exponent = 2.5) {
  if (T < 1 || L < 1) throw DomainError("polynomial_schedule needs T >= 1 and L >= 1");
  if (!(exponent > 0)) throw DomainError("polynomial exponent must be positive");
  std::vector<std::size_t> m(T + 1, 0);
  for (std::size_t t = 0; t < T; ++t) {
    const double f = static_cast<double>(t) / static_cast<double>(T);
    m[t] = static_cast<std::size_t>(std::floor((1.0 - std::pow(f, exponent)) *
                                               static_cast<double>(L)));
  }
  m[0] = L;
  return detail::from_remaining(std::move(m));
}

/// τ1 = τ_low + (1 − f^0.5)(1 − τ_low) for step fraction f ∈ [0, 1].
inline double tau1_schedule(double step_fraction, double tau_low) {
  if (!(tau_low > 0.0 && tau_low <= 1.0)) throw DomainError("tau_low must lie in (0, 1]");
  if (!(step_fraction >= 0.0 && step_fraction <= 1.0))
    throw DomainError("step fraction must lie in [0, 1]");
  return tau_low + (1.0 - std::sqrt(step_fraction)) * (1.0 - tau_low);
}

inline constexpr double kTau2Floor = 1e-6;

/// Linear decay τ2(s) = τ_init · (1 − (s−1)/S), floored at kTau2Floor.
inline double tau2_schedule(std::size_t s, std::size_t S, double tau2_init) {
  if (s < 1 || s > S) throw DomainError("tau2_schedule: step outside [1, S]");
  const double v = tau2_init * (1.0 - static_cast<double>(s - 1) / static_cast<double>(S));
  return std::max(v, kTau2Floor);
}

/// τ_low by step count: 0.65/0.68/0.72/0.75 at 16/20/24/32 steps, linear in
/// between, 0.75 beyond 32. Shorter schedules sample at constant τ1 = 1.
inline double default_tau_low(std::size_t steps) {
  static constexpr std::array<std::pair<double, double>, 4> anchors{
      {{16, 0.65}, {20, 0.68}, {24, 0.72}, {32, 0.75}}};
  const double s = static_cast<double>(steps);
  if (s < anchors.front().first) return 1.0;
  if (s >= anchors.back().first) return anchors.back().second;
  for (std::size_t i = 1; i < anchors.size(); ++i)
    if (s <= anchors[i].first) {
      const auto [x0, y0] = anchors[i - 1];
      const auto [x1, y1] = anchors[i];
      return y0 + (s - x0) / (x1 - x0) * (y1 - y0);
    }
  return anchors.back().second;
}

/// Initial choice temperature: 4.5, raised to 5.5 for 16 steps or more.
inline double default_tau2_init(std::size_t steps) { return steps >= 16 ? 5.5 : 4.5; }

/// Initial choice temperature scaled with total evaluations, for
/// unconditional encoder-decoder sampling (linear between anchors).
inline double nfe_scaled_tau2_init(std::size_t nfe) {
  static constexpr std::array<std::pair<double, double>, 9> anchors{{{20, 6.0},
                                                                     {30, 6.5},
                                                                     {40, 7.0},
                                                                     {50, 8.0},
                                                                     {60, 8.5},
                                                                     {70, 9.0},
                                                                     {80, 9.5},
                                                                     {100, 12.0},
                                                                     {128, 13.0}}};
  const double n = static_cast<double>(nfe);
  if (n <= anchors.front().first) return anchors.front().second;
  if (n >= anchors.back().first) return anchors.back().second;
  for (std::size_t i = 1; i < anchors.size(); ++i)
    if (n <= anchors[i].first) {
      const auto [x0, y0] = anchors[i - 1];
      const auto [x1, y1] = anchors[i];
      return y0 + (n - x0) / (x1 - x0) * (y1 - y0);
    }
  return anchors.back().second;
}

/// Fills per-step τ1 and τ2. τ1 uses fraction (s−1)/(S−1) so the last step
/// lands exactly on τ_low.
inline void apply_temperatures(StepSchedule& s, double tau_low, double tau2_init) {
  const std::size_t S = s.total_steps;
  for (std::size_t k = 1; k <= S; ++k) {
    const double f = S == 1 ? 0.0 : static_cast<double>(k - 1) / static_cast<double>(S - 1);
    s.tau1[k - 1] = tau1_schedule(f, tau_low);
    s.tau2[k - 1] = tau2_schedule(k, S, tau2_init);
  }
}

enum class SubStepKind { full, local };
enum class GroupPattern { tail_singles, alternating };

struct SubStep {
  std::size_t step = 0;   // global 1-based index
  std::size_t group = 0;  // 0-based
  SubStepKind kind = SubStepKind::full;
  std::size_t decode_count = 0;
  double tau1 = 1.0;
  double tau2 = 1.0;
};

/// T groups, each one Full sub-step followed by l_t Local sub-steps.
struct GroupedSchedule {
  std::size_t T = 0, T_prime = 0, u = 0;
  GroupPattern pattern = GroupPattern::tail_singles;
  std::size_t length = 0;
  std::vector<std::size_t> locals;           // l_t per group
  std::vector<SubStep> steps;                // flattened, T + T′ entries
  std::vector<std::size_t> group_begin;      // index into steps of each Full sub-step

  std::size_t group_count() const { return locals.size(); }
  std::span<const SubStep> group(std::size_t g) const {
    return {steps.data() + group_begin.at(g), 1 + locals.at(g)};
  }
  std::size_t group_size(std::size_t g) const {
    std::size_t n = 0;
    for (const auto& s : group(g)) n += s.decode_count;
    return n;
  }
};

inline std::vector<std::size_t> local_counts(std::size_t T, std::size_t T_prime, std::size_t u,
                                             GroupPattern pattern) {
  if (T < 1) throw DomainError("grouped schedule needs T >= 1");
  std::vector<std::size_t> l(T, 0);
  if (T_prime == 0) return l;
  if (pattern == GroupPattern::tail_singles) {
    if (u + T_prime != T)
      throw DomainError("tail_singles needs u + T' = T (got u=" + std::to_string(u) + ", T=" +
                        std::to_string(T) + ", T'=" + std::to_string(T_prime) + ")");
    for (std::size_t g = u; g < T; ++g) l[g] = 1;
  } else {
    if (u != 0) throw DomainError("alternating pattern needs u = 0");
    if (T_prime > T) throw DomainError("alternating pattern needs T' <= T");
    for (std::size_t g = 0; g < T; ++g)
      l[g] = ((g + 1) * T_prime) / T > (g * T_prime) / T ? 1 : 0;
  }
  return l;
}

/// Assigns the T + T′ base steps to groups in order.
inline GroupedSchedule build_grouped_schedule(std::size_t T, std::size_t T_prime, std::size_t u,
                                              const StepSchedule& base,
                                              GroupPattern pattern) {
  if (base.total_steps != T + T_prime)
    throw DomainError("base schedule has " + std::to_string(base.total_steps) +
                      " steps, expected T + T' = " + std::to_string(T + T_prime));
  GroupedSchedule g;
  g.T = T;
  g.T_prime = T_prime;
  g.u = u;
  g.pattern = pattern;
  g.length = base.length;
  g.locals = local_counts(T, T_prime, u, pattern);
  std::size_t s = 0;
  for (std::size_t grp = 0; grp < T; ++grp) {
    g.group_begin.push_back(g.steps.size());
    for (std::size_t j = 0; j <= g.locals[grp]; ++j, ++s) {
      SubStep st;
      st.step = s + 1;
      st.group = grp;
      st.kind = j == 0 ? SubStepKind::full : SubStepKind::local;
      st.decode_count = base.decode_counts[s];
      st.tau1 = base.tau1[s];
      st.tau2 = base.tau2[s];
      g.steps.push_back(st);
    }
  }
  return g;
}

/// Schedule section of a configuration document.
struct ScheduleConfig {
  std::string kind = "cosine";  // cosine | polynomial
  std::size_t T = 16;
  std::size_t T_prime = 0;
  std::optional<std::size_t> u;  // default: T − T′ (tail_singles) or 0
  GroupPattern pattern = GroupPattern::tail_singles;
  double exponent = 2.5;
  std::optional<double> tau_low;    // default: by total steps
  std::optional<double> tau2_init;  // default: by total steps

  std::size_t total_steps() const { return T + T_prime; }
  std::size_t resolved_u() const {
    if (u) return *u;
    return pattern == GroupPattern::alternating ? 0 : (T >= T_prime ? T - T_prime : 0);
  }

  StepSchedule base(std::size_t L) const {
    const std::size_t S = total_steps();
    StepSchedule s;
    if (kind == "cosine") s = cosine_schedule(S, L);
    else if (kind == "polynomial") s = polynomial_schedule(S, L, exponent);
    else throw ConfigError("unknown schedule kind '" + kind + "'");
    apply_temperatures(s, tau_low.value_or(default_tau_low(S)),
                       tau2_init.value_or(default_tau2_init(S)));
    return s;
  }

  GroupedSchedule grouped(std::size_t L) const {
    return build_grouped_schedule(T, T_prime, resolved_u(), base(L), pattern);
  }
};

inline void from_json(const nlohmann::json& j, ScheduleConfig& c) {
  c = ScheduleConfig{};
  try {
    c.kind = j.value("kind", c.kind);
    c.T = j.value("T", c.T);
    c.T_prime = j.value("T_prime", c.T_prime);
    if (j.contains("u") && !j["u"].is_null()) c.u = j["u"].get<std::size_t>();
    const std::string pat = j.value("pattern", std::string("tail_singles"));
    if (pat == "tail_singles") c.pattern = GroupPattern::tail_singles;
    else if (pat == "alternating") c.pattern = GroupPattern::alternating;
    else throw ConfigError("unknown schedule pattern '" + pat + "'");
    c.exponent = j.value("exponent", c.exponent);
    if (j.contains("tau_low") && !j["tau_low"].is_null()) c.tau_low = j["tau_low"].get<double>();
    if (j.contains("tau2_init") && !j["tau2_init"].is_null())
      c.tau2_init = j["tau2_init"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schedule config: ") + e.what());
  }
  if (c.kind != "cosine" && c.kind != "polynomial")
    throw ConfigError("unknown schedule kind '" + c.kind + "'");
  if (c.T < 1) throw ConfigError("schedule: T must be at least 1");
}

inline void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j = {{"kind", c.kind},
       {"T", c.T},
       {"T_prime", c.T_prime},
       {"u", c.resolved_u()},
       {"pattern", c.pattern == GroupPattern::alternating ? "alternating" : "tail_singles"},
       {"exponent", c.exponent}};
  if (c.tau_low) j["tau_low"] = *c.tau_low;
  if (c.tau2_init) j["tau2_init"] = *c.tau2_init;
}

}  // namespace recap
