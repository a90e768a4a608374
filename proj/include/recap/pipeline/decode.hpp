#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "recap/bench/cost.hpp"
#include "recap/diffusion/head.hpp"
#include "recap/grid.hpp"
#include "recap/kvcache.hpp"
#include "recap/model/forward.hpp"
#include "recap/model/partial.hpp"
#include "recap/sampler.hpp"
#include "recap/schedule.hpp"

namespace recap {

/// Reverse-diffusion step counts for continuous tokens decoded from
/// Full-FE and from Local-FE latents.
struct DiffusionSampling {
  std::size_t full_steps = 64;
  std::size_t local_steps = 32;
};

inline void from_json(const nlohmann::json& j, DiffusionSampling& d) {
  d = DiffusionSampling{};
  try {
    d.full_steps = j.value("full_steps", d.full_steps);
    d.local_steps = j.value("local_steps", d.local_steps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("diffusion sampling config: ") + e.what());
  }
  if (d.full_steps < 1 || d.local_steps < 1)
    throw ConfigError("diffusion: full_steps and local_steps must be at least 1");
}

inline void to_json(nlohmann::json& j, const DiffusionSampling& d) {
  j = {{"full_steps", d.full_steps}, {"local_steps", d.local_steps}};
}

struct DecodeOptions {
  SamplerConfig sampler;
  DiffusionSampling diffusion;
};

struct DecodeResult {
  TokenGrid grid;
  CostLedger ledger;
};

namespace detail {

/// Shared state of one decode: evaluations, sampling and bookkeeping.
template <typename T>
class Decoder {
 public:
  Decoder(const ModelParams<T>& p, const ModelConfig& cfg, const DecodeOptions& opt,
          std::optional<int> condition, const RandomStream& stream)
      : p_(p), cfg_(cfg), opt_(opt), cond_(condition), stream_(stream) {
    if (continuous()) {
      if (!cfg.diffusion || !p.diffusion)
        throw ConfigError("continuous decoding needs a diffusion head");
      sched_.emplace(*cfg.diffusion);
    }
    grid_ = continuous() ? TokenGrid::masked_continuous(cfg.seq_len, cfg.token_dim, condition)
                         : TokenGrid::masked_discrete(cfg.seq_len, condition);
  }

  bool continuous() const { return cfg_.token_mode == TokenMode::continuous; }
  bool guided() const { return opt_.sampler.cfg; }
  bool uniform_order() const { return continuous() || opt_.sampler.selector == Selector::uniform; }

  /// One plain decoding step: Full-FE, sample, select n̂ positions, commit.
  void full_step(std::size_t step, std::size_t n_hat, double tau1, double tau2) {
    auto [rec, unc] = evaluate_full();
    const auto masked = grid_.masked_positions();
    if (n_hat > masked.size()) throw DomainError("schedule decodes more tokens than are masked");
    if (continuous()) {
      std::vector<std::size_t> chosen;
      {
        PhaseTimer t(ledger_.sampling_ns);
        chosen = select_uniform(std::span<const std::size_t>(masked), n_hat,
                                stream_.with_phase(Phase::select).with_step(step));
      }
      diffuse(chosen, rec.outputs, unc ? &unc->outputs : nullptr, chosen, step,
              opt_.diffusion.full_steps, ledger_.diffusion_full_count);
      return;
    }
    PhaseTimer t(ledger_.sampling_ns);
    const auto logits = guided_logits(rec.outputs, unc ? &unc->outputs : nullptr, masked);
    const auto values = sample_values(logits, std::span<const std::size_t>(masked), tau1,
                                      stream_.with_phase(Phase::value).with_step(step));
    std::vector<std::size_t> chosen;
    if (uniform_order()) {
      chosen = select_uniform(std::span<const std::size_t>(masked), n_hat,
                              stream_.with_phase(Phase::select).with_step(step));
    } else {
      const auto conf = confidence_scores(logits, std::span<const std::size_t>(masked),
                                          std::span<const int>(values));
      chosen = gumbel_top_k(conf, tau2, n_hat, stream_.with_phase(Phase::choice).with_step(step));
    }
    std::vector<int> by_pos(cfg_.seq_len, -1);
    for (std::size_t r = 0; r < masked.size(); ++r) by_pos[masked[r]] = values[r];
    for (auto i : chosen) grid_.set_id(i, by_pos[i]);
  }

  /// One grouped stage: Full-FE, then one Local-FE per later sub-step.
  void group(std::span<const SubStep> subs) {
    if (subs.size() == 1) {
      full_step(subs[0].step, subs[0].decode_count, subs[0].tau1, subs[0].tau2);
      return;
    }
    const std::size_t s0 = subs[0].step;
    std::size_t total = 0;
    std::vector<std::size_t> sizes;
    for (const auto& s : subs) {
      sizes.push_back(s.decode_count);
      total += s.decode_count;
    }
    auto [rec, unc] = evaluate_full();
    const auto masked = grid_.masked_positions();
    if (total > masked.size()) throw DomainError("schedule decodes more tokens than are masked");

    TargetPlan plan;
    Matrix<T> logits;
    std::vector<int> draft(cfg_.seq_len, -1);
    {
      PhaseTimer t(ledger_.sampling_ns);
      if (uniform_order()) {
        const auto order = select_uniform(std::span<const std::size_t>(masked), total,
                                          stream_.with_phase(Phase::select).with_step(s0));
        std::size_t at = 0;
        for (auto n : sizes) {
          plan.blocks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                                   order.begin() + static_cast<std::ptrdiff_t>(at + n));
          at += n;
        }
      }
      if (!continuous()) {
        logits = guided_logits(rec.outputs, unc ? &unc->outputs : nullptr, masked);
        // Confidence pass at τ1 = 1; S_t^(0) is redrawn below at its own τ1.
        const auto values = sample_values(logits, std::span<const std::size_t>(masked), 1.0,
                                          stream_.with_phase(Phase::value).with_step(s0));
        for (std::size_t r = 0; r < masked.size(); ++r) draft[masked[r]] = values[r];
        if (!uniform_order()) {
          const auto conf = confidence_scores(logits, std::span<const std::size_t>(masked),
                                              std::span<const int>(values));
          const auto targets =
              gumbel_top_k(conf, subs[0].tau2, total,
                           stream_.with_phase(Phase::choice).with_step(s0));
          plan = partition_targets(std::span<const std::size_t>(targets), conf,
                                   std::span<const std::size_t>(sizes));
        }
      }
    }
    std::vector<std::size_t> group_targets;
    for (const auto& b : plan.blocks) group_targets.insert(group_targets.end(), b.begin(), b.end());

    std::optional<DecodingCache<T>> cache, ucache;
    {
      PhaseTimer t(ledger_.full_ns);
      cache.emplace(build_cache(rec, std::span<const std::size_t>(group_targets)));
      if (unc) ucache.emplace(build_cache(*unc, std::span<const std::size_t>(group_targets)));
    }

    // Sub-step 0 from the Full-FE outputs.
    const auto& first = plan.blocks[0];
    if (continuous()) {
      diffuse(first, rec.outputs, unc ? &unc->outputs : nullptr, first, s0,
              opt_.diffusion.full_steps, ledger_.diffusion_full_count);
    } else {
      PhaseTimer t(ledger_.sampling_ns);
      commit_discrete(logits, masked, first, subs[0].tau1, s0);
    }

    for (std::size_t j = 1; j < subs.size(); ++j) {
      const auto& prev = plan.blocks[j - 1];
      const auto& cur = plan.blocks[j];
      std::vector<std::size_t> targets(prev.begin(), prev.end());
      targets.insert(targets.end(), cur.begin(), cur.end());
      std::optional<PartialRecord<T>> part, upart;
      {
        PhaseTimer t(ledger_.local_ns);
        part.emplace(local_eval(*cache, targets));
        if (ucache) upart.emplace(local_eval(*ucache, targets));
      }
      if (cur.empty()) continue;
      const std::size_t sj = subs[j].step;
      if (continuous()) {
        diffuse(cur, part->outputs, upart ? &upart->outputs : nullptr, part->targets, sj,
                opt_.diffusion.local_steps, ledger_.diffusion_local_count);
        continue;
      }
      PhaseTimer t(ledger_.sampling_ns);
      if (opt_.sampler.resample_locals) {
        const auto local = guided_logits(part->outputs, upart ? &upart->outputs : nullptr,
                                         rows_in(part->targets, cur));
        const auto values = sample_values(local, std::span<const std::size_t>(cur),
                                          subs[j].tau1,
                                          stream_.with_phase(Phase::value).with_step(sj));
        for (std::size_t r = 0; r < cur.size(); ++r) grid_.set_id(cur[r], values[r]);
      } else {
        for (auto i : cur) grid_.set_id(i, draft[i]);
      }
    }
  }

  DecodeResult finish(std::int64_t total_ns) {
    if (grid_.masked_count() != 0) throw DomainError("schedule left masked positions");
    ledger_.total_ns = total_ns;
    return {std::move(grid_), ledger_};
  }

  CostLedger& ledger() { return ledger_; }

 private:
  struct FullPair {
    ForwardRecord<T> cond;
    std::optional<ForwardRecord<T>> uncond;
  };

  double full_flops(const TokenGrid& g) const {
    if (cfg_.arch == Arch::decoder_only) return flops_full(cfg_);
    const std::size_t enc = g.length() - g.masked_count() + 1;
    return stack_flops(cfg_, cfg_.encoder_layers(), enc, enc) +
           stack_flops(cfg_, cfg_.decoder_stack_layers(), cfg_.seq_len + 1, cfg_.seq_len + 1);
  }

  FullPair evaluate_full() {
    PhaseTimer t(ledger_.full_ns);
    FullPair out{forward_full(p_, cfg_, grid_, cond_), std::nullopt};
    ledger_.full_fe_count += 1;
    ledger_.full_flops += full_flops(grid_);
    if (guided()) {
      out.uncond.emplace(forward_full(p_, cfg_, grid_, std::optional<int>{}));
      ledger_.full_fe_count += 1;
      ledger_.full_flops += full_flops(grid_);
    }
    return out;
  }

  PartialRecord<T> local_eval(DecodingCache<T>& cache, const std::vector<std::size_t>& targets) {
    auto part = forward_partial(p_, cfg_, grid_, std::span<const std::size_t>(targets), cache);
    ledger_.local_fe_count += 1;
    if (cfg_.arch == Arch::decoder_only) {
      ledger_.local_flops += flops_local(cfg_, part.targets.size());
    } else {
      const std::size_t enc_ctx = cache.encoder_ids.size() + part.encoded.size();
      ledger_.local_flops +=
          stack_flops(cfg_, cfg_.encoder_layers(), part.encoded.size(), enc_ctx) +
          stack_flops(cfg_, cfg_.decoder_stack_layers(), part.targets.size(), cfg_.seq_len + 1);
    }
    commit(cache, part);
    return part;
  }

  /// Row indices of `wanted` positions within the sorted position list `rows`.
  static std::vector<std::size_t> rows_in(const std::vector<std::size_t>& rows,
                                          const std::vector<std::size_t>& wanted) {
    std::vector<std::size_t> out;
    for (auto w : wanted) {
      const auto it = std::lower_bound(rows.begin(), rows.end(), w);
      if (it == rows.end() || *it != w) throw CacheError("missing Local-FE output row");
      out.push_back(static_cast<std::size_t>(it - rows.begin()));
    }
    return out;
  }

  /// Guided logits at the given output rows (positions index rows directly
  /// for Full-FE matrices).
  Matrix<T> guided_logits(const Matrix<T>& cond, const Matrix<T>* uncond,
                          const std::vector<std::size_t>& rows) const {
    auto c = gather_rows(cond, std::span<const std::size_t>(rows));
    if (!uncond) return c;
    return cfg_combine(c, gather_rows(*uncond, std::span<const std::size_t>(rows)),
                       opt_.sampler.cfg_scale);
  }

  void commit_discrete(const Matrix<T>& logits, const std::vector<std::size_t>& masked,
                       const std::vector<std::size_t>& block, double tau1, std::size_t step) {
    std::vector<std::size_t> rows;
    for (auto i : block)
      rows.push_back(static_cast<std::size_t>(
          std::lower_bound(masked.begin(), masked.end(), i) - masked.begin()));
    const auto sub = gather_rows(logits, std::span<const std::size_t>(rows));
    const auto values = sample_values(sub, std::span<const std::size_t>(block), tau1,
                                      stream_.with_phase(Phase::value).with_step(step));
    for (std::size_t r = 0; r < block.size(); ++r) grid_.set_id(block[r], values[r]);
  }

  /// Samples continuous tokens for `positions`; latents live in `z` at the
  /// rows where `row_positions` (sorted, or the full identity) holds them.
  void diffuse(const std::vector<std::size_t>& positions, const Matrix<T>& z, const Matrix<T>* zu,
               const std::vector<std::size_t>& row_positions, std::size_t step, std::size_t steps,
               std::size_t& counter) {
    PhaseTimer t(ledger_.diffusion_ns);
    const bool identity = z.rows() == cfg_.seq_len;
    std::vector<std::size_t> sorted_rows = row_positions;
    std::sort(sorted_rows.begin(), sorted_rows.end());
    for (auto i : positions) {
      std::size_t r = i;
      if (!identity)
        r = static_cast<std::size_t>(std::lower_bound(sorted_rows.begin(), sorted_rows.end(), i) -
                                     sorted_rows.begin());
      std::optional<NoiseGuidance<T>> guide;
      if (zu) guide = NoiseGuidance<T>{std::span<const T>(zu->row(r)), opt_.sampler.cfg_scale};
      const auto x = sample_token(*p_.diffusion, *cfg_.diffusion, *sched_,
                                  std::span<const T>(z.row(r)), steps,
                                  stream_.with_phase(Phase::diffusion).with_step(step).with_position(i),
                                  guide);
      grid_.set_vector(i, std::span<const double>(x));
      counter += steps * (zu ? 2 : 1);
    }
  }

  const ModelParams<T>& p_;
  const ModelConfig& cfg_;
  const DecodeOptions& opt_;
  std::optional<int> cond_;
  RandomStream stream_;
  std::optional<NoiseSchedule> sched_;
  TokenGrid grid_;
  CostLedger ledger_;
};

inline std::int64_t elapsed_ns(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() -
                                                              since)
      .count();
}

}  // namespace detail

/// Iterative decoding with one Full-FE per schedule step.
template <typename T>
DecodeResult decode_baseline(const ModelParams<T>& params, const ModelConfig& cfg,
                             const StepSchedule& schedule, const DecodeOptions& opt,
                             std::optional<int> condition, const RandomStream& stream) {
  if (schedule.length != cfg.seq_len)
    throw DimensionError("schedule length " + std::to_string(schedule.length) +
                         " does not match the model's " + std::to_string(cfg.seq_len));
  const auto start = std::chrono::steady_clock::now();
  detail::Decoder<T> dec(params, cfg, opt, condition, stream);
  for (std::size_t s = 1; s <= schedule.total_steps; ++s)
    dec.full_step(s, schedule.decode_counts[s - 1], schedule.tau1[s - 1], schedule.tau2[s - 1]);
  return dec.finish(detail::elapsed_ns(start));
}

/// Grouped decoding: every group runs one Full-FE followed by its Local-FEs
/// over the cached complement.
template <typename T>
DecodeResult decode_recap(const ModelParams<T>& params, const ModelConfig& cfg,
                          const GroupedSchedule& schedule, const DecodeOptions& opt,
                          std::optional<int> condition, const RandomStream& stream) {
  if (schedule.length != cfg.seq_len)
    throw DimensionError("schedule length " + std::to_string(schedule.length) +
                         " does not match the model's " + std::to_string(cfg.seq_len));
  const auto start = std::chrono::steady_clock::now();
  detail::Decoder<T> dec(params, cfg, opt, condition, stream);
  for (std::size_t g = 0; g < schedule.group_count(); ++g) dec.group(schedule.group(g));
  return dec.finish(detail::elapsed_ns(start));
}

}  // namespace recap
