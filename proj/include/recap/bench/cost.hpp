#pragma once

#include <chrono>
#include <cstdint>

#include "recap/model/config.hpp"

namespace recap {

/// Analytic FLOPs of one transformer layer for `nq` query rows attending
/// over `nctx` context rows (a multiply-add counts as 2):
/// QKV + output projections 8·nq·d², scores 2·nq·nctx·d, weighted sum
/// 2·nq·nctx·d, MLP 4·nq·d·h.
inline double layer_flops(std::size_t nq, std::size_t nctx, std::size_t d, std::size_t h) {
  const double q = static_cast<double>(nq), c = static_cast<double>(nctx);
  const double dd = static_cast<double>(d), hh = static_cast<double>(h);
  return 8 * q * dd * dd + 4 * q * c * dd + 4 * q * dd * hh;
}

/// Attention-score part alone (2·nq·nctx·d per layer).
inline double score_flops(std::size_t nq, std::size_t nctx, std::size_t d) {
  return 2.0 * static_cast<double>(nq) * static_cast<double>(nctx) * static_cast<double>(d);
}

inline double stack_flops(const ModelConfig& cfg, std::size_t layers, std::size_t nq,
                          std::size_t nctx) {
  return static_cast<double>(layers) * layer_flops(nq, nctx, cfg.embed_dim, cfg.mlp_hidden());
}

/// One Full-FE of a single-stack model over all N positions.
inline double flops_full(const ModelConfig& cfg) {
  return stack_flops(cfg, cfg.decoder_stack_layers(), cfg.seq_len, cfg.seq_len);
}

/// One Local-FE over n̂ query rows with the other N − n̂ rows cached.
inline double flops_local(const ModelConfig& cfg, std::size_t n_hat) {
  return stack_flops(cfg, cfg.decoder_stack_layers(), n_hat, cfg.seq_len);
}

/// Counters, analytic FLOPs and wall-clock split of one decode.
struct CostLedger {
  std::size_t full_fe_count = 0;
  std::size_t local_fe_count = 0;
  // Denoising-MLP evaluations after Full-FE and after Local-FE outputs.
  std::size_t diffusion_full_count = 0;
  std::size_t diffusion_local_count = 0;
  double full_flops = 0;
  double local_flops = 0;
  std::int64_t full_ns = 0;
  std::int64_t local_ns = 0;
  std::int64_t diffusion_ns = 0;
  std::int64_t sampling_ns = 0;  // value draws, confidence and selection
  std::int64_t total_ns = 0;

  std::size_t nfe() const { return full_fe_count + local_fe_count; }
  double attn_flops() const { return full_flops + local_flops; }
  std::size_t diffusion_count() const { return diffusion_full_count + diffusion_local_count; }
  std::int64_t phase_ns() const { return full_ns + local_ns + diffusion_ns + sampling_ns; }

  CostLedger& operator+=(const CostLedger& o) {
    full_fe_count += o.full_fe_count;
    local_fe_count += o.local_fe_count;
    diffusion_full_count += o.diffusion_full_count;
    diffusion_local_count += o.diffusion_local_count;
    full_flops += o.full_flops;
    local_flops += o.local_flops;
    full_ns += o.full_ns;
    local_ns += o.local_ns;
    diffusion_ns += o.diffusion_ns;
    sampling_ns += o.sampling_ns;
    total_ns += o.total_ns;
    return *this;
  }
};

/// Adds the elapsed monotonic time to a counter when destroyed.
class PhaseTimer {
 public:
  explicit PhaseTimer(std::int64_t& sink) : sink_(sink), start_(std::chrono::steady_clock::now()) {}
  PhaseTimer(const PhaseTimer&) = delete;
  PhaseTimer& operator=(const PhaseTimer&) = delete;
  ~PhaseTimer() {
    sink_ += std::chrono::duration_cast<std::chrono::nanoseconds>(
                 std::chrono::steady_clock::now() - start_)
                 .count();
  }

 private:
  std::int64_t& sink_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace recap
