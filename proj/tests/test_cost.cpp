#include <gtest/gtest.h>

#include "recap/bench/cost.hpp"

using namespace recap;

namespace {

ModelConfig wide(std::size_t n, std::size_t d, std::size_t layers, double ratio) {
  ModelConfig c;
  c.seq_len = n;
  c.embed_dim = d;
  c.heads = 4;
  c.layers = layers;
  c.mlp_ratio = ratio;
  return c;
}

}  // namespace

TEST(Flops, LocalOverAllPositionsIsFull) {
  for (std::size_t n : {16u, 64u, 256u}) {
    const auto c = wide(n, 32, 3, 2.0);
    EXPECT_EQ(flops_local(c, n), flops_full(c));
  }
}

TEST(Flops, ScoreRatioIsFraction) {
  for (std::size_t n_hat : {1u, 8u, 32u, 100u})
    EXPECT_EQ(score_flops(n_hat, 1024, 256) / score_flops(1024, 1024, 256), n_hat / 1024.0);
}

TEST(Flops, HandSummedOracle) {
  // N=256, d=256, h=1024, 8 layers, n̂=16, written out term by term.
  const double proj_full = 4.0 * 256 * 256 * 256 * 2;
  const double scores_full = 2.0 * 256 * 256 * 256;
  const double wsum_full = 2.0 * 256 * 256 * 256;
  const double mlp_full = 2.0 * 256 * 256 * 1024 * 2;
  const double full = 8 * (proj_full + scores_full + wsum_full + mlp_full);
  const double proj_loc = 4.0 * 16 * 256 * 256 * 2;
  const double scores_loc = 2.0 * 16 * 256 * 256;
  const double wsum_loc = 2.0 * 16 * 256 * 256;
  const double mlp_loc = 2.0 * 16 * 256 * 1024 * 2;
  const double local = 8 * (proj_loc + scores_loc + wsum_loc + mlp_loc);
  const auto c = wide(256, 256, 8, 4.0);
  EXPECT_EQ(flops_full(c), full);
  EXPECT_EQ(flops_local(c, 16), local);
  EXPECT_EQ(flops_local(c, 16) / flops_full(c), local / full);
  EXPECT_EQ(local / full, 0.0625);
}

TEST(Ledger, Accumulates) {
  CostLedger a, b;
  a.full_fe_count = 3;
  a.full_flops = 10;
  b.local_fe_count = 2;
  b.local_flops = 4;
  b.diffusion_local_count = 7;
  a += b;
  EXPECT_EQ(a.nfe(), 5u);
  EXPECT_EQ(a.attn_flops(), 14.0);
  EXPECT_EQ(a.diffusion_count(), 7u);
}

TEST(Ledger, PhaseTimerAdds) {
  std::int64_t sink = 0;
  { PhaseTimer t(sink); }
  EXPECT_GE(sink, 0);
}
