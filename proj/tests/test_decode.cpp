#include <gtest/gtest.h>

#include <set>

#include "helpers.hpp"
#include "recap/pipeline/decode.hpp"

using namespace recap;
using recap::testing::random_params;
using recap::testing::small_config;

namespace {

struct Case {
  Arch arch;
  bool continuous;
  bool guided;
};

ModelConfig config_for(const Case& c, std::size_t n = 16) {
  auto cfg = small_config(c.arch, n, 16, 2, 11);
  if (c.continuous) {
    cfg.token_mode = TokenMode::continuous;
    DiffusionConfig d;
    d.z_dim = cfg.latent();
    d.hidden = {16};
    d.t_d = 16;
    cfg.diffusion = d;
  }
  return cfg;
}

DecodeOptions options_for(const Case& c) {
  DecodeOptions o;
  if (c.guided) {
    o.sampler.cfg = true;
    o.sampler.cfg_scale = 2.0;
  }
  o.diffusion.full_steps = 16;
  o.diffusion.local_steps = 8;
  return o;
}

StepSchedule base_schedule(std::size_t steps, std::size_t n) {
  auto s = cosine_schedule(steps, n);
  apply_temperatures(s, 0.7, 4.5);
  return s;
}

class DecodeCases : public ::testing::TestWithParam<Case> {};

}  // namespace

TEST_P(DecodeCases, ZeroLocalsMatchBaselineBitForBit) {
  const auto c = GetParam();
  const auto cfg = config_for(c);
  const auto p = random_params<double>(cfg, 11);
  const auto opt = options_for(c);
  const auto base = base_schedule(6, cfg.seq_len);
  const auto grouped = build_grouped_schedule(6, 0, 6, base, GroupPattern::tail_singles);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const RandomStream s(seed, Phase::value);
    const auto a = decode_baseline(p, cfg, base, opt, 1, s);
    const auto b = decode_recap(p, cfg, grouped, opt, 1, s);
    EXPECT_TRUE(a.grid == b.grid) << "seed " << seed;
    EXPECT_EQ(a.ledger.nfe(), b.ledger.nfe());
    EXPECT_EQ(a.ledger.attn_flops(), b.ledger.attn_flops());
  }
}

TEST_P(DecodeCases, LedgerCountsFullAndLocal) {
  const auto c = GetParam();
  const auto cfg = config_for(c);
  const auto p = random_params<double>(cfg, 12);
  const auto opt = options_for(c);
  const auto g = build_grouped_schedule(6, 3, 3, base_schedule(9, cfg.seq_len),
                                        GroupPattern::tail_singles);
  const auto r = decode_recap(p, cfg, g, opt, 2, RandomStream(3, Phase::value));
  const std::size_t mult = c.guided ? 2 : 1;
  EXPECT_EQ(r.ledger.full_fe_count, 6 * mult);
  EXPECT_EQ(r.ledger.local_fe_count, 3 * mult);
  EXPECT_EQ(r.grid.masked_count(), 0u);
  EXPECT_LE(r.ledger.phase_ns(), r.ledger.total_ns);
  if (c.continuous) {
    std::size_t full_tokens = 0, local_tokens = 0;
    for (const auto& s : g.steps) (s.kind == SubStepKind::full ? full_tokens : local_tokens) +=
        s.decode_count;
    EXPECT_EQ(r.ledger.diffusion_full_count, full_tokens * 16 * mult);
    EXPECT_EQ(r.ledger.diffusion_local_count, local_tokens * 8 * mult);
  } else {
    for (int v : r.grid.ids()) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, 11);
    }
  }
}

TEST_P(DecodeCases, Deterministic) {
  const auto c = GetParam();
  const auto cfg = config_for(c);
  const auto p = random_params<double>(cfg, 13);
  const auto opt = options_for(c);
  const auto g = build_grouped_schedule(4, 4, 0, base_schedule(8, cfg.seq_len),
                                        GroupPattern::alternating);
  const auto a = decode_recap(p, cfg, g, opt, 0, RandomStream(9, Phase::value));
  const auto b = decode_recap(p, cfg, g, opt, 0, RandomStream(9, Phase::value));
  EXPECT_TRUE(a.grid == b.grid);
  const auto other = decode_recap(p, cfg, g, opt, 0, RandomStream(10, Phase::value));
  EXPECT_FALSE(a.grid == other.grid);
}

INSTANTIATE_TEST_SUITE_P(All, DecodeCases,
                         ::testing::Values(Case{Arch::decoder_only, false, false},
                                           Case{Arch::decoder_only, false, true},
                                           Case{Arch::encoder_decoder, false, false},
                                           Case{Arch::encoder_decoder, false, true},
                                           Case{Arch::decoder_only, true, false},
                                           Case{Arch::encoder_decoder, true, true}));

TEST(Decode, SingleStepIsOneForward) {
  const auto cfg = small_config(Arch::decoder_only, 16);
  const auto p = random_params<double>(cfg, 1);
  const auto r = decode_baseline(p, cfg, base_schedule(1, 16), DecodeOptions{}, std::nullopt,
                                 RandomStream(1, Phase::value));
  EXPECT_EQ(r.ledger.full_fe_count, 1u);
  EXPECT_EQ(r.grid.masked_count(), 0u);
  // With one step every token is the value drawn from the all-masked forward.
  const auto rec = forward_full(p, cfg, TokenGrid::masked_discrete(16), std::nullopt);
  std::vector<std::size_t> all(16);
  for (std::size_t i = 0; i < 16; ++i) all[i] = i;
  const auto expect = sample_values(rec.outputs, std::span<const std::size_t>(all), 1.0,
                                    RandomStream(1, Phase::value).with_step(1));
  EXPECT_EQ(r.grid.ids(), expect);
}

TEST(Decode, FlopsMatchFormulas) {
  const auto cfg = small_config(Arch::decoder_only, 16);
  const auto p = random_params<double>(cfg, 2);
  const auto g = build_grouped_schedule(4, 2, 2, base_schedule(6, 16), GroupPattern::tail_singles);
  const auto r = decode_recap(p, cfg, g, DecodeOptions{}, 0, RandomStream(4, Phase::value));
  double expect = 4 * flops_full(cfg);
  for (std::size_t k = 0; k < g.group_count(); ++k)
    if (g.locals[k] == 1) expect += flops_local(cfg, g.group_size(k));
  EXPECT_EQ(r.ledger.attn_flops(), expect);
  const auto again = decode_recap(p, cfg, g, DecodeOptions{}, 0, RandomStream(5, Phase::value));
  EXPECT_EQ(again.ledger.attn_flops(), r.ledger.attn_flops());
}

TEST(Decode, UniformSelectorAndFixedLocals) {
  const auto cfg = small_config(Arch::decoder_only, 16);
  const auto p = random_params<double>(cfg, 3);
  DecodeOptions o;
  o.sampler.selector = Selector::uniform;
  o.sampler.resample_locals = false;
  const auto g = build_grouped_schedule(3, 3, 0, base_schedule(6, 16), GroupPattern::alternating);
  const auto r = decode_recap(p, cfg, g, o, 1, RandomStream(2, Phase::value));
  EXPECT_EQ(r.grid.masked_count(), 0u);
  EXPECT_EQ(r.ledger.local_fe_count, 3u);
}

TEST(Decode, LengthMismatchIsRejected) {
  const auto cfg = small_config(Arch::decoder_only, 16);
  const auto p = random_params<double>(cfg, 4);
  EXPECT_THROW(decode_baseline(p, cfg, base_schedule(4, 15), DecodeOptions{}, 0, RandomStream{}),
               DimensionError);
  const auto g = build_grouped_schedule(3, 1, 2, base_schedule(4, 8), GroupPattern::tail_singles);
  EXPECT_THROW(decode_recap(p, cfg, g, DecodeOptions{}, 0, RandomStream{}), DimensionError);
}

TEST(Decode, ContinuousNeedsHead) {
  auto cfg = small_config(Arch::decoder_only, 16);
  const auto p = random_params<double>(cfg, 5);
  cfg.token_mode = TokenMode::continuous;
  EXPECT_THROW(decode_baseline(p, cfg, base_schedule(4, 16), DecodeOptions{}, 0, RandomStream{}),
               ConfigError);
}
