#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "recap/model/backprop.hpp"
#include "recap/verify/gradcheck.hpp"

using namespace recap;
using recap::testing::random_grid;
using recap::testing::random_params;
using recap::testing::small_config;

namespace {

TokenGrid complete(const ModelConfig& cfg, std::uint64_t seed) {
  return random_grid(cfg, seed, 0.0);
}

TokenGrid masked_copy(const TokenGrid& g, std::uint64_t seed, double frac) {
  RandomStream s(seed, Phase::misc, 5);
  TokenGrid out = g;
  for (std::size_t i = 0; i < g.length(); ++i)
    if (s.uniform(i) < frac) out.mask(i);
  if (out.masked_count() == 0) out.mask(0);
  return out;
}

}  // namespace

TEST(MaskedLoss, UniformLogitsGiveLogV) {
  auto cfg = small_config(Arch::decoder_only, 8, 16, 2, 11);
  auto p = init_params<float>(cfg, 3);  // zero output head
  auto clean = complete(cfg, 1);
  auto in = masked_copy(clean, 2, 0.5);
  auto l = masked_loss(p, cfg, in, clean, 1, RandomStream(0, Phase::train));
  EXPECT_NEAR(l.loss, std::log(11.0), 0.05);
  EXPECT_NEAR(l.loss, 2.3979, 1e-3);
}

class GradientCheck : public ::testing::TestWithParam<Arch> {};

TEST_P(GradientCheck, DiscreteCrossEntropy) {
  auto cfg = small_config(GetParam(), 8, 8, 2, 5);
  auto p = random_params<double>(cfg, 11);
  auto clean = complete(cfg, 4);
  auto in = masked_copy(clean, 5, 0.5);
  auto r = verify::check_masked_loss_gradients(p, cfg, in, clean, 2, RandomStream(1, Phase::train));
  EXPECT_GT(r.checked, 50u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST_P(GradientCheck, ContinuousDiffusionLoss) {
  auto cfg = small_config(GetParam(), 6, 8, 1, 5);
  cfg.token_mode = TokenMode::continuous;
  cfg.token_dim = 3;
  DiffusionConfig dc;
  dc.token_dim = 3;
  dc.z_dim = 8;
  dc.hidden = {8};
  dc.time_embed_dim = 4;
  cfg.diffusion = dc;
  auto p = random_params<double>(cfg, 12);
  std::vector<double> vals;
  RandomStream s(3, Phase::misc);
  for (std::size_t i = 0; i < 18; ++i) vals.push_back(s.uniform(i) < 0.5 ? -1.0 : 1.0);
  auto clean = TokenGrid::from_vectors(3, vals);
  auto in = clean;
  in.mask(1);
  in.mask(4);
  auto r = verify::check_masked_loss_gradients(p, cfg, in, clean, {}, RandomStream(9, Phase::train));
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Archs, GradientCheck,
                         ::testing::Values(Arch::decoder_only, Arch::encoder_decoder));

TEST(DiffusionHead, GradientsMatchFiniteDifferences) {
  DiffusionConfig dc;
  dc.z_dim = 6;
  dc.hidden = {10, 10};
  DiffusionHeadParams<double> p(dc);
  RandomStream s(4, Phase::init);
  std::uint64_t k = 0;
  p.for_each([&](const std::string&, Matrix<double>& m) {
    for (auto& v : m.values()) v = 0.5 * s.normal(k++);
  });
  std::vector<double> z{0.3, -0.2, 0.9, 0.1, -1.1, 0.4}, x{1, -1, 1};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto r = verify::check_diffusion_gradients(p, dc, z, x, RandomStream(seed, Phase::diffusion));
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(DiffusionHead, ZeroNetworkLossIsNoiseEnergy) {
  DiffusionConfig dc;
  DiffusionHeadParams<double> p(dc);
  const NoiseSchedule sched(dc);
  std::vector<double> z(dc.z_dim, 0.1), x{1, -1, 1};
  double sum = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto l = diffusion_loss(p, dc, sched, std::span<const double>(z), std::span<const double>(x),
                            RandomStream(7, Phase::diffusion, static_cast<std::uint64_t>(i)));
    EXPECT_GE(l.loss, 0.0);
    sum += l.loss;
  }
  EXPECT_NEAR(sum / n, 3.0, 0.15);
}

TEST(DiffusionHead, ScheduleEndsNearNoise) {
  DiffusionConfig dc;
  const NoiseSchedule sched(dc);
  EXPECT_LT(sched.alpha_bar(dc.t_d), 0.01);
  for (std::size_t t = 1; t < sched.betas.size(); ++t) {
    EXPECT_GT(sched.betas[t], sched.betas[t - 1]);
    EXPECT_GT(sched.alpha_bars[t], 0.0);
    EXPECT_LT(sched.alpha_bars[t], 1.0);
  }
  EXPECT_EQ(strided_timesteps(64, 32).front(), 2u);
  EXPECT_EQ(strided_timesteps(64, 32).back(), 64u);
  EXPECT_EQ(strided_timesteps(64, 64).front(), 1u);
  EXPECT_THROW(strided_timesteps(64, 0), DomainError);
  EXPECT_THROW(strided_timesteps(64, 65), DomainError);
}
