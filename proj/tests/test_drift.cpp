#include <gtest/gtest.h>

#include <sstream>

#include "helpers.hpp"
#include "recap/drift.hpp"
#include "recap/pipeline/dataset.hpp"

using namespace recap;
using recap::testing::random_params;
using recap::testing::small_config;

namespace {

TokenGrid full_grid(const ModelConfig& cfg, std::uint64_t seed) {
  RandomStream s(seed, Phase::misc);
  TokenGrid g = TokenGrid::masked_discrete(cfg.seq_len);
  for (std::size_t i = 0; i < cfg.seq_len; ++i) g.set_id(i, static_cast<int>(s.below(i, cfg.vocab)));
  return g;
}

const std::vector<std::size_t> kCounts{0, 1, 2, 4, 8};

}  // namespace

TEST(Cosine, BasicsAndErrors) {
  const std::vector<double> a{1, 2, 3}, b{2, 4, 6}, c{-1, -2, -3}, z{0, 0, 0};
  EXPECT_DOUBLE_EQ(cosine_similarity(std::span<const double>(a), std::span<const double>(b)), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(std::span<const double>(a), std::span<const double>(c)), -1.0);
  EXPECT_EQ(cosine_similarity(std::span<const double>(a), std::span<const double>(a)), 1.0);
  EXPECT_EQ(cosine_similarity(std::span<const double>(z), std::span<const double>(z)), 1.0);
  const std::vector<double> d{3, -1};
  const std::vector<double> e{1, 3};
  EXPECT_DOUBLE_EQ(cosine_similarity(std::span<const double>(d), std::span<const double>(e)), 0.0);
  EXPECT_THROW(cosine_similarity(std::span<const double>(a), std::span<const double>(d)),
               DimensionError);
}

TEST(Cosine, SymmetricAndScaleInvariant) {
  RandomStream s(3, Phase::misc);
  std::vector<double> a(20), b(20);
  for (std::size_t i = 0; i < 20; ++i) {
    a[i] = s.normal(i);
    b[i] = s.normal(100 + i);
  }
  const double ab = cosine_similarity(std::span<const double>(a), std::span<const double>(b));
  EXPECT_EQ(ab, cosine_similarity(std::span<const double>(b), std::span<const double>(a)));
  for (double k : {1e-3, 0.5, 7.0, 1e4}) {
    std::vector<double> ka = a, kb = b;
    for (auto& v : ka) v *= k;
    for (auto& v : kb) v *= k;
    EXPECT_NEAR(cosine_similarity(std::span<const double>(ka), std::span<const double>(kb)), ab, 1e-6);
  }
}

TEST(DriftProbe, ZeroUpdatesIsExactlyOne) {
  for (auto arch : {Arch::decoder_only, Arch::encoder_decoder}) {
    const auto cfg = small_config(arch, 16, 16, 2, 7);
    const auto p = random_params<float>(cfg, 4);
    const auto c = drift_probe(p, cfg, full_grid(cfg, 5), 4, std::span<const std::size_t>(kCounts),
                               RandomStream(6, Phase::drift));
    ASSERT_EQ(c.update_counts.size(), kCounts.size());
    ASSERT_EQ(c.per_layer[0].size(), arch == Arch::encoder_decoder ? 4u : 2u);
    for (double v : c.per_layer[0]) EXPECT_EQ(v, 1.0);
    EXPECT_EQ(c.mean_similarity[0], 1.0);
    EXPECT_EQ(c.layer_std[0], 0.0);
  }
}

TEST(DriftProbe, RandomWeightsStayInRange) {
  const auto cfg = small_config(Arch::decoder_only, 24, 16, 3, 9);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = random_params<double>(cfg, 10 + seed);
    const auto c = drift_probe(p, cfg, full_grid(cfg, seed), 2 + seed,
                               std::span<const std::size_t>(kCounts), RandomStream(seed, Phase::drift));
    for (const auto& s : c.per_layer)
      for (double v : s) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
      }
  }
}

// Layer mean of per-layer cosines, recomputed from raw records.
TEST(DriftProbe, MatchesIndependentRecomputation) {
  const auto cfg = small_config(Arch::encoder_decoder, 16, 16, 2, 7);
  const auto p = random_params<double>(cfg, 8);
  const auto sample = full_grid(cfg, 9);
  const std::vector<std::size_t> context{1, 5, 9, 14};
  const std::vector<std::size_t> updates{0, 7, 3, 12};
  const std::vector<std::size_t> counts{0, 1, 4};
  const auto c = drift_probe_at(p, cfg, sample, std::span<const std::size_t>(context),
                                std::span<const std::size_t>(updates),
                                std::span<const std::size_t>(counts), RandomStream(1, Phase::drift));

  auto pooled = [&](const TokenGrid& g) {
    const auto rec = forward_full(p, cfg, g, std::nullopt);
    std::vector<std::vector<double>> out;
    for (const auto* st : {&rec.encoder, &rec.decoder})
      for (const auto& tap : st->layers) {
        std::vector<double> v(cfg.embed_dim, 0.0);
        for (auto pos : context) {
          const auto row = static_cast<std::size_t>(
              std::find(st->ids.begin(), st->ids.end(), pos) - st->ids.begin());
          for (std::size_t k = 0; k < v.size(); ++k) v[k] += tap.attn_input(row, k) / 4.0;
        }
        out.push_back(v);
      }
    return out;
  };
  TokenGrid g = TokenGrid::masked_discrete(cfg.seq_len);
  for (auto i : context) g.set_id(i, sample.id(i));
  const auto ref = pooled(g);
  for (std::size_t ci = 0; ci < counts.size(); ++ci) {
    TokenGrid h = g;
    for (std::size_t r = 0; r < counts[ci]; ++r) h.set_id(updates[r], sample.id(updates[r]));
    const auto now = pooled(h);
    double mean = 0;
    for (std::size_t l = 0; l < ref.size(); ++l) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t k = 0; k < ref[l].size(); ++k) {
        ab += ref[l][k] * now[l][k];
        aa += ref[l][k] * ref[l][k];
        bb += now[l][k] * now[l][k];
      }
      const double s = ab / std::sqrt(aa * bb);
      EXPECT_NEAR(c.per_layer[ci][l], s, 1e-12);
      mean += s / static_cast<double>(ref.size());
    }
    EXPECT_NEAR(c.mean_similarity[ci], mean, 1e-12);
  }
  EXPECT_LT(c.mean_similarity[2], 1.0);
}

TEST(DriftProbe, NestedUpdatesAndDeterminism) {
  const auto cfg = small_config(Arch::decoder_only, 16, 16, 2, 7);
  const auto p = random_params<double>(cfg, 2);
  const auto g = full_grid(cfg, 3);
  const auto a = drift_probe(p, cfg, g, 4, std::span<const std::size_t>(kCounts),
                             RandomStream(7, Phase::drift));
  const auto b = drift_probe(p, cfg, g, 4, std::span<const std::size_t>(kCounts),
                             RandomStream(7, Phase::drift));
  EXPECT_EQ(a.per_layer, b.per_layer);
  // A subset of the counts reproduces the same entries.
  const std::vector<std::size_t> some{4, 1};
  const auto s = drift_probe(p, cfg, g, 4, std::span<const std::size_t>(some),
                             RandomStream(7, Phase::drift));
  EXPECT_EQ(s.per_layer[0], a.per_layer[3]);
  EXPECT_EQ(s.per_layer[1], a.per_layer[1]);
}

TEST(DriftProbe, Errors) {
  const auto cfg = small_config(Arch::decoder_only, 8, 16, 1, 5);
  const auto p = random_params<double>(cfg, 1);
  const auto g = full_grid(cfg, 1);
  const RandomStream s(1, Phase::drift);
  const std::vector<std::size_t> big{0, 5}, few{0, 1, 2};
  EXPECT_THROW(drift_probe(p, cfg, g, 4, std::span<const std::size_t>(big), s), DomainError);
  EXPECT_THROW(drift_probe(p, cfg, g, 0, std::span<const std::size_t>(kCounts), s), DomainError);
  TokenGrid holes = g;
  holes.mask(3);
  EXPECT_THROW(drift_probe(p, cfg, holes, 2, std::span<const std::size_t>(few), s), DomainError);
  const auto wrong = full_grid(small_config(Arch::decoder_only, 9, 16, 1, 5), 1);
  EXPECT_THROW(drift_probe(p, cfg, wrong, 2, std::span<const std::size_t>(few), s),
               DimensionError);
  const std::vector<std::size_t> ctx{1, 2}, dup{2, 3};
  const std::vector<std::size_t> one{1};
  EXPECT_THROW(drift_probe_at(p, cfg, g, std::span<const std::size_t>(ctx),
                              std::span<const std::size_t>(dup), std::span<const std::size_t>(one), s),
               DomainError);
}

TEST(DriftProbe, ModelSampledFill) {
  const auto cfg = small_config(Arch::decoder_only, 16, 16, 2, 7);
  const auto p = random_params<double>(cfg, 2);
  const auto g = full_grid(cfg, 3);
  DriftOptions opt;
  opt.fill = DriftFill::model_sampled;
  const auto gt = drift_probe(p, cfg, g, 4, std::span<const std::size_t>(kCounts),
                              RandomStream(7, Phase::drift));
  const auto ms = drift_probe(p, cfg, g, 4, std::span<const std::size_t>(kCounts),
                              RandomStream(7, Phase::drift), std::nullopt, opt);
  EXPECT_EQ(ms.mean_similarity[0], 1.0);
  EXPECT_NE(gt.per_layer, ms.per_layer);
  for (double v : ms.mean_similarity) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(DriftAverage, AveragesPerLayerThenSummarises) {
  const auto cfg = small_config(Arch::decoder_only, 16, 16, 2, 7);
  const auto p = random_params<double>(cfg, 2);
  std::vector<TokenGrid> samples{full_grid(cfg, 1), full_grid(cfg, 2), full_grid(cfg, 3)};
  const RandomStream s(5, Phase::drift);
  const auto avg = drift_average(p, cfg, std::span<const TokenGrid>(samples), 4,
                                 std::span<const std::size_t>(kCounts), s);
  EXPECT_EQ(avg.n_samples, 3u);
  for (std::size_t ci = 0; ci < kCounts.size(); ++ci)
    for (std::size_t l = 0; l < 2; ++l) {
      double m = 0;
      for (std::size_t e = 0; e < 3; ++e)
        m += drift_probe(p, cfg, samples[e], 4, std::span<const std::size_t>(kCounts), s.with_step(e))
                 .per_layer[ci][l];
      EXPECT_NEAR(avg.per_layer[ci][l], m / 3, 1e-15);
    }
  EXPECT_EQ(avg.mean_similarity[0], 1.0);
  EXPECT_THROW(drift_average(p, cfg, std::span<const TokenGrid>(), 4,
                             std::span<const std::size_t>(kCounts), s),
               DomainError);
}

TEST(DriftCsv, Header) {
  DriftCurve c;
  c.K = 4;
  c.update_counts = {0, 2};
  c.mean_similarity = {1.0, 0.9};
  c.layer_std = {0.0, 0.01};
  c.n_samples = 10;
  std::ostringstream os;
  write_drift_csv(std::span<const DriftCurve>(&c, 1), os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "K,m,mean_similarity,layer_std,n_samples");
  std::getline(is, line);
  EXPECT_EQ(line, "4,0,1,0,10");
  std::getline(is, line);
  EXPECT_EQ(line.substr(0, 4), "4,2,");
}
