#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <set>

#include "recap/sampler.hpp"

using namespace recap;

namespace {

Matrix<double> rows_of(std::size_t n, std::vector<double> logits) {
  Matrix<double> m(n, logits.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t v = 0; v < logits.size(); ++v) m(r, v) = logits[v];
  return m;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

// Unordered-set probabilities of sequential softmax sampling without
// replacement, by enumerating every ordered draw.
std::map<std::set<std::size_t>, double> enumerate_sets(const std::vector<double>& scores,
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

double chi_square_p(const std::map<std::set<std::size_t>, double>& expected,
                    const std::map<std::set<std::size_t>, std::size_t>& counts, std::size_t n) {
  double stat = 0;
  for (const auto& [s, p] : expected) {
    const double e = p * n;
    const auto it = counts.find(s);
    const double o = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    stat += (o - e) * (o - e) / e;
  }
  boost::math::chi_squared dist(static_cast<double>(expected.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

ConfidenceTable table_of(std::vector<double> scores) {
  ConfidenceTable t;
  t.positions = iota(scores.size());
  t.scores = std::move(scores);
  return t;
}

}  // namespace

TEST(SampleValues, DominantLogitWins) {
  const std::size_t n = 10000;
  const auto logits = rows_of(n, {0, 100, 0, 0});
  const auto pos = iota(n);
  const auto v = sample_values(logits, std::span<const std::size_t>(pos), 1.0,
                               RandomStream(1, Phase::value, 3));
  const auto hits = std::count(v.begin(), v.end(), 1);
  EXPECT_GT(hits / double(n), 0.999);
}

TEST(SampleValues, UniformLogitsAreUniform) {
  const std::size_t n = 100000;
  const auto pos = iota(n);
  const auto v = sample_values(rows_of(n, {0, 0, 0, 0}), std::span<const std::size_t>(pos), 1.0,
                               RandomStream(2, Phase::value, 0));
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(std::count(v.begin(), v.end(), k) / double(n), 0.25, 0.02);
}

TEST(SampleValues, ThreeToOne) {
  const std::size_t n = 100000;
  const auto pos = iota(n);
  const auto v = sample_values(rows_of(n, {std::log(3.0), 0}), std::span<const std::size_t>(pos),
                               1.0, RandomStream(3, Phase::value, 5));
  EXPECT_NEAR(std::count(v.begin(), v.end(), 0) / double(n), 0.75, 0.01);
}

TEST(SampleValues, TemperatureSharpens) {
  const std::size_t n = 50000;
  const auto pos = iota(n);
  // softmax([ln 3, 0] / 0.5) = [0.9, 0.1]
  const auto v = sample_values(rows_of(n, {std::log(3.0), 0}), std::span<const std::size_t>(pos),
                               0.5, RandomStream(4, Phase::value, 0));
  EXPECT_NEAR(std::count(v.begin(), v.end(), 0) / double(n), 0.9, 0.01);
}

TEST(SampleValues, DeterministicAndKeyedByPosition) {
  const auto logits = rows_of(3, {0.3, -0.2, 0.5, 0.0, 1.0});
  const std::vector<std::size_t> a{4, 9, 2}, b{2, 4, 9};
  const RandomStream s(7, Phase::value, 2);
  const auto va = sample_values(logits, std::span<const std::size_t>(a), 1.0, s);
  EXPECT_EQ(va, sample_values(logits, std::span<const std::size_t>(a), 1.0, s));
  const auto vb = sample_values(logits, std::span<const std::size_t>(b), 1.0, s);
  EXPECT_EQ(va[0], vb[1]);
  EXPECT_EQ(va[1], vb[2]);
  EXPECT_EQ(va[2], vb[0]);
}

TEST(SampleValues, Errors) {
  const auto logits = rows_of(2, {0, 0});
  const auto pos = iota(2);
  EXPECT_THROW(sample_values(logits, std::span<const std::size_t>(pos), 0.0, RandomStream{}),
               DomainError);
  EXPECT_THROW(sample_values(logits, std::span<const std::size_t>(pos), -1.0, RandomStream{}),
               DomainError);
  const auto short_pos = iota(1);
  EXPECT_THROW(sample_values(logits, std::span<const std::size_t>(short_pos), 1.0, RandomStream{}),
               DimensionError);
}

TEST(Confidence, UniformIsMinusLogV) {
  const auto pos = iota(5);
  const std::vector<int> vals{0, 3, 7, 2, 5};
  const auto t = confidence_scores(rows_of(5, std::vector<double>(8, 0.4)),
                                   std::span<const std::size_t>(pos), std::span<const int>(vals));
  for (double c : t.scores) EXPECT_NEAR(c, -std::log(8.0), 1e-12);
}

TEST(Confidence, ThreeToOne) {
  const std::vector<std::size_t> pos{6};
  const std::vector<int> vals{0};
  const auto t = confidence_scores(rows_of(1, {std::log(3.0), 0}),
                                   std::span<const std::size_t>(pos), std::span<const int>(vals));
  EXPECT_NEAR(t.at(6), std::log(0.75), 1e-12);
  EXPECT_THROW(t.at(5), DomainError);
}

TEST(Confidence, NonPositiveAndShiftInvariant) {
  Matrix<double> logits(20, 6);
  std::vector<int> vals;
  for (std::size_t r = 0; r < 20; ++r) {
    for (std::size_t v = 0; v < 6; ++v) logits(r, v) = 3.0 * RandomStream(9, Phase::misc, r, v).normal(0);
    vals.push_back(static_cast<int>(r % 6));
  }
  const auto pos = iota(20);
  const auto a = confidence_scores(logits, std::span<const std::size_t>(pos), std::span<const int>(vals));
  for (std::size_t r = 0; r < 20; ++r)
    for (std::size_t v = 0; v < 6; ++v) logits(r, v) += 17.25 * (r + 1);
  const auto b = confidence_scores(logits, std::span<const std::size_t>(pos), std::span<const int>(vals));
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_LE(a.scores[i], 0.0);
    EXPECT_NEAR(a.scores[i], b.scores[i], 1e-6);
  }
}

TEST(Confidence, RejectsOutOfVocabulary) {
  const auto pos = iota(1);
  const std::vector<int> bad{4}, neg{-1};
  const auto logits = rows_of(1, {0, 0, 0, 0});
  EXPECT_THROW(confidence_scores(logits, std::span<const std::size_t>(pos), std::span<const int>(bad)),
               DomainError);
  EXPECT_THROW(confidence_scores(logits, std::span<const std::size_t>(pos), std::span<const int>(neg)),
               DomainError);
}

TEST(GumbelTopK, GreedyLimit) {
  ConfidenceTable t;
  t.positions = {10, 11, 12, 13, 14};
  t.scores = {-0.5, -0.1, -2.0, -0.3, -1.0};
  for (std::uint64_t step = 0; step < 50; ++step) {
    const auto s = gumbel_top_k(t, 1e-9, 3, RandomStream(5, Phase::choice, step));
    EXPECT_EQ(s, (std::vector<std::size_t>{11, 13, 10}));
  }
}

TEST(GumbelTopK, FullSelection) {
  const auto t = table_of({-1, -2, -0.5});
  auto s = gumbel_top_k(t, 1.0, 3, RandomStream(1, Phase::choice));
  std::sort(s.begin(), s.end());
  EXPECT_EQ(s, iota(3));
  EXPECT_TRUE(gumbel_top_k(t, 1.0, 0, RandomStream{}).empty());
}

TEST(GumbelTopK, Errors) {
  const auto t = table_of({-1, -2});
  EXPECT_THROW(gumbel_top_k(t, 1.0, 3, RandomStream{}), DomainError);
  EXPECT_THROW(gumbel_top_k(t, 0.0, 1, RandomStream{}), DomainError);
}

TEST(GumbelTopK, FourItemsChiSquare) {
  const std::vector<double> scores{0, -1, -2, -3};
  const auto t = table_of(scores);
  const std::size_t n = 200000;
  std::map<std::set<std::size_t>, std::size_t> counts;
  for (std::size_t d = 0; d < n; ++d) {
    const auto s = gumbel_top_k(t, 1.0, 2, RandomStream(42, Phase::choice, d));
    counts[{s.begin(), s.end()}]++;
  }
  const auto expected = enumerate_sets(scores, 1.0, 2);
  ASSERT_EQ(expected.size(), 6u);
  EXPECT_GT(chi_square_p(expected, counts, n), 0.01);
}

TEST(GumbelTopK, ExhaustiveSmallInstances) {
  struct Case {
    std::vector<double> scores;
    double tau;
    std::size_t k;
  };
  const std::vector<Case> cases{{{0.0, -0.7, -1.3}, 1.0, 1},
                                {{0.0, -0.7, -1.3}, 0.5, 2},
                                {{-0.2, -0.4, -0.1, -3.0, -1.0}, 2.0, 2},
                                {{-0.2, -0.4, -0.1, -3.0, -1.0}, 0.7, 3},
                                {{-1.0, -1.0, -1.0, -1.0, -1.0}, 1.0, 4}};
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    const auto t = table_of(c.scores);
    const std::size_t n = 200000;
    std::map<std::set<std::size_t>, std::size_t> counts;
    for (std::size_t d = 0; d < n; ++d) {
      const auto s = gumbel_top_k(t, c.tau, c.k, RandomStream(seed, Phase::choice, d));
      counts[{s.begin(), s.end()}]++;
    }
    ++seed;
    EXPECT_GT(chi_square_p(enumerate_sets(c.scores, c.tau, c.k), counts, n), 0.01)
        << "k=" << c.k << " tau=" << c.tau;
  }
}

TEST(SelectUniform, PairsAreUniform) {
  const std::vector<std::size_t> masked{3, 8, 11, 20};
  const std::size_t n = 100000;
  std::map<std::set<std::size_t>, std::size_t> counts;
  for (std::size_t d = 0; d < n; ++d) {
    const auto s = select_uniform(std::span<const std::size_t>(masked), 2,
                                  RandomStream(8, Phase::select, d));
    ASSERT_EQ(s.size(), 2u);
    counts[{s.begin(), s.end()}]++;
  }
  ASSERT_EQ(counts.size(), 6u);
  for (const auto& [set, c] : counts) EXPECT_NEAR(c / double(n), 1.0 / 6.0, 0.01);
}

TEST(SelectUniform, Edges) {
  const std::vector<std::size_t> masked{5, 1, 9};
  auto all = select_uniform(std::span<const std::size_t>(masked), 3, RandomStream(1, Phase::select));
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<std::size_t>{1, 5, 9}));
  EXPECT_TRUE(select_uniform(std::span<const std::size_t>(masked), 0, RandomStream{}).empty());
  EXPECT_THROW(select_uniform(std::span<const std::size_t>(masked), 4, RandomStream{}), DomainError);
}

TEST(Partition, HandSorted) {
  ConfidenceTable t;
  t.positions = {3, 7, 1};
  t.scores = {-0.1, -0.5, -0.3};
  const std::vector<std::size_t> targets{3, 7, 1}, sizes{1, 2};
  const auto plan = partition_targets(std::span<const std::size_t>(targets), t,
                                      std::span<const std::size_t>(sizes));
  ASSERT_EQ(plan.blocks.size(), 2u);
  EXPECT_EQ(plan.blocks[0], (std::vector<std::size_t>{3}));
  EXPECT_EQ(plan.blocks[1], (std::vector<std::size_t>{1, 7}));
  const std::vector<std::size_t> one{3};
  const auto single = partition_targets(std::span<const std::size_t>(targets), t,
                                        std::span<const std::size_t>(one));
  EXPECT_EQ(single.blocks[0], (std::vector<std::size_t>{3, 1, 7}));
}

TEST(Partition, TiesByPosition) {
  ConfidenceTable t;
  t.positions = {9, 2, 5, 4};
  t.scores = {-0.2, -0.2, -0.2, -0.2};
  const std::vector<std::size_t> sizes{2, 2};
  const auto plan = partition_targets(std::span<const std::size_t>(t.positions), t,
                                      std::span<const std::size_t>(sizes));
  EXPECT_EQ(plan.blocks[0], (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(plan.blocks[1], (std::vector<std::size_t>{5, 9}));
}

TEST(Partition, BlocksOrderedDisjointCovering) {
  ConfidenceTable t;
  for (std::size_t i = 0; i < 30; ++i) {
    t.positions.push_back(i * 3);
    t.scores.push_back(-std::abs(RandomStream(4, Phase::misc, i).normal(0)));
  }
  const std::vector<std::size_t> sizes{7, 0, 11, 12};
  const auto plan = partition_targets(std::span<const std::size_t>(t.positions), t,
                                      std::span<const std::size_t>(sizes));
  std::set<std::size_t> seen;
  for (std::size_t j = 0; j < plan.blocks.size(); ++j) {
    EXPECT_EQ(plan.blocks[j].size(), sizes[j]);
    for (auto p : plan.blocks[j]) EXPECT_TRUE(seen.insert(p).second);
  }
  EXPECT_EQ(seen.size(), 30u);
  for (std::size_t j = 0; j + 1 < plan.blocks.size(); ++j) {
    if (plan.blocks[j].empty()) continue;
    for (std::size_t k = j + 1; k < plan.blocks.size(); ++k)
      for (auto q : plan.blocks[k]) EXPECT_GE(t.at(plan.blocks[j].back()), t.at(q));
  }
}

TEST(Partition, RejectsSizeMismatch) {
  const auto t = table_of({-1, -2, -3});
  const auto targets = iota(3);
  const std::vector<std::size_t> sizes{1, 1};
  EXPECT_THROW(partition_targets(std::span<const std::size_t>(targets), t,
                                 std::span<const std::size_t>(sizes)),
               DimensionError);
}

TEST(CfgCombine, Arithmetic) {
  const auto cond = rows_of(1, {2, 0}), uncond = rows_of(1, {1, 0});
  const auto out = cfg_combine(cond, uncond, 3.0);
  EXPECT_EQ(out(0, 0), 4.0);
  EXPECT_EQ(out(0, 1), 0.0);
  EXPECT_EQ(max_abs_diff(cfg_combine(cond, uncond, 0.0), uncond), 0.0);
  EXPECT_EQ(max_abs_diff(cfg_combine(cond, uncond, 1.0), cond), 0.0);
}

TEST(CfgCombine, ShiftCommutes) {
  // Dyadic values keep every intermediate exact.
  Matrix<double> cond(3, 4), uncond(3, 4);
  for (std::size_t i = 0; i < cond.size(); ++i) {
    cond.values()[i] = (static_cast<double>(i % 7) - 3.0) * 0.25;
    uncond.values()[i] = (static_cast<double>(i % 5) - 2.0) * 0.5;
  }
  for (double s : {0.0, 0.5, 1.0, 1.5, 4.0})
    for (double c : {-2.0, 0.75, 8.0}) {
      auto cs = cond, us = uncond;
      for (auto& v : cs.values()) v += c;
      for (auto& v : us.values()) v += c;
      auto expect = cfg_combine(cond, uncond, s);
      for (auto& v : expect.values()) v += c;
      EXPECT_EQ(max_abs_diff(cfg_combine(cs, us, s), expect), 0.0) << "s=" << s << " c=" << c;
    }
}

TEST(CfgCombine, Errors) {
  EXPECT_THROW(cfg_combine(rows_of(1, {1, 2}), rows_of(2, {1, 2}), 1.0), DimensionError);
  EXPECT_THROW(cfg_combine(rows_of(1, {1, 2}), rows_of(1, {1, 2}), -1.0), DomainError);
}

TEST(SamplerConfigJson, Parse) {
  auto c = nlohmann::json::parse(R"({"selector":"uniform","cfg_scale":3.0})").get<SamplerConfig>();
  EXPECT_EQ(c.selector, Selector::uniform);
  EXPECT_TRUE(c.cfg);
  EXPECT_TRUE(c.resample_locals);
  c = nlohmann::json::parse(R"({})").get<SamplerConfig>();
  EXPECT_EQ(c.selector, Selector::confidence);
  EXPECT_FALSE(c.cfg);
  nlohmann::json j = c;
  EXPECT_EQ(j["selector"], "confidence");
  EXPECT_THROW(nlohmann::json::parse(R"({"selector":"random"})").get<SamplerConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"cfg_scale":-1})").get<SamplerConfig>(), ConfigError);
}
