#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "helpers.hpp"
#include "recap/bench/bench.hpp"

using namespace recap;
using recap::testing::random_params;
using recap::testing::small_config;

namespace {

BenchConfig two_cells(bool quality) {
  BenchConfig bc;
  ScheduleConfig base;
  base.T = 16;
  ScheduleConfig rc;
  rc.T = 12;
  rc.T_prime = 4;
  rc.u = 8;
  bc.cells = {{Method::baseline, base}, {Method::recap, rc}};
  bc.measure_quality = quality;
  bc.timing_samples = 1;
  return bc;
}

DatasetSpec spec16() {
  DatasetSpec s;
  s.side = 4;
  s.vocab = 8;
  return s;
}

double expected_flops(const ModelConfig& cfg, const BenchCell& cell, std::size_t mult) {
  if (cell.method == Method::baseline)
    return static_cast<double>(mult * cell.schedule.total_steps()) * flops_full(cfg);
  const auto g = cell.schedule.grouped(cfg.seq_len);
  double f = static_cast<double>(mult * cell.schedule.T) * flops_full(cfg);
  for (std::size_t k = 0; k < g.group_count(); ++k)
    if (g.locals[k] == 1) f += static_cast<double>(mult) * flops_local(cfg, g.group_size(k));
  return f;
}

}  // namespace

TEST(Bench, RowsHeaderAndFlops) {
  const auto cfg = small_config(Arch::decoder_only, 16, 16, 2, 8);
  const auto p = random_params<float>(cfg, 1);
  const auto bc = two_cells(true);
  const auto rows = run_cells(p, cfg, bc, DecodeOptions{}, spec16());
  ASSERT_EQ(rows.size(), 2 * bc.seeds.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto& cell = bc.cells[i / bc.seeds.size()];
    EXPECT_EQ(r.run_id, i);
    EXPECT_EQ(r.method, cell.method);
    EXPECT_EQ(r.seed, bc.seeds[i % bc.seeds.size()]);
    EXPECT_EQ(r.nfe, r.T + r.T_prime);
    EXPECT_EQ(r.attn_flops, expected_flops(cfg, cell, 1));
    EXPECT_TRUE(std::isfinite(r.quality_tv));
    EXPECT_GT(r.wall_ms_per_sample, 0.0);
  }
  EXPECT_EQ(rows[0].T, 16u);
  EXPECT_EQ(rows[0].T_prime, 0u);
  EXPECT_EQ(rows[3].T, 12u);
  EXPECT_EQ(rows[3].T_prime, 4u);
  EXPECT_EQ(rows[3].u, 8u);

  std::ostringstream os;
  write_bench_csv(std::span<const BenchRow>(rows), os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "run_id,method,T,T_prime,u,nfe,cfg,wall_ms_per_sample,attn_flops,quality_tv,seed");
  std::size_t n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, rows.size());
}

TEST(Bench, GuidanceDoublesNfeAndFlops) {
  const auto cfg = small_config(Arch::decoder_only, 16, 16, 2, 8);
  const auto p = random_params<float>(cfg, 2);
  const auto bc = two_cells(false);
  DecodeOptions opt;
  opt.sampler.cfg = true;
  opt.sampler.cfg_scale = 2.0;
  const auto rows = run_cells(p, cfg, bc, opt, spec16());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_TRUE(rows[i].cfg);
    EXPECT_EQ(rows[i].nfe, (rows[i].T + rows[i].T_prime) * 2);
    EXPECT_EQ(rows[i].attn_flops, expected_flops(cfg, bc.cells[i / bc.seeds.size()], 2));
    EXPECT_TRUE(std::isnan(rows[i].quality_tv));
  }
}

TEST(Bench, FlopsDoNotDependOnTiming) {
  const auto cfg = small_config(Arch::encoder_decoder, 16, 16, 2, 8);
  const auto p = random_params<float>(cfg, 3);
  auto bc = two_cells(false);
  const auto a = run_cells(p, cfg, bc, DecodeOptions{}, spec16());
  bc.timing_samples = 3;
  bc.repeats = 7;
  const auto b = run_cells(p, cfg, bc, DecodeOptions{}, spec16(), true);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].attn_flops, b[i].attn_flops);
    EXPECT_EQ(a[i].nfe, b[i].nfe);
  }
}

TEST(Bench, ParallelQualityMatchesSequential) {
  const auto cfg = small_config(Arch::decoder_only, 16, 16, 2, 8);
  const auto p = random_params<float>(cfg, 4);
  const auto bc = two_cells(true);
  const auto a = run_cells(p, cfg, bc, DecodeOptions{}, spec16());
  const auto b = run_cells(p, cfg, bc, DecodeOptions{}, spec16(), true);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].quality_tv, b[i].quality_tv);
}

TEST(Bench, SummaryAndFiles) {
  std::vector<BenchRow> rows(4);
  for (std::size_t i = 0; i < 4; ++i) {
    rows[i].run_id = i;
    rows[i].method = i < 2 ? Method::baseline : Method::recap;
    rows[i].T = i < 2 ? 16 : 12;
    rows[i].T_prime = i < 2 ? 0 : 4;
    rows[i].wall_ms_per_sample = 1.0 + static_cast<double>(i);
    rows[i].attn_flops = 100.0;
    rows[i].quality_tv = i < 2 ? 0.1 * static_cast<double>(i + 1) : std::nan("");
  }
  const auto j = bench_summary(std::span<const BenchRow>(rows));
  ASSERT_EQ(j["cells"].size(), 2u);
  EXPECT_EQ(j["cells"][0]["method"], "baseline");
  EXPECT_DOUBLE_EQ(j["cells"][0]["mean_wall_ms"].get<double>(), 1.5);
  EXPECT_NEAR(j["cells"][0]["mean_quality_tv"].get<double>(), 0.15, 1e-15);
  EXPECT_TRUE(j["cells"][1]["mean_quality_tv"].is_null());
  EXPECT_EQ(j["cells"][1]["T_prime"], 4);
  for (const char* k : {"method", "T", "T_prime", "mean_wall_ms", "mean_quality_tv", "attn_flops"})
    EXPECT_TRUE(j["cells"][1].contains(k)) << k;

  const auto dir = std::filesystem::temp_directory_path() / "recap_bench_test";
  std::filesystem::create_directories(dir);
  const auto summary = write_bench_outputs(std::span<const BenchRow>(rows), (dir / "out.csv").string());
  EXPECT_EQ(summary, (dir / "out.summary.json").string());
  EXPECT_TRUE(std::filesystem::exists(dir / "out.csv"));
  std::filesystem::remove_all(dir);
}

TEST(BenchConfig, Validation) {
  const auto ok = nlohmann::json::parse(R"({"cells": [{"method": "recap", "T": 12, "T_prime": 4}]})")
                      .get<BenchConfig>();
  EXPECT_EQ(ok.repeats, 5u);
  EXPECT_EQ(ok.cells[0].schedule.T_prime, 4u);
  nlohmann::json back = ok;
  EXPECT_EQ(back.get<BenchConfig>().cells[0].schedule.T, 12u);
  for (const char* bad : {R"({"repeats": 4})", R"({"warmup": 0})", R"({"seeds": []})",
                          R"({"samples": 50})", R"({"timing_samples": 0})",
                          R"({"cells": [{"method": "baseline", "T": 12, "T_prime": 4}]})"})
    EXPECT_THROW(nlohmann::json::parse(bad).get<BenchConfig>(), ConfigError) << bad;
  EXPECT_NO_THROW(nlohmann::json::parse(R"({"samples": 50, "measure_quality": false})").get<BenchConfig>());
}

TEST(Bench, MedianHelper) {
  EXPECT_EQ(median({3, 1, 2}), 2);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), DomainError);
}

// At N = 256 the four Local-FE sub-steps cost a fraction of four Full-FEs.
// Several decodes per repetition and totals over seeds keep timing noise
// below the roughly 20% expected saving.
TEST(Bench, RecapIsFasterAtLongLength) {
  ModelConfig cfg;
  cfg.seq_len = 256;
  cfg.embed_dim = 64;
  cfg.heads = 4;
  cfg.layers = 4;
  cfg.vocab = 8;
  const auto p = random_params<float>(cfg, 5);
  auto bc = two_cells(false);
  bc.seeds = {1, 2};
  bc.timing_samples = 3;
  bc.repeats = 7;
  const auto rows = run_cells(p, cfg, bc, DecodeOptions{}, DatasetSpec{});
  double base = 0, rec = 0;
  for (std::size_t s = 0; s < bc.seeds.size(); ++s) {
    ASSERT_EQ(rows[s].seed, rows[bc.seeds.size() + s].seed);
    base += rows[s].wall_ms_per_sample;
    rec += rows[bc.seeds.size() + s].wall_ms_per_sample;
  }
  std::printf("baseline %.2f ms, recap %.2f ms (summed over seeds)\n", base, rec);
  EXPECT_LT(rec, base);
}
