#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "recap/bench/quality.hpp"
#include "recap/pipeline/decode.hpp"

namespace recap {

enum class Method { baseline, recap };

inline std::string to_string(Method m) { return m == Method::baseline ? "baseline" : "recap"; }

/// One benchmark cell. A baseline cell decodes schedule.total_steps() full
/// steps; a recap cell uses the grouped schedule.
struct BenchCell {
  Method method = Method::recap;
  ScheduleConfig schedule;
};

struct BenchConfig {
  std::string checkpoint;
  std::vector<BenchCell> cells;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t samples = 100;        // decoded per (cell, seed) for the quality column
  bool measure_quality = true;
  std::size_t timing_samples = 4;   // sequences per timing repetition
  std::size_t repeats = 5;
  std::size_t warmup = 1;
  bool conditional = true;          // sample i gets class i mod num_conditions

  void validate() const {
    if (repeats < 5) throw ConfigError("bench: at least 5 timing repetitions are required");
    if (warmup < 1) throw ConfigError("bench: at least one warm-up run is required");
    if (timing_samples < 1) throw ConfigError("bench: timing_samples must be at least 1");
    if (seeds.empty()) throw ConfigError("bench: seed list is empty");
    if (measure_quality && samples < kMinQualitySamples)
      throw ConfigError("bench: quality needs at least " + std::to_string(kMinQualitySamples) +
                        " samples");
  }
};

inline void from_json(const nlohmann::json& j, BenchCell& c) {
  c = BenchCell{};
  const auto m = j.value("method", std::string("recap"));
  if (m == "baseline") c.method = Method::baseline;
  else if (m == "recap") c.method = Method::recap;
  else throw ConfigError("bench: unknown method '" + m + "'");
  c.schedule = j.get<ScheduleConfig>();
  if (c.method == Method::baseline && c.schedule.T_prime != 0)
    throw ConfigError("bench: baseline cells take T only");
}

inline void to_json(nlohmann::json& j, const BenchCell& c) {
  j = c.schedule;
  j["method"] = to_string(c.method);
}

inline void from_json(const nlohmann::json& j, BenchConfig& c) {
  c = BenchConfig{};
  try {
    c.checkpoint = j.value("checkpoint", c.checkpoint);
    if (j.contains("cells")) c.cells = j.at("cells").get<std::vector<BenchCell>>();
    c.seeds = j.value("seeds", c.seeds);
    c.samples = j.value("samples", c.samples);
    c.measure_quality = j.value("measure_quality", c.measure_quality);
    c.timing_samples = j.value("timing_samples", c.timing_samples);
    c.repeats = j.value("repeats", c.repeats);
    c.warmup = j.value("warmup", c.warmup);
    c.conditional = j.value("conditional", c.conditional);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bench config: ") + e.what());
  }
  c.validate();
}

inline void to_json(nlohmann::json& j, const BenchConfig& c) {
  j = {{"checkpoint", c.checkpoint},       {"cells", c.cells},
       {"seeds", c.seeds},                 {"samples", c.samples},
       {"measure_quality", c.measure_quality}, {"timing_samples", c.timing_samples},
       {"repeats", c.repeats},             {"warmup", c.warmup},
       {"conditional", c.conditional}};
}

struct BenchRow {
  std::size_t run_id = 0;
  Method method = Method::recap;
  std::size_t T = 0, T_prime = 0, u = 0;
  std::size_t nfe = 0;
  bool cfg = false;
  double wall_ms_per_sample = 0;
  double attn_flops = 0;
  double quality_tv = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
};

inline constexpr const char* kBenchHeader =
    "run_id,method,T,T_prime,u,nfe,cfg,wall_ms_per_sample,attn_flops,quality_tv,seed";

inline double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of nothing");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

namespace detail {

/// Stream for sample i under a benchmark seed.
inline RandomStream sample_stream(std::uint64_t seed, std::size_t i) {
  return RandomStream(RandomStream(seed, Phase::misc, i).bits(0), Phase::value);
}

inline std::optional<int> sample_condition(const ModelConfig& cfg, const BenchConfig& bc,
                                           std::size_t i) {
  if (!bc.conditional || cfg.num_conditions == 0) return std::nullopt;
  return static_cast<int>(i % cfg.num_conditions);
}

}  // namespace detail

/// Decodes one cell for one sample.
template <typename T>
DecodeResult decode_cell(const ModelParams<T>& params, const ModelConfig& cfg, const BenchCell& cell,
                         const DecodeOptions& opt, std::optional<int> cond,
                         const RandomStream& stream) {
  if (cell.method == Method::baseline)
    return decode_baseline(params, cfg, cell.schedule.base(cfg.seq_len), opt, cond, stream);
  return decode_recap(params, cfg, cell.schedule.grouped(cfg.seq_len), opt, cond, stream);
}

/// Every (cell, seed) pair in order. Timing runs sequentially; with
/// `parallel` the quality decodes of different seeds run on separate threads.
template <typename T>
std::vector<BenchRow> run_cells(const ModelParams<T>& params, const ModelConfig& cfg,
                                const BenchConfig& bc, const DecodeOptions& opt,
                                const DatasetSpec& reference, bool parallel = false) {
  bc.validate();
  std::vector<BenchRow> rows;
  for (const auto& cell : bc.cells) {
    std::vector<BenchRow> block(bc.seeds.size());
    auto quality_pass = [&](std::size_t si) {
      BenchRow& r = block[si];
      const std::uint64_t seed = bc.seeds[si];
      const std::size_t n = bc.measure_quality ? bc.samples : 1;
      std::vector<TokenGrid> out;
      CostLedger total;
      for (std::size_t i = 0; i < n; ++i) {
        const auto cond = detail::sample_condition(cfg, bc, i);
        auto res = decode_cell(params, cfg, cell, opt, cond, detail::sample_stream(seed, i));
        res.grid.set_condition(cond);
        total += res.ledger;
        out.push_back(std::move(res.grid));
      }
      r.nfe = total.nfe() / n;
      r.attn_flops = total.attn_flops() / static_cast<double>(n);
      if (bc.measure_quality) r.quality_tv = quality_statistic(out, reference);
    };
    if (parallel && bc.seeds.size() > 1) {
      std::vector<std::exception_ptr> errors(bc.seeds.size());
      {
        std::vector<std::jthread> pool;
        for (std::size_t si = 0; si < bc.seeds.size(); ++si)
          pool.emplace_back([&, si] {
            try {
              quality_pass(si);
            } catch (...) {
              errors[si] = std::current_exception();
            }
          });
      }
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    } else {
      for (std::size_t si = 0; si < bc.seeds.size(); ++si) quality_pass(si);
    }
    for (std::size_t si = 0; si < bc.seeds.size(); ++si) {
      BenchRow& r = block[si];
      r.method = cell.method;
      r.T = cell.method == Method::baseline ? cell.schedule.total_steps() : cell.schedule.T;
      r.T_prime = cell.method == Method::baseline ? 0 : cell.schedule.T_prime;
      r.u = cell.method == Method::baseline ? 0 : cell.schedule.resolved_u();
      r.cfg = opt.sampler.cfg;
      r.seed = bc.seeds[si];
      auto timed = [&] {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < bc.timing_samples; ++i)
          decode_cell(params, cfg, cell, opt, detail::sample_condition(cfg, bc, i),
                      detail::sample_stream(r.seed, i));
        const std::chrono::duration<double, std::milli> dt = std::chrono::steady_clock::now() - t0;
        return dt.count() / static_cast<double>(bc.timing_samples);
      };
      for (std::size_t w = 0; w < bc.warmup; ++w) timed();
      std::vector<double> ms;
      for (std::size_t k = 0; k < bc.repeats; ++k) ms.push_back(timed());
      r.wall_ms_per_sample = median(ms);
      r.run_id = rows.size();
      rows.push_back(r);
    }
  }
  return rows;
}

inline void write_bench_csv(std::span<const BenchRow> rows, std::ostream& os) {
  os << kBenchHeader << '\n';
  os.precision(17);
  for (const auto& r : rows)
    os << r.run_id << ',' << to_string(r.method) << ',' << r.T << ',' << r.T_prime << ',' << r.u
       << ',' << r.nfe << ',' << (r.cfg ? 1 : 0) << ',' << r.wall_ms_per_sample << ','
       << r.attn_flops << ',' << r.quality_tv << ',' << r.seed << '\n';
}

/// Per-cell means over seeds, cells in first-seen order.
inline nlohmann::json bench_summary(std::span<const BenchRow> rows) {
  struct Acc {
    Method method;
    std::size_t T, T_prime;
    double wall = 0, tv = 0, flops = 0;
    std::size_t n = 0;
  };
  std::vector<Acc> cells;
  for (const auto& r : rows) {
    auto it = std::find_if(cells.begin(), cells.end(), [&](const Acc& a) {
      return a.method == r.method && a.T == r.T && a.T_prime == r.T_prime;
    });
    if (it == cells.end()) {
      cells.push_back({r.method, r.T, r.T_prime});
      it = cells.end() - 1;
    }
    it->wall += r.wall_ms_per_sample;
    it->tv += r.quality_tv;
    it->flops += r.attn_flops;
    ++it->n;
  }
  nlohmann::json out = {{"cells", nlohmann::json::array()}};
  for (const auto& a : cells) {
    const double n = static_cast<double>(a.n);
    nlohmann::json tv = a.tv / n;
    if (std::isnan(a.tv)) tv = nullptr;
    out["cells"].push_back({{"method", to_string(a.method)},
                            {"T", a.T},
                            {"T_prime", a.T_prime},
                            {"mean_wall_ms", a.wall / n},
                            {"mean_quality_tv", tv},
                            {"attn_flops", a.flops / n}});
  }
  return out;
}

/// Writes `csv_path` and its summary next to it as `<stem>.summary.json`.
inline std::string write_bench_outputs(std::span<const BenchRow> rows, const std::string& csv_path) {
  {
    std::ofstream f(csv_path);
    if (!f) throw Error("cannot open " + csv_path + " for writing");
    write_bench_csv(rows, f);
  }
  std::filesystem::path p(csv_path);
  const auto summary = (p.parent_path() / (p.stem().string() + ".summary.json")).string();
  std::ofstream f(summary);
  if (!f) throw Error("cannot open " + summary + " for writing");
  f << bench_summary(rows).dump(2) << '\n';
  return summary;
}

}  // namespace recap
