#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "recap/config.hpp"
#include "recap/model/checkpoint.hpp"
#include "recap/verify/checks.hpp"

using namespace recap;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kCheckpoint = 3, kVerify = 4 };

struct CheckpointFailure : Error {
  using Error::Error;
};

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string precision = "f32";
  bool parallel = false;
};

RunConfig load_config(const Globals& g) {
  return g.config.empty() ? RunConfig{} : load_run_config(g.config);
}

std::pair<ModelParams<float>, ModelConfig> open_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("no checkpoint given (set \"checkpoint\" in the config)");
  try {
    return load_checkpoint(path);
  } catch (const Error& e) {
    throw CheckpointFailure(e.what());
  }
}

/// Calls f with the checkpoint weights in the requested precision.
template <typename F>
auto with_checkpoint(const Globals& g, const std::string& path, F&& f) {
  auto [p, cfg] = open_checkpoint(path);
  if (g.precision == "f64") return f(p.cast<double>(), cfg);
  return f(p, cfg);
}

std::ostream& out_stream(const Globals& g, std::ofstream& file) {
  if (g.out.empty() || g.out == "-") return std::cout;
  file.open(g.out);
  if (!file) throw Error("cannot open " + g.out + " for writing");
  return file;
}

Dataset training_data(const RunConfig& rc, const std::string& data_path, std::uint64_t seed) {
  if (!data_path.empty()) return read_dataset(data_path);
  return generate_dataset(rc.dataset, rc.train_examples, RandomStream(seed, Phase::data));
}

int cmd_train(const Globals& g, const std::string& data_path) {
  const RunConfig rc = load_config(g);
  ModelConfig cfg = rc.model;
  cfg.validate();
  const Dataset data = training_data(rc, data_path, g.seed);
  const std::string out = g.out.empty() ? (rc.checkpoint.empty() ? "model.ckpt" : rc.checkpoint) : g.out;
  auto run = [&](auto zero) {
    using T = decltype(zero);
    auto params = init_params<T>(cfg, g.seed);
    const auto losses = train_model(params, cfg, data, rc.train, RandomStream(g.seed, Phase::train),
                                    [](std::size_t e, double l) {
                                      std::printf("epoch %zu loss %.5f\n", e, l);
                                      std::fflush(stdout);
                                    });
    save_checkpoint(params, cfg, out);
    std::printf("saved %s (%zu examples, final loss %.5f)\n", out.c_str(), data.size(),
                losses.empty() ? 0.0 : losses.back());
  };
  if (g.precision == "f64") run(0.0);
  else run(0.0f);
  return kOk;
}

int cmd_generate(const Globals& g) {
  const RunConfig rc = load_config(g);
  return with_checkpoint(g, rc.checkpoint, [&](const auto& p, const ModelConfig& cfg) {
    const DecodeOptions opt = rc.decode_options();
    BenchCell cell{rc.schedule.T_prime > 0 ? Method::recap : Method::baseline, rc.schedule};
    Dataset out;
    CostLedger ledger;
    for (std::size_t i = 0; i < rc.generate_count; ++i) {
      const std::optional<int> cond =
          cfg.num_conditions && rc.bench.conditional
              ? std::optional<int>(static_cast<int>(i % cfg.num_conditions))
              : std::nullopt;
      auto r = decode_cell(p, cfg, cell, opt, cond, detail::sample_stream(g.seed, i));
      ledger += r.ledger;
      out.push_back({r.grid, cond.value_or(-1)});
    }
    if (g.out.empty()) {
      write_dataset(out, std::cout);
    } else {
      write_dataset(out, g.out);
    }
    std::fprintf(stderr, "%zu samples, nfe %zu, attention flops %.6g\n", out.size(),
                 ledger.nfe(), ledger.attn_flops());
    if (out.size() >= kMinQualitySamples) {
      std::vector<TokenGrid> grids;
      for (auto& e : out) {
        auto t = e.tokens;
        if (e.label >= 0) t.set_condition(e.label);
        grids.push_back(std::move(t));
      }
      std::fprintf(stderr, "quality tv %.5f\n", quality_statistic(grids, rc.dataset));
    }
    return static_cast<int>(kOk);
  });
}

int cmd_bench(const Globals& g) {
  const RunConfig rc = load_config(g);
  if (rc.bench.cells.empty()) throw ConfigError("bench: no cells configured");
  const std::string out = g.out.empty() ? "bench.csv" : g.out;
  return with_checkpoint(g, rc.bench.checkpoint, [&](const auto& p, const ModelConfig& cfg) {
    const auto rows = run_cells(p, cfg, rc.bench, rc.decode_options(), rc.dataset, g.parallel);
    const auto summary = write_bench_outputs(rows, out);
    std::printf("wrote %s and %s\n", out.c_str(), summary.c_str());
    return static_cast<int>(kOk);
  });
}

int cmd_drift(const Globals& g) {
  const RunConfig rc = load_config(g);
  return with_checkpoint(g, rc.checkpoint, [&](const auto& p, const ModelConfig& cfg) {
    const auto data = generate_dataset(rc.dataset, rc.drift.samples, RandomStream(g.seed, Phase::data));
    std::vector<TokenGrid> grids;
    std::vector<std::optional<int>> conds;
    for (const auto& e : data) {
      grids.push_back(e.tokens);
      conds.push_back(cfg.num_conditions ? std::optional<int>(e.label) : std::nullopt);
    }
    DriftOptions opt;
    opt.fill = rc.drift.fill;
    opt.diffusion_steps = rc.diffusion.full_steps;
    std::vector<DriftCurve> curves;
    for (auto K : rc.drift.K)
      curves.push_back(drift_average(p, cfg, std::span<const TokenGrid>(grids), K,
                                     std::span<const std::size_t>(rc.drift.update_counts),
                                     RandomStream(g.seed, Phase::drift),
                                     std::span<const std::optional<int>>(conds), opt));
    std::ofstream file;
    write_drift_csv(std::span<const DriftCurve>(curves), out_stream(g, file));
    return static_cast<int>(kOk);
  });
}

int cmd_verify(const Globals& g) {
  const RunConfig rc = load_config(g);
  std::vector<verify::CheckResult> results;
  auto suite = [&](const auto& p, const ModelConfig& cfg) {
    results = verify::run_invariant_suite(p, cfg);
    return 0;
  };
  if (!rc.checkpoint.empty()) {
    with_checkpoint(g, rc.checkpoint, suite);
  } else {
    ModelConfig cfg = rc.model;
    cfg.validate();
    suite(verify::detail::probe_params(cfg, g.seed), cfg);
  }
  bool ok = true;
  for (const auto& r : results) {
    std::printf("[%s] %s: %s (%.2fs)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                r.detail.c_str(), r.seconds);
    ok = ok && r.passed;
  }
  return ok ? kOk : kVerify;
}

int cmd_schedule(const Globals& g, std::optional<std::size_t> length) {
  const RunConfig rc = load_config(g);
  const std::size_t L = length.value_or(rc.model.seq_len);
  const auto gs = rc.schedule.grouped(L);
  std::ofstream file;
  std::ostream& os = out_stream(g, file);
  os << "step,group,kind,decode_count,remaining,tau1,tau2\n";
  std::size_t left = L;
  for (const auto& s : gs.steps) {
    left -= s.decode_count;
    os << s.step << ',' << s.group + 1 << ',' << (s.kind == SubStepKind::full ? "full" : "local")
       << ',' << s.decode_count << ',' << left << ',' << std::setprecision(6) << s.tau1 << ','
       << s.tau2 << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked generative decoding with cached context (train, sample, benchmark)"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON configuration document");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out, "Output path");
  app.add_option("--precision", g.precision, "Arithmetic precision")
      ->check(CLI::IsMember({"f32", "f64"}));
  app.add_flag("--parallel", g.parallel, "Parallelise quality decodes over seeds");

  std::string data_path;
  std::optional<std::size_t> length;
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  train->add_option("--data", data_path, "JSON-lines dataset (default: generate from config)");
  auto* generate = app.add_subcommand("generate", "Decode samples to JSON lines");
  auto* bench = app.add_subcommand("bench", "Run benchmark cells and write CSV plus summary");
  auto* drift = app.add_subcommand("drift", "Context-feature drift curves as CSV");
  auto* verify = app.add_subcommand("verify", "Run the invariant suite");
  auto* schedule = app.add_subcommand("schedule", "Print the grouped schedule table");
  schedule->add_option("--length", length, "Sequence length (default: model seq_len)");
  for (auto* sub : {train, generate, bench, drift, verify, schedule}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(g, data_path);
    if (*generate) return cmd_generate(g);
    if (*bench) return cmd_bench(g);
    if (*drift) return cmd_drift(g);
    if (*verify) return cmd_verify(g);
    if (*schedule) return cmd_schedule(g, length);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const CheckpointFailure& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
