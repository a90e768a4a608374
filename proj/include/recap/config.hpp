#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "recap/bench/bench.hpp"
#include "recap/drift.hpp"
#include "recap/pipeline/train.hpp"

namespace recap {

/// Settings for `recap drift`.
struct DriftSettings {
  std::vector<std::size_t> K{4, 16, 48};
  std::vector<std::size_t> update_counts{0, 1, 2, 4, 8, 16};
  std::size_t samples = 500;
  DriftFill fill = DriftFill::ground_truth;
};

inline void from_json(const nlohmann::json& j, DriftSettings& d) {
  d = DriftSettings{};
  try {
    d.K = j.value("K", d.K);
    d.update_counts = j.value("update_counts", d.update_counts);
    d.samples = j.value("samples", d.samples);
    const auto f = j.value("fill", std::string("ground_truth"));
    if (f == "ground_truth") d.fill = DriftFill::ground_truth;
    else if (f == "model_sampled") d.fill = DriftFill::model_sampled;
    else throw ConfigError("drift: unknown fill '" + f + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("drift config: ") + e.what());
  }
  if (d.samples < 1) throw ConfigError("drift: samples must be at least 1");
}

inline void to_json(nlohmann::json& j, const DriftSettings& d) {
  j = {{"K", d.K},
       {"update_counts", d.update_counts},
       {"samples", d.samples},
       {"fill", d.fill == DriftFill::ground_truth ? "ground_truth" : "model_sampled"}};
}

/// The single configuration document read by the command-line tool. Every
/// section is optional and falls back to its defaults.
struct RunConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  SamplerConfig sampler;
  DiffusionSampling diffusion;
  DatasetSpec dataset;
  TrainConfig train;
  BenchConfig bench;
  DriftSettings drift;
  std::string checkpoint;     // model file for generate / drift / bench
  std::size_t train_examples = 2000;
  std::size_t generate_count = 16;

  DecodeOptions decode_options() const { return {sampler, diffusion}; }
};

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  c = RunConfig{};
  auto section = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  section("model", c.model);
  section("schedule", c.schedule);
  section("sampler", c.sampler);
  section("diffusion", c.diffusion);
  section("dataset", c.dataset);
  section("train", c.train);
  section("bench", c.bench);
  section("drift", c.drift);
  try {
    // Head-shape keys may also sit beside the step counts under "diffusion";
    // they override the model's head.
    if (j.contains("diffusion") && j["diffusion"].is_object()) {
      const auto& d = j["diffusion"];
      bool any = false;
      for (const char* k : {"token_dim", "z_dim", "hidden", "time_embed_dim", "t_d", "beta_start",
                            "beta_end"})
        any = any || d.contains(k);
      if (any) {
        nlohmann::json merged = c.model.diffusion ? nlohmann::json(*c.model.diffusion)
                                                  : nlohmann::json::object();
        if (!c.model.diffusion) merged["z_dim"] = c.model.latent();
        for (auto it = d.begin(); it != d.end(); ++it)
          if (it.key() != "full_steps" && it.key() != "local_steps") merged[it.key()] = it.value();
        c.model.diffusion = merged.get<DiffusionConfig>();
        if (d.contains("token_dim")) c.model.token_dim = c.model.diffusion->token_dim;
      }
    }
    c.checkpoint = j.value("checkpoint", c.bench.checkpoint);
    c.train_examples = j.value("train_examples", c.train_examples);
    c.generate_count = j.value("generate_count", c.generate_count);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.bench.checkpoint.empty()) c.bench.checkpoint = c.checkpoint;
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model},       {"schedule", c.schedule},   {"sampler", c.sampler},
       {"diffusion", c.diffusion}, {"dataset", c.dataset},   {"train", c.train},
       {"bench", c.bench},       {"drift", c.drift},         {"checkpoint", c.checkpoint},
       {"train_examples", c.train_examples}, {"generate_count", c.generate_count}};
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  return j.get<RunConfig>();
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open configuration '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace recap
