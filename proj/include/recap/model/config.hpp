#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "recap/error.hpp"

namespace recap {

enum class Arch { decoder_only, encoder_decoder };
enum class TokenMode { discrete, continuous };

/// Shape of the per-token denoising network and its noise schedule.
struct DiffusionConfig {
  std::size_t token_dim = 3;
  std::size_t z_dim = 32;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t time_embed_dim = 16;
  std::size_t t_d = 64;
  // Endpoints of the reference 1000-step linear schedule; rescaled by
  // 1000 / t_d so short chains still end near pure noise.
  double beta_start = 1e-4;
  double beta_end = 0.02;

  std::size_t input_dim() const { return token_dim + time_embed_dim + z_dim; }

  void validate() const {
    if (token_dim == 0) throw ConfigError("diffusion: token_dim must be positive");
    if (z_dim == 0) throw ConfigError("diffusion: z_dim must be positive");
    if (hidden.empty()) throw ConfigError("diffusion: need at least one hidden layer");
    for (auto h : hidden)
      if (h == 0) throw ConfigError("diffusion: hidden widths must be positive");
    if (time_embed_dim == 0 || time_embed_dim % 2 != 0)
      throw ConfigError("diffusion: time_embed_dim must be a positive even number");
    if (t_d < 2) throw ConfigError("diffusion: t_d must be at least 2");
    if (!(beta_start > 0 && beta_end > beta_start))
      throw ConfigError("diffusion: need 0 < beta_start < beta_end");
  }

  bool operator==(const DiffusionConfig&) const = default;
};

struct ModelConfig {
  Arch arch = Arch::decoder_only;
  TokenMode token_mode = TokenMode::discrete;
  std::size_t seq_len = 64;
  std::size_t vocab = 8;
  std::size_t token_dim = 3;
  std::size_t embed_dim = 32;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t decoder_layers = 2;
  double mlp_ratio = 2.0;
  std::size_t num_conditions = 4;
  // Width of the continuous-mode output latent z; 0 means embed_dim.
  std::size_t latent_dim = 0;
  double norm_epsilon = 1e-5;
  std::optional<DiffusionConfig> diffusion;

  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim) + 0.5);
  }
  std::size_t latent() const { return latent_dim == 0 ? embed_dim : latent_dim; }
  std::size_t output_dim() const {
    return token_mode == TokenMode::discrete ? vocab : latent();
  }
  /// Index of the reserved unconditional (guidance) embedding.
  std::size_t null_condition() const { return num_conditions; }
  std::size_t encoder_layers() const { return arch == Arch::encoder_decoder ? layers : 0; }
  std::size_t decoder_stack_layers() const {
    return arch == Arch::encoder_decoder ? decoder_layers : layers;
  }
  /// Row id of the prepended condition slot (encoder_decoder only).
  std::size_t condition_slot() const { return seq_len; }

  void validate() const {
    if (seq_len < 1) throw ConfigError("model: seq_len must be at least 1");
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0)
      throw ConfigError("model: embed_dim must be divisible by heads");
    if (layers == 0) throw ConfigError("model: layers must be positive");
    if (arch == Arch::encoder_decoder && decoder_layers == 0)
      throw ConfigError("model: decoder_layers must be positive");
    if (!(mlp_ratio > 0)) throw ConfigError("model: mlp_ratio must be positive");
    if (mlp_hidden() == 0) throw ConfigError("model: mlp hidden width is zero");
    if (token_mode == TokenMode::discrete && vocab < 2)
      throw ConfigError("model: vocab must be at least 2 in discrete mode");
    if (token_mode == TokenMode::continuous && token_dim == 0)
      throw ConfigError("model: token_dim must be positive in continuous mode");
    if (!(norm_epsilon > 0)) throw ConfigError("model: norm_epsilon must be positive");
    if (diffusion) {
      diffusion->validate();
      if (token_mode == TokenMode::continuous && diffusion->token_dim != token_dim)
        throw ConfigError("model: diffusion.token_dim must equal token_dim");
      if (diffusion->z_dim != latent())
        throw ConfigError("model: diffusion.z_dim must equal the latent width");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, Arch a) {
  j = a == Arch::decoder_only ? "decoder_only" : "encoder_decoder";
}
inline void from_json(const nlohmann::json& j, Arch& a) {
  const auto s = j.get<std::string>();
  if (s == "decoder_only") a = Arch::decoder_only;
  else if (s == "encoder_decoder") a = Arch::encoder_decoder;
  else throw ConfigError("unknown arch '" + s + "'");
}
inline void to_json(nlohmann::json& j, TokenMode m) {
  j = m == TokenMode::discrete ? "discrete" : "continuous";
}
inline void from_json(const nlohmann::json& j, TokenMode& m) {
  const auto s = j.get<std::string>();
  if (s == "discrete") m = TokenMode::discrete;
  else if (s == "continuous") m = TokenMode::continuous;
  else throw ConfigError("unknown token_mode '" + s + "'");
}

inline void to_json(nlohmann::json& j, const DiffusionConfig& c) {
  j = {{"token_dim", c.token_dim}, {"z_dim", c.z_dim},          {"hidden", c.hidden},
       {"time_embed_dim", c.time_embed_dim}, {"t_d", c.t_d}, {"beta_start", c.beta_start},
       {"beta_end", c.beta_end}};
}

inline void from_json(const nlohmann::json& j, DiffusionConfig& c) {
  c = DiffusionConfig{};
  c.token_dim = j.value("token_dim", c.token_dim);
  c.z_dim = j.value("z_dim", c.z_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
  c.t_d = j.value("t_d", c.t_d);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"arch", c.arch},
       {"token_mode", c.token_mode},
       {"seq_len", c.seq_len},
       {"vocab", c.vocab},
       {"token_dim", c.token_dim},
       {"embed_dim", c.embed_dim},
       {"heads", c.heads},
       {"layers", c.layers},
       {"decoder_layers", c.decoder_layers},
       {"mlp_ratio", c.mlp_ratio},
       {"num_conditions", c.num_conditions},
       {"latent_dim", c.latent_dim},
       {"norm_epsilon", c.norm_epsilon}};
  if (c.diffusion) j["diffusion"] = *c.diffusion;
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  try {
    c.arch = j.value("arch", c.arch);
    c.token_mode = j.value("token_mode", c.token_mode);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.vocab = j.value("vocab", c.vocab);
    c.token_dim = j.value("token_dim", c.token_dim);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.num_conditions = j.value("num_conditions", c.num_conditions);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.norm_epsilon = j.value("norm_epsilon", c.norm_epsilon);
    if (j.contains("diffusion") && !j["diffusion"].is_null())
      c.diffusion = j["diffusion"].get<DiffusionConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

}  // namespace recap
