#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "ftpg/encoders.hpp"
#include "ftpg/eval.hpp"
#include "ftpg/fedcore.hpp"
#include "ftpg/models.hpp"
#include "ftpg/partition.hpp"

namespace ftpg {

struct ExperimentConfig {
  Method method = Method::fedtpg;
  std::uint64_t seed = 0;

  SynthConfig synth;
  // World and encoder seeds follow `seed` unless pinned.
  std::optional<std::uint64_t> world_seed;
  std::optional<std::uint64_t> encoder_seed;

  int heads = 4;
  double kg_lambda = 8.0;
  PredictConfig predict;
  FederationConfig fed;  // fed.seed is overwritten by `seed`

  int classes_per_client = 10;
  int shots = 8;
  bool allow_mixed_shards = false;

  int hm_terms = 3;
  std::string store;  // empty: synthesize from `synth`
};

/// "desk" (d=32, 6x40 classes, 100 rounds) or "paper" (d=512, 500 rounds, batch 200).
ExperimentConfig preset(std::string_view name);

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);

/// Strict: unknown keys and type mismatches raise ConfigError.
ExperimentConfig from_json(const nlohmann::ordered_json& j, const ExperimentConfig& defaults);

/// Applies "dotted.key=value"; value parsed as JSON, falling back to a string.
void apply_override(nlohmann::ordered_json& j, std::string_view assignment);

/// Resolved seeds and dependent fields, validated.
ExperimentConfig resolve(ExperimentConfig cfg);

SynthConfig resolved_synth(const ExperimentConfig& cfg);
ModelSpec model_spec(const ExperimentConfig& cfg, std::uint32_t prompt_len, std::uint32_t dim);

}  // namespace ftpg
