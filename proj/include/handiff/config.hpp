#pragma once

// Run configuration and its JSON form. Readers start from defaults, override
// the keys present and reject unknown keys.

#include "handiff/losses.hpp"
#include "handiff/model.hpp"
#include "handiff/synth_hand.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace handiff {

using Json = nlohmann::ordered_json;

struct OptimizerConfig {
  double lr = 2e-4;
  double lr_min = 1e-5;  // cosine decay floor
  int warmup_steps = 200;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global norm, 0 disables
  int batch_size = 32;
  int steps = 20000;
  int log_every = 10;
  int validate_every = 1000;
  int validation_samples = 32;
  int checkpoint_every = 1000;

  void validate() const;
  double learning_rate(int step) const;
};

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 2;
  std::uint64_t sampling = 3;
};

struct RunConfig {
  std::string profile = "desk";
  DatasetConfig dataset;
  std::string dataset_path = "data";
  int dataset_size = 2000;
  SplitRatios splits;
  ModelConfig model;
  MaskConfig masks;
  LossWeights loss;
  OptimizerConfig optimizer;
  SamplerConfig sampler;
  Seeds seeds;

  void validate() const;
  std::uint64_t hash() const;
};

// "desk" (defaults), "toy" (tiny model for the end-to-end checks) and
// "full" (full-scale optimizer settings and an 8x8 patch grid).
RunConfig named_profile(const std::string& name);
std::vector<std::string> profile_names();

Json to_json(const RigConfig& c);
Json to_json(const Camera& c);
Json to_json(const DatasetConfig& c);
Json to_json(const SplitRatios& c);
Json to_json(const DenoiserConfig& c);
Json to_json(const EncoderConfig& c);
Json to_json(const ScheduleConfig& c);
Json to_json(const ModelConfig& c);
Json to_json(const MaskConfig& c);
Json to_json(const LossWeights& c);
Json to_json(const OptimizerConfig& c);
Json to_json(const SamplerConfig& c);
Json to_json(const Seeds& c);
Json to_json(const RunConfig& c);

RigConfig rig_config_from_json(const Json& j);
Camera camera_from_json(const Json& j);
DatasetConfig dataset_config_from_json(const Json& j);
ModelConfig model_config_from_json(const Json& j);
SamplerConfig sampler_config_from_json(const Json& j);
// Starts from the profile named in j (default "desk").
RunConfig run_config_from_json(const Json& j);

inline Json dataset_config_to_json(const DatasetConfig& c) { return to_json(c); }

RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& config);

std::string to_string(SamplerKind kind);
SamplerKind sampler_kind_from_string(const std::string& s);

}  // namespace handiff
