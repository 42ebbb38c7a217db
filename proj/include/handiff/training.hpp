#pragma once

#include "handiff/checkpoint.hpp"
#include "handiff/record_io.hpp"

#include <filesystem>
#include <functional>

namespace handiff {

// A generated dataset held in memory, plus the rig and regressor it was made with.
struct TrainingData {
  DatasetManifest manifest;
  DatasetConfig config;
  HandRig rig;
  JointRegressor regressor;
  std::vector<HandSample> train;
  std::vector<HandSample> val;
  std::vector<HandSample> test;
};

TrainingData load_training_data(const std::filesystem::path& dir, bool load_test = false);

// Wrist-relative vertices in mm, the frame the model works in.
Mat wrist_relative(const HandSample& sample);

struct TrainOptions {
  std::filesystem::path run_dir;
  bool resume = false;
  // Called with every log record (also written to <run_dir>/train_log.jsonl).
  std::function<void(const Json&)> on_record;
};

enum class TrainStatus { Ok = 0, NonFinite = 4 };

struct TrainResult {
  TrainStatus status = TrainStatus::Ok;
  int step = 0;
  std::filesystem::path checkpoint;
  double last_loss = 0.0;
};

// AdamW with cosine decay. Per-sample tapes run in parallel over the batch;
// gradients are reduced in batch order, so results do not depend on the
// worker count. A non-finite loss or gradient stops the run with
// NonFinite and leaves the previous checkpoint as the newest one.
TrainResult run_train(const RunConfig& config, const TrainingData& data, const TrainOptions& options);

// One optimizer update on the given gradient, exposed for tests.
void adamw_update(ModelParams& params, const ModelParams& grads, OptimizerState& state, const OptimizerConfig& cfg,
                  double lr);

// Mean single-hypothesis PA-MPVPE / PA-MPJPE (mm) of image-conditioned
// reconstruction over samples that carry an image.
struct ValidationResult {
  double pa_mpvpe = 0.0;
  double pa_mpjpe = 0.0;
  int n = 0;
};

ValidationResult validate_reconstruction(const HandModel& model, const std::vector<HandSample>& samples,
                                         int max_samples, const SamplerConfig& sampler);

// Reads a training log back (loss records only).
std::vector<Json> read_train_log(const std::filesystem::path& run_dir);
// Mean "loss" over records with step in [begin, end).
double mean_loss(const std::vector<Json>& records, int begin, int end);

}  // namespace handiff
