#pragma once

#include "handiff/conditions.hpp"
#include "handiff/denoiser.hpp"
#include "handiff/diffusion.hpp"
#include "handiff/synth_hand.hpp"

#include <string>

namespace handiff {

struct ScheduleConfig {
  int steps = 1000;
  std::string kind = "linear";
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return make_schedule(steps, kind, beta_start, beta_end); }
};

struct ModelConfig {
  DenoiserConfig denoiser;
  EncoderConfig encoder;
  ScheduleConfig schedule;
  // Diffusion state is (vertices - wrist joint) / coord_scale.
  double coord_scale = 100.0;

  void validate() const;
};

// Everything needed to run the denoiser: configuration, the template mesh and
// its hierarchy, the joint regressor, the schedule and the parameters.
struct HandModel {
  ModelConfig config;
  MeshTopology topology;
  Mat template_vertices;
  MeshHierarchy hierarchy;
  JointRegressor regressor;
  NoiseSchedule schedule;
  ModelParams params;

  int vertex_count() const { return topology.vertex_count; }
  Mat to_state(const Mat& mm) const { return mm / config.coord_scale; }
  Mat to_mm(const Mat& state) const { return state * config.coord_scale; }
  ConditionTokens tokens(const ConditionBundle& bundle) const;
  ConditionTokens empty_tokens() const;
};

HandModel make_model(const ModelConfig& config, const MeshTopology& topology, const Mat& template_vertices,
                     const JointRegressor& regressor, std::uint64_t init_seed);

// Denoiser with fixed condition tokens, usable by the sampler.
class BoundDenoiser : public X0Model {
 public:
  BoundDenoiser(const HandModel& model, ConditionTokens tokens) : model_(&model), tokens_(std::move(tokens)) {}

  int vertex_count() const override { return model_->vertex_count(); }
  Mat predict(const Mat& x_t, int t) const override;
  Mat predict_vjp(const Mat& x_t, int t, const std::function<Mat(const Mat&)>& upstream,
                  Mat* grad_x_t) const override;
  const ConditionTokens& tokens() const { return tokens_; }

 private:
  const HandModel* model_;
  ConditionTokens tokens_;
};

}  // namespace handiff
