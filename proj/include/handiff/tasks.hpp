#pragma once

#include "handiff/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace handiff {

enum class GuidanceOperator { Identity, JointRegression, VertexMask, MaskedJointRegression, ProjectedJoints };
enum class GuidanceNorm { L2, L1 };

const char* to_string(GuidanceOperator op);
GuidanceOperator guidance_operator_from_string(const std::string& name);

// Operator P, observed target in P's output space, and scale s. Meshes enter
// the operator in wrist-relative mm; the projection adds `root` (camera-frame
// wrist position) before projecting.
struct GuidanceSpec {
  GuidanceOperator op = GuidanceOperator::Identity;
  Mat target;               // V x 3, 21 x 3 or 21 x 2
  std::vector<char> given;  // per vertex (VertexMask) or per joint (masked ops); 1 = constrained
  Camera camera;
  Vec3 root = Vec3::Zero();
  double scale = 1.0;
  GuidanceNorm norm = GuidanceNorm::L2;

  void validate(int vertex_count) const;
};

// P applied to a mesh (rows outside the mask are zero).
Mat apply_operator(const GuidanceSpec& spec, const Mat& mesh_mm, const JointRegressor& regressor);

// ||P(scale * x0) - target|| and its gradient w.r.t. x0 (diffusion units).
double guidance_objective(const GuidanceSpec& spec, const JointRegressor& regressor, double coord_scale,
                          const Mat& x0, Mat* grad_x0);

// Gradient of the objective at f(x_t) w.r.t. x_t, through the denoiser.
Mat guidance_gradient(const Mat& x_t, int t, const ConditionTokens& tokens, const GuidanceSpec& spec,
                      const HandModel& model, double* objective = nullptr);

struct Hypothesis {
  Mat vertices;  // V x 3, wrist-relative mm
  std::uint64_t stream = 0;
  std::vector<double> residual_trace;
  double residual = 0.0;  // task-specific final residual (mm or px), 0 when not applicable
};

struct HypothesisSet {
  std::vector<Hypothesis> hypotheses;
  std::string task;
  std::string residual_units;

  std::vector<Mat> meshes() const;
  int size() const { return static_cast<int>(hypotheses.size()); }
};

HypothesisSet generate(const HandModel& model, const SamplerConfig& sampler);

// partial: V x 3 wrist-relative mm; given: V flags.
HypothesisSet inpaint_mesh(const HandModel& model, const Mat& partial, const std::vector<char>& given,
                           const SamplerConfig& sampler, bool hard_replace = false);

// partial: 21 x 3 wrist-relative mm; given: 21 flags.
HypothesisSet inpaint_skeleton(const HandModel& model, const Mat& partial, const std::vector<char>& given,
                               const SamplerConfig& sampler);

// Image-conditioned sampling without guidance.
HypothesisSet reconstruct(const HandModel& model, const Image& image, const SamplerConfig& sampler);

struct Fit2dInput {
  Mat joints2d;  // 21 x 2 px
  Vec confidence;
  Camera camera;
  Vec3 root = Vec3::Zero();  // camera-frame wrist position, mm
  std::optional<Image> image;
  double confidence_threshold = 0.5;
};

HypothesisSet fit2d(const HandModel& model, const Fit2dInput& input, const SamplerConfig& sampler);

// Gradient-descent baseline over rig joint angles and global rotation,
// minimizing the confident 2D reprojection error. Not a diffusion method.
struct BaselineFit {
  PoseSample pose;
  Mat vertices;  // wrist-relative mm
  double residual_px = 0.0;
  int iterations = 0;
};

BaselineFit fit2d_baseline(const HandRig& rig, const JointRegressor& regressor, const Fit2dInput& input,
                           int iterations = 200);

// Mean distance over given rows (mm) between a mesh and its target.
double given_part_error(const Mat& mesh, const Mat& target, const std::vector<char>& given);
// Mean 2D distance over confident joints (px).
double reprojection_error(const Mat& mesh_mm, const JointRegressor& regressor, const Fit2dInput& input);

}  // namespace handiff
