#pragma once

#include "handiff/common.hpp"
#include "handiff/mesh_core.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace handiff {

// Joint order: 0 wrist, then (base, middle, distal, tip) for thumb, index,
// middle, ring, little.
inline int finger_joint(int finger, int k) { return 1 + 4 * finger + k; }

struct DofLimit {
  double lo = 0.0;
  double hi = 0.0;
};

// Three wrist DoFs, then per finger: base flexion, base abduction, middle
// flexion, distal flexion.
constexpr int kNumDofs = 3 + 4 * kNumFingers;

struct RigConfig {
  int target_vertices = 450;
  double palm_width = 84.0;
  double palm_length = 90.0;
  double palm_thickness = 24.0;
  // proximal, middle, distal segment lengths (mm), thumb first
  std::array<std::array<double, 3>, kNumFingers> segment_lengths{{
      {40.0, 32.0, 28.0},
      {44.0, 26.0, 21.0},
      {48.0, 29.0, 22.0},
      {45.0, 27.0, 21.0},
      {36.0, 21.0, 19.0},
  }};
  std::array<double, kNumFingers> base_radius{10.0, 9.0, 9.0, 8.5, 7.5};
  std::array<double, kNumFingers> tip_radius{7.5, 6.5, 6.5, 6.0, 5.5};
  // fraction of the shortest ring spacing over which adjacent bones blend
  double blend_fraction = 0.8;
  // distance (mm) from a finger's attachment loop over which palm vertices
  // fade out of the finger's base bone
  double palm_blend_mm = 9.0;
  std::array<DofLimit, kNumDofs> limits = default_limits();

  static std::array<DofLimit, kNumDofs> default_limits();
};

struct HandRig {
  RigConfig config;
  Mat template_vertices;  // V x 3, mm
  MeshTopology topology;
  std::array<int, kNumJoints> parent{};
  Mat rest_joints;  // 21 x 3
  // Per-joint rest frame: flexion axis and abduction axis.
  std::array<Vec3, kNumJoints> flex_axis{};
  std::array<Vec3, kNumJoints> abd_axis{};
  std::array<Vec3, kNumJoints> twist_axis{};
  Mat skinning_weights;  // V x 21
  std::array<DofLimit, kNumDofs> limits{};
  // Finger each vertex belongs to (-1 for palm).
  std::vector<int> vertex_finger;

  int vertex_count() const { return topology.vertex_count; }
  std::uint64_t hash() const;
};

struct PoseSample {
  std::array<double, kNumDofs> angles{};
  Mat3 global_rotation = Mat3::Identity();
  Vec3 global_translation = Vec3::Zero();
  double scale = 1.0;
};

struct Camera {
  double focal = 200.0;
  double cx = 64.0;
  double cy = 64.0;
  int width = 128;
  int height = 128;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  void validate() const;
  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
};

// H x W x C float image, channel-minor.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  Mat as_pixels() const;  // (H*W) x C
};

struct HandSample {
  Mat vertices;   // V x 3 mm
  Mat joints3d;   // 21 x 3 mm
  Mat joints2d;   // 21 x 2 px
  Vec confidence;  // 21
  std::optional<Image> image;
  Camera camera;
  PoseSample pose;
};

HandRig build_template(const RigConfig& config = {});

struct PoseResult {
  Mat vertices;
  Mat joints;  // rig skeleton joints, 21 x 3
};

PoseResult pose_hand_full(const HandRig& rig, const PoseSample& pose, bool validate = true);
Mat pose_hand(const HandRig& rig, const PoseSample& pose, bool validate = true);

Mat3 uniform_rotation(Rng& rng);
PoseSample sample_pose(Rng& rng, const HandRig& rig);

struct RenderConfig {
  double near_mm = 250.0;
  double far_mm = 750.0;
};

Image render(const Mat& vertices, const MeshTopology& topology, const Camera& camera,
             const RenderConfig& cfg = {});

// Per-pixel nearest depth (mm) from the same rasterizer, +inf where empty.
std::vector<double> depth_buffer(const Mat& vertices, const MeshTopology& topology, const Camera& camera);

Mat project(const Mat& points3d, const Camera& camera);
// d(u, v) / d(x, y, z) for one point: 2 x 3.
Eigen::Matrix<double, 2, 3> project_jacobian(const Vec3& point, const Camera& camera);

// Non-negative least squares fit of a sparse regressor from posed meshes to
// target joints. meshes[i] is V x 3, targets[i] is J x 3.
JointRegressor fit_joint_regressor(const std::vector<Mat>& meshes, const std::vector<Mat>& targets,
                                   const Mat& rest_vertices, const Mat& rest_targets,
                                   int max_nonzeros = 16, int candidates = 32);

struct RegressorFit {
  JointRegressor regressor;
  double heldout_mean_error_mm = 0.0;
};

RegressorFit derive_joint_regressor(const HandRig& rig, int n_poses, Rng& rng,
                                    double max_heldout_error_mm = 2.0);

struct DatasetConfig {
  RigConfig rig;
  Camera camera;
  RenderConfig render;
  double depth_min_mm = 450.0;
  double depth_max_mm = 550.0;
  double center_jitter_mm = 15.0;
  double pose_only_fraction = 0.2;
  double occlusion_tolerance_mm = 12.0;
  int regressor_poses = 300;
};

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  int count = 0;
  int train = 0;
  int val = 0;
  int test = 0;
  std::string rig_hash;
  std::vector<int> pose_only;
};

// Generates one record; pure function of (config, rig, regressor, seed, index).
HandSample generate_sample(const DatasetConfig& config, const HandRig& rig,
                           const JointRegressor& regressor, std::uint64_t seed, int index);

DatasetManifest generate_dataset(const std::filesystem::path& dir, int n, std::uint64_t seed,
                                 const SplitRatios& splits, const DatasetConfig& config = {});

std::vector<int> split_indices(const DatasetManifest& manifest, const std::string& split);

}  // namespace handiff
