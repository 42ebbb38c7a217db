#pragma once

#include "handiff/mesh_core.hpp"

#include <string>
#include <vector>

namespace handiff {

// Mean Euclidean distance between corresponding rows, summed in row order.
double mean_vertex_distance(const Mat& a, const Mat& b);

// Mean over unordered pairs of the mean per-vertex distance (mm).
double apd(const std::vector<Mat>& meshes);

// Condensed upper-triangle matrix of mean per-vertex distances, pair (i, j)
// with i < j in row-major order.
std::vector<double> pairwise_mean_distances(const std::vector<Mat>& meshes);

// Triangle-triangle intersection (interval overlap test). Touching within eps
// counts as intersecting; coplanar pairs use edge and containment tests.
bool triangles_intersect(const Vec3& a0, const Vec3& a1, const Vec3& a2, const Vec3& b0, const Vec3& b1,
                         const Vec3& b2, double eps = 1e-9);

struct SiResult {
  double percent = 0.0;
  std::vector<int> faces;             // sorted intersecting face indices
  std::vector<int> degenerate_faces;  // excluded from the test
};

// Reference all-pairs self-intersection, skipping pairs that share a vertex.
SiResult si(const Mat& vertices, const MeshTopology& topology, double eps = 1e-9);

struct PaError {
  double mpjpe = 0.0;
  double mpvpe = 0.0;
  bool degenerate = false;
};

// Procrustes-aligned errors of each prediction against gt: vertices for
// MPVPE, regressed joints for MPJPE.
std::vector<PaError> pa_error(const std::vector<Mat>& preds, const Mat& gt, const JointRegressor& regressor,
                              bool with_scale = true);

double min_over_hypotheses(const std::vector<double>& errors);

struct EvalReport {
  std::string metric;
  double value = 0.0;
  std::string units;  // "mm" or "percent"
  int n = 0;
  int steps = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string path;  // which implementation produced the value

  void validate() const;
};

}  // namespace handiff
