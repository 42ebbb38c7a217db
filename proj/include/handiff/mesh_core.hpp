#pragma once

#include "handiff/common.hpp"

#include <array>
#include <span>
#include <vector>

namespace handiff {

using Face = std::array<int, 3>;
using Edge = std::array<int, 2>;

// Connectivity of a template mesh (or of a coarsened level, which carries
// edges only). Immutable after construction.
struct MeshTopology {
  int vertex_count = 0;
  std::vector<Face> faces;
  std::vector<Edge> edges;  // sorted (lo, hi) pairs, lexicographic order
  std::vector<std::vector<int>> adjacency;

  int face_count() const { return static_cast<int>(faces.size()); }
  int edge_count() const { return static_cast<int>(edges.size()); }
  bool connected() const;
};

MeshTopology build_topology(const std::vector<Face>& faces, int vertex_count);
// Graph-only topology (no faces), used for pooled levels.
MeshTopology build_graph_topology(const std::vector<Edge>& edges, int vertex_count);

struct PoolingLevel {
  MeshTopology coarse_topology;
  SpMat down;  // coarse x fine, row-stochastic
  SpMat up;    // fine x coarse
  std::vector<int> cluster_of;  // fine vertex -> coarse vertex
};

// Deterministic heavy-edge matching (shortest rest-pose edges first); leftover
// vertices join the cluster of their nearest matched neighbour.
std::vector<PoolingLevel> build_pooling_hierarchy(const MeshTopology& topology,
                                                  const Mat& rest_vertices, int levels);

struct GraphOperator {
  SpMat op;  // 2 L / lambda_max - I
  double lambda_max = 2.0;
};

GraphOperator graph_operator(const MeshTopology& topology);

struct JointRegressor {
  SpMat weights;  // 21 x V
};

struct NormalsResult {
  Mat normals;  // F x 3
  std::vector<int> degenerate_faces;
};

NormalsResult face_normals(const Mat& vertices, const MeshTopology& topology);
Mat edge_vectors(const Mat& vertices, const MeshTopology& topology);
Vec edge_lengths(const Mat& vertices, const MeshTopology& topology);

Mat regress_joints(const Mat& vertices, const JointRegressor& regressor);

struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Mat apply(const Mat& points) const;
};

struct Alignment {
  Mat aligned;
  SimilarityTransform transform;
  double residual = 0.0;  // sum of squared distances after alignment
};

// Least-squares similarity (or rigid, with_scale = false) alignment of pred
// onto target, both N x 3.
Alignment procrustes_align(const Mat& pred, const Mat& target, bool with_scale = true);

}  // namespace handiff
