#pragma once

#include "handiff/autograd.hpp"
#include "handiff/mesh_core.hpp"

namespace handiff {

struct LossWeights {
  double data = 1.0;
  double vertex = 1.0;
  double joint = 1.0;
  double normal = 0.1;
  double edge = 1.0;

  void validate() const;
};

struct LossTerms {
  double data = 0.0;
  double vertex = 0.0;
  double joint = 0.0;
  double normal = 0.0;
  double edge = 0.0;
};

struct LossBreakdown {
  LossTerms terms;
  double total = 0.0;
};

// Mean absolute error over all entries.
double data_loss(const Mat& pred, const Mat& gt);

struct VertexJointLoss {
  double vertex = 0.0;
  double joint = 0.0;
};

// Sums of absolute coordinate differences over vertices and regressed joints.
VertexJointLoss vertex_joint_loss(const Mat& pred, const Mat& gt, const JointRegressor& regressor);

// Sum over faces of |e . n_gt| for the three predicted edges of each face.
// Degenerate ground-truth faces are skipped; their count goes to *excluded.
double normal_loss(const Mat& pred, const Mat& gt, const MeshTopology& topology, int* excluded = nullptr);

// Sum of absolute edge-length differences.
double edge_loss(const Mat& pred, const Mat& gt, const MeshTopology& topology);

LossBreakdown total_loss(const LossTerms& terms, const LossWeights& weights);

// Sparse operators shared by the differentiable versions.
struct LossOperators {
  SpMat face_edges;  // 3F x V: rows (v1 - v0), (v2 - v1), (v0 - v2) per face
  SpMat edges;       // E x V: v_hi - v_lo per topology edge
  const JointRegressor* regressor = nullptr;
  const MeshTopology* topology = nullptr;
};

LossOperators make_loss_operators(const MeshTopology& topology, const JointRegressor& regressor);

// Ground-truth side of the geometric losses, precomputed once per sample.
struct LossTargets {
  Mat vertices;       // V x 3 mm
  Mat joints;         // 21 x 3 mm
  Mat face_normals3;  // 3F x 3: gt normal repeated for each face edge (zero for degenerate faces)
  Mat edge_lengths;   // E x 1
};

LossTargets make_loss_targets(const Mat& gt, const LossOperators& ops);

namespace ag {

Var data_loss(Var pred, const Mat& gt);
Var vertex_loss(Var pred, const LossTargets& targets);
Var joint_loss(Var pred, const LossTargets& targets, const LossOperators& ops);
Var normal_loss(Var pred, const LossTargets& targets, const LossOperators& ops);
Var edge_loss(Var pred, const LossTargets& targets, const LossOperators& ops);

struct LossVars {
  Var total;
  LossTerms terms;
};

// pred_x0 / gt_x0 are in diffusion units; pred_mm is the same prediction in mm.
LossVars total_loss(Var pred_x0, const Mat& gt_x0, Var pred_mm, const LossTargets& targets,
                    const LossOperators& ops, const LossWeights& weights);

}  // namespace ag

}  // namespace handiff
