#include "handiff/losses.hpp"

#include <cmath>

namespace handiff {

void LossWeights::validate() const {
  for (double w : {data, vertex, joint, normal, edge})
    if (!(w >= 0) || !std::isfinite(w)) throw Error(ErrorKind::Config, "loss weights must be finite and >= 0");
  if (data + vertex + joint + normal + edge <= 0) throw Error(ErrorKind::Config, "at least one loss weight must be > 0");
}

namespace {

void check_pair(const Mat& pred, const Mat& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw Error(ErrorKind::Input, "loss inputs differ in shape");
}

}  // namespace

double data_loss(const Mat& pred, const Mat& gt) {
  check_pair(pred, gt);
  return (pred - gt).cwiseAbs().mean();
}

VertexJointLoss vertex_joint_loss(const Mat& pred, const Mat& gt, const JointRegressor& regressor) {
  check_pair(pred, gt);
  VertexJointLoss out;
  out.vertex = (pred - gt).cwiseAbs().sum();
  out.joint = (regress_joints(pred, regressor) - regress_joints(gt, regressor)).cwiseAbs().sum();
  return out;
}

double normal_loss(const Mat& pred, const Mat& gt, const MeshTopology& topology, int* excluded) {
  check_pair(pred, gt);
  NormalsResult n = face_normals(gt, topology);
  if (excluded) *excluded = static_cast<int>(n.degenerate_faces.size());
  double total = 0.0;
  for (int f = 0; f < topology.face_count(); ++f) {
    const Face& face = topology.faces[f];
    const Vec3 nf = n.normals.row(f).transpose();
    for (int k = 0; k < 3; ++k) {
      const Vec3 e = (pred.row(face[(k + 1) % 3]) - pred.row(face[k])).transpose();
      total += std::abs(e.dot(nf));
    }
  }
  return total;
}

double edge_loss(const Mat& pred, const Mat& gt, const MeshTopology& topology) {
  check_pair(pred, gt);
  return (edge_lengths(pred, topology) - edge_lengths(gt, topology)).cwiseAbs().sum();
}

LossBreakdown total_loss(const LossTerms& terms, const LossWeights& weights) {
  weights.validate();
  LossBreakdown b;
  b.terms = terms;
  b.total = weights.data * terms.data + weights.vertex * terms.vertex + weights.joint * terms.joint +
            weights.normal * terms.normal + weights.edge * terms.edge;
  return b;
}

LossOperators make_loss_operators(const MeshTopology& topology, const JointRegressor& regressor) {
  if (regressor.weights.cols() != topology.vertex_count)
    throw Error(ErrorKind::Input, "regressor does not match the topology");
  LossOperators ops;
  std::vector<Eigen::Triplet<double>> fe;
  for (int f = 0; f < topology.face_count(); ++f)
    for (int k = 0; k < 3; ++k) {
      fe.emplace_back(3 * f + k, topology.faces[f][(k + 1) % 3], 1.0);
      fe.emplace_back(3 * f + k, topology.faces[f][k], -1.0);
    }
  ops.face_edges.resize(3 * topology.face_count(), topology.vertex_count);
  ops.face_edges.setFromTriplets(fe.begin(), fe.end());
  std::vector<Eigen::Triplet<double>> ee;
  for (int e = 0; e < topology.edge_count(); ++e) {
    ee.emplace_back(e, topology.edges[e][1], 1.0);
    ee.emplace_back(e, topology.edges[e][0], -1.0);
  }
  ops.edges.resize(topology.edge_count(), topology.vertex_count);
  ops.edges.setFromTriplets(ee.begin(), ee.end());
  ops.regressor = &regressor;
  ops.topology = &topology;
  return ops;
}

LossTargets make_loss_targets(const Mat& gt, const LossOperators& ops) {
  LossTargets t;
  t.vertices = gt;
  t.joints = regress_joints(gt, *ops.regressor);
  NormalsResult n = face_normals(gt, *ops.topology);
  t.face_normals3.resize(3 * n.normals.rows(), 3);
  for (Eigen::Index f = 0; f < n.normals.rows(); ++f)
    for (int k = 0; k < 3; ++k) t.face_normals3.row(3 * f + k) = n.normals.row(f);
  t.edge_lengths = (ops.edges * gt).rowwise().norm();
  return t;
}

namespace ag {

Var data_loss(Var pred, const Mat& gt) {
  return mean(abs(sub(pred, pred.tape->constant(gt))));
}

Var vertex_loss(Var pred, const LossTargets& targets) {
  return sum(abs(sub(pred, pred.tape->constant(targets.vertices))));
}

Var joint_loss(Var pred, const LossTargets& targets, const LossOperators& ops) {
  Var j = sparse_mm(ops.regressor->weights, pred);
  return sum(abs(sub(j, pred.tape->constant(targets.joints))));
}

Var normal_loss(Var pred, const LossTargets& targets, const LossOperators& ops) {
  Var e = sparse_mm(ops.face_edges, pred);
  Var dots = matmul(mul_const(e, targets.face_normals3), pred.tape->constant(Mat::Ones(3, 1)));
  return sum(abs(dots));
}

Var edge_loss(Var pred, const LossTargets& targets, const LossOperators& ops) {
  Var len = row_norm(sparse_mm(ops.edges, pred));
  return sum(abs(sub(len, pred.tape->constant(targets.edge_lengths))));
}

LossVars total_loss(Var pred_x0, const Mat& gt_x0, Var pred_mm, const LossTargets& targets,
                    const LossOperators& ops, const LossWeights& weights) {
  weights.validate();
  Tape& tape = *pred_x0.tape;
  LossVars out;
  Var total = tape.constant(Mat::Zero(1, 1));
  auto accumulate = [&](double w, Var term, double& slot) {
    slot = term.value()(0, 0);
    if (w != 0.0) total = add(total, scale(term, w));
  };
  if (weights.data != 0) accumulate(weights.data, data_loss(pred_x0, gt_x0), out.terms.data);
  if (weights.vertex != 0) accumulate(weights.vertex, vertex_loss(pred_mm, targets), out.terms.vertex);
  if (weights.joint != 0) accumulate(weights.joint, joint_loss(pred_mm, targets, ops), out.terms.joint);
  if (weights.normal != 0) accumulate(weights.normal, normal_loss(pred_mm, targets, ops), out.terms.normal);
  if (weights.edge != 0) accumulate(weights.edge, edge_loss(pred_mm, targets, ops), out.terms.edge);
  out.total = total;
  return out;
}

}  // namespace ag

}  // namespace handiff
