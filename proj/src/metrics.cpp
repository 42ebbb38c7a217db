#include "handiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace handiff {

namespace {

void check_batch(const std::vector<Mat>& meshes) {
  if (meshes.size() < 2) throw Error(ErrorKind::Input, "need at least 2 meshes");
  for (const Mat& m : meshes)
    if (m.rows() != meshes[0].rows() || m.cols() != 3)
      throw Error(ErrorKind::Input, "meshes must share the vertex count");
}

}  // namespace

double mean_vertex_distance(const Mat& a, const Mat& b) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double dx = a(r, 0) - b(r, 0), dy = a(r, 1) - b(r, 1), dz = a(r, 2) - b(r, 2);
    total += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return total / static_cast<double>(a.rows());
}

std::vector<double> pairwise_mean_distances(const std::vector<Mat>& meshes) {
  check_batch(meshes);
  std::vector<double> out;
  out.reserve(meshes.size() * (meshes.size() - 1) / 2);
  for (std::size_t i = 0; i < meshes.size(); ++i)
    for (std::size_t j = i + 1; j < meshes.size(); ++j) out.push_back(mean_vertex_distance(meshes[i], meshes[j]));
  return out;
}

double apd(const std::vector<Mat>& meshes) {
  const std::vector<double> d = pairwise_mean_distances(meshes);
  double s = 0.0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

namespace {

// Interval of a triangle on the intersection line, given projections p and
// signed plane distances d. Returns false when the triangle is coplanar.
bool interval(double p0, double p1, double p2, double d0, double d1, double d2, double& lo, double& hi) {
  auto isect = [](double pa, double pb, double pc, double da, double db, double dc, double& t0, double& t1) {
    // a is alone on its side of the plane
    t0 = pa + (pb - pa) * da / (da - db);
    t1 = pa + (pc - pa) * da / (da - dc);
  };
  double t0, t1;
  if (d0 * d1 > 0) {
    isect(p2, p0, p1, d2, d0, d1, t0, t1);
  } else if (d0 * d2 > 0) {
    isect(p1, p0, p2, d1, d0, d2, t0, t1);
  } else if (d1 * d2 > 0 || d0 != 0) {
    isect(p0, p1, p2, d0, d1, d2, t0, t1);
  } else if (d1 != 0) {
    isect(p1, p0, p2, d1, d0, d2, t0, t1);
  } else if (d2 != 0) {
    isect(p2, p0, p1, d2, d0, d1, t0, t1);
  } else {
    return false;
  }
  lo = std::min(t0, t1);
  hi = std::max(t0, t1);
  return true;
}

bool segments_intersect_2d(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& c,
                           const Eigen::Vector2d& d, double eps) {
  auto cross = [](const Eigen::Vector2d& u, const Eigen::Vector2d& v) { return u.x() * v.y() - u.y() * v.x(); };
  const double d1 = cross(b - a, c - a), d2 = cross(b - a, d - a);
  const double d3 = cross(d - c, a - c), d4 = cross(d - c, b - c);
  if (((d1 > eps && d2 < -eps) || (d1 < -eps && d2 > eps)) && ((d3 > eps && d4 < -eps) || (d3 < -eps && d4 > eps)))
    return true;
  auto on_segment = [&](const Eigen::Vector2d& p, const Eigen::Vector2d& q, const Eigen::Vector2d& r, double cr) {
    return std::abs(cr) <= eps && r.x() >= std::min(p.x(), q.x()) - eps && r.x() <= std::max(p.x(), q.x()) + eps &&
           r.y() >= std::min(p.y(), q.y()) - eps && r.y() <= std::max(p.y(), q.y()) + eps;
  };
  return on_segment(a, b, c, d1) || on_segment(a, b, d, d2) || on_segment(c, d, a, d3) || on_segment(c, d, b, d4);
}

bool point_in_triangle_2d(const Eigen::Vector2d& p, const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                          const Eigen::Vector2d& c) {
  auto cross = [](const Eigen::Vector2d& u, const Eigen::Vector2d& v) { return u.x() * v.y() - u.y() * v.x(); };
  const double s0 = cross(b - a, p - a), s1 = cross(c - b, p - b), s2 = cross(a - c, p - c);
  return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
}

bool coplanar_intersect(const Vec3& n, const Vec3 a[3], const Vec3 b[3], double eps) {
  int drop = 0;
  n.cwiseAbs().maxCoeff(&drop);
  const int i0 = drop == 0 ? 1 : 0, i1 = drop == 2 ? 1 : 2;
  auto proj = [&](const Vec3& v) { return Eigen::Vector2d(v(i0), v(i1)); };
  Eigen::Vector2d pa[3], pb[3];
  for (int k = 0; k < 3; ++k) {
    pa[k] = proj(a[k]);
    pb[k] = proj(b[k]);
  }
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (segments_intersect_2d(pa[i], pa[(i + 1) % 3], pb[j], pb[(j + 1) % 3], eps)) return true;
  return point_in_triangle_2d(pa[0], pb[0], pb[1], pb[2]) || point_in_triangle_2d(pb[0], pa[0], pa[1], pa[2]);
}

}  // namespace

bool triangles_intersect(const Vec3& a0, const Vec3& a1, const Vec3& a2, const Vec3& b0, const Vec3& b1,
                         const Vec3& b2, double eps) {
  const Vec3 a[3] = {a0, a1, a2}, b[3] = {b0, b1, b2};
  const Vec3 n2 = (b1 - b0).cross(b2 - b0);
  const double n2n = n2.norm();
  const Vec3 n1 = (a1 - a0).cross(a2 - a0);
  const double n1n = n1.norm();
  if (n1n == 0 || n2n == 0) return false;

  double da[3], db[3];
  for (int k = 0; k < 3; ++k) {
    da[k] = n2.dot(a[k] - b0) / n2n;
    if (std::abs(da[k]) < eps) da[k] = 0;
  }
  if ((da[0] > 0 && da[1] > 0 && da[2] > 0) || (da[0] < 0 && da[1] < 0 && da[2] < 0)) return false;
  for (int k = 0; k < 3; ++k) {
    db[k] = n1.dot(b[k] - a0) / n1n;
    if (std::abs(db[k]) < eps) db[k] = 0;
  }
  if ((db[0] > 0 && db[1] > 0 && db[2] > 0) || (db[0] < 0 && db[1] < 0 && db[2] < 0)) return false;

  const Vec3 dir = n1.cross(n2);
  int axis = 0;
  dir.cwiseAbs().maxCoeff(&axis);
  double lo1, hi1, lo2, hi2;
  if (!interval(a[0](axis), a[1](axis), a[2](axis), da[0], da[1], da[2], lo1, hi1) ||
      !interval(b[0](axis), b[1](axis), b[2](axis), db[0], db[1], db[2], lo2, hi2))
    return coplanar_intersect(n1, a, b, eps);
  return std::max(lo1, lo2) <= std::min(hi1, hi2) + eps;
}

SiResult si(const Mat& vertices, const MeshTopology& topology, double eps) {
  if (vertices.rows() != topology.vertex_count || vertices.cols() != 3)
    throw Error(ErrorKind::Input, "vertices do not match the topology");
  const int f = topology.face_count();
  if (f == 0) throw Error(ErrorKind::Input, "SI needs a mesh with faces");
  SiResult out;
  std::vector<char> degenerate(f, 0), hit(f, 0);
  for (int i = 0; i < f; ++i) {
    const Face& t = topology.faces[i];
    const Vec3 a = vertices.row(t[0]), b = vertices.row(t[1]), c = vertices.row(t[2]);
    if (0.5 * (b - a).cross(c - a).norm() <= 1e-12) {
      degenerate[i] = 1;
      out.degenerate_faces.push_back(i);
    }
  }
  for (int i = 0; i < f; ++i) {
    if (degenerate[i]) continue;
    const Face& p = topology.faces[i];
    for (int j = i + 1; j < f; ++j) {
      if (degenerate[j]) continue;
      const Face& q = topology.faces[j];
      bool shared = false;
      for (int x : p)
        for (int y : q) shared |= x == y;
      if (shared) continue;
      if (triangles_intersect(vertices.row(p[0]), vertices.row(p[1]), vertices.row(p[2]), vertices.row(q[0]),
                              vertices.row(q[1]), vertices.row(q[2]), eps)) {
        hit[i] = hit[j] = 1;
      }
    }
  }
  for (int i = 0; i < f; ++i)
    if (hit[i]) out.faces.push_back(i);
  out.percent = 100.0 * static_cast<double>(out.faces.size()) / f;
  return out;
}

std::vector<PaError> pa_error(const std::vector<Mat>& preds, const Mat& gt, const JointRegressor& regressor,
                              bool with_scale) {
  const Mat gt_joints = regress_joints(gt, regressor);
  std::vector<PaError> out;
  for (const Mat& pred : preds) {
    if (pred.rows() != gt.rows() || pred.cols() != 3) throw Error(ErrorKind::Input, "prediction shape mismatch");
    PaError e;
    try {
      const Alignment v = procrustes_align(pred, gt, with_scale);
      e.mpvpe = (v.aligned - gt).rowwise().norm().mean();
      const Alignment j = procrustes_align(regress_joints(pred, regressor), gt_joints, with_scale);
      e.mpjpe = (j.aligned - gt_joints).rowwise().norm().mean();
    } catch (const Error& err) {
      if (err.kind() != ErrorKind::DegenerateAlignment) throw;
      e.degenerate = true;
      e.mpjpe = e.mpvpe = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(e);
  }
  return out;
}

double min_over_hypotheses(const std::vector<double>& errors) {
  if (errors.empty()) throw Error(ErrorKind::Input, "need at least one hypothesis");
  double m = std::numeric_limits<double>::infinity();
  for (double e : errors)
    if (!std::isnan(e)) m = std::min(m, e);
  return m;
}

void EvalReport::validate() const {
  if (!std::isfinite(value)) throw Error(ErrorKind::Numeric, "metric " + metric + " is not finite");
  if (units != "mm" && units != "percent") throw Error(ErrorKind::Input, "metric units must be mm or percent");
}

}  // namespace handiff
