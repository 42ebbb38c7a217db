#include "handiff/synth_hand.hpp"

#include "handiff/record_io.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <numeric>

namespace handiff {

std::array<DofLimit, kNumDofs> RigConfig::default_limits() {
  std::array<DofLimit, kNumDofs> l{};
  l[0] = {-0.8, 0.8};   // wrist flexion
  l[1] = {-0.3, 0.4};   // wrist deviation
  l[2] = {-0.4, 0.4};   // wrist twist
  for (int f = 0; f < kNumFingers; ++f) {
    const int o = 3 + 4 * f;
    if (f == 0) {
      l[o + 0] = {-0.3, 0.9};
      l[o + 1] = {-0.4, 0.5};
      l[o + 2] = {0.0, 0.9};
      l[o + 3] = {-0.2, 1.2};
    } else {
      l[o + 0] = {-0.3, 1.4};
      l[o + 1] = {-0.25, 0.25};
      l[o + 2] = {0.0, 1.6};
      l[o + 3] = {0.0, 1.2};
    }
  }
  return l;
}

void Camera::validate() const {
  if (!(focal > 0.0)) throw Error(ErrorKind::Input, "camera focal length must be positive");
  if (width <= 0 || height <= 0) throw Error(ErrorKind::Input, "camera image size must be positive");
  if (cx < 0 || cx >= width || cy < 0 || cy >= height)
    throw Error(ErrorKind::Input, "principal point outside the image");
}

Mat Image::as_pixels() const {
  Mat m(static_cast<Eigen::Index>(height) * width, channels);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = data[i];
  return m;
}

namespace {

struct Frame {
  Vec3 along, lateral, normal;
};

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

Mat3 axis_angle(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

struct MeshBuild {
  std::vector<Vec3> verts;
  std::vector<Face> faces;
  std::vector<int> finger;     // -1 palm
  std::vector<double> u;       // distance along finger axis (tube vertices)
  std::vector<char> is_loop;   // loop vertices shared by palm and finger
  std::array<Vec3, kNumJoints> joints{};
  std::array<Frame, kNumFingers> frames{};
  std::array<std::array<double, 3>, kNumFingers> boundaries{};  // u of base, mid, distal joints
  double blend = 1.0;
};

// Orients triangle (a, b, c) so its normal points along `out`.
Face oriented(const std::vector<Vec3>& v, int a, int b, int c, const Vec3& out) {
  const Vec3 n = (v[b] - v[a]).cross(v[c] - v[a]);
  return n.dot(out) >= 0 ? Face{a, b, c} : Face{a, c, b};
}

MeshBuild build_mesh(const RigConfig& cfg, int sub, int extra_rows, int rings) {
  MeshBuild mb;
  const double W = cfg.palm_width, L = cfg.palm_length, T = cfg.palm_thickness;

  // x grid
  // Four finger loops on the top face with equal palm strips between them and
  // at both sides, wide enough that skinning blends do not tear thin strips.
  std::vector<double> xs{-W / 2, W / 2};
  std::array<double, 4> fc{}, fw{};
  const double loop_w = 0.7 * W / 4.0, gap = (W - 4.0 * loop_w) / 5.0;
  for (int i = 0; i < 4; ++i) {
    fc[i] = -W / 2 + gap * (i + 1) + loop_w * (i + 0.5);
    fw[i] = loop_w;
    for (int k = 0; k <= 2 * sub; ++k) xs.push_back(fc[i] - fw[i] / 2 + fw[i] * k / (2.0 * sub));
  }
  std::vector<double> zs;
  for (int k = 0; k <= 2 * sub; ++k) zs.push_back(-T / 2 + T * k / (2.0 * sub));
  const double ty0 = 0.2 * L, ty1 = 0.45 * L;
  std::vector<double> ys{0.0};
  for (int k = 0; k <= 2 * sub; ++k) ys.push_back(ty0 + (ty1 - ty0) * k / (2.0 * sub));
  const int m = 2 + extra_rows;
  for (int k = 1; k <= m; ++k) ys.push_back(ty1 + (L - ty1) * k / m);
  auto uniq = [](std::vector<double>& a) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end(), [](double p, double q) { return std::abs(p - q) < 1e-9; }),
            a.end());
  };
  uniq(xs);
  uniq(ys);
  uniq(zs);
  const int nx = static_cast<int>(xs.size()) - 1, ny = static_cast<int>(ys.size()) - 1,
            nz = static_cast<int>(zs.size()) - 1;

  auto in_range = [](double v, double lo, double hi) { return v >= lo - 1e-9 && v <= hi + 1e-9; };
  auto top_finger = [&](double x) {
    for (int i = 0; i < 4; ++i)
      if (in_range(x, fc[i] - fw[i] / 2, fc[i] + fw[i] / 2)) return i;
    return -1;
  };
  // Lattice nodes that stay on the surface. Loop interiors are dropped.
  std::map<std::array<int, 3>, int> node;
  auto on_surface = [&](int i, int j, int k) {
    return i == 0 || i == nx || j == 0 || j == ny || k == 0 || k == nz;
  };
  auto removed_node = [&](int i, int j, int k) {
    if (j == ny && k > 0 && k < nz) {
      const int f = top_finger(xs[i]);
      if (f >= 0 && xs[i] > fc[f] - fw[f] / 2 + 1e-9 && xs[i] < fc[f] + fw[f] / 2 - 1e-9) return true;
    }
    if (i == 0 && k > 0 && k < nz && ys[j] > ty0 + 1e-9 && ys[j] < ty1 - 1e-9) return true;
    return false;
  };
  for (int i = 0; i <= nx; ++i)
    for (int j = 0; j <= ny; ++j)
      for (int k = 0; k <= nz; ++k) {
        if (!on_surface(i, j, k) || removed_node(i, j, k)) continue;
        node[{i, j, k}] = static_cast<int>(mb.verts.size());
        mb.verts.emplace_back(xs[i], ys[j], zs[k]);
        mb.finger.push_back(-1);
        mb.u.push_back(0.0);
        mb.is_loop.push_back(0);
      }
  const Vec3 box_center(0, L / 2, 0);
  auto quad = [&](std::array<int, 3> a, std::array<int, 3> b, std::array<int, 3> c, std::array<int, 3> d,
                  const Vec3& out) {
    const int ia = node.at(a), ib = node.at(b), ic = node.at(c), id = node.at(d);
    mb.faces.push_back(oriented(mb.verts, ia, ib, ic, out));
    mb.faces.push_back(oriented(mb.verts, ia, ic, id, out));
  };
  // Six sides.
  for (int j = 0; j < ny; ++j)
    for (int k = 0; k < nz; ++k) {
      const bool thumb_cell = ys[j] >= ty0 - 1e-9 && ys[j + 1] <= ty1 + 1e-9;
      if (!thumb_cell) quad({0, j, k}, {0, j + 1, k}, {0, j + 1, k + 1}, {0, j, k + 1}, Vec3(-1, 0, 0));
      quad({nx, j, k}, {nx, j + 1, k}, {nx, j + 1, k + 1}, {nx, j, k + 1}, Vec3(1, 0, 0));
    }
  for (int i = 0; i < nx; ++i)
    for (int k = 0; k < nz; ++k) {
      quad({i, 0, k}, {i + 1, 0, k}, {i + 1, 0, k + 1}, {i, 0, k + 1}, Vec3(0, -1, 0));
      const double xm = 0.5 * (xs[i] + xs[i + 1]);
      if (top_finger(xm) < 0)
        quad({i, ny, k}, {i + 1, ny, k}, {i + 1, ny, k + 1}, {i, ny, k + 1}, Vec3(0, 1, 0));
    }
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) {
      quad({i, j, 0}, {i + 1, j, 0}, {i + 1, j + 1, 0}, {i, j + 1, 0}, Vec3(0, 0, -1));
      quad({i, j, nz}, {i + 1, j, nz}, {i + 1, j + 1, nz}, {i, j + 1, nz}, Vec3(0, 0, 1));
    }

  // Joint 0 at the wrist: centre of the bottom face.
  mb.joints[0] = Vec3(0, 0, 0);

  // Finger frames and loops. Finger 0 is the thumb on the -x side face.
  double min_spacing = std::numeric_limits<double>::infinity();
  double min_segment = std::numeric_limits<double>::infinity();
  for (int f = 0; f < kNumFingers; ++f) {
    const auto& seg = cfg.segment_lengths[f];
    const double cap = 0.6 * cfg.tip_radius[f];
    min_spacing = std::min({min_spacing, seg[0] / rings, seg[1] / rings, (seg[2] - cap) / rings});
    min_segment = std::min({min_segment, seg[0], seg[1], seg[2]});
  }
  mb.blend = std::min(cfg.blend_fraction * min_spacing, 0.45 * min_segment);

  for (int f = 0; f < kNumFingers; ++f) {
    Frame fr;
    Vec3 c0;
    std::vector<int> loop;
    if (f == 0) {
      fr.along = Vec3(-0.55, 0.8, -0.22).normalized();
      fr.normal = (Vec3(0, 0, 1) - Vec3(0, 0, 1).dot(fr.along) * fr.along).normalized();
      c0 = Vec3(-W / 2, 0.5 * (ty0 + ty1), 0);
      for (const auto& [key, id] : node)
        if (key[0] == 0 && ys[key[1]] >= ty0 - 1e-9 && ys[key[1]] <= ty1 + 1e-9) loop.push_back(id);
    } else {
      const int i = f - 1;
      fr.along = Vec3(0, 1, 0);
      fr.normal = Vec3(0, 0, 1);
      c0 = Vec3(fc[i], L, 0);
      for (const auto& [key, id] : node)
        if (key[1] == ny && in_range(xs[key[0]], fc[i] - fw[i] / 2, fc[i] + fw[i] / 2)) loop.push_back(id);
    }
    fr.lateral = fr.along.cross(fr.normal);
    mb.frames[f] = fr;
    std::vector<std::pair<double, int>> byangle;
    for (int id : loop) {
      const Vec3 d = mb.verts[id] - c0;
      byangle.emplace_back(std::atan2(d.dot(fr.normal), d.dot(fr.lateral)), id);
      mb.is_loop[id] = 1;
      mb.u[id] = 0.0;
    }
    std::sort(byangle.begin(), byangle.end());

    const auto& seg = cfg.segment_lengths[f];
    const double total = seg[0] + seg[1] + seg[2];
    const double cap = 0.6 * cfg.tip_radius[f];
    mb.boundaries[f] = {0.0, seg[0], seg[0] + seg[1]};
    mb.joints[finger_joint(f, 0)] = c0;
    mb.joints[finger_joint(f, 1)] = c0 + fr.along * seg[0];
    mb.joints[finger_joint(f, 2)] = c0 + fr.along * (seg[0] + seg[1]);
    mb.joints[finger_joint(f, 3)] = c0 + fr.along * total;

    std::vector<double> us;
    for (int k = 1; k <= rings; ++k) us.push_back(seg[0] * k / rings);
    for (int k = 1; k <= rings; ++k) us.push_back(seg[0] + seg[1] * k / rings);
    for (int k = 1; k <= rings; ++k) us.push_back(seg[0] + seg[1] + (seg[2] - cap) * k / rings);

    std::vector<int> prev;
    for (const auto& [a, id] : byangle) prev.push_back(id);
    const int rn = static_cast<int>(prev.size());
    for (double u : us) {
      const double t = u / total;
      const double r = (1 - t) * cfg.base_radius[f] + t * cfg.tip_radius[f];
      // Close to the tip the cap rounds the ring down.
      const double shrink = (u > total - cap - 1e-9) ? 0.85 : 1.0;
      std::vector<int> ring;
      for (const auto& [ang, id] : byangle) {
        const Vec3 p = c0 + fr.along * u + fr.lateral * (r * shrink * std::cos(ang)) +
                       fr.normal * (0.85 * r * shrink * std::sin(ang));
        ring.push_back(static_cast<int>(mb.verts.size()));
        mb.verts.push_back(p);
        mb.finger.push_back(f);
        mb.u.push_back(u);
        mb.is_loop.push_back(0);
      }
      const Vec3 axis_pt = c0 + fr.along * u;
      for (int k = 0; k < rn; ++k) {
        const int a = prev[k], b = prev[(k + 1) % rn], c = ring[(k + 1) % rn], d = ring[k];
        const Vec3 mid = 0.25 * (mb.verts[a] + mb.verts[b] + mb.verts[c] + mb.verts[d]);
        Vec3 out = mid - axis_pt;
        out -= out.dot(fr.along) * fr.along;
        mb.faces.push_back(oriented(mb.verts, a, b, c, out));
        mb.faces.push_back(oriented(mb.verts, a, c, d, out));
      }
      prev = ring;
    }
    const int apex = static_cast<int>(mb.verts.size());
    mb.verts.push_back(c0 + fr.along * total);
    mb.finger.push_back(f);
    mb.u.push_back(total);
    mb.is_loop.push_back(0);
    for (int k = 0; k < rn; ++k)
      mb.faces.push_back(oriented(mb.verts, prev[k], prev[(k + 1) % rn], apex, fr.along));
  }
  return mb;
}

}  // namespace

std::uint64_t HandRig::hash() const {
  std::uint64_t h = fnv1a(template_vertices.data(), sizeof(double) * template_vertices.size());
  h = fnv1a(topology.faces.data(), sizeof(Face) * topology.faces.size(), h);
  h = fnv1a(skinning_weights.data(), sizeof(double) * skinning_weights.size(), h);
  return h;
}

HandRig build_template(const RigConfig& config) {
  if (config.target_vertices < 300 || config.target_vertices > 1000)
    throw Error(ErrorKind::Config, "rig vertex count must be in [300, 1000], got " +
                                       std::to_string(config.target_vertices));
  if (!(config.palm_blend_mm > 0.0)) throw Error(ErrorKind::Config, "palm_blend_mm must be positive");
  int best_sub = 1, best_rows = 0, best_rings = 1;
  long best_diff = std::numeric_limits<long>::max();
  for (int sub = 1; sub <= 2; ++sub)
    for (int rings = 1; rings <= 5; ++rings)
      for (int rows = 0; rows <= 6; ++rows) {
        const long n = static_cast<long>(build_mesh(config, sub, rows, rings).verts.size());
        const long diff = std::abs(n - config.target_vertices);
        if (diff < best_diff) {
          best_diff = diff;
          best_sub = sub;
          best_rows = rows;
          best_rings = rings;
        }
      }
  MeshBuild mb = build_mesh(config, best_sub, best_rows, best_rings);
  const int n = static_cast<int>(mb.verts.size());

  HandRig rig;
  rig.config = config;
  rig.limits = config.limits;
  rig.template_vertices.resize(n, 3);
  for (int i = 0; i < n; ++i) rig.template_vertices.row(i) = mb.verts[i].transpose();
  rig.topology = build_topology(mb.faces, n);
  rig.vertex_finger = mb.finger;
  for (int i = 0; i < n; ++i)
    if (mb.is_loop[i]) rig.vertex_finger[i] = -1;

  rig.rest_joints.resize(kNumJoints, 3);
  for (int j = 0; j < kNumJoints; ++j) rig.rest_joints.row(j) = mb.joints[j].transpose();
  rig.parent[0] = -1;
  rig.flex_axis[0] = Vec3(-1, 0, 0);
  rig.abd_axis[0] = Vec3(0, 0, 1);
  rig.twist_axis[0] = Vec3(0, 1, 0);
  for (int f = 0; f < kNumFingers; ++f) {
    for (int k = 0; k < 4; ++k) {
      const int j = finger_joint(f, k);
      rig.parent[j] = k == 0 ? 0 : j - 1;
      rig.flex_axis[j] = -mb.frames[f].lateral;
      rig.abd_axis[j] = mb.frames[f].normal;
      rig.twist_axis[j] = mb.frames[f].along;
    }
  }

  rig.skinning_weights = Mat::Zero(n, kNumJoints);
  const double h = mb.blend;
  auto nearest_base = [&](const Vec3& x) {
    int finger = 0;
    double best = std::numeric_limits<double>::infinity();
    for (int g = 0; g < kNumFingers; ++g) {
      const double d = (x - mb.joints[finger_joint(g, 0)]).norm();
      if (d < best) {
        best = d;
        finger = g;
      }
    }
    return finger;
  };
  std::array<std::vector<Vec3>, kNumFingers> loops;
  for (int i = 0; i < n; ++i)
    if (mb.is_loop[i]) loops[nearest_base(mb.verts[i])].push_back(mb.verts[i]);
  for (int i = 0; i < n; ++i) {
    const int f = mb.is_loop[i] ? -2 : mb.finger[i];
    if (f == -1) {
      // Loop vertices carry half of the base bone; fade that out across the
      // palm so short palm edges next to a loop are not torn apart.
      double total = 0.0;
      for (int g = 0; g < kNumFingers; ++g) {
        double d = std::numeric_limits<double>::infinity();
        for (const Vec3& q : loops[g]) d = std::min(d, (mb.verts[i] - q).norm());
        const double w = 0.5 * (1.0 - smoothstep(d / config.palm_blend_mm));
        rig.skinning_weights(i, finger_joint(g, 0)) = w;
        total += w;
      }
      if (total > 1.0) {
        rig.skinning_weights.row(i) /= total;
        total = 1.0;
      }
      rig.skinning_weights(i, 0) = 1.0 - total;
      continue;
    }
    int finger = f;
    if (f == -2) finger = nearest_base(mb.verts[i]);
    const double u = mb.u[i];
    const auto& b = mb.boundaries[finger];
    const double s0 = smoothstep((u - b[0] + h) / (2 * h));
    const double s1 = smoothstep((u - b[1] + h) / (2 * h));
    const double s2 = smoothstep((u - b[2] + h) / (2 * h));
    rig.skinning_weights(i, 0) += 1.0 - s0;
    rig.skinning_weights(i, finger_joint(finger, 0)) += s0 - s1;
    rig.skinning_weights(i, finger_joint(finger, 1)) += s1 - s2;
    rig.skinning_weights(i, finger_joint(finger, 2)) += s2;
  }
  if (!rig.topology.connected()) throw Error(ErrorKind::Topology, "template mesh is not connected");
  return rig;
}

PoseResult pose_hand_full(const HandRig& rig, const PoseSample& pose, bool validate) {
  if (validate) {
    for (int d = 0; d < kNumDofs; ++d)
      if (pose.angles[d] < rig.limits[d].lo - 1e-12 || pose.angles[d] > rig.limits[d].hi + 1e-12)
        throw Error(ErrorKind::Pose, "dof " + std::to_string(d) + " angle " + std::to_string(pose.angles[d]) +
                                         " outside [" + std::to_string(rig.limits[d].lo) + ", " +
                                         std::to_string(rig.limits[d].hi) + "]");
    if (!(pose.scale > 0.0)) throw Error(ErrorKind::Pose, "scale must be positive");
  }
  // Affine bone transforms in the rest frame: x -> R x + t.
  std::array<Mat3, kNumJoints> rot;
  std::array<Vec3, kNumJoints> trans;
  auto local = [&](int j) -> Mat3 {
    if (j == 0) {
      return axis_angle(rig.abd_axis[0], pose.angles[1]) * axis_angle(rig.flex_axis[0], pose.angles[0]) *
             axis_angle(rig.twist_axis[0], pose.angles[2]);
    }
    const int f = (j - 1) / 4, k = (j - 1) % 4;
    const int o = 3 + 4 * f;
    switch (k) {
      case 0:
        return axis_angle(rig.abd_axis[j], pose.angles[o + 1]) * axis_angle(rig.flex_axis[j], pose.angles[o + 0]);
      case 1: return axis_angle(rig.flex_axis[j], pose.angles[o + 2]);
      case 2: return axis_angle(rig.flex_axis[j], pose.angles[o + 3]);
      default: return Mat3::Identity();
    }
  };
  for (int j = 0; j < kNumJoints; ++j) {
    const Vec3 p = rig.rest_joints.row(j).transpose();
    const Mat3 r = local(j);
    // rotation about pivot p: x -> r (x - p) + p, then parent's transform
    const Mat3 pr = j == 0 ? Mat3::Identity() : rot[rig.parent[j]];
    const Vec3 pt = j == 0 ? Vec3::Zero() : trans[rig.parent[j]];
    rot[j] = pr * r;
    trans[j] = pr * (p - r * p) + pt;
  }
  const int n = rig.vertex_count();
  PoseResult out;
  out.vertices.resize(n, 3);
  const Mat3 gr = pose.scale * pose.global_rotation;
  for (int i = 0; i < n; ++i) {
    const Vec3 x = rig.template_vertices.row(i).transpose();
    Vec3 y = Vec3::Zero();
    for (int j = 0; j < kNumJoints; ++j) {
      const double w = rig.skinning_weights(i, j);
      if (w != 0.0) y += w * (rot[j] * x + trans[j]);
    }
    out.vertices.row(i) = (gr * y + pose.global_translation).transpose();
  }
  out.joints.resize(kNumJoints, 3);
  for (int j = 0; j < kNumJoints; ++j) {
    const Vec3 p = rig.rest_joints.row(j).transpose();
    const int owner = j == 0 ? 0 : rig.parent[j];
    const Vec3 y = rot[owner] * p + trans[owner];
    out.joints.row(j) = (gr * y + pose.global_translation).transpose();
  }
  return out;
}

Mat pose_hand(const HandRig& rig, const PoseSample& pose, bool validate) {
  return pose_hand_full(rig, pose, validate).vertices;
}

Mat3 uniform_rotation(Rng& rng) {
  Eigen::Quaterniond q(standard_normal(rng), standard_normal(rng), standard_normal(rng), standard_normal(rng));
  q.normalize();
  return q.toRotationMatrix();
}

PoseSample sample_pose(Rng& rng, const HandRig& rig) {
  PoseSample p;
  for (int d = 0; d < kNumDofs; ++d)
    p.angles[d] = rig.limits[d].lo + (rig.limits[d].hi - rig.limits[d].lo) * uniform01(rng);
  p.global_rotation = uniform_rotation(rng);
  return p;
}

namespace {

template <typename Fn>
void rasterize(const Mat& vertices, const MeshTopology& topology, const Camera& camera, Fn&& write) {
  const int n = static_cast<int>(vertices.rows());
  std::vector<Vec3> cam(n);
  for (int i = 0; i < n; ++i) cam[i] = camera.to_camera(vertices.row(i).transpose());
  for (const auto& f : topology.faces) {
    const Vec3& a = cam[f[0]];
    const Vec3& b = cam[f[1]];
    const Vec3& c = cam[f[2]];
    if (a.z() <= 1.0 || b.z() <= 1.0 || c.z() <= 1.0) continue;
    const double ax = camera.focal * a.x() / a.z() + camera.cx, ay = camera.focal * a.y() / a.z() + camera.cy;
    const double bx = camera.focal * b.x() / b.z() + camera.cx, by = camera.focal * b.y() / b.z() + camera.cy;
    const double cxp = camera.focal * c.x() / c.z() + camera.cx, cyp = camera.focal * c.y() / c.z() + camera.cy;
    const double area = (bx - ax) * (cyp - ay) - (by - ay) * (cxp - ax);
    if (std::abs(area) < 1e-12) continue;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min({ax, bx, cxp}))));
    const int x1 = std::min(camera.width - 1, static_cast<int>(std::ceil(std::max({ax, bx, cxp}))));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min({ay, by, cyp}))));
    const int y1 = std::min(camera.height - 1, static_cast<int>(std::ceil(std::max({ay, by, cyp}))));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        const double w0 = ((bx - px) * (cyp - py) - (by - py) * (cxp - px)) / area;
        const double w1 = ((cxp - px) * (ay - py) - (cyp - py) * (ax - px)) / area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double inv_z = w0 / a.z() + w1 / b.z() + w2 / c.z();
        write(y, x, inv_z);
      }
  }
}

void check_visible(const Mat& vertices, const Camera& camera) {
  int inside = 0;
  for (Eigen::Index i = 0; i < vertices.rows(); ++i) {
    const Vec3 p = camera.to_camera(vertices.row(i).transpose());
    if (p.z() <= 1.0) continue;
    const double u = camera.focal * p.x() / p.z() + camera.cx, v = camera.focal * p.y() / p.z() + camera.cy;
    if (u >= 0 && u < camera.width && v >= 0 && v < camera.height) ++inside;
  }
  if (2 * inside < vertices.rows())
    throw Error(ErrorKind::Visibility, std::to_string(inside) + " of " + std::to_string(vertices.rows()) +
                                           " vertices visible (need >= 50%)");
}

}  // namespace

Image render(const Mat& vertices, const MeshTopology& topology, const Camera& camera, const RenderConfig& cfg) {
  camera.validate();
  check_visible(vertices, camera);
  Image img;
  img.height = camera.height;
  img.width = camera.width;
  img.channels = 2;
  img.data.assign(static_cast<std::size_t>(img.height) * img.width * 2, 0.0f);
  std::vector<double> best(static_cast<std::size_t>(img.height) * img.width, 0.0);
  const double inv_near = 1.0 / cfg.near_mm, inv_far = 1.0 / cfg.far_mm;
  rasterize(vertices, topology, camera, [&](int y, int x, double inv_z) {
    const std::size_t p = static_cast<std::size_t>(y) * img.width + x;
    if (inv_z <= best[p]) return;
    best[p] = inv_z;
    img.at(y, x, 0) = 1.0f;
    img.at(y, x, 1) = static_cast<float>(std::clamp((inv_z - inv_far) / (inv_near - inv_far), 0.0, 1.0));
  });
  return img;
}

std::vector<double> depth_buffer(const Mat& vertices, const MeshTopology& topology, const Camera& camera) {
  std::vector<double> best(static_cast<std::size_t>(camera.height) * camera.width, 0.0);
  rasterize(vertices, topology, camera, [&](int y, int x, double inv_z) {
    const std::size_t p = static_cast<std::size_t>(y) * camera.width + x;
    best[p] = std::max(best[p], inv_z);
  });
  std::vector<double> depth(best.size());
  for (std::size_t i = 0; i < best.size(); ++i)
    depth[i] = best[i] > 0 ? 1.0 / best[i] : std::numeric_limits<double>::infinity();
  return depth;
}

Mat project(const Mat& points3d, const Camera& camera) {
  if (points3d.cols() != 3) throw Error(ErrorKind::Input, "project expects N x 3 points");
  Mat out(points3d.rows(), 2);
  for (Eigen::Index i = 0; i < points3d.rows(); ++i) {
    const Vec3 p = camera.to_camera(points3d.row(i).transpose());
    if (p.z() <= 1.0)
      throw Error(ErrorKind::Projection, "point " + std::to_string(i) + " at depth " + std::to_string(p.z()) +
                                             " mm is not in front of the camera");
    out(i, 0) = camera.focal * p.x() / p.z() + camera.cx;
    out(i, 1) = camera.focal * p.y() / p.z() + camera.cy;
  }
  return out;
}

Eigen::Matrix<double, 2, 3> project_jacobian(const Vec3& point, const Camera& camera) {
  const Vec3 p = camera.to_camera(point);
  if (p.z() <= 1.0) throw Error(ErrorKind::Projection, "point is not in front of the camera");
  Eigen::Matrix<double, 2, 3> dp;
  const double iz = 1.0 / p.z();
  dp << camera.focal * iz, 0, -camera.focal * p.x() * iz * iz,
        0, camera.focal * iz, -camera.focal * p.y() * iz * iz;
  return dp * camera.rotation;
}

namespace {

// Lawson-Hanson active set NNLS: min ||A x - b|| s.t. x >= 0.
Vec nnls(const Mat& a, const Vec& b, int max_iter = 500) {
  const Eigen::Index n = a.cols();
  Vec x = Vec::Zero(n);
  std::vector<char> passive(n, 0);
  const Mat at = a.transpose();
  for (int outer = 0; outer < max_iter; ++outer) {
    Vec w = at * (b - a * x);
    Eigen::Index j = -1;
    double best = 1e-10 * (1.0 + b.norm());
    for (Eigen::Index i = 0; i < n; ++i)
      if (!passive[i] && w[i] > best) {
        best = w[i];
        j = i;
      }
    if (j < 0) break;
    passive[j] = 1;
    for (int inner = 0; inner < max_iter; ++inner) {
      std::vector<Eigen::Index> idx;
      for (Eigen::Index i = 0; i < n; ++i)
        if (passive[i]) idx.push_back(i);
      Mat ap(a.rows(), static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) ap.col(static_cast<Eigen::Index>(k)) = a.col(idx[k]);
      const Vec z = ap.colPivHouseholderQr().solve(b);
      bool feasible = true;
      for (Eigen::Index k = 0; k < z.size(); ++k)
        if (z[k] <= 0) feasible = false;
      if (feasible) {
        x.setZero();
        for (std::size_t k = 0; k < idx.size(); ++k) x[idx[k]] = z[static_cast<Eigen::Index>(k)];
        break;
      }
      double alpha = 1.0;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const double zk = z[static_cast<Eigen::Index>(k)];
        if (zk <= 0) alpha = std::min(alpha, x[idx[k]] / (x[idx[k]] - zk));
      }
      for (std::size_t k = 0; k < idx.size(); ++k)
        x[idx[k]] += alpha * (z[static_cast<Eigen::Index>(k)] - x[idx[k]]);
      for (std::size_t k = 0; k < idx.size(); ++k)
        if (x[idx[k]] <= 1e-14) {
          x[idx[k]] = 0;
          passive[idx[k]] = 0;
        }
    }
  }
  return x;
}

}  // namespace

JointRegressor fit_joint_regressor(const std::vector<Mat>& meshes, const std::vector<Mat>& targets,
                                   const Mat& rest_vertices, const Mat& rest_targets, int max_nonzeros,
                                   int candidates) {
  if (meshes.empty() || meshes.size() != targets.size())
    throw Error(ErrorKind::Input, "regressor fit needs matching mesh/target lists");
  const Eigen::Index nv = rest_vertices.rows(), nj = rest_targets.rows();
  const Eigen::Index m = static_cast<Eigen::Index>(meshes.size());
  candidates = static_cast<int>(std::min<Eigen::Index>(candidates, nv));
  std::vector<Eigen::Triplet<double>> trip;
  for (Eigen::Index j = 0; j < nj; ++j) {
    std::vector<std::pair<double, int>> dist;
    for (Eigen::Index v = 0; v < nv; ++v)
      dist.emplace_back((rest_vertices.row(v) - rest_targets.row(j)).squaredNorm(), static_cast<int>(v));
    std::partial_sort(dist.begin(), dist.begin() + candidates, dist.end());
    std::vector<int> cand;
    for (int k = 0; k < candidates; ++k) cand.push_back(dist[k].second);

    const double lambda = 1e3;
    auto solve = [&](const std::vector<int>& cols) {
      Mat a(3 * m + 1, static_cast<Eigen::Index>(cols.size()));
      Vec b(3 * m + 1);
      for (Eigen::Index i = 0; i < m; ++i)
        for (int c = 0; c < 3; ++c) {
          for (std::size_t k = 0; k < cols.size(); ++k)
            a(3 * i + c, static_cast<Eigen::Index>(k)) = meshes[i](cols[k], c);
          b[3 * i + c] = targets[i](j, c);
        }
      a.row(3 * m).setConstant(lambda);
      b[3 * m] = lambda;
      return nnls(a, b);
    };
    Vec w = solve(cand);
    std::vector<std::pair<double, int>> ranked;
    for (int k = 0; k < candidates; ++k)
      if (w[k] > 0) ranked.emplace_back(-w[k], cand[k]);
    std::sort(ranked.begin(), ranked.end());
    if (static_cast<int>(ranked.size()) > max_nonzeros) {
      ranked.resize(max_nonzeros);
      std::vector<int> cols;
      for (const auto& r : ranked) cols.push_back(r.second);
      std::sort(cols.begin(), cols.end());
      const Vec w2 = solve(cols);
      ranked.clear();
      for (std::size_t k = 0; k < cols.size(); ++k)
        if (w2[static_cast<Eigen::Index>(k)] > 0) ranked.emplace_back(-w2[static_cast<Eigen::Index>(k)], cols[k]);
    }
    double total = 0;
    for (const auto& r : ranked) total -= r.first;
    if (total <= 0) throw Error(ErrorKind::Calibration, "joint " + std::to_string(j) + " got no weights");
    for (const auto& r : ranked) trip.emplace_back(static_cast<int>(j), r.second, -r.first / total);
  }
  JointRegressor reg;
  reg.weights.resize(nj, nv);
  reg.weights.setFromTriplets(trip.begin(), trip.end());
  return reg;
}

RegressorFit derive_joint_regressor(const HandRig& rig, int n_poses, Rng& rng, double max_heldout_error_mm) {
  if (n_poses < 100) throw Error(ErrorKind::Input, "derive_joint_regressor needs n_poses >= 100");
  std::vector<Mat> meshes, joints;
  for (int i = 0; i < n_poses; ++i) {
    PoseSample p = sample_pose(rng, rig);
    p.global_rotation.setIdentity();
    PoseResult r = pose_hand_full(rig, p);
    meshes.push_back(std::move(r.vertices));
    joints.push_back(std::move(r.joints));
  }
  RegressorFit fit;
  fit.regressor = fit_joint_regressor(meshes, joints, rig.template_vertices, rig.rest_joints);
  const int heldout = 100;
  double err = 0;
  for (int i = 0; i < heldout; ++i) {
    PoseResult r = pose_hand_full(rig, sample_pose(rng, rig));
    const Mat pred = regress_joints(r.vertices, fit.regressor);
    err += (pred - r.joints).rowwise().norm().mean();
  }
  fit.heldout_mean_error_mm = err / heldout;
  if (fit.heldout_mean_error_mm >= max_heldout_error_mm)
    throw Error(ErrorKind::Calibration, "held-out joint error " + std::to_string(fit.heldout_mean_error_mm) +
                                            " mm exceeds " + std::to_string(max_heldout_error_mm) + " mm");
  return fit;
}

HandSample generate_sample(const DatasetConfig& config, const HandRig& rig, const JointRegressor& regressor,
                           std::uint64_t seed, int index) {
  Rng rng = make_rng(seed, static_cast<std::uint64_t>(index));
  const Camera& cam = config.camera;
  for (int attempt = 0;; ++attempt) {
    HandSample s;
    s.camera = cam;
    s.pose = sample_pose(rng, rig);
    const Mat centred = pose_hand(rig, s.pose);
    const Vec3 centroid = centred.colwise().mean().transpose();
    const Vec3 target_cam(config.center_jitter_mm * (2 * uniform01(rng) - 1),
                          config.center_jitter_mm * (2 * uniform01(rng) - 1),
                          config.depth_min_mm + (config.depth_max_mm - config.depth_min_mm) * uniform01(rng));
    const Vec3 target_world = cam.rotation.transpose() * (target_cam - cam.translation);
    s.pose.global_translation = target_world - centroid;
    const bool pose_only = uniform01(rng) < config.pose_only_fraction;
    s.vertices = centred.rowwise() + s.pose.global_translation.transpose();
    try {
      if (!pose_only) s.image = render(s.vertices, rig.topology, cam, config.render);
      else check_visible(s.vertices, cam);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Visibility && attempt < 16) continue;
      throw;
    }
    s.joints3d = regress_joints(s.vertices, regressor);
    s.joints2d = project(s.joints3d, cam);
    const std::vector<double> depth = depth_buffer(s.vertices, rig.topology, cam);
    s.confidence = Vec::Zero(kNumJoints);
    for (int j = 0; j < kNumJoints; ++j) {
      const double u = s.joints2d(j, 0), v = s.joints2d(j, 1);
      if (u < 0 || v < 0 || u >= cam.width || v >= cam.height) continue;
      const double z = cam.to_camera(s.joints3d.row(j).transpose()).z();
      const double front = depth[static_cast<std::size_t>(v) * cam.width + static_cast<std::size_t>(u)];
      s.confidence[j] = (z - front <= config.occlusion_tolerance_mm) ? 1.0 : 0.0;
    }
    return s;
  }
}

DatasetManifest generate_dataset(const std::filesystem::path& dir, int n, std::uint64_t seed,
                                 const SplitRatios& splits, const DatasetConfig& config) {
  if (n < 1) throw Error(ErrorKind::Input, "dataset size must be >= 1");
  const double total = splits.train + splits.val + splits.test;
  if (splits.train < 0 || splits.val < 0 || splits.test < 0 || std::abs(total - 1.0) > 1e-9)
    throw Error(ErrorKind::Config, "split ratios must be non-negative and sum to 1");
  std::error_code ec;
  std::filesystem::create_directories(dir / "records", ec);
  if (ec) throw Error(ErrorKind::Storage, "cannot create " + dir.string() + ": " + ec.message());

  const HandRig rig = build_template(config.rig);
  Rng reg_rng = make_rng(seed, 0xfeedULL);
  const RegressorFit fit = derive_joint_regressor(rig, config.regressor_poses, reg_rng);
  write_regressor(dir / "regressor.bin", fit.regressor);

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.count = n;
  manifest.train = static_cast<int>(std::lround(n * splits.train));
  manifest.val = std::min(n - manifest.train, static_cast<int>(std::lround(n * splits.val)));
  manifest.test = n - manifest.train - manifest.val;
  manifest.rig_hash = hex64(rig.hash());

  std::vector<char> pose_only(n, 0);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    try {
      HandSample s = generate_sample(config, rig, fit.regressor, seed, i);
      pose_only[i] = s.image ? 0 : 1;
#pragma omp critical(handiff_dataset_sink)
      write_sample(record_path(dir, i), s);
    } catch (...) {
#pragma omp critical(handiff_dataset_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  for (int i = 0; i < n; ++i)
    if (pose_only[i]) manifest.pose_only.push_back(i);
  write_manifest(dir / "manifest.json", manifest, config);
  return manifest;
}

std::vector<int> split_indices(const DatasetManifest& manifest, const std::string& split) {
  int begin = 0, count = 0;
  if (split == "train") {
    count = manifest.train;
  } else if (split == "val") {
    begin = manifest.train;
    count = manifest.val;
  } else if (split == "test") {
    begin = manifest.train + manifest.val;
    count = manifest.test;
  } else {
    throw Error(ErrorKind::Usage, "unknown split '" + split + "' (train|val|test)");
  }
  std::vector<int> out(count);
  std::iota(out.begin(), out.end(), begin);
  return out;
}

}  // namespace handiff
