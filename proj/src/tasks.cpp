#include "handiff/tasks.hpp"

#include <Eigen/Geometry>

#include <cmath>

namespace handiff {

const char* to_string(GuidanceOperator op) {
  switch (op) {
    case GuidanceOperator::Identity: return "identity";
    case GuidanceOperator::JointRegression: return "joint_regression";
    case GuidanceOperator::VertexMask: return "vertex_mask";
    case GuidanceOperator::MaskedJointRegression: return "masked_joint_regression";
    case GuidanceOperator::ProjectedJoints: return "projected_joints";
  }
  return "unknown";
}

GuidanceOperator guidance_operator_from_string(const std::string& name) {
  for (auto op : {GuidanceOperator::Identity, GuidanceOperator::JointRegression, GuidanceOperator::VertexMask,
                  GuidanceOperator::MaskedJointRegression, GuidanceOperator::ProjectedJoints})
    if (name == to_string(op)) return op;
  throw Error(ErrorKind::Config, "unknown guidance operator '" + name + "'");
}

namespace {

int expected_rows(GuidanceOperator op, int v) {
  return (op == GuidanceOperator::Identity || op == GuidanceOperator::VertexMask) ? v : kNumJoints;
}

bool masked(GuidanceOperator op) {
  return op == GuidanceOperator::VertexMask || op == GuidanceOperator::MaskedJointRegression ||
         op == GuidanceOperator::ProjectedJoints;
}

void zero_unmasked(Mat& m, const std::vector<char>& given) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    if (!given[i]) m.row(i).setZero();
}

}  // namespace

void GuidanceSpec::validate(int vertex_count) const {
  const int rows = expected_rows(op, vertex_count);
  const int cols = op == GuidanceOperator::ProjectedJoints ? 2 : 3;
  if (target.rows() != rows || target.cols() != cols)
    throw Error(ErrorKind::Input, std::string("guidance target has the wrong shape for operator ") + to_string(op));
  if (masked(op) && static_cast<int>(given.size()) != rows)
    throw Error(ErrorKind::Input, "guidance mask length does not match the operator output");
  if (!std::isfinite(scale) || scale < 0) throw Error(ErrorKind::Input, "guidance scale must be finite and >= 0");
  if (!target.allFinite()) throw Error(ErrorKind::Input, "guidance target must be finite");
  if (op == GuidanceOperator::ProjectedJoints) camera.validate();
}

Mat apply_operator(const GuidanceSpec& spec, const Mat& mesh_mm, const JointRegressor& regressor) {
  Mat out;
  switch (spec.op) {
    case GuidanceOperator::Identity:
      return mesh_mm;
    case GuidanceOperator::VertexMask:
      out = mesh_mm;
      break;
    case GuidanceOperator::JointRegression:
      return regress_joints(mesh_mm, regressor);
    case GuidanceOperator::MaskedJointRegression:
      out = regress_joints(mesh_mm, regressor);
      break;
    case GuidanceOperator::ProjectedJoints:
      out = project(regress_joints(mesh_mm, regressor).rowwise() + spec.root.transpose(), spec.camera);
      break;
  }
  zero_unmasked(out, spec.given);
  return out;
}

double guidance_objective(const GuidanceSpec& spec, const JointRegressor& regressor, double coord_scale,
                          const Mat& x0, Mat* grad_x0) {
  const Mat mesh = x0 * coord_scale;
  Mat r = apply_operator(spec, mesh, regressor) - spec.target;
  if (masked(spec.op)) zero_unmasked(r, spec.given);
  double value = 0.0;
  Mat g;
  if (spec.norm == GuidanceNorm::L2) {
    value = r.norm();
    g = value > 0 ? Mat(r / value) : Mat::Zero(r.rows(), r.cols());
  } else {
    value = r.cwiseAbs().sum();
    g = r.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
  }
  if (!grad_x0) return value;
  Mat gm;
  switch (spec.op) {
    case GuidanceOperator::Identity:
    case GuidanceOperator::VertexMask:
      gm = g;
      break;
    case GuidanceOperator::JointRegression:
    case GuidanceOperator::MaskedJointRegression:
      gm = regressor.weights.transpose() * g;
      break;
    case GuidanceOperator::ProjectedJoints: {
      const Mat joints = regress_joints(mesh, regressor);
      Mat gj(kNumJoints, 3);
      for (int j = 0; j < kNumJoints; ++j) {
        const Vec3 p = joints.row(j).transpose() + spec.root;
        gj.row(j) = (project_jacobian(p, spec.camera).transpose() * g.row(j).transpose()).transpose();
      }
      gm = regressor.weights.transpose() * gj;
      break;
    }
  }
  *grad_x0 = gm * coord_scale;
  return value;
}

Mat guidance_gradient(const Mat& x_t, int t, const ConditionTokens& tokens, const GuidanceSpec& spec,
                      const HandModel& model, double* objective) {
  spec.validate(model.vertex_count());
  BoundDenoiser f(model, tokens);
  Mat grad;
  double value = 0.0;
  f.predict_vjp(
      x_t, t,
      [&](const Mat& x0) {
        Mat g;
        value = guidance_objective(spec, model.regressor, model.config.coord_scale, x0, &g);
        return g;
      },
      &grad);
  if (objective) *objective = value;
  return grad;
}

std::vector<Mat> HypothesisSet::meshes() const {
  std::vector<Mat> out;
  out.reserve(hypotheses.size());
  for (const auto& h : hypotheses) out.push_back(h.vertices);
  return out;
}

namespace {

HypothesisSet run(const HandModel& model, const ConditionTokens& tokens, const SamplerConfig& sampler,
                  const GuidanceSpec* spec, const StepHook* hook, const std::string& task) {
  BoundDenoiser f(model, tokens);
  GuidanceObjective objective;
  if (spec) {
    spec->validate(model.vertex_count());
    objective = [spec, &model](const Mat& x0, Mat* g) {
      return guidance_objective(*spec, model.regressor, model.config.coord_scale, x0, g);
    };
  }
  SampleOutput out = sample(f, model.schedule, sampler, spec ? &objective : nullptr, hook);
  HypothesisSet set;
  set.task = task;
  for (std::size_t i = 0; i < out.meshes.size(); ++i) {
    Hypothesis h;
    h.vertices = model.to_mm(out.meshes[i]);
    h.stream = out.traces[i].stream;
    h.residual_trace = std::move(out.traces[i].objective);
    set.hypotheses.push_back(std::move(h));
  }
  return set;
}

int count_given(const std::vector<char>& given) {
  int n = 0;
  for (char g : given) n += g ? 1 : 0;
  return n;
}

}  // namespace

HypothesisSet generate(const HandModel& model, const SamplerConfig& sampler) {
  return run(model, model.empty_tokens(), sampler, nullptr, nullptr, "generate");
}

double given_part_error(const Mat& mesh, const Mat& target, const std::vector<char>& given) {
  if (mesh.rows() != target.rows() || static_cast<Eigen::Index>(given.size()) != mesh.rows())
    throw Error(ErrorKind::Input, "given-part error: shape mismatch");
  double total = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < mesh.rows(); ++i)
    if (given[i]) {
      total += (mesh.row(i) - target.row(i)).norm();
      ++n;
    }
  return n ? total / n : 0.0;
}

HypothesisSet inpaint_mesh(const HandModel& model, const Mat& partial, const std::vector<char>& given,
                           const SamplerConfig& sampler, bool hard_replace) {
  const int v = model.vertex_count();
  if (partial.rows() != v || partial.cols() != 3 || static_cast<int>(given.size()) != v)
    throw Error(ErrorKind::Input, "partial mesh and mask must cover every template vertex");
  const int n_given = count_given(given);
  if (n_given == 0 || n_given == v)
    throw Error(ErrorKind::Task, "mesh inpainting needs at least one given and one missing vertex");
  GuidanceSpec spec;
  spec.op = GuidanceOperator::VertexMask;
  spec.target = partial;
  zero_unmasked(spec.target, given);
  spec.given = given;
  spec.scale = sampler.scale;

  const Mat target_state = model.to_state(partial);
  StepHook hook = [&](Mat& x, int t_prev, Rng& rng) {
    Mat noisy = t_prev > 0 ? q_sample(target_state, t_prev, randn(rng, v, 3), model.schedule) : target_state;
    for (int i = 0; i < v; ++i)
      if (given[i]) x.row(i) = noisy.row(i);
  };
  HypothesisSet set = run(model, model.empty_tokens(), sampler, &spec, hard_replace ? &hook : nullptr,
                          "inpaint-mesh");
  set.residual_units = "mm";
  for (auto& h : set.hypotheses) h.residual = given_part_error(h.vertices, partial, given);
  return set;
}

HypothesisSet inpaint_skeleton(const HandModel& model, const Mat& partial, const std::vector<char>& given,
                               const SamplerConfig& sampler) {
  if (partial.rows() != kNumJoints || partial.cols() != 3 || static_cast<int>(given.size()) != kNumJoints)
    throw Error(ErrorKind::Input, "partial skeleton must be 21 x 3 with 21 flags");
  if (count_given(given) == 0) throw Error(ErrorKind::Task, "skeleton inpainting needs at least one given joint");
  ConditionBundle bundle;
  Skeleton3D s{partial, Vec::Zero(kNumJoints)};
  for (int j = 0; j < kNumJoints; ++j) {
    s.valid(j) = given[j] ? 1.0 : 0.0;
    if (!given[j]) s.joints.row(j).setZero();
  }
  bundle.skel3d = s;
  GuidanceSpec spec;
  spec.op = GuidanceOperator::MaskedJointRegression;
  spec.target = s.joints;
  spec.given = given;
  spec.scale = sampler.scale;
  HypothesisSet set = run(model, model.tokens(bundle), sampler, &spec, nullptr, "inpaint-skel");
  set.residual_units = "mm";
  for (auto& h : set.hypotheses)
    h.residual = given_part_error(regress_joints(h.vertices, model.regressor), s.joints, given);
  return set;
}

HypothesisSet reconstruct(const HandModel& model, const Image& image, const SamplerConfig& sampler) {
  ConditionBundle bundle;
  bundle.image = image;
  bundle.patch_mask.assign(model.config.encoder.patches(), 0);
  return run(model, model.tokens(bundle), sampler, nullptr, nullptr, "reconstruct");
}

double reprojection_error(const Mat& mesh_mm, const JointRegressor& regressor, const Fit2dInput& input) {
  const Mat joints = regress_joints(mesh_mm, regressor).rowwise() + input.root.transpose();
  const Mat uv = project(joints, input.camera);
  double total = 0.0;
  int n = 0;
  for (int j = 0; j < kNumJoints; ++j)
    if (input.confidence(j) >= input.confidence_threshold) {
      total += (uv.row(j) - input.joints2d.row(j)).norm();
      ++n;
    }
  return n ? total / n : 0.0;
}

namespace {

std::vector<char> confident_mask(const Fit2dInput& input) {
  if (input.joints2d.rows() != kNumJoints || input.joints2d.cols() != 2 || input.confidence.size() != kNumJoints)
    throw Error(ErrorKind::Input, "2D joints must be 21 x 2 with 21 confidences");
  std::vector<char> given(kNumJoints, 0);
  int n = 0;
  for (int j = 0; j < kNumJoints; ++j)
    if (input.confidence(j) >= input.confidence_threshold) {
      given[j] = 1;
      ++n;
    }
  if (n < 4) throw Error(ErrorKind::Task, "2D fitting needs at least 4 confident joints, got " + std::to_string(n));
  return given;
}

}  // namespace

HypothesisSet fit2d(const HandModel& model, const Fit2dInput& input, const SamplerConfig& sampler) {
  const std::vector<char> given = confident_mask(input);
  input.camera.validate();
  ConditionBundle bundle;
  if (input.image) {
    bundle.image = input.image;
    bundle.patch_mask.assign(model.config.encoder.patches(), 0);
  }
  bundle.skel2d = Skeleton2D{input.joints2d, input.confidence};
  GuidanceSpec spec;
  spec.op = GuidanceOperator::ProjectedJoints;
  spec.target = input.joints2d;
  zero_unmasked(spec.target, given);
  spec.given = given;
  spec.camera = input.camera;
  spec.root = input.root;
  spec.scale = sampler.scale;
  HypothesisSet set = run(model, model.tokens(bundle), sampler, &spec, nullptr, "fit2d");
  set.residual_units = "px";
  for (auto& h : set.hypotheses) h.residual = reprojection_error(h.vertices, model.regressor, input);
  return set;
}

BaselineFit fit2d_baseline(const HandRig& rig, const JointRegressor& regressor, const Fit2dInput& input,
                           int iterations) {
  const std::vector<char> given = confident_mask(input);
  constexpr int kParams = kNumDofs + 3;
  Eigen::Matrix<double, kParams, 1> theta = Eigen::Matrix<double, kParams, 1>::Zero();
  for (int d = 0; d < kNumDofs; ++d) {
    const DofLimit& l = rig.limits[d];
    theta(d) = std::clamp(0.0, l.lo, l.hi);
  }
  auto posed = [&](const Eigen::Matrix<double, kParams, 1>& th) {
    PoseSample pose;
    for (int d = 0; d < kNumDofs; ++d) pose.angles[d] = th(d);
    const Vec3 rv = th.tail<3>();
    const double angle = rv.norm();
    pose.global_rotation = angle > 0 ? Mat3(Eigen::AngleAxisd(angle, rv / angle)) : Mat3::Identity();
    Mat v = pose_hand(rig, pose, false);
    const Mat j = regress_joints(v, regressor);
    v = v.rowwise() - j.row(0);
    return std::make_pair(pose, v);
  };
  auto loss = [&](const Eigen::Matrix<double, kParams, 1>& th) {
    const Mat v = posed(th).second;
    const Mat uv = project(regress_joints(v, regressor).rowwise() + input.root.transpose(), input.camera);
    double s = 0.0;
    for (int j = 0; j < kNumJoints; ++j)
      if (given[j]) s += (uv.row(j) - input.joints2d.row(j)).squaredNorm();
    return s;
  };
  Eigen::Matrix<double, kParams, 1> m = decltype(m)::Zero(), v2 = decltype(v2)::Zero();
  const double lr = 0.03, h = 1e-4;
  int it = 0;
  for (; it < iterations; ++it) {
    Eigen::Matrix<double, kParams, 1> g;
    for (int k = 0; k < kParams; ++k) {
      auto a = theta, b = theta;
      a(k) += h;
      b(k) -= h;
      g(k) = (loss(a) - loss(b)) / (2 * h);
    }
    m = 0.9 * m + 0.1 * g;
    v2 = 0.999 * v2 + 0.001 * g.cwiseProduct(g);
    const double c1 = 1 - std::pow(0.9, it + 1), c2 = 1 - std::pow(0.999, it + 1);
    theta -= lr * ((m / c1).array() / ((v2 / c2).array().sqrt() + 1e-8)).matrix();
    for (int d = 0; d < kNumDofs; ++d) theta(d) = std::clamp(theta(d), rig.limits[d].lo, rig.limits[d].hi);
  }
  BaselineFit out;
  auto [pose, verts] = posed(theta);
  out.pose = pose;
  out.vertices = verts;
  out.iterations = it;
  out.residual_px = reprojection_error(verts, regressor, input);
  return out;
}

}  // namespace handiff
