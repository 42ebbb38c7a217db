#include "handiff/tasks.hpp"
#include "test_util.hpp"

using namespace handiff;
using namespace handiff::testing;

namespace {

JointRegressor skinning_regressor(const HandRig& rig) {
  // Row j averages the vertices that joint j's bone owns most.
  std::vector<Eigen::Triplet<double>> t;
  for (int j = 0; j < kNumJoints; ++j) {
    std::vector<int> owned;
    for (int v = 0; v < rig.vertex_count(); ++v) {
      Eigen::Index best;
      rig.skinning_weights.row(v).maxCoeff(&best);
      if (best == j) owned.push_back(v);
    }
    if (owned.empty()) owned.push_back(j);
    for (int v : owned) t.emplace_back(j, v, 1.0 / owned.size());
  }
  JointRegressor r;
  r.weights.resize(kNumJoints, rig.vertex_count());
  r.weights.setFromTriplets(t.begin(), t.end());
  return r;
}

const HandModel& tiny_model() {
  static const HandModel model = [] {
    const HandRig& rig = default_rig();
    ModelConfig c;
    c.denoiser.levels = 3;
    c.denoiser.channels = {8, 12, 16};
    c.denoiser.cheb_order = 3;
    c.denoiser.heads = 2;
    c.denoiser.token_dim = 8;
    c.denoiser.time_dim = 8;
    c.encoder.image_size = 32;
    c.encoder.conv_channels = {4, 4};
    c.encoder.patch_grid = 4;
    c.encoder.mlp_hidden = 16;
    c.encoder.heads = 2;
    c.schedule.steps = 100;
    return make_model(c, rig.topology, rig.template_vertices, skinning_regressor(rig), 3);
  }();
  return model;
}

Camera test_camera() {
  Camera c;
  c.focal = 300;
  return c;
}

GuidanceSpec spec_for(GuidanceOperator op, const HandModel& m, Rng& rng) {
  GuidanceSpec s;
  s.op = op;
  const int v = m.vertex_count();
  const Mat mesh = m.template_vertices + randn(rng, v, 3) * 3.0;
  const Mat joints = regress_joints(mesh, m.regressor);
  switch (op) {
    case GuidanceOperator::Identity:
    case GuidanceOperator::VertexMask:
      s.target = mesh;
      break;
    case GuidanceOperator::JointRegression:
    case GuidanceOperator::MaskedJointRegression:
      s.target = joints;
      break;
    case GuidanceOperator::ProjectedJoints:
      s.camera = test_camera();
      s.root = Vec3(5, -3, 400);
      s.target = project(joints.rowwise() + s.root.transpose(), s.camera);
      break;
  }
  s.target += randn(rng, s.target.rows(), s.target.cols()) * 2.0;
  if (op == GuidanceOperator::VertexMask || op == GuidanceOperator::MaskedJointRegression ||
      op == GuidanceOperator::ProjectedJoints) {
    s.given.assign(s.target.rows(), 0);
    for (std::size_t i = 0; i < s.given.size(); ++i) s.given[i] = (i % 3 != 1);
    for (std::size_t i = 0; i < s.given.size(); ++i)
      if (!s.given[i]) s.target.row(static_cast<Eigen::Index>(i)).setZero();
  }
  return s;
}

const std::vector<GuidanceOperator> kAllOps = {GuidanceOperator::Identity, GuidanceOperator::JointRegression,
                                               GuidanceOperator::VertexMask,
                                               GuidanceOperator::MaskedJointRegression,
                                               GuidanceOperator::ProjectedJoints};

SamplerConfig small_sampler(double scale, int hypotheses = 2) {
  SamplerConfig s;
  s.num_steps = 5;
  s.scale = scale;
  s.hypotheses = hypotheses;
  s.seed = 17;
  return s;
}

}  // namespace

TEST_CASE("operator names round trip") {
  for (GuidanceOperator op : kAllOps) CHECK(guidance_operator_from_string(to_string(op)) == op);
  try {
    guidance_operator_from_string("nope");
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
  }
}

TEST_CASE("apply_operator per operator") {
  const HandModel& m = tiny_model();
  Rng rng(1);
  const Mat mesh = m.template_vertices + randn(rng, m.vertex_count(), 3);
  const Mat joints = regress_joints(mesh, m.regressor);
  for (GuidanceOperator op : kAllOps) {
    CAPTURE(std::string(to_string(op)));
    const GuidanceSpec s = spec_for(op, m, rng);
    const Mat out = apply_operator(s, mesh, m.regressor);
    CHECK(out.rows() == s.target.rows());
    CHECK(out.cols() == s.target.cols());
    for (std::size_t i = 0; i < s.given.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      if (!s.given[i]) {
        CHECK(out.row(r).isZero());
        continue;
      }
      if (op == GuidanceOperator::VertexMask) CHECK(out.row(r) == mesh.row(r));
      if (op == GuidanceOperator::MaskedJointRegression) CHECK(out.row(r).isApprox(joints.row(r)));
      if (op == GuidanceOperator::ProjectedJoints) {
        const Vec3 p = joints.row(r).transpose() + s.root;
        CHECK(out(r, 0) == doctest::Approx(s.camera.focal * p.x() / p.z() + s.camera.cx));
        CHECK(out(r, 1) == doctest::Approx(s.camera.focal * p.y() / p.z() + s.camera.cy));
      }
    }
  }
}

TEST_CASE("guidance objective gradient matches central differences") {
  const HandModel& m = tiny_model();
  Rng rng(2);
  for (GuidanceNorm norm : {GuidanceNorm::L2, GuidanceNorm::L1})
    for (GuidanceOperator op : kAllOps) {
      CAPTURE(std::string(to_string(op)));
      GuidanceSpec s = spec_for(op, m, rng);
      s.norm = norm;
      const Mat x0 = m.to_state(m.template_vertices) + randn(rng, m.vertex_count(), 3) * 0.02;
      Mat g;
      const double value = guidance_objective(s, m.regressor, m.config.coord_scale, x0, &g);
      CHECK(value == doctest::Approx(guidance_objective(s, m.regressor, m.config.coord_scale, x0, nullptr)));
      CHECK(g.rows() == x0.rows());
      const auto f = [&](const Mat& x) { return guidance_objective(s, m.regressor, m.config.coord_scale, x, nullptr); };
      double worst = 0;
      for (int k = 0; k < 30; ++k) {
        // Coordinates that feed the operator: regressor support for joint operators.
        Eigen::Index r = static_cast<Eigen::Index>(uniform01(rng) * x0.rows()) % x0.rows();
        if (op != GuidanceOperator::Identity && op != GuidanceOperator::VertexMask) {
          const int j = k % kNumJoints;
          for (SpMat::InnerIterator it(m.regressor.weights, j); it; ++it) r = it.col();
        }
        const Eigen::Index c = k % 3;
        worst = std::max(worst, relative_error(g(r, c), central_difference(f, x0, r, c, 1e-7), 1e-3));
      }
      CHECK(worst < 1e-4);
    }
}

TEST_CASE("guidance gradient through the denoiser matches central differences") {
  const HandModel& m = tiny_model();
  Rng rng(3);
  const ConditionTokens tokens = m.empty_tokens();
  BoundDenoiser f(m, tokens);
  for (GuidanceOperator op : kAllOps) {
    CAPTURE(std::string(to_string(op)));
    const GuidanceSpec s = spec_for(op, m, rng);
    const Mat x_t = randn(rng, m.vertex_count(), 3);
    const int t = 40;
    double objective = 0;
    const Mat g = guidance_gradient(x_t, t, tokens, s, m, &objective);
    const auto phi = [&](const Mat& x) {
      return guidance_objective(s, m.regressor, m.config.coord_scale, f.predict(x, t), nullptr);
    };
    CHECK(objective == doctest::Approx(phi(x_t)));
    CHECK(g.norm() > 0);
    double worst = 0;
    for (int k = 0; k < 8; ++k) {
      Eigen::Index r, c;
      g.cwiseAbs().maxCoeff(&r, &c);
      if (k > 0) {
        r = static_cast<Eigen::Index>(uniform01(rng) * x_t.rows()) % x_t.rows();
        c = k % 3;
      }
      worst = std::max(worst, relative_error(g(r, c), central_difference(phi, x_t, r, c, 1e-5), 1e-4));
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("guidance spec validation") {
  const HandModel& m = tiny_model();
  Rng rng(4);
  GuidanceSpec s = spec_for(GuidanceOperator::JointRegression, m, rng);
  CHECK_NOTHROW(s.validate(m.vertex_count()));
  s.target = Mat::Zero(20, 3);
  CHECK_THROWS_AS(s.validate(m.vertex_count()), Error);
  s = spec_for(GuidanceOperator::VertexMask, m, rng);
  s.given.pop_back();
  CHECK_THROWS_AS(s.validate(m.vertex_count()), Error);
  s = spec_for(GuidanceOperator::Identity, m, rng);
  s.scale = -1;
  CHECK_THROWS_AS(s.validate(m.vertex_count()), Error);
  s.scale = 1;
  s.target(0, 0) = std::nan("");
  try {
    s.validate(m.vertex_count());
    FAIL("expected input error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Input);
  }
  s = spec_for(GuidanceOperator::ProjectedJoints, m, rng);
  s.target = Mat::Zero(kNumJoints, 3);
  CHECK_THROWS_AS(s.validate(m.vertex_count()), Error);
}

TEST_CASE("task input errors") {
  const HandModel& m = tiny_model();
  const int v = m.vertex_count();
  const SamplerConfig sc = small_sampler(1.0, 1);
  const Mat partial = m.template_vertices;
  auto expect_task = [](auto&& fn) {
    try {
      fn();
      FAIL("expected task error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Task);
    }
  };
  expect_task([&] { inpaint_mesh(m, partial, std::vector<char>(v, 0), sc); });
  expect_task([&] { inpaint_mesh(m, partial, std::vector<char>(v, 1), sc); });
  expect_task([&] { inpaint_skeleton(m, Mat::Zero(kNumJoints, 3), std::vector<char>(kNumJoints, 0), sc); });
  Fit2dInput in;
  in.joints2d = Mat::Constant(kNumJoints, 2, 64);
  in.confidence = Vec::Zero(kNumJoints);
  in.confidence.head(3).setOnes();
  in.camera = test_camera();
  in.root = Vec3(0, 0, 400);
  expect_task([&] { fit2d(m, in, sc); });
  CHECK_THROWS_AS(inpaint_mesh(m, partial.topRows(10), std::vector<char>(10, 1), sc), Error);
  CHECK_THROWS_AS(inpaint_skeleton(m, Mat::Zero(20, 3), std::vector<char>(20, 1), sc), Error);
  CHECK_THROWS_AS(given_part_error(partial, partial, std::vector<char>(3, 1)), Error);
}

TEST_CASE("zero guidance scale reproduces unguided sampling bit for bit") {
  const HandModel& m = tiny_model();
  const int v = m.vertex_count();
  std::vector<char> given(v, 0);
  for (int i = 0; i < v; i += 2) given[i] = 1;
  const HypothesisSet plain = generate(m, small_sampler(0.0));
  const HypothesisSet zero = inpaint_mesh(m, m.template_vertices, given, small_sampler(0.0));
  REQUIRE(plain.size() == zero.size());
  for (int i = 0; i < plain.size(); ++i) {
    CHECK(plain.hypotheses[i].vertices == zero.hypotheses[i].vertices);
    CHECK(plain.hypotheses[i].stream == zero.hypotheses[i].stream);
  }
  CHECK(zero.task == "inpaint-mesh");
  CHECK(zero.residual_units == "mm");
  CHECK(zero.hypotheses[0].residual ==
        doctest::Approx(given_part_error(zero.hypotheses[0].vertices, m.template_vertices, given)));
}

TEST_CASE("hard replacement pins the given vertices") {
  const HandModel& m = tiny_model();
  const int v = m.vertex_count();
  std::vector<char> given(v, 0);
  for (int i = 0; i < v / 2; ++i) given[i] = 1;
  const HypothesisSet set = inpaint_mesh(m, m.template_vertices, given, small_sampler(0.0), true);
  for (const Hypothesis& h : set.hypotheses) {
    CHECK(h.residual < 1e-9);
    double missing = 0;
    for (int i = v / 2; i < v; ++i) missing += (h.vertices.row(i) - m.template_vertices.row(i)).norm();
    CHECK(missing > 0);
  }
}

TEST_CASE("guidance lowers the task residual") {
  const HandModel& m = tiny_model();
  const int v = m.vertex_count();
  std::vector<char> given(v, 0);
  for (int i = 0; i < v; i += 3) given[i] = 1;
  const double unguided = inpaint_mesh(m, m.template_vertices, given, small_sampler(0.0, 4)).hypotheses[0].residual;
  SamplerConfig guided = small_sampler(0.0, 4);
  guided.scale = 0.5;
  guided.locally_constant = true;
  double mean_guided = 0, mean_unguided = 0;
  const HypothesisSet a = inpaint_mesh(m, m.template_vertices, given, guided);
  const HypothesisSet b = inpaint_mesh(m, m.template_vertices, given, small_sampler(0.0, 4));
  for (int i = 0; i < a.size(); ++i) {
    mean_guided += a.hypotheses[i].residual / a.size();
    mean_unguided += b.hypotheses[i].residual / b.size();
    CHECK(a.hypotheses[i].residual_trace.size() == 5);
  }
  CHECK(unguided == b.hypotheses[0].residual);
  CHECK(mean_guided < mean_unguided);
}

TEST_CASE("reprojection error and the gradient-descent baseline") {
  const HandRig& rig = default_rig();
  const HandModel& m = tiny_model();
  Rng rng(5);
  const PoseSample pose = sample_pose(rng, rig);
  Mat verts = pose_hand(rig, pose, false);
  verts = verts.rowwise() - regress_joints(verts, m.regressor).row(0);
  Fit2dInput in;
  in.camera = test_camera();
  in.root = Vec3(0, 0, 400);
  in.joints2d = project(regress_joints(verts, m.regressor).rowwise() + in.root.transpose(), in.camera);
  in.confidence = Vec::Ones(kNumJoints);
  CHECK(reprojection_error(verts, m.regressor, in) < 1e-9);

  const BaselineFit start = fit2d_baseline(rig, m.regressor, in, 0);
  const BaselineFit fit = fit2d_baseline(rig, m.regressor, in, 60);
  CHECK(fit.iterations == 60);
  CHECK(fit.residual_px < start.residual_px);
  CHECK(fit.residual_px == doctest::Approx(reprojection_error(fit.vertices, m.regressor, in)));

  const HypothesisSet set = fit2d(m, in, small_sampler(1.0, 1));
  CHECK(set.residual_units == "px");
  CHECK(set.hypotheses[0].residual ==
        doctest::Approx(reprojection_error(set.hypotheses[0].vertices, m.regressor, in)));
}
