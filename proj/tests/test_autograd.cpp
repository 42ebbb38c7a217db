#include "handiff/autograd.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace handiff;
using namespace handiff::testing;
namespace ag = handiff::ag;

namespace {

using Build = std::function<ag::Var(ag::Tape&, const std::vector<ag::Var>&)>;

// Contracts op output with a fixed random matrix so every output entry
// reaches the scalar with a distinct weight.
double contract(const Build& build, const std::vector<Mat>& inputs, const Mat& r) {
  ag::Tape t;
  std::vector<ag::Var> leaves;
  for (const Mat& m : inputs) leaves.push_back(t.leaf(m));
  const ag::Var out = build(t, leaves);
  return out.value().cwiseProduct(r).sum();
}

// Worst relative error between tape gradients and central differences.
double gradient_error(const Build& build, std::vector<Mat> inputs, std::uint64_t seed, double h = 1e-6) {
  Rng rng(seed);
  ag::Tape t;
  std::vector<ag::Var> leaves;
  for (const Mat& m : inputs) leaves.push_back(t.leaf(m));
  const ag::Var out = build(t, leaves);
  const Mat r = randn(rng, out.rows(), out.cols());
  t.backward(ag::sum(ag::mul_const(out, r)));
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Mat g = t.grad(leaves[i]);
    for (Eigen::Index a = 0; a < inputs[i].rows(); ++a)
      for (Eigen::Index b = 0; b < inputs[i].cols(); ++b) {
        const double x0 = inputs[i](a, b);
        inputs[i](a, b) = x0 + h;
        const double fp = contract(build, inputs, r);
        inputs[i](a, b) = x0 - h;
        const double fm = contract(build, inputs, r);
        inputs[i](a, b) = x0;
        worst = std::max(worst, relative_error(g(a, b), (fp - fm) / (2 * h), 1e-4));
      }
  }
  return worst;
}

SpMat random_sparse(Rng& rng, int n) {
  std::vector<Eigen::Triplet<double>> trip;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i == j || uniform01(rng) < 0.3) trip.emplace_back(i, j, standard_normal(rng) * 0.4);
  SpMat s(n, n);
  s.setFromTriplets(trip.begin(), trip.end());
  return s;
}

// Straight-line attention used as the oracle.
Mat naive_attention(const Mat& q, const Mat& k, const Mat& v, int heads, const std::vector<char>& mask) {
  const Eigen::Index n = q.rows(), m = k.rows(), d = q.cols() / heads;
  Mat out = Mat::Zero(n, q.cols());
  for (int h = 0; h < heads; ++h)
    for (Eigen::Index i = 0; i < n; ++i) {
      std::vector<double> s(m, -INFINITY);
      double mx = -INFINITY;
      for (Eigen::Index j = 0; j < m; ++j) {
        if (!mask.empty() && mask[j]) continue;
        double dot = 0;
        for (Eigen::Index c = 0; c < d; ++c) dot += q(i, h * d + c) * k(j, h * d + c);
        s[j] = dot / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, s[j]);
      }
      if (mx == -INFINITY) continue;
      double z = 0;
      for (Eigen::Index j = 0; j < m; ++j) z += std::exp(s[j] - mx);
      for (Eigen::Index j = 0; j < m; ++j) {
        const double p = std::exp(s[j] - mx) / z;
        for (Eigen::Index c = 0; c < d; ++c) out(i, h * d + c) += p * v(j, h * d + c);
      }
    }
  return out;
}

Mat naive_conv(const Mat& x, int height, int width, const Mat& w, const Mat& b, int stride) {
  const int cin = static_cast<int>(x.cols()), cout = static_cast<int>(w.cols());
  const int ho = (height - 1) / stride + 1, wo = (width - 1) / stride + 1;
  Mat out(ho * wo, cout);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox)
      for (int o = 0; o < cout; ++o) {
        double acc = b(0, o);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int y = oy * stride + dy, xx = ox * stride + dx;
            if (y < 0 || y >= height || xx < 0 || xx >= width) continue;
            for (int c = 0; c < cin; ++c) acc += x(y * width + xx, c) * w(((dy + 1) * 3 + dx + 1) * cin + c, o);
          }
        out(oy * wo + ox, o) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("tape: leaves, constants and unreachable gradients") {
  ag::Tape t;
  const ag::Var a = t.leaf(Mat::Constant(2, 2, 3.0));
  const ag::Var c = t.constant(Mat::Constant(2, 2, 5.0));
  const ag::Var unused = t.leaf(Mat::Ones(1, 3));
  t.backward(ag::sum(ag::mul(a, c)));
  CHECK(t.grad(a).isApprox(Mat::Constant(2, 2, 5.0)));
  CHECK(t.grad(unused).isZero());
  CHECK_FALSE(t.requires_grad(c));
  CHECK_THROWS_AS(t.backward(a), Error);  // not a scalar
}

TEST_CASE("tape: repeated use accumulates and backward resets") {
  ag::Tape t;
  const ag::Var x = t.leaf(Mat::Constant(1, 1, 2.0));
  const ag::Var y = ag::add(ag::mul(x, x), x);  // x^2 + x
  t.backward(ag::sum(y));
  CHECK(t.grad(x)(0, 0) == doctest::Approx(5.0));
  t.backward(ag::sum(y));
  CHECK(t.grad(x)(0, 0) == doctest::Approx(5.0));
  t.backward(y, Mat::Constant(1, 1, 3.0));
  CHECK(t.grad(x)(0, 0) == doctest::Approx(15.0));
}

TEST_CASE("ops: forward values against direct formulas") {
  Rng rng(1);
  ag::Tape t;
  const Mat a = randn(rng, 3, 4), b = randn(rng, 4, 2), c = randn(rng, 3, 4);
  const ag::Var va = t.constant(a), vb = t.constant(b), vc = t.constant(c);
  CHECK(ag::matmul(va, vb).value().isApprox(a * b));
  CHECK(ag::sub(va, vc).value().isApprox(a - c));
  CHECK(ag::scale(va, -2.5).value().isApprox(-2.5 * a));
  CHECK(ag::mean(va).value()(0, 0) == doctest::Approx(a.mean()));
  CHECK(ag::abs(va).value().isApprox(a.cwiseAbs()));
  CHECK(ag::row_norm(va).value().isApprox(Mat(a.rowwise().norm())));
  CHECK(ag::slice_rows(va, 1, 2).value().isApprox(a.middleRows(1, 2)));
  const Mat cc = ag::concat_cols(va, vc).value();
  CHECK(cc.leftCols(4).isApprox(a));
  CHECK(cc.rightCols(4).isApprox(c));
  const Mat cr = ag::concat_rows({va, vc}).value();
  CHECK(cr.topRows(3).isApprox(a));
  CHECK(cr.bottomRows(3).isApprox(c));

  // gelu(0) = 0, gelu(x) - gelu(-x) = x, silu(x) = x sigmoid(x).
  Mat g(1, 3);
  g << 0.0, 1.3, -0.7;
  const Mat gv = ag::gelu(t.constant(g)).value();
  CHECK(gv(0, 0) == 0.0);
  const Mat gneg = ag::gelu(t.constant(Mat(-g))).value();
  CHECK((gv - gneg).isApprox(g));
  CHECK(gv(0, 1) == doctest::Approx(1.3 * 0.5 * (1 + std::erf(1.3 / std::sqrt(2.0)))));
  CHECK(ag::silu(t.constant(g)).value()(0, 1) == doctest::Approx(1.3 / (1 + std::exp(-1.3))));

  Mat st(1, 8);
  st << 0.5, -1, 0, 2, 1, 2, 3, 4;
  const Mat f = ag::film(va, t.constant(st)).value();
  CHECK(f(2, 1) == doctest::Approx(a(2, 1) * 0.0 + 2.0));
  CHECK(f(0, 0) == doctest::Approx(a(0, 0) * 1.5 + 1.0));
}

TEST_CASE("layer_norm: zero mean, unit variance rows before the affine") {
  Rng rng(2);
  ag::Tape t;
  const Mat x = randn(rng, 5, 8) * 3.0 + Mat::Constant(5, 8, 7.0);
  const Mat y = ag::layer_norm(t.constant(x), t.constant(Mat::Ones(1, 8)), t.constant(Mat::Zero(1, 8))).value();
  for (int i = 0; i < 5; ++i) {
    CHECK(std::abs(y.row(i).mean()) <= 1e-12);
    CHECK(y.row(i).squaredNorm() / 8 == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("cheb_basis: recurrence against dense polynomial evaluation") {
  Rng rng(3);
  const SpMat s = random_sparse(rng, 6);
  const Mat x = randn(rng, 6, 2);
  ag::Tape t;
  const Mat out = ag::cheb_basis(s, t.constant(x), 4).value();
  const Mat d = Mat(s);
  const Mat id = Mat::Identity(6, 6);
  const Mat t2 = 2 * d * d - id, t3 = 4 * d * d * d - 3 * d;
  CHECK(out.middleCols(0, 2).isApprox(x));
  CHECK(out.middleCols(2, 2).isApprox(d * x));
  CHECK(out.middleCols(4, 2).isApprox(t2 * x));
  CHECK(out.middleCols(6, 2).isApprox(t3 * x));
  CHECK_THROWS_AS(ag::cheb_basis(s, t.constant(x), 0), Error);
}

TEST_CASE("attention: matches the straight-line oracle, masks and empty key sets") {
  Rng rng(4);
  const Mat q = randn(rng, 4, 6), k = randn(rng, 5, 6), v = randn(rng, 5, 6);
  ag::Tape t;
  const ag::Var vq = t.constant(q), vk = t.constant(k), vv = t.constant(v);
  CHECK(ag::attention(vq, vk, vv, 2, {}).value().isApprox(naive_attention(q, k, v, 2, {})));
  const std::vector<char> mask = {0, 1, 0, 1, 1};
  CHECK(ag::attention(vq, vk, vv, 3, mask).value().isApprox(naive_attention(q, k, v, 3, mask)));
  // Masked keys are ignored whatever their content.
  Mat k2 = k, v2 = v;
  k2.row(1).setConstant(1e3);
  v2.row(3).setConstant(-1e3);
  CHECK(ag::attention(vq, t.constant(k2), t.constant(v2), 3, mask).value().isApprox(
      ag::attention(vq, vk, vv, 3, mask).value()));
  CHECK(ag::attention(vq, vk, vv, 2, {1, 1, 1, 1, 1}).value().isZero());
  CHECK_THROWS_AS(ag::attention(vq, vk, vv, 4, {}), Error);
  CHECK_THROWS_AS(ag::attention(vq, vk, vv, 2, {0, 1}), Error);
}

TEST_CASE("conv3x3: matches direct summation for both strides") {
  Rng rng(5);
  const int h = 5, w = 6;
  const Mat x = randn(rng, h * w, 3), wt = randn(rng, 27, 4), b = randn(rng, 1, 4);
  ag::Tape t;
  for (int stride : {1, 2}) {
    const Mat out = ag::conv3x3(t.constant(x), h, w, t.constant(wt), t.constant(b), stride).value();
    CHECK(out.rows() == ag::conv_out_size(h, stride) * ag::conv_out_size(w, stride));
    CHECK(out.isApprox(naive_conv(x, h, w, wt, b, stride)));
  }
  CHECK(ag::conv_out_size(128, 2) == 64);
  CHECK(ag::conv_out_size(5, 2) == 3);
  CHECK_THROWS_AS(ag::conv3x3(t.constant(x), h, w + 1, t.constant(wt), t.constant(b), 1), Error);
}

TEST_CASE("gradients: every op against central differences") {
  Rng rng(6);
  const SpMat s = random_sparse(rng, 5);
  const std::vector<char> mask = {0, 0, 1, 0};
  struct Case {
    const char* name;
    Build build;
    std::vector<Mat> inputs;
  };
  const std::vector<Case> cases = {
      {"matmul", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::matmul(v[0], v[1]); },
       {randn(rng, 3, 4), randn(rng, 4, 2)}},
      {"add/sub/mul",
       [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::mul(ag::add(v[0], v[1]), ag::sub(v[0], v[1])); },
       {randn(rng, 3, 3), randn(rng, 3, 3)}},
      {"scale", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::scale(v[0], 0.3); }, {randn(rng, 2, 3)}},
      {"add_row", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::add_row(v[0], v[1]); },
       {randn(rng, 4, 3), randn(rng, 1, 3)}},
      {"film", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::film(v[0], v[1]); },
       {randn(rng, 4, 3), randn(rng, 1, 6)}},
      {"gelu", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::gelu(v[0]); }, {randn(rng, 3, 3)}},
      {"silu", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::silu(v[0]); }, {randn(rng, 3, 3)}},
      {"sparse_mm", [&s](ag::Tape&, const std::vector<ag::Var>& v) { return ag::sparse_mm(s, v[0]); },
       {randn(rng, 5, 2)}},
      {"cheb_basis", [&s](ag::Tape&, const std::vector<ag::Var>& v) { return ag::cheb_basis(s, v[0], 4); },
       {randn(rng, 5, 2)}},
      {"concat", [](ag::Tape&, const std::vector<ag::Var>& v) {
         return ag::concat_rows({ag::concat_cols(v[0], v[1]), ag::concat_cols(v[1], v[0])});
       },
       {randn(rng, 2, 2), randn(rng, 2, 3)}},
      {"slice_rows", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::slice_rows(v[0], 1, 2); },
       {randn(rng, 4, 2)}},
      {"layer_norm", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::layer_norm(v[0], v[1], v[2]); },
       {randn(rng, 3, 5), randn(rng, 1, 5), randn(rng, 1, 5)}},
      {"attention",
       [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::attention(v[0], v[1], v[2], 2, {}); },
       {randn(rng, 3, 4), randn(rng, 4, 4), randn(rng, 4, 4)}},
      {"attention masked",
       [&mask](ag::Tape&, const std::vector<ag::Var>& v) { return ag::attention(v[0], v[1], v[2], 1, mask); },
       {randn(rng, 2, 4), randn(rng, 4, 4), randn(rng, 4, 4)}},
      {"conv3x3 s1",
       [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::conv3x3(v[0], 4, 3, v[1], v[2], 1); },
       {randn(rng, 12, 2), randn(rng, 18, 3), randn(rng, 1, 3)}},
      {"conv3x3 s2",
       [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::conv3x3(v[0], 5, 4, v[1], v[2], 2); },
       {randn(rng, 20, 2), randn(rng, 18, 2), randn(rng, 1, 2)}},
      {"mean/abs", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::mean(ag::abs(v[0])); },
       {randn(rng, 3, 4)}},
      {"row_norm", [](ag::Tape&, const std::vector<ag::Var>& v) { return ag::row_norm(v[0]); }, {randn(rng, 4, 3)}},
  };
  std::uint64_t seed = 100;
  for (const Case& c : cases) {
    CAPTURE(c.name);
    CHECK(gradient_error(c.build, c.inputs, ++seed) < 1e-5);
  }
}

TEST_CASE("gradients: subgradient conventions at zero") {
  ag::Tape t;
  const ag::Var x = t.leaf(Mat::Zero(2, 3));
  t.backward(ag::sum(ag::row_norm(x)));
  CHECK(t.grad(x).isZero());
  t.backward(ag::sum(ag::abs(x)));
  CHECK(t.grad(x).isZero());
}

TEST_CASE("ops: shape mismatches are model errors") {
  ag::Tape t;
  const ag::Var a = t.constant(Mat::Ones(2, 3)), b = t.constant(Mat::Ones(2, 3));
  try {
    ag::matmul(a, b);
    FAIL("expected model error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Model);
  }
  CHECK_THROWS_AS(ag::add(a, t.constant(Mat::Ones(3, 2))), Error);
  CHECK_THROWS_AS(ag::film(a, t.constant(Mat::Ones(1, 3))), Error);
  CHECK_THROWS_AS(ag::concat_cols(a, t.constant(Mat::Ones(3, 1))), Error);
  CHECK_THROWS_AS(ag::slice_rows(a, 1, 2), Error);
}
