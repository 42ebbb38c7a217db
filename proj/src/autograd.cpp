#include "handiff/autograd.hpp"

#include <cmath>

namespace handiff {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Input: return "input";
    case ErrorKind::Config: return "configuration";
    case ErrorKind::Topology: return "topology";
    case ErrorKind::NonManifold: return "non-manifold";
    case ErrorKind::DegenerateAlignment: return "degenerate-alignment";
    case ErrorKind::Pose: return "pose";
    case ErrorKind::Visibility: return "visibility";
    case ErrorKind::Projection: return "projection";
    case ErrorKind::Calibration: return "calibration";
    case ErrorKind::Storage: return "storage";
    case ErrorKind::Model: return "model";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Task: return "task";
  }
  return "unknown";
}

double uniform01(Rng& rng) {
  // 53 random bits -> [0, 1)
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Mat randn(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

namespace ag {

const Mat& Var::value() const { return tape->value(id); }

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::leaf(Mat value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

Var Tape::push(Mat value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(backward)});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::accum(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var scalar) {
  if (scalar.value().size() != 1) throw Error(ErrorKind::Model, "backward() needs a scalar");
  backward(scalar, Mat::Ones(1, 1));
}

void Tape::backward(Var v, const Mat& seed) {
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[v.id].requires_grad) return;
  accum(v.id) = seed;
  for (int i = v.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward && n.requires_grad && n.grad.size() > 0) n.backward(*this, i);
  }
}

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

namespace {

bool rg(Var a) { return a.tape->requires_grad(a.id); }
bool rg(Var a, Var b) { return rg(a) || rg(b); }

void check_same(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(ErrorKind::Model, std::string(op) + ": shape mismatch");
}

}  // namespace

int conv_out_size(int in, int stride) { return (in - 1) / stride + 1; }

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw Error(ErrorKind::Model, "matmul: inner dimension mismatch");
  Mat out = a.value() * b.value();
  return a.tape->push(std::move(out), rg(a, b), [a, b](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (rg(a)) t.accum(a.id).noalias() += g * b.value().transpose();
    if (rg(b)) t.accum(b.id).noalias() += a.value().transpose() * g;
  });
}

Var add(Var a, Var b) {
  check_same(a, b, "add");
  return a.tape->push(a.value() + b.value(), rg(a, b), [a, b](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (rg(a)) t.accum(a.id) += g;
    if (rg(b)) t.accum(b.id) += g;
  });
}

Var sub(Var a, Var b) {
  check_same(a, b, "sub");
  return a.tape->push(a.value() - b.value(), rg(a, b), [a, b](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (rg(a)) t.accum(a.id) += g;
    if (rg(b)) t.accum(b.id) -= g;
  });
}

Var mul(Var a, Var b) {
  check_same(a, b, "mul");
  Mat out = a.value().cwiseProduct(b.value());
  return a.tape->push(std::move(out), rg(a, b), [a, b](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (rg(a)) t.accum(a.id) += g.cwiseProduct(b.value());
    if (rg(b)) t.accum(b.id) += g.cwiseProduct(a.value());
  });
}

Var mul_const(Var a, const Mat& m) {
  if (a.rows() != m.rows() || a.cols() != m.cols())
    throw Error(ErrorKind::Model, "mul_const: shape mismatch");
  return a.tape->push(a.value().cwiseProduct(m), rg(a), [a, m](Tape& t, int self) {
    t.accum(a.id) += t.grad_of(self).cwiseProduct(m);
  });
}

Var scale(Var a, double s) {
  return a.tape->push(a.value() * s, rg(a), [a, s](Tape& t, int self) {
    t.accum(a.id) += t.grad_of(self) * s;
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw Error(ErrorKind::Model, "add_row: bias shape mismatch");
  Mat out = a.value().rowwise() + row.value().row(0);
  return a.tape->push(std::move(out), rg(a, row), [a, row](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (rg(a)) t.accum(a.id) += g;
    if (rg(row)) t.accum(row.id) += g.colwise().sum();
  });
}

Var film(Var x, Var st) {
  const Eigen::Index c = x.cols();
  if (st.rows() != 1 || st.cols() != 2 * c) throw Error(ErrorKind::Model, "film: shape mismatch");
  const RowVec s = st.value().row(0).head(c);
  const RowVec b = st.value().row(0).tail(c);
  Mat out(x.rows(), c);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    out.row(i) = x.value().row(i).cwiseProduct((s.array() + 1.0).matrix()) + b;
  return x.tape->push(std::move(out), rg(x, st), [x, st, s, c](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (rg(x)) {
      Mat& gx = t.accum(x.id);
      for (Eigen::Index i = 0; i < g.rows(); ++i)
        gx.row(i) += g.row(i).cwiseProduct((s.array() + 1.0).matrix());
    }
    if (rg(st)) {
      Mat& gs = t.accum(st.id);
      gs.row(0).head(c) += g.cwiseProduct(x.value()).colwise().sum();
      gs.row(0).tail(c) += g.colwise().sum();
    }
  });
}

Var gelu(Var a) {
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  }
  return a.tape->push(std::move(out), rg(a), [a](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    const Mat& x = a.value();
    Mat& ga = t.accum(a.id);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
      ga.data()[i] += g.data()[i] * (cdf + v * pdf);
    }
  });
}

Var silu(Var a) {
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = v / (1.0 + std::exp(-v));
  }
  return a.tape->push(std::move(out), rg(a), [a](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    const Mat& x = a.value();
    Mat& ga = t.accum(a.id);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double sg = 1.0 / (1.0 + std::exp(-v));
      ga.data()[i] += g.data()[i] * (sg + v * sg * (1.0 - sg));
    }
  });
}

Var sparse_mm(const SpMat& s, Var x) {
  if (s.cols() != x.rows()) throw Error(ErrorKind::Model, "sparse_mm: dimension mismatch");
  Mat out = s * x.value();
  const SpMat* sp = &s;
  return x.tape->push(std::move(out), rg(x), [sp, x](Tape& t, int self) {
    t.accum(x.id).noalias() += sp->transpose() * t.grad_of(self);
  });
}

Var cheb_basis(const SpMat& s, Var x, int order) {
  if (order < 1) throw Error(ErrorKind::Model, "cheb_basis: order must be >= 1");
  if (s.cols() != x.rows() || s.rows() != s.cols())
    throw Error(ErrorKind::Model, "cheb_basis: operator does not match features");
  const Eigen::Index n = x.rows(), c = x.cols();
  Mat out(n, c * order);
  std::vector<Mat> terms;
  terms.reserve(order);
  terms.push_back(x.value());
  if (order > 1) terms.push_back(s * x.value());
  for (int k = 2; k < order; ++k) terms.push_back(2.0 * (s * terms[k - 1]) - terms[k - 2]);
  for (int k = 0; k < order; ++k) out.middleCols(k * c, c) = terms[k];
  const SpMat* sp = &s;
  return x.tape->push(std::move(out), rg(x), [sp, x, order, c](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    // Reverse the recurrence: adjoints a_k flow from T_k to T_{k-1}, T_{k-2}.
    std::vector<Mat> adj(order);
    for (int k = 0; k < order; ++k) adj[k] = g.middleCols(k * c, c);
    const SpMat st = sp->transpose();
    for (int k = order - 1; k >= 2; --k) {
      adj[k - 1] += 2.0 * (st * adj[k]);
      adj[k - 2] -= adj[k];
    }
    Mat gx = adj[0];
    if (order > 1) gx += st * adj[1];
    t.accum(x.id) += gx;
  });
}

Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) throw Error(ErrorKind::Model, "concat_cols: row mismatch");
  Mat out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return a.tape->push(std::move(out), rg(a, b), [a, b, ca, cb](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (rg(a)) t.accum(a.id) += g.leftCols(ca);
    if (rg(b)) t.accum(b.id) += g.rightCols(cb);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorKind::Model, "concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  bool any = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error(ErrorKind::Model, "concat_rows: column mismatch");
    rows += p.rows();
    any = any || rg(p);
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts[0].tape->push(std::move(out), any, [parts](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
      if (rg(p)) t.accum(p.id) += g.middleRows(r, p.rows());
      r += p.rows();
    }
  });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || begin + count > a.rows()) throw Error(ErrorKind::Model, "slice_rows: out of range");
  Mat out = a.value().middleRows(begin, count);
  return a.tape->push(std::move(out), rg(a), [a, begin, count](Tape& t, int self) {
    t.accum(a.id).middleRows(begin, count) += t.grad_of(self);
  });
}

Var layer_norm(Var x, Var gamma, Var beta) {
  constexpr double eps = 1e-5;
  const Eigen::Index n = x.rows(), c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw Error(ErrorKind::Model, "layer_norm: shape mismatch");
  Mat xhat(n, c);
  Vec inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.value().row(i).mean();
    const RowVec centered = x.value().row(i).array() - mean;
    const double var = centered.squaredNorm() / static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std[i];
  }
  Mat out(n, c);
  for (Eigen::Index i = 0; i < n; ++i)
    out.row(i) = xhat.row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  const bool need = rg(x) || rg(gamma) || rg(beta);
  return x.tape->push(std::move(out), need, [x, gamma, beta, xhat, inv_std, c](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (rg(gamma)) t.accum(gamma.id).row(0) += g.cwiseProduct(xhat).colwise().sum();
    if (rg(beta)) t.accum(beta.id).row(0) += g.colwise().sum();
    if (rg(x)) {
      Mat& gx = t.accum(x.id);
      const double inv_c = 1.0 / static_cast<double>(c);
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const RowVec gh = g.row(i).cwiseProduct(gamma.value().row(0));
        const double m1 = gh.sum() * inv_c;
        const double m2 = gh.cwiseProduct(xhat.row(i)).sum() * inv_c;
        gx.row(i) += inv_std[i] * (gh.array() - m1 - xhat.row(i).array() * m2).matrix();
      }
    }
  });
}

Var attention(Var q, Var k, Var v, int heads, const std::vector<char>& key_mask) {
  const Eigen::Index n = q.rows(), m = k.rows(), c = q.cols();
  if (k.cols() != c || v.cols() != c || v.rows() != m)
    throw Error(ErrorKind::Model, "attention: shape mismatch");
  if (heads < 1 || c % heads != 0) throw Error(ErrorKind::Model, "attention: heads must divide width");
  if (!key_mask.empty() && static_cast<Eigen::Index>(key_mask.size()) != m)
    throw Error(ErrorKind::Model, "attention: mask length mismatch");

  std::vector<Eigen::Index> keep;
  keep.reserve(m);
  for (Eigen::Index j = 0; j < m; ++j)
    if (key_mask.empty() || !key_mask[j]) keep.push_back(j);
  const Eigen::Index mk = static_cast<Eigen::Index>(keep.size());
  const Eigen::Index d = c / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));

  Mat out = Mat::Zero(n, c);
  if (mk == 0) {
    // Nothing to attend to: the output is constant zero and carries no gradient.
    return q.tape->push(std::move(out), false, nullptr);
  }

  Mat kk(mk, c), vv(mk, c);
  for (Eigen::Index j = 0; j < mk; ++j) {
    kk.row(j) = k.value().row(keep[j]);
    vv.row(j) = v.value().row(keep[j]);
  }
  std::vector<Mat> probs(heads);
  for (int h = 0; h < heads; ++h) {
    Mat s(n, mk);
    s.noalias() = q.value().middleCols(h * d, d) * kk.middleCols(h * d, d).transpose();
    s *= sc;
    const Vec mx = s.rowwise().maxCoeff();
    s.colwise() -= mx;
    s = s.array().exp().matrix();
    const Vec inv = s.rowwise().sum().cwiseInverse();
    s = inv.asDiagonal() * s;
    out.middleCols(h * d, d).noalias() = s * vv.middleCols(h * d, d);
    probs[h] = std::move(s);
  }
  const bool need = rg(q) || rg(k) || rg(v);
  return q.tape->push(std::move(out), need,
                      [q, k, v, heads, d, sc, keep, kk, vv, probs](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    const Eigen::Index mk = static_cast<Eigen::Index>(keep.size());
    const Eigen::Index c = q.cols();
    Mat gq = Mat::Zero(q.rows(), c), gk = Mat::Zero(mk, c), gv = Mat::Zero(mk, c);
    for (int h = 0; h < heads; ++h) {
      const Mat& p = probs[h];
      const auto go = g.middleCols(h * d, d);
      gv.middleCols(h * d, d).noalias() += p.transpose() * go;
      Mat gs(p.rows(), p.cols());
      gs.noalias() = go * vv.middleCols(h * d, d).transpose();
      // softmax backward: p * (gp - <gp, p>) per row
      const Vec dot = gs.cwiseProduct(p).rowwise().sum();
      gs.colwise() -= dot;
      gs = gs.cwiseProduct(p) * sc;
      gq.middleCols(h * d, d).noalias() += gs * kk.middleCols(h * d, d);
      gk.middleCols(h * d, d).noalias() += gs.transpose() * q.value().middleCols(h * d, d);
    }
    if (rg(q)) t.accum(q.id) += gq;
    if (rg(k)) {
      Mat& a = t.accum(k.id);
      for (Eigen::Index j = 0; j < mk; ++j) a.row(keep[j]) += gk.row(j);
    }
    if (rg(v)) {
      Mat& a = t.accum(v.id);
      for (Eigen::Index j = 0; j < mk; ++j) a.row(keep[j]) += gv.row(j);
    }
  });
}

Var conv3x3(Var x, int height, int width, Var weight, Var bias, int stride) {
  const Eigen::Index cin = x.cols();
  if (x.rows() != static_cast<Eigen::Index>(height) * width)
    throw Error(ErrorKind::Model, "conv3x3: input does not match image size");
  if (weight.rows() != 9 * cin || bias.cols() != weight.cols() || bias.rows() != 1)
    throw Error(ErrorKind::Model, "conv3x3: weight shape mismatch");
  const int ho = conv_out_size(height, stride), wo = conv_out_size(width, stride);
  // im2col
  Mat col = Mat::Zero(static_cast<Eigen::Index>(ho) * wo, 9 * cin);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
          if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
          col.row(r).segment((ky * 3 + kx) * cin, cin) =
              x.value().row(static_cast<Eigen::Index>(iy) * width + ix);
        }
    }
  Mat out = col * weight.value();
  out.rowwise() += bias.value().row(0);
  const bool need = rg(x) || rg(weight) || rg(bias);
  return x.tape->push(std::move(out), need,
                      [x, weight, bias, col, height, width, ho, wo, stride, cin](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (rg(weight)) t.accum(weight.id).noalias() += col.transpose() * g;
    if (rg(bias)) t.accum(bias.id) += g.colwise().sum();
    if (rg(x)) {
      const Mat gcol = g * weight.value().transpose();
      Mat& gx = t.accum(x.id);
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const Eigen::Index r = static_cast<Eigen::Index>(oy) * wo + ox;
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
              if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
              gx.row(static_cast<Eigen::Index>(iy) * width + ix) +=
                  gcol.row(r).segment((ky * 3 + kx) * cin, cin);
            }
        }
    }
  });
}

Var sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), rg(a), [a](Tape& t, int self) {
    t.accum(a.id).array() += t.grad_of(self)(0, 0);
  });
}

Var abs(Var a) {
  return a.tape->push(a.value().cwiseAbs(), rg(a), [a](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    const Mat& x = a.value();
    Mat& ga = t.accum(a.id);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      ga.data()[i] += v > 0 ? g.data()[i] : (v < 0 ? -g.data()[i] : 0.0);
    }
  });
}

Var row_norm(Var a) {
  Mat out = a.value().rowwise().norm();
  return a.tape->push(out, rg(a), [a, out](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    Mat& ga = t.accum(a.id);
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      if (out(i, 0) > 0) ga.row(i) += (g(i, 0) / out(i, 0)) * a.value().row(i);
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

}  // namespace ag
}  // namespace handiff
