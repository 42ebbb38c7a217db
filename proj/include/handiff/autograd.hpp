#pragma once

// Minimal reverse-mode tape over dense row-major matrices. Every value on the
// tape is a 2-D matrix; scalars are 1x1. Ops record a closure that pushes the
// node's gradient back into its inputs.

#include "handiff/common.hpp"

#include <deque>
#include <functional>
#include <vector>

namespace handiff::ag {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Var constant(Mat value);
  Var leaf(Mat value, bool requires_grad = true);

  Var push(Mat value, bool requires_grad, Backward backward);

  // Runs the reverse sweep from a 1x1 node seeded with 1.
  void backward(Var scalar);
  void backward(Var v, const Mat& seed);

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient of the last backward() w.r.t. v; zeros when v was unreachable.
  Mat grad(Var v) const;
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }
  const Mat& grad_of(int id) const { return nodes_[id].grad; }
  Mat& accum(int id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);
// x * (1 + st[:, :C]) + st[:, C:] with st a 1x2C row.
Var film(Var x, Var st);
Var gelu(Var a);
Var silu(Var a);
Var sparse_mm(const SpMat& s, Var x);
// [T_0 x, T_1 x, ..., T_{K-1} x] with the Chebyshev recurrence on operator s.
Var cheb_basis(const SpMat& s, Var x, int order);
Var concat_cols(Var a, Var b);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var layer_norm(Var x, Var gamma, Var beta);
// Multi-head scaled dot-product attention. Keys with key_mask[j] != 0 are
// excluded from every softmax; a query row with no admissible key yields 0.
Var attention(Var q, Var k, Var v, int heads, const std::vector<char>& key_mask);
// 3x3 convolution, zero padding 1. Input rows are pixels (y * width + x),
// columns channels; weight is (9 * c_in) x c_out.
Var conv3x3(Var x, int height, int width, Var weight, Var bias, int stride);
Var mul_const(Var a, const Mat& m);
Var sum(Var a);
Var mean(Var a);
// Subgradient 0 at 0.
Var abs(Var a);
// Per-row Euclidean norm as an N x 1 column; zero rows get zero gradient.
Var row_norm(Var a);

int conv_out_size(int in, int stride);

}  // namespace handiff::ag
