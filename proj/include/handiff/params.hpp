#pragma once

#include "handiff/autograd.hpp"
#include "handiff/common.hpp"

#include <map>
#include <string>

namespace handiff {

// Named learnable tensors. Keys look like "enc0.gcn1.w"; std::map keeps the
// iteration order (and therefore serialization and hashing) stable.
struct ModelParams {
  std::map<std::string, Mat> tensors;

  std::size_t count() const;
  std::size_t count_prefix(const std::string& prefix) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  const Mat& at(const std::string& name) const;
  Mat& at(const std::string& name);
  bool all_finite() const;
  std::uint64_t hash() const;

  // Same keys and shapes, all zeros.
  ModelParams zeros_like() const;
};

// Binds parameters onto a tape on first use. With requires_grad the bound
// leaves collect gradients that can be read back after backward().
class ParamSet {
 public:
  ParamSet(ag::Tape& tape, const ModelParams& params, bool requires_grad)
      : tape_(&tape), params_(&params), requires_grad_(requires_grad) {}

  ag::Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return params_->contains(name); }
  ag::Tape& tape() const { return *tape_; }
  bool training_grads() const { return requires_grad_; }

  // grads[name] += d loss / d name for every parameter touched on the tape.
  void accumulate_grads(ModelParams& grads) const;

 private:
  ag::Tape* tape_;
  const ModelParams* params_;
  bool requires_grad_;
  mutable std::map<std::string, ag::Var> bound_;
};

// Deterministic initializers drawing from rng in call order.
Mat init_normal(Rng& rng, int rows, int cols, double stddev);
Mat init_linear(Rng& rng, int fan_in, int fan_out);

// x W + b with W fan_in x fan_out and b a 1 x fan_out row.
ag::Var linear(const ParamSet& p, const std::string& name, ag::Var x);
void add_linear(ModelParams& params, const std::string& name, int fan_in, int fan_out, Rng& rng,
                double gain = 1.0);

ag::Var layer_norm(const ParamSet& p, const std::string& name, ag::Var x);
void add_layer_norm(ModelParams& params, const std::string& name, int channels);

// Pre-norm multi-head attention plus output projection (no residual). With
// context == nullptr the normalized input attends to itself; otherwise the
// normalized input queries the raw context rows, skipping masked ones.
ag::Var attention_layer(const ParamSet& p, const std::string& prefix, ag::Var x, const ag::Var* context,
                        int heads, const std::vector<char>& context_mask);
void add_attention_layer(ModelParams& params, const std::string& prefix, int query_dim, int context_dim,
                         Rng& rng);

}  // namespace handiff
