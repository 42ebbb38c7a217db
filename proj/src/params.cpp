#include "handiff/params.hpp"

#include <cmath>

namespace handiff {

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& [_, m] : tensors) n += static_cast<std::size_t>(m.size());
  return n;
}

std::size_t ModelParams::count_prefix(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, m] : tensors)
    if (name.rfind(prefix, 0) == 0) n += static_cast<std::size_t>(m.size());
  return n;
}

const Mat& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorKind::Model, "missing parameter '" + name + "'");
  return it->second;
}

Mat& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorKind::Model, "missing parameter '" + name + "'");
  return it->second;
}

bool ModelParams::all_finite() const {
  for (const auto& [_, m] : tensors)
    if (!m.allFinite()) return false;
  return true;
}

std::uint64_t ModelParams::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, m] : tensors) {
    h = fnv1a(name.data(), name.size(), h);
    const std::int64_t shape[2] = {m.rows(), m.cols()};
    h = fnv1a(shape, sizeof(shape), h);
    h = fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
  }
  return h;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z;
  for (const auto& [name, m] : tensors) z.tensors.emplace(name, Mat::Zero(m.rows(), m.cols()));
  return z;
}

ag::Var ParamSet::operator[](const std::string& name) const {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  ag::Var v = tape_->leaf(params_->at(name), requires_grad_);
  bound_.emplace(name, v);
  return v;
}

void ParamSet::accumulate_grads(ModelParams& grads) const {
  for (const auto& [name, v] : bound_) {
    if (!tape_->has_grad(v.id)) continue;
    grads.at(name) += tape_->grad_of(v.id);
  }
}

Mat init_normal(Rng& rng, int rows, int cols, double stddev) { return randn(rng, rows, cols) * stddev; }

Mat init_linear(Rng& rng, int fan_in, int fan_out) {
  return init_normal(rng, fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

ag::Var linear(const ParamSet& p, const std::string& name, ag::Var x) {
  return ag::add_row(ag::matmul(x, p[name + ".w"]), p[name + ".b"]);
}

void add_linear(ModelParams& params, const std::string& name, int fan_in, int fan_out, Rng& rng, double gain) {
  params.tensors[name + ".w"] = init_linear(rng, fan_in, fan_out) * gain;
  params.tensors[name + ".b"] = Mat::Zero(1, fan_out);
}

ag::Var layer_norm(const ParamSet& p, const std::string& name, ag::Var x) {
  return ag::layer_norm(x, p[name + ".g"], p[name + ".b"]);
}

void add_layer_norm(ModelParams& params, const std::string& name, int channels) {
  params.tensors[name + ".g"] = Mat::Ones(1, channels);
  params.tensors[name + ".b"] = Mat::Zero(1, channels);
}

ag::Var attention_layer(const ParamSet& p, const std::string& prefix, ag::Var x, const ag::Var* context,
                        int heads, const std::vector<char>& context_mask) {
  ag::Var h = layer_norm(p, prefix + ".ln", x);
  ag::Var ctx = context ? *context : h;
  ag::Var q = ag::matmul(h, p[prefix + ".wq"]);
  ag::Var k = ag::matmul(ctx, p[prefix + ".wk"]);
  ag::Var v = ag::matmul(ctx, p[prefix + ".wv"]);
  ag::Var a = ag::attention(q, k, v, heads, context_mask);
  return linear(p, prefix + ".out", a);
}

void add_attention_layer(ModelParams& params, const std::string& prefix, int query_dim, int context_dim,
                         Rng& rng) {
  add_layer_norm(params, prefix + ".ln", query_dim);
  params.tensors[prefix + ".wq"] = init_linear(rng, query_dim, query_dim);
  params.tensors[prefix + ".wk"] = init_linear(rng, context_dim, query_dim);
  params.tensors[prefix + ".wv"] = init_linear(rng, context_dim, query_dim);
  add_linear(params, prefix + ".out", query_dim, query_dim, rng, 0.5);
}

}  // namespace handiff
