#include "handiff/model.hpp"

namespace handiff {

void ModelConfig::validate() const {
  denoiser.validate();
  encoder.validate(denoiser.token_dim);
  if (!(coord_scale > 0)) throw Error(ErrorKind::Config, "coord_scale must be positive");
  if (schedule.steps < 2) throw Error(ErrorKind::Config, "schedule needs T >= 2");
}

ConditionTokens HandModel::tokens(const ConditionBundle& bundle) const {
  return assemble_tokens(params, config.encoder, config.denoiser.token_dim, bundle);
}

ConditionTokens HandModel::empty_tokens() const {
  return handiff::empty_tokens(config.encoder, config.denoiser.token_dim);
}

HandModel make_model(const ModelConfig& config, const MeshTopology& topology, const Mat& template_vertices,
                     const JointRegressor& regressor, std::uint64_t init_seed) {
  config.validate();
  if (regressor.weights.cols() != topology.vertex_count)
    throw Error(ErrorKind::Config, "regressor does not match the template");
  HandModel m;
  m.config = config;
  m.topology = topology;
  m.template_vertices = template_vertices;
  m.hierarchy = build_hierarchy(topology, template_vertices, config.denoiser.levels);
  m.regressor = regressor;
  m.schedule = config.schedule.build();
  m.params = init_params(config.denoiser, m.hierarchy, init_seed);
  Rng rng = make_rng(init_seed, 0xc0);
  init_encoder_params(config.encoder, config.denoiser.token_dim, rng, m.params);
  return m;
}

Mat BoundDenoiser::predict(const Mat& x_t, int t) const {
  return denoise(model_->params, model_->config.denoiser, model_->hierarchy, x_t, t, tokens_);
}

Mat BoundDenoiser::predict_vjp(const Mat& x_t, int t, const std::function<Mat(const Mat&)>& upstream,
                               Mat* grad_x_t) const {
  ag::Tape tape;
  ParamSet p(tape, model_->params, false);
  TokenVars tv{tape.constant(tokens_.tokens), tokens_.mask};
  ag::Var x = tape.leaf(x_t, true);
  ag::Var y = denoise_var(p, model_->config.denoiser, model_->hierarchy, x, t, tv);
  Mat g = upstream(y.value());
  if (g.rows() != y.rows() || g.cols() != y.cols()) throw Error(ErrorKind::Model, "upstream gradient shape mismatch");
  tape.backward(y, g);
  if (grad_x_t) *grad_x_t = tape.grad(x);
  return y.value();
}

}  // namespace handiff
