#include "handiff/denoiser.hpp"

#include <cmath>

namespace handiff {

void DenoiserConfig::validate() const {
  if (levels < 1) throw Error(ErrorKind::Config, "denoiser needs levels >= 1");
  if (static_cast<int>(channels.size()) != levels)
    throw Error(ErrorKind::Config, "channels must list one width per level");
  if (cheb_order < 1) throw Error(ErrorKind::Config, "Chebyshev order must be >= 1");
  if (heads < 1 || token_dim % heads != 0) throw Error(ErrorKind::Config, "token dim must be divisible by heads");
  for (int c : channels)
    if (c < 1 || c % heads != 0) throw Error(ErrorKind::Config, "every channel width must be divisible by heads");
  if (time_dim < 2 || time_dim % 2 != 0) throw Error(ErrorKind::Config, "time embedding dim must be even");
}

MeshHierarchy build_hierarchy(const MeshTopology& topology, const Mat& rest_vertices, int levels) {
  MeshHierarchy h;
  h.topologies.push_back(topology);
  if (levels > 1) {
    h.pooling = build_pooling_hierarchy(topology, rest_vertices, levels - 1);
    for (const auto& p : h.pooling) h.topologies.push_back(p.coarse_topology);
  }
  for (const auto& t : h.topologies) h.operators.push_back(graph_operator(t));
  return h;
}

namespace {

struct BlockShape {
  std::string prefix;
  int level;
  int in_channels;
  bool cross;
};

std::vector<BlockShape> block_shapes(const DenoiserConfig& c) {
  std::vector<BlockShape> out;
  const int L = c.levels;
  for (int l = 0; l + 1 < L; ++l)
    out.push_back({"enc" + std::to_string(l), l, l == 0 ? c.channels[0] : c.channels[l - 1], c.cross_attention_all});
  out.push_back({"mid", L - 1, L >= 2 ? c.channels[L - 2] : c.channels[0], true});
  for (int l = L - 2; l >= 0; --l)
    out.push_back({"dec" + std::to_string(l), l, c.channels[l + 1] + c.channels[l], c.cross_attention_all});
  return out;
}

int conv_taps(const DenoiserConfig& c) { return c.use_gcn ? c.cheb_order : 1; }

void check_hierarchy(const DenoiserConfig& config, const MeshHierarchy& hierarchy) {
  config.validate();
  if (hierarchy.depth() < config.levels)
    throw Error(ErrorKind::Config, "mesh hierarchy has " + std::to_string(hierarchy.depth()) +
                                       " levels, the denoiser needs " + std::to_string(config.levels));
}

}  // namespace

ModelParams init_params(const DenoiserConfig& config, const MeshHierarchy& hierarchy, std::uint64_t seed) {
  check_hierarchy(config, hierarchy);
  Rng rng = make_rng(seed, 0xd0);
  ModelParams p;
  const int k = conv_taps(config);
  const int td = config.time_dim;
  add_linear(p, "time.l1", td, td, rng);
  add_linear(p, "time.l2", td, td, rng);
  add_linear(p, "in", 3, config.channels[0], rng);
  for (int l = 0; l < config.levels; ++l)
    p.tensors["pos" + std::to_string(l)] = init_normal(rng, hierarchy.vertex_count(l), config.channels[l], 0.02);
  for (const auto& b : block_shapes(config)) {
    const int c = config.channels[b.level];
    add_linear(p, b.prefix + ".g1", b.in_channels * k, c, rng);
    add_linear(p, b.prefix + ".film", td, 2 * c, rng, 0.1);
    add_linear(p, b.prefix + ".g2", c * k, c, rng, 0.5);
    add_attention_layer(p, b.prefix + ".sa", c, c, rng);
    if (b.cross) add_attention_layer(p, b.prefix + ".ca", c, config.token_dim, rng);
  }
  add_layer_norm(p, "out_ln", config.channels[0]);
  add_linear(p, "out", config.channels[0], 3, rng, 0.1);
  return p;
}

std::size_t expected_param_count(const DenoiserConfig& config, const MeshHierarchy& hierarchy) {
  check_hierarchy(config, hierarchy);
  const std::size_t k = conv_taps(config), td = config.time_dim, d = config.token_dim;
  auto lin = [](std::size_t i, std::size_t o) { return i * o + o; };
  auto attn = [&](std::size_t c, std::size_t ctx) { return 2 * c + c * c + 2 * ctx * c + lin(c, c); };
  std::size_t n = 2 * lin(td, td) + lin(3, config.channels[0]);
  for (int l = 0; l < config.levels; ++l)
    n += static_cast<std::size_t>(hierarchy.vertex_count(l)) * config.channels[l];
  for (const auto& b : block_shapes(config)) {
    const std::size_t c = config.channels[b.level];
    n += lin(b.in_channels * k, c) + lin(td, 2 * c) + lin(c * k, c) + attn(c, c);
    if (b.cross) n += attn(c, d);
  }
  n += 2 * config.channels[0] + lin(config.channels[0], 3);
  return n;
}

ag::Var gcn_layer(ag::Var x, const GraphOperator& op, ag::Var weight, ag::Var bias, int order, bool activate) {
  if (op.op.rows() != x.rows()) throw Error(ErrorKind::Model, "gcn_layer: operator does not match features");
  if (weight.rows() != x.cols() * order || bias.cols() != weight.cols())
    throw Error(ErrorKind::Model, "gcn_layer: weight shape does not match input width and order");
  ag::Var basis = order == 1 ? x : ag::cheb_basis(op.op, x, order);
  ag::Var y = ag::add_row(ag::matmul(basis, weight), bias);
  return activate ? ag::gelu(y) : y;
}

Mat sinusoidal_embedding(double t, int dim) {
  const int half = dim / 2;
  Mat e(1, dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
    e(0, i) = std::sin(t * freq);
    e(0, half + i) = std::cos(t * freq);
  }
  return e;
}

ag::Var timestep_embed_var(const ParamSet& p, int t, int dim) {
  if (t < 0) throw Error(ErrorKind::Input, "timestep must be >= 0");
  ag::Var e = p.tape().constant(sinusoidal_embedding(t, dim));
  return linear(p, "time.l2", ag::silu(linear(p, "time.l1", e)));
}

Mat timestep_embed(const ModelParams& params, int t, int dim) {
  ag::Tape tape;
  ParamSet p(tape, params, false);
  return timestep_embed_var(p, t, dim).value();
}

namespace {

ag::Var conv(const ParamSet& p, const DenoiserConfig& c, const GraphOperator& op, const std::string& name,
             ag::Var x) {
  return gcn_layer(x, op, p[name + ".w"], p[name + ".b"], conv_taps(c), true);
}

}  // namespace

BlockOutput block_forward(const ParamSet& p, const DenoiserConfig& config, const MeshHierarchy& hierarchy,
                          const std::string& prefix, int level, Direction direction, ag::Var features,
                          const std::optional<ag::Var>& skip, ag::Var t_embed, const TokenVars& tokens) {
  const bool decoder = prefix.rfind("dec", 0) == 0;
  if (decoder && !skip) throw Error(ErrorKind::Model, "block " + prefix + " needs a skip tensor");
  if (level < 0 || level >= config.levels) throw Error(ErrorKind::Model, "block level out of range");
  const GraphOperator& op = hierarchy.operators.at(level);
  if (features.rows() != hierarchy.vertex_count(level))
    throw Error(ErrorKind::Model, "block " + prefix + ": feature rows do not match level vertex count");

  ag::Var h = features;
  if (skip) h = ag::concat_cols(h, *skip);
  h = conv(p, config, op, prefix + ".g1", h);
  h = ag::film(h, linear(p, prefix + ".film", t_embed));
  h = ag::add(h, p["pos" + std::to_string(level)]);
  h = ag::add(h, conv(p, config, op, prefix + ".g2", h));
  h = ag::add(h, attention_layer(p, prefix + ".sa", h, nullptr, config.heads, {}));
  if (p.contains(prefix + ".ca.wq")) {
    if (tokens.tokens.cols() != config.token_dim ||
        static_cast<Eigen::Index>(tokens.mask.size()) != tokens.tokens.rows())
      throw Error(ErrorKind::Model, "condition tokens do not match the token dimension");
    h = ag::add(h, attention_layer(p, prefix + ".ca", h, &tokens.tokens, config.heads, tokens.mask));
  }
  BlockOutput out{h, h};
  switch (direction) {
    case Direction::Down:
      if (level + 1 >= hierarchy.depth()) throw Error(ErrorKind::Model, "no coarser level to pool into");
      out.out = ag::sparse_mm(hierarchy.pooling[level].down, h);
      break;
    case Direction::Up:
      if (level == 0) throw Error(ErrorKind::Model, "no finer level to unpool into");
      out.out = ag::sparse_mm(hierarchy.pooling[level - 1].up, h);
      break;
    case Direction::None:
      break;
  }
  return out;
}

ag::Var denoise_var(const ParamSet& p, const DenoiserConfig& config, const MeshHierarchy& hierarchy, ag::Var x_t,
                    int t, const TokenVars& tokens) {
  if (x_t.rows() != hierarchy.vertex_count(0) || x_t.cols() != 3)
    throw Error(ErrorKind::Model, "x_t must be V x 3 with V matching the template");
  if (!x_t.value().allFinite()) throw Error(ErrorKind::Numeric, "x_t contains non-finite values");
  const int L = config.levels;
  ag::Var temb = ag::silu(timestep_embed_var(p, t, config.time_dim));
  ag::Var h = linear(p, "in", x_t);
  std::vector<ag::Var> skips(L);
  for (int l = 0; l + 1 < L; ++l) {
    BlockOutput b = block_forward(p, config, hierarchy, "enc" + std::to_string(l), l, Direction::Down, h,
                                  std::nullopt, temb, tokens);
    skips[l] = b.skip;
    h = b.out;
  }
  h = block_forward(p, config, hierarchy, "mid", L - 1, L > 1 ? Direction::Up : Direction::None, h, std::nullopt,
                    temb, tokens)
          .out;
  for (int l = L - 2; l >= 0; --l)
    h = block_forward(p, config, hierarchy, "dec" + std::to_string(l), l, l > 0 ? Direction::Up : Direction::None,
                      h, skips[l], temb, tokens)
            .out;
  return linear(p, "out", layer_norm(p, "out_ln", h));
}

Mat denoise(const ModelParams& params, const DenoiserConfig& config, const MeshHierarchy& hierarchy,
            const Mat& x_t, int t, const ConditionTokens& tokens) {
  ag::Tape tape;
  ParamSet p(tape, params, false);
  TokenVars tv{tape.constant(tokens.tokens), tokens.mask};
  return denoise_var(p, config, hierarchy, tape.constant(x_t), t, tv).value();
}

}  // namespace handiff
