#pragma once

#include "handiff/conditions.hpp"
#include "handiff/mesh_core.hpp"
#include "handiff/params.hpp"

#include <optional>
#include <string>
#include <vector>

namespace handiff {

struct DenoiserConfig {
  int levels = 3;
  std::vector<int> channels{64, 128, 256};
  int cheb_order = 3;
  int heads = 4;
  int token_dim = 128;
  int time_dim = 64;
  // false: every graph convolution becomes a per-vertex linear map, leaving
  // self-attention as the only cross-vertex mixing (ablation variant).
  bool use_gcn = true;
  // false: cross-attention only in the bottleneck block.
  bool cross_attention_all = true;

  void validate() const;
};

// Template topology plus its coarsened levels, with the graph operator of
// every level. pooling[l] maps level l to level l + 1.
struct MeshHierarchy {
  std::vector<MeshTopology> topologies;
  std::vector<GraphOperator> operators;
  std::vector<PoolingLevel> pooling;

  int depth() const { return static_cast<int>(topologies.size()); }
  int vertex_count(int level) const { return topologies.at(level).vertex_count; }
};

MeshHierarchy build_hierarchy(const MeshTopology& topology, const Mat& rest_vertices, int levels);

enum class Direction { Down, Up, None };

ModelParams init_params(const DenoiserConfig& config, const MeshHierarchy& hierarchy, std::uint64_t seed);

// Parameter count from the configuration alone.
std::size_t expected_param_count(const DenoiserConfig& config, const MeshHierarchy& hierarchy);

// Chebyshev graph convolution [T_0 x .. T_{K-1} x] W + b, optionally followed
// by GELU.
ag::Var gcn_layer(ag::Var x, const GraphOperator& op, ag::Var weight, ag::Var bias, int order,
                  bool activate = true);

// Sinusoidal features of t (dim entries).
Mat sinusoidal_embedding(double t, int dim);
// Sinusoidal features passed through the learned two-layer map.
ag::Var timestep_embed_var(const ParamSet& p, int t, int dim);
Mat timestep_embed(const ModelParams& params, int t, int dim);

struct BlockOutput {
  ag::Var out;   // features after resampling
  ag::Var skip;  // features before resampling
};

// One U-Net block: two graph convolutions (timestep scale-and-shift after the
// first, positional embedding added after it), self-attention,
// cross-attention over unmasked tokens, then resampling. `prefix` names the
// parameter group ("enc0", "mid", "dec1", ...). Decoder blocks need `skip`.
BlockOutput block_forward(const ParamSet& p, const DenoiserConfig& config, const MeshHierarchy& hierarchy,
                          const std::string& prefix, int level, Direction direction, ag::Var features,
                          const std::optional<ag::Var>& skip, ag::Var t_embed, const TokenVars& tokens);

ag::Var denoise_var(const ParamSet& p, const DenoiserConfig& config, const MeshHierarchy& hierarchy, ag::Var x_t,
                    int t, const TokenVars& tokens);

Mat denoise(const ModelParams& params, const DenoiserConfig& config, const MeshHierarchy& hierarchy,
            const Mat& x_t, int t, const ConditionTokens& tokens);

}  // namespace handiff
