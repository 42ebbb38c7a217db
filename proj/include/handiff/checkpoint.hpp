#pragma once

// Checkpoint archive: a directory holding
//   checkpoint.json  format tag, version, step, run config, hashes, metric history
//   params.bin       model parameters (named arrays, f64)
//   topology.json    template mesh and pooling hierarchy
//   regressor.bin    joint regressor
//   optimizer.bin    optional AdamW moments
// Training writes checkpoints under <run>/checkpoints/step_NNNNNNNN and points
// <run>/latest at the newest one. Both updates go through a rename, so an
// interrupted run always leaves a loadable checkpoint behind.

#include "handiff/config.hpp"

#include <filesystem>
#include <optional>

namespace handiff {

constexpr int kCheckpointVersion = 1;

struct OptimizerState {
  ModelParams m;
  ModelParams v;
  int step = 0;
};

struct Checkpoint {
  RunConfig config;
  HandModel model;
  int step = 0;
  Json history = Json::array();  // objects with at least "step"
  std::optional<OptimizerState> optimizer;

  std::uint64_t hash() const;
};

Json topology_to_json(const MeshTopology& topology, const Mat& template_vertices, const MeshHierarchy& hierarchy);
// Returns the template topology and vertices and rebuilds the hierarchy.
void topology_from_json(const Json& j, MeshTopology& topology, Mat& template_vertices, MeshHierarchy& hierarchy);

// Writes into dir (created; must not exist) via a temporary sibling.
void write_checkpoint_dir(const std::filesystem::path& dir, const Checkpoint& ckpt);
// Adds a step checkpoint to a run directory and repoints "latest". Keeps the
// newest `keep` step directories.
std::filesystem::path save_run_checkpoint(const std::filesystem::path& run_dir, const Checkpoint& ckpt, int keep = 3);

// Accepts a checkpoint directory or a run directory with a "latest" pointer.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path, bool with_optimizer = false);

}  // namespace handiff
