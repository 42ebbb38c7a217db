#pragma once

// OpenMP versions of the metric hot spots. Each returns exactly what its
// serial counterpart in metrics.hpp returns.

#include "handiff/metrics.hpp"

namespace handiff::par {

// Sweep-and-prune on face bounding boxes, then the exact triangle test.
SiResult si(const Mat& vertices, const MeshTopology& topology, double eps = 1e-9);

std::vector<double> pairwise_mean_distances(const std::vector<Mat>& meshes);
double apd(const std::vector<Mat>& meshes);

// Worker count from HANDIFF_WORKERS; 0 (keep the OpenMP default) when unset or invalid.
int configured_workers();
void apply_worker_env();

}  // namespace handiff::par
