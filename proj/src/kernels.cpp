#include "handiff/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <numeric>

namespace handiff::par {

SiResult si(const Mat& vertices, const MeshTopology& topology, double eps) {
  if (vertices.rows() != topology.vertex_count || vertices.cols() != 3)
    throw Error(ErrorKind::Input, "vertices do not match the topology");
  const int f = topology.face_count();
  if (f == 0) throw Error(ErrorKind::Input, "SI needs a mesh with faces");
  SiResult out;
  std::vector<char> degenerate(f, 0);
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> lo(f, 3), hi(f, 3);
  for (int i = 0; i < f; ++i) {
    const Face& t = topology.faces[i];
    const Vec3 a = vertices.row(t[0]), b = vertices.row(t[1]), c = vertices.row(t[2]);
    if (0.5 * (b - a).cross(c - a).norm() <= 1e-12) {
      degenerate[i] = 1;
      out.degenerate_faces.push_back(i);
    }
    lo.row(i) = a.cwiseMin(b).cwiseMin(c).transpose().array() - eps;
    hi.row(i) = a.cwiseMax(b).cwiseMax(c).transpose().array() + eps;
  }
  std::vector<int> order(f);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return lo(a, 0) < lo(b, 0) || (lo(a, 0) == lo(b, 0) && a < b); });

  std::vector<char> hit(f, 0);
#pragma omp parallel
  {
    std::vector<char> local(f, 0);
#pragma omp for schedule(dynamic, 16)
    for (int oi = 0; oi < f; ++oi) {
      const int i = order[oi];
      if (degenerate[i]) continue;
      const Face& p = topology.faces[i];
      for (int oj = oi + 1; oj < f; ++oj) {
        const int j = order[oj];
        if (lo(j, 0) > hi(i, 0)) break;
        if (degenerate[j]) continue;
        if (lo(j, 1) > hi(i, 1) || lo(i, 1) > hi(j, 1) || lo(j, 2) > hi(i, 2) || lo(i, 2) > hi(j, 2)) continue;
        const Face& q = topology.faces[j];
        bool shared = false;
        for (int x : p)
          for (int y : q) shared |= x == y;
        if (shared) continue;
        // Keep the reference argument order (lower face index first).
        const Face& u = i < j ? p : q;
        const Face& v = i < j ? q : p;
        if (triangles_intersect(vertices.row(u[0]), vertices.row(u[1]), vertices.row(u[2]), vertices.row(v[0]),
                                vertices.row(v[1]), vertices.row(v[2]), eps))
          local[i] = local[j] = 1;
      }
    }
#pragma omp critical(handiff_si_merge)
    for (int i = 0; i < f; ++i) hit[i] |= local[i];
  }
  for (int i = 0; i < f; ++i)
    if (hit[i]) out.faces.push_back(i);
  out.percent = 100.0 * static_cast<double>(out.faces.size()) / f;
  return out;
}

std::vector<double> pairwise_mean_distances(const std::vector<Mat>& meshes) {
  if (meshes.size() < 2) throw Error(ErrorKind::Input, "need at least 2 meshes");
  for (const Mat& m : meshes)
    if (m.rows() != meshes[0].rows() || m.cols() != 3)
      throw Error(ErrorKind::Input, "meshes must share the vertex count");
  const long n = static_cast<long>(meshes.size());
  std::vector<double> out(static_cast<std::size_t>(n * (n - 1) / 2));
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    std::size_t k = static_cast<std::size_t>(i * (2 * n - i - 1) / 2);
    for (long j = i + 1; j < n; ++j, ++k) out[k] = mean_vertex_distance(meshes[i], meshes[j]);
  }
  return out;
}

double apd(const std::vector<Mat>& meshes) {
  const std::vector<double> d = pairwise_mean_distances(meshes);
  // Serial sum in pair order so the result matches the reference bit for bit.
  double s = 0.0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

int configured_workers() {
  const char* env = std::getenv("HANDIFF_WORKERS");
  if (!env) return 0;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1 || v > 1024) return 0;
  return static_cast<int>(v);
}

void apply_worker_env() {
  const int w = configured_workers();
  if (w > 0) omp_set_num_threads(w);
}

}  // namespace handiff::par
