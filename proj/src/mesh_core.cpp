#include "handiff/mesh_core.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <queue>

namespace handiff {

namespace {

Edge make_edge(int a, int b) { return a < b ? Edge{a, b} : Edge{b, a}; }

std::vector<std::vector<int>> adjacency_from_edges(const std::vector<Edge>& edges, int n) {
  std::vector<std::vector<int>> adj(n);
  for (const auto& e : edges) {
    adj[e[0]].push_back(e[1]);
    adj[e[1]].push_back(e[0]);
  }
  for (auto& a : adj) std::sort(a.begin(), a.end());
  return adj;
}

}  // namespace

bool MeshTopology::connected() const {
  if (vertex_count == 0) return false;
  std::vector<char> seen(vertex_count, 0);
  std::queue<int> q;
  q.push(0);
  seen[0] = 1;
  int count = 1;
  while (!q.empty()) {
    const int v = q.front();
    q.pop();
    for (int w : adjacency[v])
      if (!seen[w]) {
        seen[w] = 1;
        ++count;
        q.push(w);
      }
  }
  return count == vertex_count;
}

MeshTopology build_topology(const std::vector<Face>& faces, int vertex_count) {
  if (vertex_count <= 0) throw Error(ErrorKind::Input, "vertex_count must be positive");
  if (faces.empty()) throw Error(ErrorKind::Input, "at least one face is required");
  std::map<Edge, int> incidence;
  for (const auto& f : faces) {
    for (int k = 0; k < 3; ++k) {
      if (f[k] < 0 || f[k] >= vertex_count)
        throw Error(ErrorKind::Input, "face index " + std::to_string(f[k]) + " out of range");
    }
    if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2])
      throw Error(ErrorKind::Input, "face repeats a vertex");
    for (int k = 0; k < 3; ++k) ++incidence[make_edge(f[k], f[(k + 1) % 3])];
  }
  MeshTopology topo;
  topo.vertex_count = vertex_count;
  topo.faces = faces;
  topo.edges.reserve(incidence.size());
  for (const auto& [e, count] : incidence) {
    if (count > 2)
      throw Error(ErrorKind::NonManifold, "edge (" + std::to_string(e[0]) + "," +
                                              std::to_string(e[1]) + ") borders " +
                                              std::to_string(count) + " faces");
    topo.edges.push_back(e);
  }
  topo.adjacency = adjacency_from_edges(topo.edges, vertex_count);
  return topo;
}

MeshTopology build_graph_topology(const std::vector<Edge>& edges, int vertex_count) {
  if (vertex_count <= 0) throw Error(ErrorKind::Input, "vertex_count must be positive");
  std::vector<Edge> sorted;
  sorted.reserve(edges.size());
  for (const auto& e : edges) {
    if (e[0] < 0 || e[1] < 0 || e[0] >= vertex_count || e[1] >= vertex_count)
      throw Error(ErrorKind::Input, "edge index out of range");
    if (e[0] != e[1]) sorted.push_back(make_edge(e[0], e[1]));
  }
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  MeshTopology topo;
  topo.vertex_count = vertex_count;
  topo.edges = std::move(sorted);
  topo.adjacency = adjacency_from_edges(topo.edges, vertex_count);
  return topo;
}

std::vector<PoolingLevel> build_pooling_hierarchy(const MeshTopology& topology,
                                                  const Mat& rest_vertices, int levels) {
  if (levels < 1) throw Error(ErrorKind::Config, "pooling hierarchy needs levels >= 1");
  if (rest_vertices.rows() != topology.vertex_count || rest_vertices.cols() != 3)
    throw Error(ErrorKind::Input, "rest vertices do not match topology");
  if (!topology.connected()) throw Error(ErrorKind::Topology, "topology is not connected");

  std::vector<PoolingLevel> out;
  const MeshTopology* fine = &topology;
  Mat positions = rest_vertices;
  for (int level = 0; level < levels; ++level) {
    const int n = fine->vertex_count;
    std::vector<int> order(fine->edges.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> len(fine->edges.size());
    for (std::size_t i = 0; i < fine->edges.size(); ++i)
      len[i] = (positions.row(fine->edges[i][0]) - positions.row(fine->edges[i][1])).norm();
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return len[a] < len[b]; });

    std::vector<int> cluster(n, -1);
    int clusters = 0;
    for (int ei : order) {
      const auto& e = fine->edges[ei];
      if (cluster[e[0]] < 0 && cluster[e[1]] < 0) {
        cluster[e[0]] = cluster[e[1]] = clusters++;
      }
    }
    // Leftovers: attach to the nearest already-clustered neighbour. Repeat
    // until stable in case a leftover only touches other leftovers.
    bool changed = true;
    while (changed) {
      changed = false;
      for (int v = 0; v < n; ++v) {
        if (cluster[v] >= 0) continue;
        int best = -1;
        double best_len = 0.0;
        for (int w : fine->adjacency[v]) {
          if (cluster[w] < 0) continue;
          const double l = (positions.row(v) - positions.row(w)).norm();
          if (best < 0 || l < best_len) {
            best = w;
            best_len = l;
          }
        }
        if (best >= 0) {
          cluster[v] = cluster[best];
          changed = true;
        }
      }
    }
    for (int v = 0; v < n; ++v)
      if (cluster[v] < 0) cluster[v] = clusters++;  // isolated, cannot happen on connected input

    if (clusters < 8)
      throw Error(ErrorKind::Config, "pooling level " + std::to_string(level + 1) + " would have " +
                                         std::to_string(clusters) + " < 8 vertices");

    std::vector<int> size(clusters, 0);
    for (int v = 0; v < n; ++v) ++size[cluster[v]];
    std::vector<Eigen::Triplet<double>> dt, ut;
    for (int v = 0; v < n; ++v) {
      dt.emplace_back(cluster[v], v, 1.0 / size[cluster[v]]);
      ut.emplace_back(v, cluster[v], 1.0);
    }
    PoolingLevel pl;
    pl.down.resize(clusters, n);
    pl.down.setFromTriplets(dt.begin(), dt.end());
    pl.up.resize(n, clusters);
    pl.up.setFromTriplets(ut.begin(), ut.end());
    pl.cluster_of = cluster;
    std::vector<Edge> coarse_edges;
    for (const auto& e : fine->edges)
      if (cluster[e[0]] != cluster[e[1]]) coarse_edges.push_back({cluster[e[0]], cluster[e[1]]});
    pl.coarse_topology = build_graph_topology(coarse_edges, clusters);
    positions = pl.down * positions;
    out.push_back(std::move(pl));
    fine = &out.back().coarse_topology;
  }
  return out;
}

GraphOperator graph_operator(const MeshTopology& topology) {
  if (!topology.connected()) throw Error(ErrorKind::Topology, "graph is disconnected");
  const int n = topology.vertex_count;
  // L = I - D^-1/2 A D^-1/2 has spectrum in [0, 2]; with lambda_max = 2 the
  // rescaled operator reduces to -D^-1/2 A D^-1/2.
  GraphOperator g;
  g.lambda_max = 2.0;
  std::vector<Eigen::Triplet<double>> trip;
  for (int v = 0; v < n; ++v) {
    const double dv = static_cast<double>(topology.adjacency[v].size());
    const double lvv = dv > 0 ? 1.0 : 0.0;
    trip.emplace_back(v, v, 2.0 * lvv / g.lambda_max - 1.0);
    for (int w : topology.adjacency[v]) {
      const double dw = static_cast<double>(topology.adjacency[w].size());
      trip.emplace_back(v, w, 2.0 * (-1.0 / std::sqrt(dv * dw)) / g.lambda_max);
    }
  }
  g.op.resize(n, n);
  g.op.setFromTriplets(trip.begin(), trip.end());
  g.op.prune(0.0, 0.0);
  return g;
}

NormalsResult face_normals(const Mat& vertices, const MeshTopology& topology) {
  NormalsResult r;
  r.normals = Mat::Zero(topology.face_count(), 3);
  for (int f = 0; f < topology.face_count(); ++f) {
    const auto& face = topology.faces[f];
    const Vec3 a = vertices.row(face[0]).transpose();
    const Vec3 b = vertices.row(face[1]).transpose();
    const Vec3 c = vertices.row(face[2]).transpose();
    const Vec3 n = (b - a).cross(c - a);
    const double twice_area = n.norm();
    if (0.5 * twice_area <= 1e-12) {
      r.degenerate_faces.push_back(f);
      continue;
    }
    r.normals.row(f) = (n / twice_area).transpose();
  }
  return r;
}

Mat edge_vectors(const Mat& vertices, const MeshTopology& topology) {
  Mat e(topology.edge_count(), 3);
  for (int i = 0; i < topology.edge_count(); ++i)
    e.row(i) = vertices.row(topology.edges[i][1]) - vertices.row(topology.edges[i][0]);
  return e;
}

Vec edge_lengths(const Mat& vertices, const MeshTopology& topology) {
  return edge_vectors(vertices, topology).rowwise().norm();
}

Mat regress_joints(const Mat& vertices, const JointRegressor& regressor) {
  if (regressor.weights.cols() != vertices.rows() || vertices.cols() != 3)
    throw Error(ErrorKind::Input, "regressor expects " + std::to_string(regressor.weights.cols()) +
                                      " vertices, got " + std::to_string(vertices.rows()));
  return regressor.weights * vertices;
}

Mat SimilarityTransform::apply(const Mat& points) const {
  Mat out = points * (scale * rotation).transpose();
  out.rowwise() += translation.transpose();
  return out;
}

Alignment procrustes_align(const Mat& pred, const Mat& target, bool with_scale) {
  if (pred.rows() != target.rows() || pred.cols() != 3 || target.cols() != 3)
    throw Error(ErrorKind::Input, "procrustes: point sets must both be N x 3");
  if (pred.rows() < 3) throw Error(ErrorKind::DegenerateAlignment, "need at least 3 points");
  const double n = static_cast<double>(pred.rows());
  const Eigen::RowVector3d mp = pred.colwise().mean();
  const Eigen::RowVector3d mt = target.colwise().mean();
  const Mat p = pred.rowwise() - mp;
  const Mat q = target.rowwise() - mt;

  Eigen::JacobiSVD<Mat> psvd(p);
  const auto sv = psvd.singularValues();
  if (sv[0] <= 1e-12 || sv[1] <= 1e-9 * sv[0])
    throw Error(ErrorKind::DegenerateAlignment, "point configuration is rank deficient");

  const Mat3 cov = q.transpose() * p / n;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2, 2) = -1.0;
  Alignment a;
  a.transform.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  const double var_p = p.squaredNorm() / n;
  a.transform.scale = with_scale ? (svd.singularValues().asDiagonal() * d).trace() / var_p : 1.0;
  a.transform.translation =
      mt.transpose() - a.transform.scale * a.transform.rotation * mp.transpose();
  a.aligned = a.transform.apply(pred);
  a.residual = (a.aligned - target).squaredNorm();
  return a;
}

}  // namespace handiff
