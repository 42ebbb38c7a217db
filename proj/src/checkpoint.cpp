#include "handiff/checkpoint.hpp"

#include "handiff/record_io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace handiff {

namespace fs = std::filesystem;

namespace {

Json sparse_json(const SpMat& m) {
  Json rows = Json::array(), cols = Json::array(), vals = Json::array();
  for (int k = 0; k < m.outerSize(); ++k)
    for (SpMat::InnerIterator it(m, k); it; ++it) {
      rows.push_back(it.row());
      cols.push_back(it.col());
      vals.push_back(it.value());
    }
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"i", rows}, {"j", cols}, {"v", vals}};
}

SpMat sparse_from(const Json& j) {
  const auto i = j.at("i").get<std::vector<int>>();
  const auto c = j.at("j").get<std::vector<int>>();
  const auto v = j.at("v").get<std::vector<double>>();
  const int rows = j.at("rows").get<int>(), cols = j.at("cols").get<int>();
  if (i.size() != c.size() || i.size() != v.size()) throw Error(ErrorKind::Storage, "ragged sparse matrix");
  std::vector<Eigen::Triplet<double>> t;
  for (std::size_t k = 0; k < i.size(); ++k) {
    if (i[k] < 0 || i[k] >= rows || c[k] < 0 || c[k] >= cols) throw Error(ErrorKind::Storage, "sparse index out of range");
    t.emplace_back(i[k], c[k], v[k]);
  }
  SpMat m(rows, cols);
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorKind::Storage, "cannot write " + path.string());
  f << text;
  f.flush();
  if (!f) throw Error(ErrorKind::Storage, "write failed for " + path.string());
}

Json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Storage, "cannot read " + path.string());
  try {
    return Json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Storage, "malformed " + path.string() + ": " + e.what());
  }
}

ArrayMap params_arrays(const ModelParams& p, const std::string& prefix = "") {
  ArrayMap a;
  for (const auto& [name, m] : p.tensors) a[prefix + name] = make_array(m, DType::F64);
  return a;
}

ModelParams params_from(const ArrayMap& a, const std::string& prefix = "") {
  ModelParams p;
  for (const auto& [name, arr] : a)
    if (name.compare(0, prefix.size(), prefix) == 0) p.tensors[name.substr(prefix.size())] = arr.as_matrix();
  return p;
}

}  // namespace

std::uint64_t Checkpoint::hash() const {
  std::uint64_t parts[3] = {model.params.hash(), config.hash(), static_cast<std::uint64_t>(step)};
  return fnv1a(parts, sizeof parts);
}

Json topology_to_json(const MeshTopology& topology, const Mat& template_vertices, const MeshHierarchy& hierarchy) {
  Json faces = Json::array();
  for (const Face& f : topology.faces) faces.push_back({f[0], f[1], f[2]});
  Json verts = Json::array();
  for (Eigen::Index i = 0; i < template_vertices.rows(); ++i)
    verts.push_back({template_vertices(i, 0), template_vertices(i, 1), template_vertices(i, 2)});
  Json levels = Json::array();
  for (const PoolingLevel& p : hierarchy.pooling) {
    Json edges = Json::array();
    for (const Edge& e : p.coarse_topology.edges) edges.push_back({e[0], e[1]});
    levels.push_back({{"vertex_count", p.coarse_topology.vertex_count},
                      {"edges", edges},
                      {"cluster_of", p.cluster_of},
                      {"down", sparse_json(p.down)},
                      {"up", sparse_json(p.up)}});
  }
  return Json{{"format", "handiff-topology"},
              {"version", kCheckpointVersion},
              {"vertex_count", topology.vertex_count},
              {"faces", faces},
              {"template_vertices", verts},
              {"levels", levels}};
}

void topology_from_json(const Json& j, MeshTopology& topology, Mat& template_vertices, MeshHierarchy& hierarchy) {
  try {
    if (j.at("format").get<std::string>() != "handiff-topology") throw Error(ErrorKind::Storage, "not a topology artifact");
    if (j.at("version").get<int>() != kCheckpointVersion) throw Error(ErrorKind::Storage, "unsupported topology version");
    const int n = j.at("vertex_count").get<int>();
    std::vector<Face> faces;
    for (const auto& f : j.at("faces")) faces.push_back(f.get<Face>());
    topology = build_topology(faces, n);
    const auto& verts = j.at("template_vertices");
    if (static_cast<int>(verts.size()) != n) throw Error(ErrorKind::Storage, "template vertex count mismatch");
    template_vertices.resize(n, 3);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) template_vertices(i, k) = verts[i][k].get<double>();
    hierarchy = MeshHierarchy{};
    hierarchy.topologies.push_back(topology);
    for (const auto& l : j.at("levels")) {
      PoolingLevel p;
      std::vector<Edge> edges;
      for (const auto& e : l.at("edges")) edges.push_back(e.get<Edge>());
      p.coarse_topology = build_graph_topology(edges, l.at("vertex_count").get<int>());
      p.cluster_of = l.at("cluster_of").get<std::vector<int>>();
      p.down = sparse_from(l.at("down"));
      p.up = sparse_from(l.at("up"));
      if (p.down.cols() != hierarchy.topologies.back().vertex_count || p.down.rows() != p.coarse_topology.vertex_count)
        throw Error(ErrorKind::Storage, "pooling operator shape mismatch");
      hierarchy.topologies.push_back(p.coarse_topology);
      hierarchy.pooling.push_back(std::move(p));
    }
    for (const auto& t : hierarchy.topologies) hierarchy.operators.push_back(graph_operator(t));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Storage, std::string("malformed topology artifact: ") + e.what());
  }
}

void write_checkpoint_dir(const fs::path& dir, const Checkpoint& c) {
  if (fs::exists(dir)) throw Error(ErrorKind::Storage, dir.string() + " already exists");
  const fs::path tmp = dir.string() + ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  if (!fs::create_directories(tmp, ec) && ec) throw Error(ErrorKind::Storage, "cannot create " + tmp.string());

  const HandModel& m = c.model;
  write_arrays(tmp / "params.bin", params_arrays(m.params));
  write_regressor(tmp / "regressor.bin", m.regressor);
  write_text(tmp / "topology.json", topology_to_json(m.topology, m.template_vertices, m.hierarchy).dump() + "\n");
  if (c.optimizer) {
    ArrayMap a = params_arrays(c.optimizer->m, "m/");
    ArrayMap v = params_arrays(c.optimizer->v, "v/");
    a.insert(v.begin(), v.end());
    Mat step(1, 1);
    step(0, 0) = c.optimizer->step;
    a["step"] = make_array(step, DType::F64);
    write_arrays(tmp / "optimizer.bin", a);
  }
  RunConfig cfg = c.config;
  cfg.model = m.config;
  Json j{{"format", "handiff-checkpoint"},
         {"version", kCheckpointVersion},
         {"step", c.step},
         {"config", to_json(cfg)},
         {"config_hash", hex64(cfg.hash())},
         {"schedule_hash", hex64(m.schedule.hash())},
         {"params_hash", hex64(m.params.hash())},
         {"param_count", m.params.count()},
         {"history", c.history}};
  write_text(tmp / "checkpoint.json", j.dump(2) + "\n");
  fs::rename(tmp, dir, ec);
  if (ec) throw Error(ErrorKind::Storage, "cannot publish checkpoint " + dir.string() + ": " + ec.message());
}

fs::path save_run_checkpoint(const fs::path& run_dir, const Checkpoint& c, int keep) {
  const fs::path root = run_dir / "checkpoints";
  fs::create_directories(root);
  char name[32];
  std::snprintf(name, sizeof name, "step_%08d", c.step);
  const fs::path dir = root / name;
  std::error_code ec;
  if (fs::exists(dir)) fs::remove_all(dir, ec);
  write_checkpoint_dir(dir, c);

  const fs::path tmp = run_dir / "latest.tmp";
  write_text(tmp, std::string("checkpoints/") + name + "\n");
  fs::rename(tmp, run_dir / "latest", ec);
  if (ec) throw Error(ErrorKind::Storage, "cannot update latest pointer: " + ec.message());

  std::vector<fs::path> steps;
  for (const auto& e : fs::directory_iterator(root)) {
    const std::string s = e.path().filename().string();
    if (e.is_directory() && s.rfind("step_", 0) == 0 && s.find(".tmp") == std::string::npos) steps.push_back(e.path());
  }
  std::sort(steps.begin(), steps.end());
  for (std::size_t i = 0; i + keep < steps.size(); ++i) fs::remove_all(steps[i], ec);
  return dir;
}

fs::path resolve_checkpoint(const fs::path& path) {
  if (fs::exists(path / "checkpoint.json")) return path;
  if (fs::exists(path / "latest")) {
    std::ifstream f(path / "latest");
    std::string rel;
    std::getline(f, rel);
    const fs::path dir = path / rel;
    if (fs::exists(dir / "checkpoint.json")) return dir;
    throw Error(ErrorKind::Storage, "latest pointer in " + path.string() + " names a missing checkpoint");
  }
  throw Error(ErrorKind::Storage, "no checkpoint at " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path, bool with_optimizer) {
  const fs::path dir = resolve_checkpoint(path);
  const Json j = read_json(dir / "checkpoint.json");
  Checkpoint c;
  try {
    if (j.at("format").get<std::string>() != "handiff-checkpoint")
      throw Error(ErrorKind::Storage, dir.string() + " is not a checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw Error(ErrorKind::Storage, "unsupported checkpoint version in " + dir.string());
    c.step = j.at("step").get<int>();
    c.history = j.at("history");
    c.config = run_config_from_json(j.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Storage, "malformed checkpoint " + dir.string() + ": " + e.what());
  }
  HandModel& m = c.model;
  m.config = c.config.model;
  topology_from_json(read_json(dir / "topology.json"), m.topology, m.template_vertices, m.hierarchy);
  m.regressor = read_regressor(dir / "regressor.bin");
  m.schedule = m.config.schedule.build();
  m.params = params_from(read_arrays(dir / "params.bin"));
  if (hex64(m.params.hash()) != j.at("params_hash").get<std::string>())
    throw Error(ErrorKind::Storage, "parameter hash mismatch in " + dir.string());
  if (hex64(m.schedule.hash()) != j.at("schedule_hash").get<std::string>())
    throw Error(ErrorKind::Storage, "schedule hash mismatch in " + dir.string());
  if (with_optimizer && fs::exists(dir / "optimizer.bin")) {
    const ArrayMap a = read_arrays(dir / "optimizer.bin");
    OptimizerState s;
    s.m = params_from(a, "m/");
    s.v = params_from(a, "v/");
    auto it = a.find("step");
    if (it == a.end()) throw Error(ErrorKind::Storage, "optimizer state without a step counter");
    s.step = static_cast<int>(it->second.as_matrix()(0, 0));
    c.optimizer = std::move(s);
  }
  return c;
}

}  // namespace handiff
