#include "handiff/mesh_export.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace handiff {

MeshFormat mesh_format_from_string(const std::string& s) {
  if (s == "obj") return MeshFormat::Obj;
  if (s == "ply") return MeshFormat::Ply;
  throw Error(ErrorKind::Usage, "mesh format must be obj or ply, got '" + s + "'");
}

MeshFormat mesh_format_for(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext.empty()) throw Error(ErrorKind::Usage, "cannot infer mesh format of " + path.string());
  return mesh_format_from_string(ext.substr(1));
}

namespace {

std::string obj_text(const Mat& v, const MeshTopology& topo) {
  std::string out;
  char line[128];
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    std::snprintf(line, sizeof line, "v %.6f %.6f %.6f\n", v(i, 0), v(i, 1), v(i, 2));
    out += line;
  }
  for (const Face& f : topo.faces) {
    std::snprintf(line, sizeof line, "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
    out += line;
  }
  return out;
}

std::string ply_bytes(const Mat& v, const MeshTopology& topo) {
  std::ostringstream head;
  head << "ply\nformat binary_little_endian 1.0\n"
       << "element vertex " << v.rows() << "\n"
       << "property float x\nproperty float y\nproperty float z\n"
       << "element face " << topo.face_count() << "\n"
       << "property list uchar uint vertex_indices\nend_header\n";
  std::string out = head.str();
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (int k = 0; k < 3; ++k) {
      const float x = static_cast<float>(v(i, k));
      out.append(reinterpret_cast<const char*>(&x), sizeof x);
    }
  for (const Face& f : topo.faces) {
    out.push_back(static_cast<char>(3));
    for (int k : f) {
      const std::uint32_t idx = static_cast<std::uint32_t>(k);
      out.append(reinterpret_cast<const char*>(&idx), sizeof idx);
    }
  }
  return out;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Storage, "cannot read " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

ImportedMesh parse_obj(const std::string& text, const std::string& name) {
  ImportedMesh m;
  std::vector<double> xyz;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) throw Error(ErrorKind::Input, "bad vertex line in " + name);
      xyz.insert(xyz.end(), {x, y, z});
    } else if (tag == "f") {
      Face f;
      for (int k = 0; k < 3; ++k) {
        std::string tok;
        if (!(ls >> tok)) throw Error(ErrorKind::Input, "bad face line in " + name);
        f[k] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      m.faces.push_back(f);
    }
  }
  m.vertices.resize(static_cast<Eigen::Index>(xyz.size() / 3), 3);
  for (std::size_t i = 0; i < xyz.size(); ++i) m.vertices.data()[i] = xyz[i];
  return m;
}

ImportedMesh parse_ply(const std::string& bytes, const std::string& name) {
  const std::string marker = "end_header\n";
  const std::size_t end = bytes.find(marker);
  if (end == std::string::npos) throw Error(ErrorKind::Input, "missing PLY header end in " + name);
  std::istringstream head(bytes.substr(0, end));
  std::string line;
  long nv = -1, nf = -1;
  bool little = false;
  while (std::getline(head, line)) {
    std::istringstream ls(line);
    std::string a, b;
    ls >> a >> b;
    if (a == "format") little = b == "binary_little_endian";
    if (a == "element" && b == "vertex") ls >> nv;
    if (a == "element" && b == "face") ls >> nf;
  }
  if (!little || nv < 0 || nf < 0) throw Error(ErrorKind::Input, "unsupported PLY layout in " + name);
  std::size_t pos = end + marker.size();
  const std::size_t need = pos + static_cast<std::size_t>(nv) * 12 + static_cast<std::size_t>(nf) * 13;
  if (bytes.size() != need) throw Error(ErrorKind::Input, "PLY payload size mismatch in " + name);
  ImportedMesh m;
  m.vertices.resize(nv, 3);
  for (long i = 0; i < nv; ++i)
    for (int k = 0; k < 3; ++k, pos += 4) {
      float x;
      std::memcpy(&x, bytes.data() + pos, 4);
      m.vertices(i, k) = x;
    }
  for (long i = 0; i < nf; ++i) {
    if (static_cast<unsigned char>(bytes[pos]) != 3) throw Error(ErrorKind::Input, "non-triangle face in " + name);
    ++pos;
    Face f;
    for (int k = 0; k < 3; ++k, pos += 4) {
      std::uint32_t idx;
      std::memcpy(&idx, bytes.data() + pos, 4);
      f[k] = static_cast<int>(idx);
    }
    m.faces.push_back(f);
  }
  return m;
}

}  // namespace

void export_mesh(const Mat& vertices, const MeshTopology& topology, MeshFormat format,
                 const std::filesystem::path& path) {
  if (vertices.rows() != topology.vertex_count || vertices.cols() != 3)
    throw Error(ErrorKind::Input, "vertices do not match the topology");
  const std::string payload = format == MeshFormat::Obj ? obj_text(vertices, topology) : ply_bytes(vertices, topology);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::Storage, "cannot write " + path.string());
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!f) throw Error(ErrorKind::Storage, "write failed for " + path.string());
}

void export_mesh(const Mat& vertices, const MeshTopology& topology, const std::filesystem::path& path) {
  export_mesh(vertices, topology, mesh_format_for(path), path);
}

ImportedMesh import_mesh(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  return mesh_format_for(path) == MeshFormat::Obj ? parse_obj(bytes, path.string()) : parse_ply(bytes, path.string());
}

}  // namespace handiff
