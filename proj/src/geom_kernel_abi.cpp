#include "handiff/geom_kernel_abi.hpp"

#include "handiff/kernels.hpp"

#include <dlfcn.h>

#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>

namespace handiff {

static_assert(std::endian::native == std::endian::little, "transport buffers assume a little-endian host");

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(const std::uint8_t* data, std::size_t offset) {
  T v;
  std::memcpy(&v, data + offset, sizeof(T));
  return v;
}

void check_header(const std::uint8_t* data, std::size_t size, const char* magic) {
  if (!data && size > 0) throw Error(ErrorKind::Input, "null buffer");
  if (size < 16) throw Error(ErrorKind::Input, "buffer shorter than its header");
  if (std::memcmp(data, magic, 4) != 0) throw Error(ErrorKind::Input, std::string("bad magic, expected ") + magic);
  if (get<std::uint32_t>(data, 4) != kGeomAbiVersion) throw Error(ErrorKind::Input, "unsupported buffer version");
}

}  // namespace

std::vector<std::uint8_t> encode_flat_mesh(const Mat& vertices, const MeshTopology& topology) {
  if (vertices.rows() != topology.vertex_count || vertices.cols() != 3)
    throw Error(ErrorKind::Input, "vertices do not match the topology");
  std::vector<std::uint8_t> out;
  out.reserve(16 + 12 * (vertices.rows() + topology.face_count()));
  out.insert(out.end(), {'F', 'M', 'S', 'H'});
  put<std::uint32_t>(out, kGeomAbiVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(vertices.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(topology.face_count()));
  for (Eigen::Index i = 0; i < vertices.size(); ++i) put<float>(out, static_cast<float>(vertices.data()[i]));
  for (const Face& f : topology.faces)
    for (int k : f) put<std::uint32_t>(out, static_cast<std::uint32_t>(k));
  return out;
}

FlatMesh decode_flat_mesh(const std::uint8_t* data, std::size_t size) {
  check_header(data, size, "FMSH");
  FlatMesh m;
  m.vertex_count = get<std::uint32_t>(data, 8);
  m.face_count = get<std::uint32_t>(data, 12);
  const std::uint64_t expected = 16ULL + 12ULL * m.vertex_count + 12ULL * m.face_count;
  if (expected != size) throw Error(ErrorKind::Input, "buffer length does not match its header");
  m.vertices.resize(3ULL * m.vertex_count);
  m.faces.resize(3ULL * m.face_count);
  std::memcpy(m.vertices.data(), data + 16, 12ULL * m.vertex_count);
  std::memcpy(m.faces.data(), data + 16 + 12ULL * m.vertex_count, 12ULL * m.face_count);
  for (float v : m.vertices)
    if (!std::isfinite(v)) throw Error(ErrorKind::Input, "non-finite vertex coordinate");
  for (std::uint32_t i : m.faces)
    if (i >= m.vertex_count) throw Error(ErrorKind::Input, "face index out of range");
  return m;
}

std::vector<std::uint8_t> encode_mesh_batch(const std::vector<Mat>& meshes) {
  if (meshes.empty()) throw Error(ErrorKind::Input, "empty mesh batch");
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'M', 'B', 'A', 'T'});
  put<std::uint32_t>(out, kGeomAbiVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meshes.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meshes[0].rows()));
  for (const Mat& m : meshes) {
    if (m.rows() != meshes[0].rows() || m.cols() != 3) throw Error(ErrorKind::Input, "ragged mesh batch");
    for (Eigen::Index i = 0; i < m.size(); ++i) put<float>(out, static_cast<float>(m.data()[i]));
  }
  return out;
}

MeshBatch decode_mesh_batch(const std::uint8_t* data, std::size_t size) {
  check_header(data, size, "MBAT");
  MeshBatch b;
  b.count = get<std::uint32_t>(data, 8);
  b.vertex_count = get<std::uint32_t>(data, 12);
  const std::uint64_t expected = 16ULL + 12ULL * b.count * static_cast<std::uint64_t>(b.vertex_count);
  if (expected != size) throw Error(ErrorKind::Input, "buffer length does not match its header");
  b.vertices.resize(3ULL * b.count * b.vertex_count);
  std::memcpy(b.vertices.data(), data + 16, b.vertices.size() * sizeof(float));
  for (float v : b.vertices)
    if (!std::isfinite(v)) throw Error(ErrorKind::Input, "non-finite vertex coordinate");
  return b;
}

Mat flat_vertices(const FlatMesh& mesh) {
  Mat v(mesh.vertex_count, 3);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) v.data()[i] = mesh.vertices[i];
  return v;
}

MeshTopology flat_topology(const FlatMesh& mesh) {
  std::vector<Face> faces(mesh.face_count);
  for (std::uint32_t f = 0; f < mesh.face_count; ++f)
    for (int k = 0; k < 3; ++k) faces[f][k] = static_cast<int>(mesh.faces[3 * f + k]);
  return build_topology(faces, static_cast<int>(mesh.vertex_count));
}

std::vector<Mat> batch_meshes(const MeshBatch& batch) {
  std::vector<Mat> out(batch.count, Mat(batch.vertex_count, 3));
  const std::size_t stride = 3ULL * batch.vertex_count;
  for (std::uint32_t m = 0; m < batch.count; ++m)
    for (std::size_t i = 0; i < stride; ++i) out[m].data()[i] = batch.vertices[m * stride + i];
  return out;
}

GeomKernel GeomKernel::reference() { return GeomKernel(); }

GeomKernel GeomKernel::load() {
  const char* env = std::getenv("HANDIFF_GEOM_KERNEL");
  if (!env || !*env) return reference();
  return load_from(env);
}

GeomKernel GeomKernel::load_from(const std::string& library_path) {
  GeomKernel k;
  void* h = dlopen(library_path.c_str(), RTLD_NOW | RTLD_LOCAL);
  if (!h) {
    const char* err = dlerror();
    k.reason_ = std::string("cannot load ") + library_path + ": " + (err ? err : "unknown error");
    return k;
  }
  auto version = reinterpret_cast<hgk_abi_version_fn>(dlsym(h, "hgk_abi_version"));
  auto si_fn = reinterpret_cast<hgk_si_fast_fn>(dlsym(h, "hgk_si_fast"));
  auto pw_fn = reinterpret_cast<hgk_pairwise_fn>(dlsym(h, "hgk_pairwise_mean_distances"));
  if (!version || !si_fn || !pw_fn) {
    k.reason_ = library_path + " does not export the geometry kernel ABI";
    dlclose(h);
    return k;
  }
  if (version() != kGeomAbiVersion) {
    k.reason_ = library_path + " has ABI version " + std::to_string(version());
    dlclose(h);
    return k;
  }
  k.handle_ = h;
  k.library_ = library_path;
  k.si_fn_ = si_fn;
  k.pairwise_fn_ = pw_fn;
  return k;
}

GeomKernel::GeomKernel(GeomKernel&& o) noexcept
    : handle_(o.handle_), library_(std::move(o.library_)), reason_(std::move(o.reason_)), si_fn_(o.si_fn_),
      pairwise_fn_(o.pairwise_fn_) {
  o.handle_ = nullptr;
}

GeomKernel& GeomKernel::operator=(GeomKernel&& o) noexcept {
  if (this != &o) {
    if (handle_) dlclose(handle_);
    handle_ = o.handle_;
    library_ = std::move(o.library_);
    reason_ = std::move(o.reason_);
    si_fn_ = o.si_fn_;
    pairwise_fn_ = o.pairwise_fn_;
    o.handle_ = nullptr;
  }
  return *this;
}

GeomKernel::~GeomKernel() {
  if (handle_) dlclose(handle_);
}

std::string GeomKernel::path() const { return native() ? "native:" + library_ : "reference"; }

namespace {

void check_status(std::int32_t rc, const char* what) {
  if (rc == 0) return;
  throw Error(ErrorKind::Input, std::string("geometry kernel ") + what + " failed with status " + std::to_string(rc));
}

}  // namespace

SiResult GeomKernel::si(const Mat& vertices, const MeshTopology& topology, double eps) const {
  if (!native()) return par::si(vertices, topology, eps);
  const auto buf = encode_flat_mesh(vertices, topology);
  std::vector<std::uint32_t> faces(topology.face_count());
  std::uint64_t n = 0;
  check_status(si_fn_(buf.data(), buf.size(), eps, faces.data(), faces.size(), &n), "si_fast");
  if (n > faces.size()) throw Error(ErrorKind::Input, "geometry kernel reported more faces than exist");
  SiResult r;
  r.faces.assign(faces.begin(), faces.begin() + static_cast<std::ptrdiff_t>(n));
  r.percent = 100.0 * static_cast<double>(n) / topology.face_count();
  return r;
}

std::vector<double> GeomKernel::pairwise_mean_distances(const std::vector<Mat>& meshes) const {
  if (!native()) return par::pairwise_mean_distances(meshes);
  if (meshes.size() < 2) throw Error(ErrorKind::Input, "need at least 2 meshes");
  const auto buf = encode_mesh_batch(meshes);
  std::vector<float> out(meshes.size() * (meshes.size() - 1) / 2);
  std::uint64_t n = 0;
  check_status(pairwise_fn_(buf.data(), buf.size(), out.data(), out.size(), &n), "pairwise_mean_distances");
  if (n != out.size()) throw Error(ErrorKind::Input, "geometry kernel returned the wrong number of pairs");
  return std::vector<double>(out.begin(), out.end());
}

double GeomKernel::apd(const std::vector<Mat>& meshes) const {
  const std::vector<double> d = pairwise_mean_distances(meshes);
  double s = 0.0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

}  // namespace handiff
