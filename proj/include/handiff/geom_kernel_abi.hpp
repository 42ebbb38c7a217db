#pragma once

// Transport buffers and loader for an optional native geometry kernel.
//
// FlatMesh buffer (little-endian):
//   "FMSH" | u32 version | u32 V | u32 F | f32 xyz[3V] | u32 idx[3F]
// Mesh batch buffer:
//   "MBAT" | u32 version | u32 count | u32 V | f32 xyz[count * 3V]
//
// A kernel library exports the C functions below. Return codes: 0 ok,
// 1 malformed buffer, 2 invalid input, 3 output capacity too small.

#include "handiff/metrics.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

extern "C" {
typedef std::uint32_t (*hgk_abi_version_fn)();
typedef std::int32_t (*hgk_si_fast_fn)(const std::uint8_t* buf, std::uint64_t len, double eps, std::uint32_t* out,
                                       std::uint64_t cap, std::uint64_t* out_len);
typedef std::int32_t (*hgk_pairwise_fn)(const std::uint8_t* buf, std::uint64_t len, float* out, std::uint64_t cap,
                                        std::uint64_t* out_len);
}

namespace handiff {

constexpr std::uint32_t kGeomAbiVersion = 1;

enum class GeomStatus : std::int32_t { Ok = 0, Malformed = 1, Invalid = 2, Capacity = 3 };

struct FlatMesh {
  std::vector<float> vertices;        // 3V
  std::vector<std::uint32_t> faces;   // 3F
  std::uint32_t vertex_count = 0;
  std::uint32_t face_count = 0;
};

struct MeshBatch {
  std::vector<float> vertices;  // count * 3V
  std::uint32_t count = 0;
  std::uint32_t vertex_count = 0;
};

std::vector<std::uint8_t> encode_flat_mesh(const Mat& vertices, const MeshTopology& topology);
// Throws Input errors on any malformed buffer (bad magic, version, length,
// index out of range, non-finite coordinate).
FlatMesh decode_flat_mesh(const std::uint8_t* data, std::size_t size);

std::vector<std::uint8_t> encode_mesh_batch(const std::vector<Mat>& meshes);
MeshBatch decode_mesh_batch(const std::uint8_t* data, std::size_t size);

// Double-precision views of decoded buffers, for running the references.
Mat flat_vertices(const FlatMesh& mesh);
MeshTopology flat_topology(const FlatMesh& mesh);
std::vector<Mat> batch_meshes(const MeshBatch& batch);

// Native kernel when HANDIFF_GEOM_KERNEL names a loadable library with the
// expected ABI, in-process implementation otherwise.
class GeomKernel {
 public:
  static GeomKernel load();
  static GeomKernel load_from(const std::string& library_path);
  static GeomKernel reference();

  GeomKernel(GeomKernel&&) noexcept;
  GeomKernel& operator=(GeomKernel&&) noexcept;
  ~GeomKernel();

  bool native() const { return handle_ != nullptr; }
  // "native:<library>" or "reference"
  std::string path() const;
  // Why the native library was not used (empty when it was, or none was requested).
  const std::string& fallback_reason() const { return reason_; }

  SiResult si(const Mat& vertices, const MeshTopology& topology, double eps = 1e-9) const;
  std::vector<double> pairwise_mean_distances(const std::vector<Mat>& meshes) const;
  double apd(const std::vector<Mat>& meshes) const;

 private:
  GeomKernel() = default;
  void* handle_ = nullptr;
  std::string library_;
  std::string reason_;
  hgk_si_fast_fn si_fn_ = nullptr;
  hgk_pairwise_fn pairwise_fn_ = nullptr;
};

}  // namespace handiff
