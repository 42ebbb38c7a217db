#pragma once

#include "handiff/mesh_core.hpp"

#include <filesystem>
#include <string>

namespace handiff {

enum class MeshFormat { Obj, Ply };

MeshFormat mesh_format_from_string(const std::string& s);  // "obj" or "ply"
MeshFormat mesh_format_for(const std::filesystem::path& path);

// OBJ: "%.6f" vertex lines, 1-based faces. PLY: binary little-endian with
// float32 vertices and uint32 face indices.
void export_mesh(const Mat& vertices, const MeshTopology& topology, MeshFormat format,
                 const std::filesystem::path& path);
void export_mesh(const Mat& vertices, const MeshTopology& topology, const std::filesystem::path& path);

struct ImportedMesh {
  Mat vertices;
  std::vector<Face> faces;
};

ImportedMesh import_mesh(const std::filesystem::path& path);

}  // namespace handiff
