#pragma once

// Named-array container used for dataset records, regressors and model
// parameters.
//
// Layout (little-endian):
//   "HNDA" | u32 version | u32 count
//   per array: u32 name_len | name | u8 dtype (0 = f32, 1 = f64) | u32 ndim |
//              u32 dims[ndim] | payload

#include "handiff/common.hpp"
#include "handiff/mesh_core.hpp"
#include "handiff/synth_hand.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace handiff {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct NamedArray {
  std::vector<std::uint32_t> shape;
  DType dtype = DType::F32;
  std::vector<double> data;  // values widened to double in memory

  Mat as_matrix() const;
};

using ArrayMap = std::map<std::string, NamedArray>;

NamedArray make_array(const Mat& m, DType dtype = DType::F32);

void write_arrays(const std::filesystem::path& path, const ArrayMap& arrays);
ArrayMap read_arrays(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_arrays(const ArrayMap& arrays);
ArrayMap decode_arrays(const std::vector<std::uint8_t>& bytes);

std::filesystem::path record_path(const std::filesystem::path& dataset_dir, int index);
void write_sample(const std::filesystem::path& path, const HandSample& sample);
HandSample read_sample(const std::filesystem::path& path);

void write_regressor(const std::filesystem::path& path, const JointRegressor& regressor);
JointRegressor read_regressor(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest,
                    const DatasetConfig& config);
DatasetManifest read_manifest(const std::filesystem::path& path, DatasetConfig* config = nullptr);

}  // namespace handiff
