#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace handiff {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;
using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

using Rng = std::mt19937_64;

constexpr int kNumJoints = 21;
constexpr int kNumFingers = 5;

// Failure categories. The CLI maps them onto exit codes.
enum class ErrorKind {
  Input,
  Config,
  Topology,
  NonManifold,
  DegenerateAlignment,
  Pose,
  Visibility,
  Projection,
  Calibration,
  Storage,
  Model,
  Numeric,
  Usage,
  Task,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Independent substream for (seed, stream index). splitmix64 finalizer keeps
// neighbouring indices decorrelated.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(mix_seed(seed, stream));
}

// Box-Muller on top of the raw engine so streams are identical across
// standard library implementations.
double standard_normal(Rng& rng);
double uniform01(Rng& rng);
Mat randn(Rng& rng, Eigen::Index rows, Eigen::Index cols);

// FNV-1a over raw bytes; used for config, rig and schedule hashes.
std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace handiff
