#pragma once

#include "handiff/synth_hand.hpp"

#include <doctest.h>

#include <functional>

namespace handiff::testing {

// Default rig, built once per test binary.
inline const HandRig& default_rig() {
  static const HandRig rig = build_template();
  return rig;
}

// Central differences of a scalar function at selected coordinates of x.
inline double central_difference(const std::function<double(const Mat&)>& f, Mat x, Eigen::Index r, Eigen::Index c,
                                 double h) {
  const double x0 = x(r, c);
  x(r, c) = x0 + h;
  const double fp = f(x);
  x(r, c) = x0 - h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline Mat random_rotation(Rng& rng) { return uniform_rotation(rng); }

inline Mat tetrahedron() {
  Mat v(4, 3);
  v << 1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1;
  return v;
}

inline std::vector<Face> tetrahedron_faces() { return {{0, 1, 2}, {0, 3, 1}, {0, 2, 3}, {1, 3, 2}}; }

}  // namespace handiff::testing
