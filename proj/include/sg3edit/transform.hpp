#pragma once

// Rigid 2D transforms in normalized canvas coordinates.
//
// Coordinates are centered on the canvas and measured in units of the canvas
// width: x grows to the right, y grows downward. A transform maps a point of
// the canonical (aligned) content to where it is displayed. Rotation angles
// are degrees, counter-clockwise as seen on screen; translations move content
// right (tx > 0) and down (ty > 0).

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "core.hpp"

namespace sg3 {

struct TransformParams {
  double r = 0.0;   ///< degrees, counter-clockwise on screen
  double tx = 0.0;  ///< canvas widths, positive = right
  double ty = 0.0;  ///< canvas widths, positive = down

  bool finite() const { return std::isfinite(r) && std::isfinite(tx) && std::isfinite(ty); }
  friend bool operator==(const TransformParams&, const TransformParams&) = default;
};

inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// Homogeneous 3x3 rigid transform. Bottom row is (0, 0, 1) and the upper-left
/// block is a proper rotation for every matrix produced by this library,
/// except transient averages which must go through nearest_rigid().
struct TransformMatrix {
  std::array<std::array<double, 3>, 3> m{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

  TransformMatrix() = default;

  static TransformMatrix identity() { return {}; }

  double operator()(int row, int col) const { return m[row][col]; }
  double& operator()(int row, int col) { return m[row][col]; }

  double rotation_rad() const { return std::atan2(m[0][1], m[0][0]); }
  double tx() const { return m[0][2]; }
  double ty() const { return m[1][2]; }

  /// Applies the transform to a point (normalized centered coordinates).
  std::array<double, 2> apply(double x, double y) const {
    return {m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]};
  }

  friend bool operator==(const TransformMatrix&, const TransformMatrix&) = default;
};

/// Rotation about the canvas center, then translation.
inline TransformMatrix params_to_matrix(const TransformParams& p) {
  require(p.finite(), ErrorCode::NonFinite, "transform parameters must be finite");
  TransformMatrix t;
  if (p.r != 0.0) {
    const double a = deg_to_rad(p.r);
    const double c = std::cos(a);
    const double s = std::sin(a);
    t.m = {{{c, s, p.tx}, {-s, c, p.ty}, {0, 0, 1}}};
  } else {
    // Keeps pure translations free of cos/sin rounding.
    t.m = {{{1, 0, p.tx}, {0, 1, p.ty}, {0, 0, 1}}};
  }
  return t;
}

inline TransformParams matrix_to_params(const TransformMatrix& t) {
  return {rad_to_deg(t.rotation_rad()), t.tx(), t.ty()};
}

/// outer * inner: applies inner first.
inline TransformMatrix compose(const TransformMatrix& outer, const TransformMatrix& inner) {
  TransformMatrix out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += outer.m[i][k] * inner.m[k][j];
      out.m[i][j] = acc;
    }
  }
  return out;
}

/// Inverse of a rigid transform (transpose the rotation block).
inline TransformMatrix inverse_rigid(const TransformMatrix& t) {
  TransformMatrix inv;
  inv.m[0][0] = t.m[0][0];
  inv.m[0][1] = t.m[1][0];
  inv.m[1][0] = t.m[0][1];
  inv.m[1][1] = t.m[1][1];
  inv.m[0][2] = -(t.m[0][0] * t.m[0][2] + t.m[1][0] * t.m[1][2]);
  inv.m[1][2] = -(t.m[0][1] * t.m[0][2] + t.m[1][1] * t.m[1][2]);
  return inv;
}

/// Largest deviation of the matrix from the rigid invariant.
inline double rigidity_error(const TransformMatrix& t) {
  const double a = t.m[0][0], b = t.m[0][1], c = t.m[1][0], d = t.m[1][1];
  double err = 0.0;
  err = std::max(err, std::abs(a * a + b * b - 1.0));
  err = std::max(err, std::abs(c * c + d * d - 1.0));
  err = std::max(err, std::abs(a * c + b * d));
  err = std::max(err, std::abs(a * d - b * c - 1.0));
  err = std::max(err, std::abs(t.m[2][0]));
  err = std::max(err, std::abs(t.m[2][1]));
  err = std::max(err, std::abs(t.m[2][2] - 1.0));
  return err;
}

inline bool is_rigid(const TransformMatrix& t, double tol = 1e-10) { return rigidity_error(t) <= tol; }

/// Projects an arbitrary homogeneous matrix onto the nearest rigid transform:
/// homogeneous normalization by m22, then the polar (orthogonal) factor of the
/// 2x2 block, which for 2x2 reduces to a closed-form angle.
inline TransformMatrix nearest_rigid(const TransformMatrix& t) {
  const double w = t.m[2][2];
  require(std::abs(w) > 1e-12, ErrorCode::InvalidArgument, "matrix has zero homogeneous scale");
  const double a = t.m[0][0] / w, b = t.m[0][1] / w, c = t.m[1][0] / w, d = t.m[1][1] / w;
  const double angle = std::atan2(b - c, a + d);
  TransformMatrix out;
  const double cs = std::cos(angle), sn = std::sin(angle);
  out.m = {{{cs, sn, t.m[0][2] / w}, {-sn, cs, t.m[1][2] / w}, {0, 0, 1}}};
  return out;
}

inline double max_abs_diff(const TransformMatrix& a, const TransformMatrix& b) {
  double err = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) err = std::max(err, std::abs(a.m[i][j] - b.m[i][j]));
  return err;
}

}  // namespace sg3
