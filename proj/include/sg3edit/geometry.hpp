#pragma once

// Landmark-based alignment, alignment crops, and field-of-view expansion
// geometry (shift transforms and stitching).

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "image.hpp"
#include "transform.hpp"

namespace sg3 {

using Point = std::array<double, 2>;

/// Landmarks in normalized coordinates of a square canvas: (0, 0) is the
/// top-left corner, (1, 1) the bottom-right.
struct LandmarkSet {
  Point left_eye{};   ///< eye on the viewer's left
  Point right_eye{};
  std::optional<Point> mouth;

  bool valid(double eps = 1e-9) const {
    return std::hypot(right_eye[0] - left_eye[0], right_eye[1] - left_eye[1]) > eps;
  }
  double eye_distance() const { return std::hypot(right_eye[0] - left_eye[0], right_eye[1] - left_eye[1]); }
};

/// Canonical landmark positions of an aligned image.
inline LandmarkSet canonical_landmarks() {
  return LandmarkSet{{0.35, 0.40}, {0.65, 0.40}, Point{0.5, 0.72}};
}

/// Moves landmarks by a transform (both in the same square canvas).
inline LandmarkSet transform_landmarks(const LandmarkSet& l, const TransformMatrix& t) {
  auto move = [&t](const Point& p) {
    const auto q = t.apply(p[0] - 0.5, p[1] - 0.5);
    return Point{q[0] + 0.5, q[1] + 0.5};
  };
  LandmarkSet out{move(l.left_eye), move(l.right_eye), std::nullopt};
  if (l.mouth) out.mouth = move(*l.mouth);
  return out;
}

struct AlignmentEstimate {
  TransformParams params;
  double eye_distance_ratio = 1.0;  ///< unaligned / aligned eye distance
  bool scale_warning = false;       ///< ratio outside [0.9, 1.1]
};

inline constexpr double kEyeDistanceTolerance = 0.10;

/// Rigid transform mapping the aligned landmarks onto the unaligned ones.
/// Rotation is the angle between the two eye lines; translation is measured
/// at the left eye after rotating the aligned set about the canvas center.
inline AlignmentEstimate estimate_alignment_detailed(const LandmarkSet& unaligned, const LandmarkSet& aligned) {
  require(unaligned.valid() && aligned.valid(), ErrorCode::DegenerateLandmarks,
          "eye separation below epsilon");
  auto screen_angle = [](const LandmarkSet& l) {
    return std::atan2(-(l.right_eye[1] - l.left_eye[1]), l.right_eye[0] - l.left_eye[0]);
  };
  double r = screen_angle(unaligned) - screen_angle(aligned);
  r = std::remainder(r, 2.0 * std::numbers::pi);
  const double c = std::cos(r), s = std::sin(r);
  const double ax = aligned.left_eye[0] - 0.5, ay = aligned.left_eye[1] - 0.5;
  const double rx = c * ax + s * ay, ry = -s * ax + c * ay;
  AlignmentEstimate est;
  est.params = {rad_to_deg(r), (unaligned.left_eye[0] - 0.5) - rx, (unaligned.left_eye[1] - 0.5) - ry};
  est.eye_distance_ratio = unaligned.eye_distance() / aligned.eye_distance();
  est.scale_warning = std::abs(est.eye_distance_ratio - 1.0) > kEyeDistanceTolerance;
  return est;
}

inline TransformParams estimate_alignment(const LandmarkSet& unaligned, const LandmarkSet& aligned) {
  return estimate_alignment_detailed(unaligned, aligned).params;
}

/// Landmarks reported by a detector, in pixel coordinates of the frame.
struct Detection {
  Point left_eye{};
  Point right_eye{};
  std::optional<Point> mouth;
  std::optional<Box> face;  ///< detector box, if the detector provides one
};

inline LandmarkSet to_crop_landmarks(const Detection& d, const Box& crop_box) {
  auto conv = [&crop_box](const Point& p) {
    return Point{(p[0] - crop_box.x) / crop_box.width, (p[1] - crop_box.y) / crop_box.height};
  };
  LandmarkSet l{conv(d.left_eye), conv(d.right_eye), std::nullopt};
  if (d.mouth) l.mouth = conv(*d.mouth);
  return l;
}

struct AlignedCrop {
  Image unaligned;          ///< the crop resampled to the output size
  Image aligned;            ///< canonical-pose version of the crop
  TransformParams params;   ///< maps aligned -> unaligned
  LandmarkSet landmarks;    ///< crop-normalized detected landmarks
  AlignmentEstimate estimate;
};

/// Crops a fixed box, estimates the aligned->unaligned transform from the eyes
/// and resamples the crop into canonical pose. Scale is not estimated: the box
/// size alone sets the face size.
inline AlignedCrop align_crop(const Image& frame, const Detection& detection, const Box& box, int out_size,
                              const LandmarkSet& canonical = canonical_landmarks()) {
  require(box_inside(box, frame.width, frame.height), ErrorCode::OutOfBounds, "crop box outside frame");
  require(box.width == box.height, ErrorCode::InvalidArgument, "alignment crop must be square");
  AlignedCrop out;
  out.unaligned = resize(crop(frame, box), out_size, out_size);
  out.landmarks = to_crop_landmarks(detection, box);
  out.estimate = estimate_alignment_detailed(out.landmarks, canonical);
  out.params = out.estimate.params;
  const TransformMatrix t = params_to_matrix(out.params);
  out.aligned = warp(out.unaligned, inverse_rigid(t), Interpolation::Lagrange8, Border::Clamp).image;
  return out;
}

// ---------------------------------------------------------------------------
// Field-of-view expansion

enum Direction : unsigned { kUp = 1, kDown = 2, kLeft = 4, kRight = 8 };

struct ExpansionSpec {
  unsigned directions = 0;  ///< bitwise OR of Direction
  double delta = 0.0;       ///< canvas widths
  bool include_corners = true;
  int feather = 0;          ///< blend width in pixels inside the base at axis seams; 0 keeps hard seams

  void validate() const {
    require(directions != 0, ErrorCode::InconsistentSpec, "expansion needs at least one direction");
    require(std::isfinite(delta) && delta >= 0.0, ErrorCode::InconsistentSpec, "expansion delta must be >= 0");
    require(feather >= 0, ErrorCode::InconsistentSpec, "feather width must be >= 0");
  }
};

/// Which neighbour of the base frame a shifted render fills: dx, dy in
/// {-1, 0, 1}; (1, 0) is the band to the right, (0, -1) the band above.
struct ExpansionTag {
  int dx = 0;
  int dy = 0;

  bool corner() const { return dx != 0 && dy != 0; }
  std::string name() const {
    std::string n = dy < 0 ? "up" : dy > 0 ? "down" : "";
    if (dx != 0) n += (n.empty() ? "" : "_") + std::string(dx < 0 ? "left" : "right");
    return n;
  }
  friend bool operator==(const ExpansionTag&, const ExpansionTag&) = default;
};

/// Shift transform for one tag: content moves away from the band it fills.
inline TransformMatrix expansion_matrix(const ExpansionTag& tag, double delta) {
  return params_to_matrix({0.0, -tag.dx * delta, -tag.dy * delta});
}

/// Axis shifts in fixed order (up, down, left, right), then corner shifts as
/// compositions of their two axis shifts.
inline std::vector<std::pair<ExpansionTag, TransformMatrix>> expansion_transforms(const ExpansionSpec& spec) {
  spec.validate();
  std::vector<std::pair<ExpansionTag, TransformMatrix>> out;
  const std::array<std::pair<Direction, ExpansionTag>, 4> axes{
      {{kUp, {0, -1}}, {kDown, {0, 1}}, {kLeft, {-1, 0}}, {kRight, {1, 0}}}};
  for (const auto& [dir, tag] : axes)
    if (spec.directions & dir) out.emplace_back(tag, expansion_matrix(tag, spec.delta));
  if (spec.include_corners) {
    for (int dy : {-1, 1}) {
      for (int dx : {-1, 1}) {
        const unsigned vertical = dy < 0 ? kUp : kDown;
        const unsigned horizontal = dx < 0 ? kLeft : kRight;
        if ((spec.directions & vertical) && (spec.directions & horizontal)) {
          out.emplace_back(ExpansionTag{dx, dy}, compose(expansion_matrix({dx, 0}, spec.delta),
                                                         expansion_matrix({0, dy}, spec.delta)));
        }
      }
    }
  }
  return out;
}

struct StitchResult {
  Image canvas;
  Mask coverage;              ///< number of writes per canvas pixel
  double seam_residual = 0;   ///< max |shifted - already written| over overlaps
  int offset_x = 0;           ///< position of the base frame in the canvas
  int offset_y = 0;
};

inline int expansion_band_pixels(double delta, int width) {
  const double band = delta * width;
  const double rounded = std::round(band);
  require(std::abs(band - rounded) < 1e-9, ErrorCode::InconsistentSpec,
          "expansion delta must be a whole number of pixels");
  return static_cast<int>(rounded);
}

/// Adjoins the non-overlapping parts of shifted renders to the base frame.
/// Paint order is base, then axis shifts, then corner shifts; a pixel is only
/// written by the first source covering it. Vertical bands use the same pixel
/// count as horizontal ones because translations are in canvas widths.
/// With a positive feather width, base pixels at distance d < feather from an
/// axis seam are blended toward the overlapping shifted render with weight
/// (feather - d) / (feather + 1); coverage still counts hard writes only.
inline StitchResult stitch(const Image& base, const std::vector<std::pair<ExpansionTag, Image>>& shifted,
                           const ExpansionSpec& spec) {
  spec.validate();
  const int band = expansion_band_pixels(spec.delta, base.width);
  require(spec.feather <= std::min(base.width, base.height) - band, ErrorCode::InconsistentSpec,
          "feather width exceeds the overlap between base and shifted renders");
  bool has[3][3] = {};
  for (const auto& [tag, img] : shifted) {
    require(img.same_shape(base), ErrorCode::DimensionMismatch, "shifted render resolution differs from base");
    require(std::abs(tag.dx) <= 1 && std::abs(tag.dy) <= 1 && (tag.dx != 0 || tag.dy != 0),
            ErrorCode::InconsistentSpec, "invalid expansion tag");
    const bool h_ok = tag.dx == 0 || (spec.directions & (tag.dx < 0 ? kLeft : kRight));
    const bool v_ok = tag.dy == 0 || (spec.directions & (tag.dy < 0 ? kUp : kDown));
    require(h_ok && v_ok, ErrorCode::InconsistentSpec, "tag '" + tag.name() + "' not in expansion spec");
    require(!tag.corner() || spec.include_corners, ErrorCode::InconsistentSpec, "corner tag with corners disabled");
    require(!has[tag.dy + 1][tag.dx + 1], ErrorCode::InconsistentSpec, "duplicate tag '" + tag.name() + "'");
    has[tag.dy + 1][tag.dx + 1] = true;
  }
  for (const auto& [tag, img] : shifted)
    if (tag.corner())
      require(has[1][tag.dx + 1] && has[tag.dy + 1][1], ErrorCode::InconsistentSpec,
              "corner tag '" + tag.name() + "' requires both axis shifts");

  const int left = has[1][0] ? band : 0, right = has[1][2] ? band : 0;
  const int up = has[0][1] ? band : 0, down = has[2][1] ? band : 0;
  StitchResult res;
  res.offset_x = left;
  res.offset_y = up;
  res.canvas = Image(base.width + left + right, base.height + up + down, base.channels);
  res.coverage = Mask(res.canvas.width, res.canvas.height, 0);

  auto paint = [&](const Image& img, int ox, int oy) {
    for (int y = 0; y < img.height; ++y) {
      const int cy = oy + y;
      if (cy < 0 || cy >= res.canvas.height) continue;
      for (int x = 0; x < img.width; ++x) {
        const int cx = ox + x;
        if (cx < 0 || cx >= res.canvas.width) continue;
        if (res.coverage.at(cx, cy) > 0) {
          for (int c = 0; c < img.channels; ++c)
            res.seam_residual = std::max(res.seam_residual, std::abs(img.at(x, y, c) - res.canvas.at(cx, cy, c)));
          continue;
        }
        for (int c = 0; c < img.channels; ++c) res.canvas.at(cx, cy, c) = img.at(x, y, c);
        res.coverage.at(cx, cy) += 1;
      }
    }
  };
  paint(base, left, up);
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& [tag, img] : shifted)
      if (tag.corner() == (pass == 1)) paint(img, left + tag.dx * band, up + tag.dy * band);

  for (const auto& [tag, img] : shifted) {
    if (tag.corner() || spec.feather == 0 || band == 0) continue;
    const int ox = left + tag.dx * band, oy = up + tag.dy * band;
    for (int y = 0; y < base.height; ++y)
      for (int x = 0; x < base.width; ++x) {
        const int d = tag.dx > 0 ? base.width - 1 - x : tag.dx < 0 ? x : tag.dy > 0 ? base.height - 1 - y : y;
        if (d >= spec.feather) continue;
        const double a = static_cast<double>(spec.feather - d) / (spec.feather + 1);
        const int cx = left + x, cy = up + y;
        for (int c = 0; c < base.channels; ++c)
          res.canvas.at(cx, cy, c) = (1.0 - a) * res.canvas.at(cx, cy, c) + a * img.at(cx - ox, cy - oy, c);
      }
  }
  return res;
}

}  // namespace sg3
