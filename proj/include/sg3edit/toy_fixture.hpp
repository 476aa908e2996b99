#pragma once

// Scripted toy videos: a fixed code rendered by the toy generator under a
// known smooth pose trajectory, with the matching landmark detections.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "clients.hpp"
#include "generator.hpp"
#include "geometry.hpp"
#include "image_io.hpp"

namespace sg3 {

struct ToyVideoSpec {
  int frames = 20;
  double rotation_amplitude = 0.25;       ///< degrees
  double translation_amplitude = 0.0025;  ///< canvas widths
  std::uint64_t code_seed = 11;
  std::uint64_t code_index = 0;
};

struct ToyVideo {
  LatentWPlus code;
  std::vector<TransformParams> params;
  std::vector<Image> frames;
  std::vector<std::optional<Detection>> detections;
};

/// Pose of frame i: an ease-in/ease-out sweep from -amplitude to +amplitude
/// (rotation, tx) and from +amplitude/2 to -amplitude/2 (ty).
inline TransformParams toy_video_pose(const ToyVideoSpec& spec, int i) {
  const double s = spec.frames > 1 ? static_cast<double>(i) / (spec.frames - 1) : 0.0;
  const double e = 0.5 - 0.5 * std::cos(std::numbers::pi * s);
  return {spec.rotation_amplitude * (2 * e - 1), spec.translation_amplitude * (2 * e - 1),
          spec.translation_amplitude * (0.5 - e)};
}

/// Detection of the canonical landmarks moved by `p`, in pixels of a
/// res x res frame; the face box is the whole frame.
inline Detection toy_detection(const TransformParams& p, int res, const LandmarkSet& canonical = canonical_landmarks()) {
  const auto l = transform_landmarks(canonical, params_to_matrix(p));
  auto px = [res](const Point& q) { return Point{q[0] * res, q[1] * res}; };
  Detection d{px(l.left_eye), px(l.right_eye), std::nullopt, Box{0, 0, res, res}};
  if (l.mouth) d.mouth = px(*l.mouth);
  return d;
}

inline ToyVideo make_toy_video(const GeneratorHandle& g, const ToyVideoSpec& spec) {
  require(spec.frames >= 1, ErrorCode::InvalidArgument, "toy video needs at least one frame");
  ToyVideo v;
  v.code = LatentWPlus::broadcast(sample_w(g, spec.code_seed, spec.code_index));
  for (int i = 0; i < spec.frames; ++i) {
    const auto p = toy_video_pose(spec, i);
    v.params.push_back(p);
    v.frames.push_back(synthesize(g, v.code, p));
    v.detections.push_back(toy_detection(p, g.config.resolution));
  }
  return v;
}

/// Toy generator whose learned first-layer transform is the identity for
/// every code, so canonical-pose renders are exactly aligned.
inline GeneratorHandle make_aligned_toy_generator(ToyOptions o = {}) {
  o.rotation_std = 0.0;
  o.translation_std = 0.0;
  return make_toy_generator(o);
}

struct ToyFixturePaths {
  std::string generator;
  std::string frames_dir;
  std::string landmarks;
  std::string truth;  ///< float container with the scripted frames and poses
};

/// Writes a generator checkpoint, 16-bit PNG frames, a landmark file and the
/// ground truth into `dir`.
inline ToyFixturePaths write_toy_fixture(const std::string& dir, const GeneratorHandle& g, const ToyVideoSpec& spec) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "frames");
  ToyFixturePaths p{(fs::path(dir) / "generator.sg3t").string(), (fs::path(dir) / "frames").string(),
                    (fs::path(dir) / "landmarks.json").string(), (fs::path(dir) / "truth.sg3t").string()};
  save_generator(g, p.generator);
  const ToyVideo v = make_toy_video(g, spec);
  for (std::size_t i = 0; i < v.frames.size(); ++i)
    write_png(v.frames[i], (fs::path(p.frames_dir) / frame_filename(static_cast<int>(i))).string(), 16);
  FileLandmarkDetector::write(p.landmarks, v.detections);
  TensorContainer tc;
  tc.add_text("manifest", nlohmann::json{{"kind", "toy_video_truth"}, {"frames", spec.frames}}.dump());
  std::vector<double> frames, params;
  for (std::size_t i = 0; i < v.frames.size(); ++i) {
    frames.insert(frames.end(), v.frames[i].data.begin(), v.frames[i].data.end());
    params.insert(params.end(), {v.params[i].r, v.params[i].tx, v.params[i].ty});
  }
  const auto& f0 = v.frames.front();
  tc.add_f64("frames", {v.frames.size(), static_cast<std::uint64_t>(f0.height), static_cast<std::uint64_t>(f0.width),
                        static_cast<std::uint64_t>(f0.channels)},
             frames);
  tc.add_f64("params", {v.frames.size(), 3}, params);
  tc.add_f64("code", {kNumLayers, static_cast<std::uint64_t>(v.code.dim())}, v.code.flat());
  tc.save(p.truth);
  return p;
}

}  // namespace sg3
