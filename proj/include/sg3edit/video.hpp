#pragma once

// Video workflow: preprocess (fixed crop + per-frame alignment), per-frame
// inversion, temporal smoothing, pivotal tuning, edited rendering and
// field-of-view expansion. Sessions persist as a directory holding
// manifest.json plus tensor containers.

#include <array>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "clients.hpp"
#include "editing.hpp"
#include "encoder.hpp"
#include "generator.hpp"
#include "geometry.hpp"
#include "losses.hpp"
#include "optim.hpp"

namespace sg3 {

enum class Stage { Preprocess = 0, Encode, Smooth, Pti, Render, Expand };
inline constexpr int kNumStages = 6;

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Preprocess: return "preprocess";
    case Stage::Encode: return "invert";
    case Stage::Smooth: return "smooth";
    case Stage::Pti: return "pti";
    case Stage::Render: return "render";
    case Stage::Expand: return "expand";
  }
  return "?";
}

/// Stages that must be complete before `s` may run.
inline std::vector<Stage> stage_prerequisites(Stage s) {
  switch (s) {
    case Stage::Preprocess: return {};
    case Stage::Encode: return {Stage::Preprocess};
    case Stage::Smooth: return {Stage::Encode};
    case Stage::Pti: return {Stage::Encode};
    case Stage::Render: return {Stage::Smooth, Stage::Pti};
    case Stage::Expand: return {Stage::Smooth, Stage::Pti};
  }
  return {};
}

/// Stages whose results depend on `s` (directly or not).
inline std::vector<Stage> stage_dependents(Stage s) {
  std::vector<Stage> out;
  for (int i = 0; i < kNumStages; ++i) {
    const auto t = static_cast<Stage>(i);
    std::vector<Stage> frontier = stage_prerequisites(t);
    bool depends = false;
    while (!frontier.empty() && !depends) {
      const Stage p = frontier.back();
      frontier.pop_back();
      if (p == s) depends = true;
      for (Stage q : stage_prerequisites(p)) frontier.push_back(q);
    }
    if (depends) out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Edits

struct EditSpec {
  std::vector<EditRequest> edits;  ///< W / W+ edits act on codes, S edits on styles

  bool empty() const { return edits.empty(); }

  LatentWPlus apply_to_code(const LatentWPlus& code) const {
    LatentWPlus out = code;
    for (const auto& e : edits)
      if (e.direction.space != LatentSpace::S) out = apply_linear_edit(out, e);
    return out;
  }
  bool has_style_edits() const {
    for (const auto& e : edits)
      if (e.direction.space == LatentSpace::S) return true;
    return false;
  }
  StyleVector apply_to_styles(const StyleVector& styles) const {
    StyleVector out = styles;
    for (const auto& e : edits)
      if (e.direction.space == LatentSpace::S) out = apply_s_edit(out, e);
    return out;
  }
};

inline nlohmann::json to_json(const EditSpec& spec) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : spec.edits) {
    nlohmann::json j{{"name", e.direction.name},
                     {"space", to_string(e.direction.space)},
                     {"vector", e.direction.vector},
                     {"metadata", e.direction.metadata},
                     {"step", e.step}};
    if (e.channel_threshold) j["channel_threshold"] = *e.channel_threshold;
    arr.push_back(j);
  }
  return arr;
}

inline EditSpec edit_spec_from_json(const nlohmann::json& j) {
  EditSpec spec;
  for (const auto& item : j) {
    EditRequest r;
    r.direction.name = item.at("name").get<std::string>();
    r.direction.space = latent_space_from_string(item.at("space").get<std::string>());
    r.direction.vector = item.at("vector").get<std::vector<double>>();
    r.direction.metadata = item.value("metadata", nlohmann::json::object());
    r.step = item.at("step").get<double>();
    if (item.contains("channel_threshold")) r.channel_threshold = item["channel_threshold"].get<double>();
    spec.edits.push_back(std::move(r));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Session

struct FrameRecord {
  int index = 0;
  std::string source_ref;
  Box crop;
  LandmarkSet landmarks;
  TransformParams params;
  TransformMatrix matrix;  ///< params_to_matrix(params)
  double eye_distance_ratio = 1.0;
  std::optional<LatentWPlus> code;
  std::optional<LatentWPlus> edited_code;
  std::optional<LatentWPlus> smoothed_code;
  std::optional<TransformMatrix> smoothed_matrix;
  std::vector<double> inversion_losses;
};

struct VideoSession {
  std::string id;
  std::string kind = "video";  ///< video, or image for single-frame sessions
  std::vector<FrameRecord> frames;
  Box crop;
  std::array<bool, kNumStages> done{};
  std::string base_checkpoint;
  std::string pti_checkpoint;
  EditSpec edit;
  bool smoothing_normalized = false;
  std::vector<std::string> warnings;
  std::vector<Image> unaligned;  ///< fixed crop of each frame at generator resolution
  std::vector<Image> aligned;    ///< canonical-pose version of each crop
  std::vector<Image> rendered;
  std::vector<Image> expanded;
  std::vector<double> seam_residuals;

  bool has(Stage s) const { return done[static_cast<int>(s)]; }

  void require_ready(Stage s) const {
    for (Stage p : stage_prerequisites(s))
      require(has(p), ErrorCode::StageOrder,
              std::string("stage '") + stage_name(s) + "' needs '" + stage_name(p) + "' to complete first");
  }

  /// Marks a stage complete and drops every result that depended on it.
  void complete(Stage s) {
    for (Stage d : stage_dependents(s)) done[static_cast<int>(d)] = false;
    done[static_cast<int>(s)] = true;
    if (!has(Stage::Render)) rendered.clear();
    if (!has(Stage::Expand)) {
      expanded.clear();
      seam_residuals.clear();
    }
  }
};

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first failing
/// index (in index order) is rethrown.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline TransformMatrix to_user_space(const GeneratorConfig& cfg, TransformMatrix m) {
  m.m[0][2] *= cfg.translation_unit;
  m.m[1][2] *= cfg.translation_unit;
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Preprocess

enum class CropMode { Union, EyeDistance };

struct PreprocessConfig {
  int resolution = 0;          ///< crop output size (the generator resolution)
  CropMode mode = CropMode::Union;
  double padding = 0.2;        ///< growth of the union box side
  LandmarkSet canonical = canonical_landmarks();
  int threads = 1;
};

namespace detail {

inline Box detection_box(const Detection& d) {
  if (d.face) return *d.face;
  double x0 = std::min(d.left_eye[0], d.right_eye[0]), x1 = std::max(d.left_eye[0], d.right_eye[0]);
  double y0 = std::min(d.left_eye[1], d.right_eye[1]), y1 = std::max(d.left_eye[1], d.right_eye[1]);
  if (d.mouth) {
    x0 = std::min(x0, (*d.mouth)[0]);
    x1 = std::max(x1, (*d.mouth)[0]);
    y0 = std::min(y0, (*d.mouth)[1]);
    y1 = std::max(y1, (*d.mouth)[1]);
  }
  return {static_cast<int>(std::floor(x0)), static_cast<int>(std::floor(y0)),
          std::max(1, static_cast<int>(std::ceil(x1 - x0))), std::max(1, static_cast<int>(std::ceil(y1 - y0)))};
}

}  // namespace detail

/// One square crop for the whole clip. Union mode centers on the union of
/// the per-frame face boxes and grows its longer side by `padding`; eye
/// distance mode sizes the crop so the mean eye distance matches the
/// canonical one. The box is clamped into the frame.
inline Box select_fixed_crop(const std::vector<Detection>& dets, int frame_w, int frame_h, const PreprocessConfig& cfg) {
  require(!dets.empty(), ErrorCode::InvalidArgument, "no detections");
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300, eye = 0.0;
  for (const auto& d : dets) {
    const Box b = detail::detection_box(d);
    x0 = std::min<double>(x0, b.x);
    y0 = std::min<double>(y0, b.y);
    x1 = std::max<double>(x1, b.x + b.width);
    y1 = std::max<double>(y1, b.y + b.height);
    eye += std::hypot(d.right_eye[0] - d.left_eye[0], d.right_eye[1] - d.left_eye[1]) / static_cast<double>(dets.size());
  }
  double side = cfg.mode == CropMode::Union ? std::max(x1 - x0, y1 - y0) * (1.0 + cfg.padding)
                                            : eye / cfg.canonical.eye_distance();
  const int s = std::clamp(static_cast<int>(std::lround(side)), 1, std::min(frame_w, frame_h));
  const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
  const int x = std::clamp(static_cast<int>(std::lround(cx - s / 2.0)), 0, frame_w - s);
  const int y = std::clamp(static_cast<int>(std::lround(cy - s / 2.0)), 0, frame_h - s);
  return {x, y, s, s};
}

/// Detects every frame, fixes one crop box, and records per-frame aligned
/// crops and alignment transforms.
inline void preprocess(VideoSession& s, const std::vector<Image>& frames, LandmarkDetector& detector,
                       const PreprocessConfig& cfg, const std::vector<std::string>& source_refs = {}) {
  require(!frames.empty(), ErrorCode::InvalidArgument, "preprocess needs at least one frame");
  require(cfg.resolution > 0, ErrorCode::InvalidArgument, "preprocess needs an output resolution");
  const int W = frames.front().width, H = frames.front().height;
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    require(frames[i].width == W && frames[i].height == H, ErrorCode::DimensionMismatch,
            "frame " + std::to_string(i) + " differs in size from frame 0");
    auto d = detector.detect(frames[i], static_cast<int>(i));
    require(d.has_value(), ErrorCode::NoFaceDetected, "no face detected in frame " + std::to_string(i));
    dets.push_back(*d);
  }
  const Box box = select_fixed_crop(dets, W, H, cfg);
  const int n = static_cast<int>(frames.size());
  std::vector<FrameRecord> records(static_cast<std::size_t>(n));
  std::vector<Image> unaligned(records.size()), aligned(records.size());
  detail::parallel_for(n, cfg.threads, [&](int i) {
    const auto a = align_crop(frames[i], dets[i], box, cfg.resolution, cfg.canonical);
    FrameRecord& r = records[static_cast<std::size_t>(i)];
    r.index = i;
    r.source_ref = i < static_cast<int>(source_refs.size()) ? source_refs[i] : "";
    r.crop = box;
    r.landmarks = a.landmarks;
    r.params = a.params;
    r.matrix = params_to_matrix(a.params);
    r.eye_distance_ratio = a.estimate.eye_distance_ratio;
    unaligned[static_cast<std::size_t>(i)] = a.unaligned;
    aligned[static_cast<std::size_t>(i)] = a.aligned;
  });
  s.warnings.clear();
  for (const auto& r : records)
    if (std::abs(r.eye_distance_ratio - 1.0) > kEyeDistanceTolerance) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "EyeDistanceDrift: frame %d eye distance ratio %.4f", r.index, r.eye_distance_ratio);
      s.warnings.emplace_back(buf);
    }
  s.frames = std::move(records);
  s.unaligned = std::move(unaligned);
  s.aligned = std::move(aligned);
  s.crop = box;
  s.complete(Stage::Preprocess);
}

// ---------------------------------------------------------------------------
// Encode

inline void refresh_edited_codes(VideoSession& s) {
  for (auto& f : s.frames)
    if (f.code) f.edited_code = s.edit.apply_to_code(*f.code);
}

/// Replaces the edit spec; smoothing and rendering must be redone.
inline void set_edit(VideoSession& s, EditSpec spec) {
  s.edit = std::move(spec);
  refresh_edited_codes(s);
  s.done[static_cast<int>(Stage::Smooth)] = false;
  for (Stage d : stage_dependents(Stage::Smooth)) s.done[static_cast<int>(d)] = false;
  s.rendered.clear();
  s.expanded.clear();
  s.seam_residuals.clear();
}

inline void encode_frames(VideoSession& s, const EncoderHandle& enc, const GeneratorHandle& g, int restyle_iters = 3,
                          int threads = 1) {
  s.require_ready(Stage::Encode);
  const int n = static_cast<int>(s.frames.size());
  std::vector<InversionResult> results(static_cast<std::size_t>(n));
  detail::parallel_for(n, threads, [&](int i) {
    results[static_cast<std::size_t>(i)] = restyle_invert(enc, g, s.aligned[static_cast<std::size_t>(i)], restyle_iters);
  });
  for (int i = 0; i < n; ++i) {
    auto& f = s.frames[static_cast<std::size_t>(i)];
    f.code = results[static_cast<std::size_t>(i)].code;
    f.inversion_losses = results[static_cast<std::size_t>(i)].per_iter_losses;
    f.smoothed_code.reset();
    f.smoothed_matrix.reset();
  }
  refresh_edited_codes(s);
  s.pti_checkpoint.clear();
  s.complete(Stage::Encode);
}

// ---------------------------------------------------------------------------
// Smoothing

/// Moving-average weights for offsets -2..2.
inline constexpr std::array<double, 5> kSmoothingWeights{0.25 / 3.0, 0.75 / 3.0, 1.0 / 3.0, 0.75 / 3.0, 0.5 / 3.0};

inline std::array<double, 5> smoothing_weights(bool normalize) {
  std::array<double, 5> w = kSmoothingWeights;
  if (normalize) {
    const double sum = 3.25 / 3.0;
    for (double& v : w) v /= sum;
  }
  return w;
}

/// Window of frame i, with indices clamped to [0, n - 1].
inline std::array<int, 5> smoothing_window(int i, int n) {
  std::array<int, 5> idx{};
  for (int k = 0; k < 5; ++k) idx[k] = std::clamp(i + k - 2, 0, n - 1);
  return idx;
}

/// Coordinate-wise weighted average of a sequence of equal-length vectors.
inline std::vector<std::vector<double>> smooth_sequence(const std::vector<std::vector<double>>& xs, bool normalize) {
  require(!xs.empty(), ErrorCode::InvalidArgument, "smoothing needs at least one frame");
  const auto w = smoothing_weights(normalize);
  const int n = static_cast<int>(xs.size());
  std::vector<std::vector<double>> out(xs.size(), std::vector<double>(xs.front().size(), 0.0));
  for (int i = 0; i < n; ++i) {
    const auto idx = smoothing_window(i, n);
    for (int k = 0; k < 5; ++k) {
      const auto& x = xs[static_cast<std::size_t>(idx[k])];
      require(x.size() == out[0].size(), ErrorCode::DimensionMismatch, "sequence elements differ in size");
      for (std::size_t j = 0; j < x.size(); ++j) out[static_cast<std::size_t>(i)][j] += w[k] * x[j];
    }
  }
  return out;
}

/// Entry-wise weighted average of the homogeneous matrices (not projected).
inline std::vector<TransformMatrix> smooth_matrices_raw(const std::vector<TransformMatrix>& ms, bool normalize) {
  require(!ms.empty(), ErrorCode::InvalidArgument, "smoothing needs at least one frame");
  const auto w = smoothing_weights(normalize);
  const int n = static_cast<int>(ms.size());
  std::vector<TransformMatrix> out(ms.size());
  for (int i = 0; i < n; ++i) {
    const auto idx = smoothing_window(i, n);
    TransformMatrix acc;
    for (auto& row : acc.m) row.fill(0.0);
    for (int k = 0; k < 5; ++k)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) acc.m[r][c] += w[k] * ms[static_cast<std::size_t>(idx[k])].m[r][c];
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

struct SmoothConfig {
  bool normalize = false;  ///< divide the weights by their sum
};

inline void smooth(VideoSession& s, const SmoothConfig& cfg = {}) {
  s.require_ready(Stage::Smooth);
  require(!s.frames.empty(), ErrorCode::InvalidArgument, "smoothing needs at least one frame");
  std::vector<std::vector<double>> codes;
  std::vector<TransformMatrix> mats;
  for (const auto& f : s.frames) {
    codes.push_back(f.edited_code ? f.edited_code->flat() : f.code->flat());
    mats.push_back(f.matrix);
  }
  const auto sc = smooth_sequence(codes, cfg.normalize);
  const auto sm = smooth_matrices_raw(mats, cfg.normalize);
  const int D = s.frames.front().code->dim();
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    s.frames[i].smoothed_code = LatentWPlus::from_flat(D, sc[i]);
    s.frames[i].smoothed_matrix = nearest_rigid(sm[i]);
  }
  s.smoothing_normalized = cfg.normalize;
  s.complete(Stage::Smooth);
}

// ---------------------------------------------------------------------------
// Pivotal tuning

struct PTIConfig {
  int steps = 8000;
  int batch = 2;
  LossWeights weights{1.0, 1.0, 0.0};
  bool freeze_fourier_input = true;
  bool freeze_mapping = true;
  double lr = 3e-4;
  bool cosine_decay = false;  ///< anneal the learning rate from lr to 0 over the run
  std::uint64_t seed = 0;
  std::string divergence_checkpoint;  ///< written before aborting on a non-finite loss

  void validate() const {
    weights.validate();
    require(steps >= 0 && batch >= 1, ErrorCode::InvalidArgument, "bad PTI schedule");
    require(lr > 0 && std::isfinite(lr), ErrorCode::InvalidArgument, "PTI learning rate must be positive");
  }
};

struct PTIResult {
  GeneratorHandle handle;
  double initial_loss = 0.0;  ///< mean over all frames before tuning
  double final_loss = 0.0;
  std::vector<double> step_losses;
};

/// Mean reconstruction loss of G(w_i; T_i) against the unaligned crops.
inline double pti_eval_loss(const VideoSession& s, const GeneratorHandle& g, const LossWeights& w,
                            PerceptualMetric* perceptual, IdentityMetric* identity = nullptr) {
  double acc = 0.0;
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    const Image y = synthesize(g, *s.frames[i].code, detail::to_user_space(g.config, s.frames[i].matrix));
    acc += reconstruction_loss(s.unaligned[i], y, w, perceptual, identity).total;
  }
  return acc / static_cast<double>(s.frames.size());
}

/// Tunes a copy of the generator so that each pivot code reproduces its
/// unaligned crop under its own alignment transform. The Fourier-input group
/// is left untouched when frozen.
inline PTIResult pti_finetune(VideoSession& s, const GeneratorHandle& base, const PTIConfig& cfg,
                              PerceptualMetric* perceptual = nullptr, IdentityMetric* identity = nullptr) {
  s.require_ready(Stage::Pti);
  cfg.validate();
  PTIResult res;
  res.handle = base;
  GeneratorHandle& g = res.handle;
  res.initial_loss = pti_eval_loss(s, g, cfg.weights, perceptual, identity);
  std::vector<ParamGroup> groups{ParamGroup::Synthesis};
  if (!cfg.freeze_fourier_input) groups.push_back(ParamGroup::FourierInput);
  if (!cfg.freeze_mapping) groups.push_back(ParamGroup::Mapping);
  auto views_of = [&groups](GeneratorParams& p) {
    std::vector<std::span<double>> v;
    for (auto grp : groups)
      for (auto s : param_views(p, grp)) v.push_back(s);
    return v;
  };

  const int n = static_cast<int>(s.frames.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(cfg.seed, 41);
  for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[rng() % static_cast<std::uint64_t>(i + 1)]);

  Adam adam({cfg.lr});
  for (int step = 0; step < cfg.steps; ++step) {
    GeneratorParams grads = zeros_like(g.params);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const int i = order[static_cast<std::size_t>((static_cast<long>(step) * cfg.batch + b) % n)];
      const auto& f = s.frames[static_cast<std::size_t>(i)];
      const TransformMatrix m = detail::to_user_space(g.config, f.matrix);
      const Image y = synthesize(g, *f.code, m);
      Image grad;
      const auto l = reconstruction_loss(s.unaligned[static_cast<std::size_t>(i)], y, cfg.weights, perceptual, identity, &grad);
      for (double& v : grad.data) v /= cfg.batch;
      loss += l.total / cfg.batch;
      synthesis_backward(g, *f.code, m, grad, &grads);
    }
    if (!std::isfinite(loss)) {
      if (!cfg.divergence_checkpoint.empty()) save_generator(g, cfg.divergence_checkpoint);
      throw Error(ErrorCode::Divergence, "PTI loss is not finite at step " + std::to_string(step));
    }
    res.step_losses.push_back(loss);
    if (cfg.cosine_decay) adam.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / cfg.steps)));
    adam.step(views_of(g.params), as_const_views(views_of(grads)));
  }
  res.final_loss = pti_eval_loss(s, g, cfg.weights, perceptual, identity);
  s.complete(Stage::Pti);
  return res;
}

// ---------------------------------------------------------------------------
// Render and expand

inline Image render_frame(const VideoSession& s, const GeneratorHandle& g, std::size_t i,
                          const TransformMatrix& outer = TransformMatrix::identity()) {
  const auto& f = s.frames[i];
  const TransformMatrix m = detail::to_user_space(g.config, compose(outer, *f.smoothed_matrix));
  if (!s.edit.has_style_edits()) return synthesize(g, *f.smoothed_code, m);
  return synthesize_from_styles(g, s.edit.apply_to_styles(compute_styles(g, *f.smoothed_code)), m);
}

/// y_i = G_pti(smoothed code; smoothed matrix), one image per frame.
inline std::vector<Image> render(VideoSession& s, const GeneratorHandle& g_pti, int threads = 1) {
  s.require_ready(Stage::Render);
  std::vector<Image> out(s.frames.size());
  detail::parallel_for(static_cast<int>(out.size()), threads,
                       [&](int i) { out[static_cast<std::size_t>(i)] = render_frame(s, g_pti, static_cast<std::size_t>(i)); });
  s.rendered = out;
  s.complete(Stage::Render);
  return out;
}

/// Per frame: base render plus one render per shift (shift composed after
/// the smoothed transform), stitched onto the enlarged canvas.
inline std::vector<StitchResult> expand(VideoSession& s, const GeneratorHandle& g_pti, const ExpansionSpec& spec,
                                        int threads = 1) {
  s.require_ready(Stage::Expand);
  const auto shifts = expansion_transforms(spec);
  std::vector<StitchResult> out(s.frames.size());
  detail::parallel_for(static_cast<int>(out.size()), threads, [&](int i) {
    const auto idx = static_cast<std::size_t>(i);
    const Image base = render_frame(s, g_pti, idx);
    std::vector<std::pair<ExpansionTag, Image>> shifted;
    for (const auto& [tag, m] : shifts) shifted.emplace_back(tag, render_frame(s, g_pti, idx, m));
    out[idx] = stitch(base, shifted, spec);
  });
  s.expanded.clear();
  s.seam_residuals.clear();
  for (const auto& r : out) {
    s.expanded.push_back(r.canvas);
    s.seam_residuals.push_back(r.seam_residual);
  }
  s.complete(Stage::Expand);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline nlohmann::json point_json(const Point& p) { return {p[0], p[1]}; }
inline Point point_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

inline nlohmann::json matrix_json(const TransformMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : m.m) rows.push_back({r[0], r[1], r[2]});
  return rows;
}

inline TransformMatrix matrix_from(const nlohmann::json& j) {
  TransformMatrix m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m.m[r][c] = j.at(r).at(c).get<double>();
  return m;
}

inline void add_images(TensorContainer& tc, const std::string& name, const std::vector<Image>& imgs) {
  if (imgs.empty()) return;
  const auto& f = imgs.front();
  std::vector<double> flat;
  for (const auto& img : imgs) {
    require(img.same_shape(f), ErrorCode::DimensionMismatch, "images in '" + name + "' differ in shape");
    flat.insert(flat.end(), img.data.begin(), img.data.end());
  }
  tc.add_f64(name, {imgs.size(), static_cast<std::uint64_t>(f.height), static_cast<std::uint64_t>(f.width),
                    static_cast<std::uint64_t>(f.channels)},
             flat);
}

inline std::vector<Image> read_images(const TensorContainer& tc, const std::string& name) {
  std::vector<Image> out;
  if (!tc.contains(name)) return out;
  const auto& e = tc.at(name);
  require(e.shape.size() == 4, ErrorCode::Format, "image stack '" + name + "' must be 4-D");
  const auto data = tc.get_f64(name);
  const std::size_t per = e.shape[1] * e.shape[2] * e.shape[3];
  for (std::uint64_t i = 0; i < e.shape[0]; ++i) {
    Image img(static_cast<int>(e.shape[2]), static_cast<int>(e.shape[1]), static_cast<int>(e.shape[3]));
    std::copy(data.begin() + static_cast<std::ptrdiff_t>(i * per), data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per),
              img.data.begin());
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace detail

inline nlohmann::json session_manifest(const VideoSession& s) {
  nlohmann::json stages = nlohmann::json::object();
  for (int i = 0; i < kNumStages; ++i) stages[stage_name(static_cast<Stage>(i))] = s.done[static_cast<std::size_t>(i)];
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : s.frames) {
    nlohmann::json lm{{"left_eye", detail::point_json(f.landmarks.left_eye)},
                      {"right_eye", detail::point_json(f.landmarks.right_eye)}};
    if (f.landmarks.mouth) lm["mouth"] = detail::point_json(*f.landmarks.mouth);
    frames.push_back({{"index", f.index},
                      {"source_ref", f.source_ref},
                      {"params", {f.params.r, f.params.tx, f.params.ty}},
                      {"matrix", detail::matrix_json(f.matrix)},
                      {"landmarks", lm},
                      {"eye_distance_ratio", f.eye_distance_ratio},
                      {"inversion_losses", f.inversion_losses}});
  }
  return {{"kind", s.kind},
          {"id", s.id},
          {"format", 1},
          {"stages", stages},
          {"crop", {s.crop.x, s.crop.y, s.crop.width, s.crop.height}},
          {"base_checkpoint", s.base_checkpoint},
          {"pti_checkpoint", s.pti_checkpoint},
          {"edit", to_json(s.edit)},
          {"smoothing_normalized", s.smoothing_normalized},
          {"warnings", s.warnings},
          {"seam_residuals", s.seam_residuals},
          {"frames", frames}};
}

inline TensorContainer session_tensors(const VideoSession& s) {
  TensorContainer tc;
  tc.add_text("manifest", nlohmann::json{{"kind", "video_tensors"}, {"format", 1}}.dump());
  detail::add_images(tc, "unaligned", s.unaligned);
  detail::add_images(tc, "aligned", s.aligned);
  detail::add_images(tc, "rendered", s.rendered);
  auto add_codes = [&](const std::string& name, auto get) {
    std::vector<double> flat;
    int D = 0;
    for (const auto& f : s.frames) {
      const std::optional<LatentWPlus>& c = get(f);
      if (!c) return;
      D = c->dim();
      flat.insert(flat.end(), c->flat().begin(), c->flat().end());
    }
    if (!flat.empty())
      tc.add_f64(name, {s.frames.size(), kNumLayers, static_cast<std::uint64_t>(D)}, flat);
  };
  add_codes("codes", [](const FrameRecord& f) -> const std::optional<LatentWPlus>& { return f.code; });
  add_codes("edited_codes", [](const FrameRecord& f) -> const std::optional<LatentWPlus>& { return f.edited_code; });
  add_codes("smoothed_codes", [](const FrameRecord& f) -> const std::optional<LatentWPlus>& { return f.smoothed_code; });
  std::vector<double> mats;
  for (const auto& f : s.frames) {
    if (!f.smoothed_matrix) {
      mats.clear();
      break;
    }
    for (const auto& r : f.smoothed_matrix->m) mats.insert(mats.end(), r.begin(), r.end());
  }
  if (!mats.empty()) tc.add_f64("smoothed_matrices", {s.frames.size(), 3, 3}, mats);
  for (std::size_t i = 0; i < s.expanded.size(); ++i) detail::add_images(tc, "expanded_" + std::to_string(i), {s.expanded[i]});
  return tc;
}

inline void save_session(const VideoSession& s, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto root = std::filesystem::path(dir);
  session_tensors(s).save((root / "frames.sg3t").string());
  const auto tmp = root / "manifest.json.tmp";
  {
    std::ofstream f(tmp);
    require(static_cast<bool>(f), ErrorCode::Io, "cannot write session manifest in '" + dir + "'");
    f << session_manifest(s).dump(2) << "\n";
  }
  std::filesystem::rename(tmp, root / "manifest.json");
}

inline VideoSession load_session(const std::string& dir) {
  const auto root = std::filesystem::path(dir);
  std::ifstream f(root / "manifest.json");
  require(static_cast<bool>(f), ErrorCode::NotFound, "no session manifest in '" + dir + "'");
  nlohmann::json m;
  try {
    f >> m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Format, std::string("session manifest: ") + e.what());
  }
  VideoSession s;
  s.id = m.value("id", "");
  s.kind = m.value("kind", "video");
  require(s.kind == "video" || s.kind == "image", ErrorCode::Format, "unknown session kind '" + s.kind + "'");
  for (int i = 0; i < kNumStages; ++i) s.done[static_cast<std::size_t>(i)] = m.at("stages").value(stage_name(static_cast<Stage>(i)), false);
  const auto c = m.at("crop");
  s.crop = {c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>(), c.at(3).get<int>()};
  s.base_checkpoint = m.value("base_checkpoint", "");
  s.pti_checkpoint = m.value("pti_checkpoint", "");
  s.edit = edit_spec_from_json(m.value("edit", nlohmann::json::array()));
  s.smoothing_normalized = m.value("smoothing_normalized", false);
  s.warnings = m.value("warnings", std::vector<std::string>{});
  s.seam_residuals = m.value("seam_residuals", std::vector<double>{});
  for (const auto& fr : m.at("frames")) {
    FrameRecord r;
    r.index = fr.at("index").get<int>();
    r.source_ref = fr.value("source_ref", "");
    r.crop = s.crop;
    const auto p = fr.at("params");
    r.params = {p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()};
    r.matrix = detail::matrix_from(fr.at("matrix"));
    const auto& lm = fr.at("landmarks");
    r.landmarks.left_eye = detail::point_from(lm.at("left_eye"));
    r.landmarks.right_eye = detail::point_from(lm.at("right_eye"));
    if (lm.contains("mouth")) r.landmarks.mouth = detail::point_from(lm["mouth"]);
    r.eye_distance_ratio = fr.value("eye_distance_ratio", 1.0);
    r.inversion_losses = fr.value("inversion_losses", std::vector<double>{});
    s.frames.push_back(std::move(r));
  }
  const auto tensors = root / "frames.sg3t";
  if (std::filesystem::exists(tensors)) {
    const auto tc = TensorContainer::load(tensors.string());
    s.unaligned = detail::read_images(tc, "unaligned");
    s.aligned = detail::read_images(tc, "aligned");
    s.rendered = detail::read_images(tc, "rendered");
    auto read_codes = [&](const std::string& name, std::optional<LatentWPlus> FrameRecord::*field) {
      if (!tc.contains(name)) return;
      const auto& e = tc.at(name);
      require(e.shape.size() == 3 && e.shape[0] == s.frames.size(), ErrorCode::Format, "bad code stack '" + name + "'");
      const auto data = tc.get_f64(name);
      const std::size_t per = e.shape[1] * e.shape[2];
      for (std::size_t i = 0; i < s.frames.size(); ++i)
        s.frames[i].*field = LatentWPlus::from_flat(static_cast<int>(e.shape[2]),
                                                    {data.begin() + static_cast<std::ptrdiff_t>(i * per),
                                                     data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)});
    };
    read_codes("codes", &FrameRecord::code);
    read_codes("edited_codes", &FrameRecord::edited_code);
    read_codes("smoothed_codes", &FrameRecord::smoothed_code);
    if (tc.contains("smoothed_matrices")) {
      const auto data = tc.get_f64("smoothed_matrices");
      require(data.size() == s.frames.size() * 9, ErrorCode::Format, "bad smoothed matrix stack");
      for (std::size_t i = 0; i < s.frames.size(); ++i) {
        TransformMatrix t;
        for (int r = 0; r < 3; ++r)
          for (int c2 = 0; c2 < 3; ++c2) t.m[r][c2] = data[i * 9 + r * 3 + c2];
        s.frames[i].smoothed_matrix = t;
      }
    }
    for (std::size_t i = 0;; ++i) {
      const auto name = "expanded_" + std::to_string(i);
      if (!tc.contains(name)) break;
      s.expanded.push_back(detail::read_images(tc, name).front());
    }
  }
  return s;
}

}  // namespace sg3
