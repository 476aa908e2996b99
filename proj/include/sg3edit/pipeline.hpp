#pragma once

// Session-directory operations shared by the CLI and the HTTP service, so
// both produce the same artifacts for the same request. A session directory
// holds manifest.json and frames.sg3t plus:
//   input/            uploaded frames (service only)
//   reconstruction/   G(code; T) per frame with the active generator
//   render/           edited, smoothed renders
//   expand/           field-of-view expanded renders
//   pti_generator.sg3t

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "dci.hpp"
#include "http_clients.hpp"
#include "image_io.hpp"
#include "video.hpp"

namespace sg3 {

namespace fs = std::filesystem;

inline constexpr const char* kPtiGeneratorFile = "pti_generator.sg3t";

// ---------------------------------------------------------------------------
// Clients from configuration

inline bool is_url(const std::string& s) { return s.rfind("http://", 0) == 0 || s.rfind("https://", 0) == 0; }

inline std::unique_ptr<PerceptualMetric> make_perceptual(const Config& cfg) {
  const std::string v = cfg.get("perceptual");
  if (v == "none" || v.empty()) return nullptr;
  if (v == "builtin") return std::make_unique<DownsampledMsePerceptual>();
  require(is_url(v), ErrorCode::InvalidArgument, "perceptual must be builtin, none or a URL");
  return std::make_unique<HttpPerceptual>(v);
}

inline std::unique_ptr<IdentityMetric> make_identity(const Config& cfg) {
  const std::string v = cfg.get("identity");
  if (v == "none" || v.empty()) return nullptr;
  if (v == "builtin") return std::make_unique<ProjectionIdentity>();
  require(is_url(v), ErrorCode::InvalidArgument, "identity must be builtin, none or a URL");
  return std::make_unique<HttpIdentity>(v);
}

inline std::unique_ptr<LandmarkDetector> make_detector(const std::string& source) {
  require(!source.empty(), ErrorCode::ClientUnavailable, "no landmark source configured");
  if (is_url(source)) return std::make_unique<HttpLandmarkDetector>(source);
  return std::make_unique<FileLandmarkDetector>(source);
}

inline std::unique_ptr<ClassifierClient> make_classifier(const Config& cfg) {
  const std::string v = cfg.get("classifier_url");
  require(!v.empty(), ErrorCode::ClientUnavailable, "classifier_url is not configured");
  return std::make_unique<HttpClassifier>(v);
}

inline GeneratorHandle load_base_generator(const Config& cfg) {
  const std::string path = cfg.get_path("generator");
  require(!path.empty(), ErrorCode::InvalidArgument, "config key 'generator' is required");
  return load_generator(path);
}

inline int config_threads(const Config& cfg) {
  const long long t = cfg.get_int("threads");
  require(t >= 1 && t <= 256, ErrorCode::InvalidArgument, "threads must be in [1, 256]");
  return static_cast<int>(t);
}

inline PTIConfig pti_config(const Config& cfg) {
  PTIConfig p;
  p.steps = static_cast<int>(cfg.get_int("pti.steps"));
  p.lr = cfg.get_double("pti.lr");
  const std::string schedule = cfg.get("pti.lr_schedule");
  require(schedule == "constant" || schedule == "cosine", ErrorCode::InvalidArgument,
          "pti.lr_schedule must be constant or cosine");
  p.cosine_decay = schedule == "cosine";
  p.batch = static_cast<int>(cfg.get_int("pti.batch"));
  p.weights = {cfg.get_double("pti.weight_l2"), cfg.get_double("pti.weight_lpips"), cfg.get_double("pti.weight_id")};
  p.freeze_fourier_input = cfg.get_bool("pti.freeze_fourier_input");
  p.freeze_mapping = cfg.get_bool("pti.freeze_mapping");
  p.seed = cfg.get_seed();
  p.validate();
  return p;
}

inline PreprocessConfig preprocess_config(const Config& cfg, int resolution) {
  PreprocessConfig p;
  p.resolution = resolution;
  const std::string mode = cfg.get("preprocess.crop_mode");
  require(mode == "union" || mode == "eye_distance", ErrorCode::InvalidArgument,
          "preprocess.crop_mode must be union or eye_distance");
  p.mode = mode == "union" ? CropMode::Union : CropMode::EyeDistance;
  p.padding = cfg.get_double("preprocess.padding");
  require(p.padding >= 0.0, ErrorCode::InvalidArgument, "preprocess.padding must be >= 0");
  p.threads = config_threads(cfg);
  return p;
}

// ---------------------------------------------------------------------------
// Session helpers

inline VideoSession open_session(const std::string& dir) { return load_session(dir); }

inline std::string pti_generator_path(const std::string& dir) { return (fs::path(dir) / kPtiGeneratorFile).string(); }

/// Checkpoint whose reconstructions the session currently shows: the tuned
/// one once pivotal tuning has run, otherwise the base checkpoint.
inline std::string active_generator_path(const Config& cfg, const VideoSession& s, const std::string& dir) {
  if (s.has(Stage::Pti) && !s.pti_checkpoint.empty()) return (fs::path(dir) / s.pti_checkpoint).string();
  if (cfg.is_set("generator") || s.base_checkpoint.empty()) {
    require(!cfg.get_path("generator").empty(), ErrorCode::InvalidArgument, "config key 'generator' is required");
    return cfg.get_path("generator");
  }
  return s.base_checkpoint;
}

inline GeneratorHandle active_generator(const Config& cfg, const VideoSession& s, const std::string& dir) {
  return load_generator(active_generator_path(cfg, s, dir));
}

inline TransformMatrix frame_user_matrix(const GeneratorHandle& g, const FrameRecord& f,
                                         const std::optional<TransformParams>& override_params = std::nullopt) {
  return detail::to_user_space(g.config, override_params ? params_to_matrix(*override_params) : f.matrix);
}

inline Image reconstruction(const GeneratorHandle& g, const VideoSession& s, std::size_t i) {
  const auto& f = s.frames.at(i);
  require(f.code.has_value(), ErrorCode::StageOrder, "frame " + std::to_string(i) + " has no code yet");
  return synthesize(g, *f.code, frame_user_matrix(g, f));
}

inline void write_frames(const std::vector<Image>& imgs, const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (std::size_t i = 0; i < imgs.size(); ++i)
    write_png(imgs[i], (dir / frame_filename(static_cast<int>(i))).string(), 16);
}

inline void write_reconstructions(const GeneratorHandle& g, const VideoSession& s, const std::string& dir) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < s.frames.size(); ++i) out.push_back(reconstruction(g, s, i));
  write_frames(out, fs::path(dir) / "reconstruction");
}

inline std::vector<std::string> list_pngs(const std::string& dir) {
  require(fs::is_directory(dir), ErrorCode::NotFound, "frame directory '" + dir + "' does not exist");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  require(!out.empty(), ErrorCode::InvalidArgument, "no PNG frames in '" + dir + "'");
  return out;
}

// ---------------------------------------------------------------------------
// Video containers via an external transcoder

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

/// Runs a transcoder command template with {input} and {output} replaced by
/// quoted paths.
inline void run_transcoder(const std::string& tmpl, const std::string& input, const std::string& output) {
  require(!tmpl.empty(), ErrorCode::InvalidArgument, "no transcoder command configured");
  std::string cmd;
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.compare(i, 7, "{input}") == 0) {
      cmd += shell_quote(input);
      i += 7;
    } else if (tmpl.compare(i, 8, "{output}") == 0) {
      cmd += shell_quote(output);
      i += 8;
    } else {
      cmd += tmpl[i++];
    }
  }
  const int status = std::system(cmd.c_str());
  require(status == 0, ErrorCode::Io, "transcoder failed (status " + std::to_string(status) + "): " + cmd);
}

/// Splits a video file into frame_%06d.png files under `frames_dir`.
inline std::vector<std::string> decode_video(const Config& cfg, const std::string& video, const std::string& frames_dir) {
  require(fs::is_regular_file(video), ErrorCode::NotFound, "video file '" + video + "' does not exist");
  fs::remove_all(frames_dir);
  fs::create_directories(frames_dir);
  run_transcoder(cfg.get("transcode.decode"), video, frames_dir);
  return list_pngs(frames_dir);
}

/// Assembles the PNG frames of `frames_dir` into a video file.
inline void encode_video(const Config& cfg, const std::string& frames_dir, const std::string& video) {
  list_pngs(frames_dir);
  if (fs::path(video).has_parent_path()) fs::create_directories(fs::path(video).parent_path());
  run_transcoder(cfg.get("transcode.encode"), frames_dir, video);
  require(fs::exists(video), ErrorCode::Io, "transcoder did not write '" + video + "'");
}

inline nlohmann::json edit_summary(const EditSpec& e);

/// Status from manifest.json alone. The manifest is replaced atomically, so
/// this is safe to call while a stage job is writing the session.
inline nlohmann::json session_status(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  require(static_cast<bool>(f), ErrorCode::NotFound, "no session in '" + dir + "'");
  nlohmann::json m;
  try {
    f >> m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Format, std::string("session manifest: ") + e.what());
  }
  return {{"id", m.value("id", "")},
          {"kind", m.value("kind", "video")},
          {"frames", m.at("frames").size()},
          {"stages", m.at("stages")},
          {"crop", m.at("crop")},
          {"edit", edit_summary(edit_spec_from_json(m.value("edit", nlohmann::json::array())))},
          {"warnings", m.value("warnings", nlohmann::json::array())}};
}

inline nlohmann::json edit_summary(const EditSpec& e) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : e.edits) arr.push_back({{"direction_name", r.direction.name}, {"step", r.step}});
  return arr;
}

// ---------------------------------------------------------------------------
// Stages

/// Reads the frames, detects and aligns them, and starts a fresh session in
/// `dir` (keeping its id and kind when one exists).
inline nlohmann::json run_preprocess(const Config& cfg, const std::string& dir, const std::string& frames_dir,
                                     const std::string& landmarks = "") {
  const GeneratorHandle g = load_base_generator(cfg);
  VideoSession s;
  if (fs::exists(fs::path(dir) / "manifest.json")) {
    const VideoSession old = load_session(dir);
    s.id = old.id;
    s.kind = old.kind;
  }
  const auto files = list_pngs(frames_dir);
  require(s.kind != "image" || files.size() == 1, ErrorCode::InvalidArgument, "image sessions take exactly one frame");
  std::vector<Image> frames;
  std::vector<std::string> refs;
  for (const auto& f : files) {
    frames.push_back(read_png(f));
    refs.push_back(fs::path(f).filename().string());
  }
  auto detector = make_detector(landmarks.empty() ? cfg.get_path("landmarks") : landmarks);
  preprocess(s, frames, *detector, preprocess_config(cfg, g.config.resolution), refs);
  s.base_checkpoint = fs::absolute(cfg.get_path("generator")).string();
  for (const char* sub : {"reconstruction", "render", "expand"}) fs::remove_all(fs::path(dir) / sub);
  fs::remove(fs::path(dir) / kPtiGeneratorFile);
  save_session(s, dir);
  nlohmann::json params = nlohmann::json::array();
  for (const auto& f : s.frames) params.push_back({f.params.r, f.params.tx, f.params.ty});
  return {{"stage", "preprocess"},
          {"frames", s.frames.size()},
          {"crop", {s.crop.x, s.crop.y, s.crop.width, s.crop.height}},
          {"params", params},
          {"warnings", s.warnings}};
}

inline nlohmann::json run_invert(const Config& cfg, const std::string& dir, std::optional<int> restyle_iters = std::nullopt) {
  VideoSession s = load_session(dir);
  s.require_ready(Stage::Encode);
  const int iters = restyle_iters.value_or(static_cast<int>(cfg.get_int("invert.restyle_iters")));
  require(iters >= 1, ErrorCode::InvalidArgument, "restyle_iters must be >= 1");
  const std::string enc_path = cfg.get_path("encoder");
  require(!enc_path.empty(), ErrorCode::InvalidArgument, "config key 'encoder' is required");
  const GeneratorHandle g = load_base_generator(cfg);
  const EncoderHandle enc = load_encoder(enc_path);
  encode_frames(s, enc, g, iters, config_threads(cfg));
  fs::remove(fs::path(dir) / kPtiGeneratorFile);
  fs::remove_all(fs::path(dir) / "render");
  fs::remove_all(fs::path(dir) / "expand");
  write_reconstructions(g, s, dir);
  save_session(s, dir);
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& f : s.frames) losses.push_back(f.inversion_losses.empty() ? 0.0 : f.inversion_losses.back());
  return {{"stage", "invert"}, {"frames", s.frames.size()}, {"restyle_iters", iters}, {"final_losses", losses}};
}

struct NamedStep {
  std::string direction_name;
  double step = 0.0;
  std::optional<double> channel_threshold;
};

inline EditSpec resolve_edits(const Config& cfg, const std::vector<NamedStep>& steps) {
  const auto catalog = load_direction_catalog(cfg.get_path("directions_dir"));
  EditSpec spec;
  for (const auto& st : steps) {
    const EditDirection* d = find_direction(catalog, st.direction_name);
    require(d != nullptr, ErrorCode::NotFound, "unknown direction '" + st.direction_name + "'");
    require(std::isfinite(st.step), ErrorCode::InvalidArgument, "edit step must be finite");
    spec.edits.push_back({*d, st.step, st.channel_threshold});
  }
  return spec;
}

/// Stores the edit spec; smoothing and everything after it must be rerun.
inline nlohmann::json run_set_edit(const Config& cfg, const std::string& dir, const std::vector<NamedStep>& steps) {
  VideoSession s = load_session(dir);
  s.require_ready(Stage::Smooth);
  set_edit(s, resolve_edits(cfg, steps));
  fs::remove_all(fs::path(dir) / "render");
  fs::remove_all(fs::path(dir) / "expand");
  save_session(s, dir);
  return {{"stage", "edit"}, {"edit", edit_summary(s.edit)}};
}

/// One frame with a single edit applied to its current code, as PNG bytes.
/// A zero step (or no direction) reproduces the stored reconstruction byte
/// for byte. The session is never modified.
inline std::string preview_png(const Config& cfg, const GeneratorHandle& g, const VideoSession& s, int frame_index,
                               const std::string& direction_name, double step,
                               const std::optional<TransformParams>& override_params = std::nullopt) {
  s.require_ready(Stage::Smooth);
  require(frame_index >= 0 && frame_index < static_cast<int>(s.frames.size()), ErrorCode::OutOfBounds,
          "frame_index " + std::to_string(frame_index) + " out of range");
  const auto& f = s.frames[static_cast<std::size_t>(frame_index)];
  const TransformMatrix m = frame_user_matrix(g, f, override_params);
  if (direction_name.empty() || step == 0.0) return encode_png(synthesize(g, *f.code, m), 16);
  const EditSpec e = resolve_edits(cfg, {{direction_name, step, std::nullopt}});
  const LatentWPlus code = e.apply_to_code(*f.code);
  if (!e.has_style_edits()) return encode_png(synthesize(g, code, m), 16);
  return encode_png(synthesize_from_styles(g, e.apply_to_styles(compute_styles(g, code)), m), 16);
}

inline nlohmann::json run_smooth(const Config& cfg, const std::string& dir) {
  VideoSession s = load_session(dir);
  smooth(s, {cfg.get_bool("smoothing.normalize")});
  fs::remove_all(fs::path(dir) / "render");
  fs::remove_all(fs::path(dir) / "expand");
  save_session(s, dir);
  return {{"stage", "smooth"}, {"frames", s.frames.size()}, {"normalized", s.smoothing_normalized}};
}

inline nlohmann::json run_pti(const Config& cfg, const std::string& dir) {
  VideoSession s = load_session(dir);
  s.require_ready(Stage::Pti);
  PTIConfig p = pti_config(cfg);
  p.divergence_checkpoint = (fs::path(dir) / "pti_diverged.sg3t").string();
  const GeneratorHandle base = load_base_generator(cfg);
  auto perceptual = make_perceptual(cfg);
  auto identity = make_identity(cfg);
  const PTIResult r = pti_finetune(s, base, p, perceptual.get(), identity.get());
  save_generator(r.handle, pti_generator_path(dir));
  s.pti_checkpoint = kPtiGeneratorFile;
  fs::remove_all(fs::path(dir) / "render");
  fs::remove_all(fs::path(dir) / "expand");
  write_reconstructions(r.handle, s, dir);
  save_session(s, dir);
  return {{"stage", "pti"}, {"steps", p.steps}, {"initial_loss", r.initial_loss}, {"final_loss", r.final_loss},
          {"checkpoint", pti_generator_path(dir)}};
}

inline nlohmann::json run_render(const Config& cfg, const std::string& dir) {
  VideoSession s = load_session(dir);
  s.require_ready(Stage::Render);
  const GeneratorHandle g = active_generator(cfg, s, dir);
  const auto out = render(s, g, config_threads(cfg));
  write_frames(out, fs::path(dir) / "render");
  save_session(s, dir);
  return {{"stage", "render"}, {"frames", out.size()}, {"output", (fs::path(dir) / "render").string()}};
}

inline unsigned parse_directions(const std::vector<std::string>& names) {
  unsigned d = 0;
  for (const auto& n : names) {
    if (n == "up") d |= kUp;
    else if (n == "down") d |= kDown;
    else if (n == "left") d |= kLeft;
    else if (n == "right") d |= kRight;
    else throw Error(ErrorCode::InvalidArgument, "unknown expansion direction '" + n + "'");
  }
  return d;
}

inline nlohmann::json run_expand(const Config& cfg, const std::string& dir, const ExpansionSpec& spec) {
  VideoSession s = load_session(dir);
  s.require_ready(Stage::Expand);
  const GeneratorHandle g = active_generator(cfg, s, dir);
  const auto res = expand(s, g, spec, config_threads(cfg));
  std::vector<Image> canvases;
  for (const auto& r : res) canvases.push_back(r.canvas);
  write_frames(canvases, fs::path(dir) / "expand");
  save_session(s, dir);
  double worst = 0.0;
  for (double v : s.seam_residuals) worst = std::max(worst, v);
  return {{"stage", "expand"},
          {"frames", res.size()},
          {"width", res.empty() ? 0 : res.front().canvas.width},
          {"height", res.empty() ? 0 : res.front().canvas.height},
          {"max_seam_residual", worst},
          {"output", (fs::path(dir) / "expand").string()}};
}

// ---------------------------------------------------------------------------
// Catalog, training and analysis

inline nlohmann::json direction_catalog_json(const Config& cfg) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : load_direction_catalog(cfg.get_path("directions_dir")))
    arr.push_back({{"name", d.name}, {"space", to_string(d.space)}, {"dim", d.dim()}, {"metadata", d.metadata}});
  return arr;
}

/// Scores mapped W samples with the classifier and fits a linear boundary.
inline EditDirection train_boundary_from_generator(const GeneratorHandle& g, ClassifierClient& classifier,
                                                   const std::string& attribute, int n, std::uint64_t seed,
                                                   const BoundaryConfig& bc = {}) {
  require(n >= 2, ErrorCode::InsufficientSamples, "boundary training needs at least two samples");
  AttributeScoreSet data;
  data.space = LatentSpace::W;
  auto& scores = data.scores[attribute];
  for (int i = 0; i < n; ++i) {
    const LatentW w = sample_w(g, seed, static_cast<std::uint64_t>(i));
    data.latents.push_back(w.values);
    scores.push_back(classifier.score(synthesize(g, LatentWPlus::broadcast(w)), attribute));
  }
  return train_linear_boundary(data, attribute, bc);
}

inline TrainConfig train_config(const Config& cfg) {
  TrainConfig t;
  t.steps = static_cast<int>(cfg.get_int("train.steps"));
  t.lr = cfg.get_double("train.lr");
  t.seed = cfg.get_seed();
  t.weights = {cfg.get_double("train.weight_l2"), cfg.get_double("train.weight_lpips"), cfg.get_double("train.weight_id")};
  t.validate();
  return t;
}

}  // namespace sg3
