#pragma once

// Encoder-based inversion: a residual encoder E(x, y_t) -> delta code used
// ReStyle-style, the aligned-only training driver, and inversion of unaligned
// images through landmark alignment.
//
// Training on unaligned images with a pseudo-aligned identity loss was
// considered and rejected: the encoder only ever sees canonical-pose images,
// and pose is recovered geometrically at inference time.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clients.hpp"
#include "generator.hpp"
#include "geometry.hpp"
#include "losses.hpp"
#include "optim.hpp"

namespace sg3 {

enum class EncoderVariant { PspLike, E4eLike };

inline const char* to_string(EncoderVariant v) { return v == EncoderVariant::PspLike ? "psp_like" : "e4e_like"; }

inline EncoderVariant encoder_variant_from_string(const std::string& s) {
  if (s == "psp_like") return EncoderVariant::PspLike;
  if (s == "e4e_like") return EncoderVariant::E4eLike;
  throw Error(ErrorCode::InvalidArgument, "unknown encoder variant '" + s + "'");
}

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::PspLike;
  int resolution = 32;
  int channels = 3;
  int latent_dim = 8;
  int hidden = 64;
  int downsample = 2;  ///< box factor applied to both inputs

  int input_size() const {
    const int r = resolution / downsample;
    return 2 * r * r * channels;
  }
  int output_size() const { return kNumLayers * latent_dim; }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct EncoderParams {
  Dense hidden;  ///< input -> hidden, leaky ReLU
  Dense out;     ///< hidden -> 16 x latent_dim

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

inline std::vector<std::span<double>> param_views(EncoderParams& p) {
  return {p.hidden.weight, p.hidden.bias, p.out.weight, p.out.bias};
}

struct EncoderHandle {
  EncoderConfig config;
  EncoderParams params;
  LatentWPlus initial_code;  ///< ReStyle starting point (w-bar in every row)
  Image average_image;       ///< G(initial_code)
};

/// Fresh encoder for a generator. e4e_like: row 0 of the output is the base
/// code and rows 1..15 are offsets whose output weights start at zero.
inline EncoderHandle make_encoder(const GeneratorHandle& g, EncoderVariant variant, int hidden = 64,
                                  std::uint64_t seed = 1, int downsample = 2) {
  EncoderHandle e;
  e.config.variant = variant;
  e.config.resolution = g.config.resolution;
  e.config.channels = g.config.image_channels();
  e.config.latent_dim = g.config.latent_dim;
  e.config.hidden = hidden;
  e.config.downsample = downsample;
  require(hidden > 0 && downsample >= 1 && g.config.resolution % downsample == 0, ErrorCode::InvalidArgument,
          "bad encoder shape");
  Rng rng = make_rng(seed, 17);
  const int in = e.config.input_size(), out = e.config.output_size(), D = e.config.latent_dim;
  e.params.hidden = Dense(hidden, in);
  for (double& v : e.params.hidden.weight) v = normal(rng) * std::sqrt(2.0 / in);
  e.params.out = Dense(out, hidden);
  for (int i = 0; i < out; ++i) {
    const bool offset_row = variant == EncoderVariant::E4eLike && i >= D;
    for (int j = 0; j < hidden; ++j)
      e.params.out.weight[static_cast<std::size_t>(i) * hidden + j] = offset_row ? 0.0 : normal(rng) * 0.01 / std::sqrt(hidden);
  }
  e.initial_code = LatentWPlus::broadcast(g.average_latent);
  e.average_image = synthesize(g, e.initial_code);
  return e;
}

namespace detail {

inline void downsample_into(const Image& img, int factor, std::span<double> out) {
  const int w = img.width / factor, h = img.height / factor, c = img.channels;
  const double inv = 1.0 / (factor * factor);
  std::size_t k = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += img.at(x * factor + dx, y * factor + dy, ch);
        out[k++] = acc * inv;
      }
}

struct EncoderPass {
  std::vector<double> input, pre, hidden, output;
};

/// The residual is anchored: E(x, y) = f(x, y) - f(x, x), so a perfect
/// reconstruction is a fixed point of the refinement.
struct EncoderActivations {
  EncoderPass pair, self;
  std::vector<double> output;
};

inline EncoderPass encoder_pass(const EncoderHandle& e, const Image& x, const Image& current) {
  const auto& cfg = e.config;
  EncoderPass a;
  a.input.resize(cfg.input_size());
  const std::size_t half = a.input.size() / 2;
  downsample_into(x, cfg.downsample, std::span<double>(a.input).subspan(0, half));
  downsample_into(current, cfg.downsample, std::span<double>(a.input).subspan(half));
  a.pre.resize(cfg.hidden);
  e.params.hidden.apply(a.input, a.pre);
  a.hidden.resize(cfg.hidden);
  for (int i = 0; i < cfg.hidden; ++i) a.hidden[i] = a.pre[i] > 0 ? a.pre[i] : 0.2 * a.pre[i];
  a.output.resize(cfg.output_size());
  e.params.out.apply(a.hidden, a.output);
  return a;
}

inline EncoderActivations encoder_forward(const EncoderHandle& e, const Image& x, const Image& current) {
  const auto& cfg = e.config;
  require(x.width == cfg.resolution && x.height == cfg.resolution && x.channels == cfg.channels,
          ErrorCode::DimensionMismatch, "encoder input resolution mismatch");
  require(current.same_shape(x), ErrorCode::DimensionMismatch, "reconstruction resolution mismatch");
  EncoderActivations a;
  a.pair = encoder_pass(e, x, current);
  a.self = encoder_pass(e, x, x);
  a.output.resize(cfg.output_size());
  for (std::size_t i = 0; i < a.output.size(); ++i) a.output[i] = a.pair.output[i] - a.self.output[i];
  return a;
}

inline LatentWPlus output_to_delta(const EncoderConfig& cfg, std::span<const double> o) {
  const int D = cfg.latent_dim;
  LatentWPlus d(D);
  for (int k = 0; k < kNumLayers; ++k)
    for (int j = 0; j < D; ++j) {
      double v = o[static_cast<std::size_t>(k) * D + j];
      if (cfg.variant == EncoderVariant::E4eLike && k > 0) v += o[j];
      d.row(k)[j] = v;
    }
  return d;
}

/// Accumulates scale * dLoss/dParams given dLoss/dDelta (and the e4e offset
/// penalty weight, applied to the raw offsets).
inline void encoder_backward(const EncoderHandle& e, const EncoderActivations& a, const LatentWPlus& ddelta,
                             double offset_penalty, double scale, EncoderParams& grads) {
  const auto& cfg = e.config;
  const int D = cfg.latent_dim, H = cfg.hidden, in = cfg.input_size(), out = cfg.output_size();
  std::vector<double> dout(out, 0.0);
  for (int k = 0; k < kNumLayers; ++k)
    for (int j = 0; j < D; ++j) {
      const double g = ddelta.row(k)[j];
      dout[static_cast<std::size_t>(k) * D + j] += g;
      if (cfg.variant == EncoderVariant::E4eLike && k > 0) {
        dout[j] += g;
        dout[static_cast<std::size_t>(k) * D + j] += 2.0 * offset_penalty * a.output[static_cast<std::size_t>(k) * D + j];
      }
    }
  for (int pass = 0; pass < 2; ++pass) {
    const EncoderPass& p = pass == 0 ? a.pair : a.self;
    const double sign = pass == 0 ? scale : -scale;
    std::vector<double> dh(H, 0.0);
    for (int i = 0; i < out; ++i) {
      const double g = dout[i] * sign;
      if (g == 0.0) continue;
      grads.out.bias[i] += g;
      double* gw = grads.out.weight.data() + static_cast<std::size_t>(i) * H;
      const double* w = e.params.out.weight.data() + static_cast<std::size_t>(i) * H;
      for (int j = 0; j < H; ++j) {
        gw[j] += g * p.hidden[j];
        dh[j] += g * w[j];
      }
    }
    for (int i = 0; i < H; ++i) {
      const double g = dh[i] * (p.pre[i] > 0 ? 1.0 : 0.2);
      if (g == 0.0) continue;
      grads.hidden.bias[i] += g;
      double* gw = grads.hidden.weight.data() + static_cast<std::size_t>(i) * in;
      for (int j = 0; j < in; ++j) gw[j] += g * p.input[j];
    }
  }
}

inline double offset_norm2(const EncoderConfig& cfg, std::span<const double> o) {
  if (cfg.variant != EncoderVariant::E4eLike) return 0.0;
  double acc = 0.0;
  for (std::size_t i = cfg.latent_dim; i < o.size(); ++i) acc += o[i] * o[i];
  return acc;
}

}  // namespace detail

/// Single pass from the initial code and average image.
inline LatentWPlus encode(const EncoderHandle& e, const Image& x_aligned) {
  const auto a = detail::encoder_forward(e, x_aligned, e.average_image);
  LatentWPlus code = e.initial_code;
  code += detail::output_to_delta(e.config, a.output);
  return code;
}

struct InversionResult {
  LatentWPlus code;
  TransformParams params;
  std::vector<double> per_iter_losses;
};

/// Iterative refinement: w_{t+1} = w_t + E(x, G(w_t)), starting from the
/// initial code and average image. Loss is the weighted reconstruction loss
/// of each iterate against x.
inline InversionResult restyle_invert(const EncoderHandle& e, const GeneratorHandle& g, const Image& x_aligned,
                                      int n_iters, const LossWeights& weights = {1.0, 0.0, 0.0},
                                      PerceptualMetric* perceptual = nullptr, IdentityMetric* identity = nullptr) {
  require(n_iters >= 1, ErrorCode::InvalidArgument, "restyle needs at least one iteration");
  InversionResult res;
  res.code = e.initial_code;
  Image current = e.average_image;
  for (int t = 0; t < n_iters; ++t) {
    const auto a = detail::encoder_forward(e, x_aligned, current);
    res.code += detail::output_to_delta(e.config, a.output);
    current = synthesize(g, res.code);
    res.per_iter_losses.push_back(reconstruction_loss(x_aligned, current, weights, perceptual, identity).total);
  }
  return res;
}

/// Pads or crops to the largest centered square when no face box is given.
inline Box default_crop_box(const Image& img) {
  const int side = std::min(img.width, img.height);
  return {(img.width - side) / 2, (img.height - side) / 2, side, side};
}

/// Detect, align, invert in canonical pose, and return the pose that maps the
/// canonical reconstruction back onto the input.
inline InversionResult invert_unaligned(const EncoderHandle& e, const GeneratorHandle& g, const Image& x_unaligned,
                                        LandmarkDetector& detector, int n_iters = 3,
                                        const LandmarkSet& canonical = canonical_landmarks(),
                                        std::optional<Box> box = std::nullopt) {
  const auto det = detector.detect(x_unaligned, 0);
  require(det.has_value(), ErrorCode::NoFaceDetected, "no face detected in input image");
  const Box crop_box = box ? *box : default_crop_box(x_unaligned);
  const auto aligned = align_crop(x_unaligned, *det, crop_box, e.config.resolution, canonical);
  InversionResult res = restyle_invert(e, g, aligned.aligned, n_iters);
  res.params = aligned.params;
  return res;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  LossWeights weights;           ///< 1, 0.8, 0.1
  int batch = 2;
  int accumulation = 4;          ///< effective batch = batch * accumulation
  int steps = 0;
  int restyle_iters = 3;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  double offset_penalty = 2e-5;  ///< e4e_like only
  int checkpoint_every = 0;      ///< 0 disables periodic checkpoints
  std::string checkpoint_dir;
  std::string log_path;          ///< line-delimited JSON, empty disables
  bool deterministic = true;

  int effective_batch() const { return batch * accumulation; }
  void validate() const {
    weights.validate();
    require(batch >= 1 && accumulation >= 1 && steps >= 0 && restyle_iters >= 1, ErrorCode::InvalidArgument,
            "bad training schedule");
    require(lr > 0 && std::isfinite(lr), ErrorCode::InvalidArgument, "learning rate must be positive");
  }
};

struct AlignedSample {
  Image image;
  TransformParams params;  ///< must be (0, 0, 0)
};

/// Training data as an indexable stream; index order is fixed by the seed.
using AlignedDataset = std::function<AlignedSample(std::uint64_t index)>;

/// Aligned renders of mapped W samples from a generator.
inline AlignedDataset generator_dataset(const GeneratorHandle& g, std::uint64_t seed) {
  return [&g, seed](std::uint64_t index) {
    return AlignedSample{synthesize(g, LatentWPlus::broadcast(sample_w(g, seed, index))), {}};
  };
}

struct TrainLogEntry {
  int step = 0;
  LossBreakdown loss;
  double offset_norm = 0.0;
  std::vector<double> row_norms;  ///< mean per-row code norm (diagnostic)
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::vector<std::string> checkpoints;
};

inline TensorContainer encoder_to_container(const EncoderHandle& e) {
  TensorContainer tc;
  const nlohmann::json manifest{{"kind", "encoder"},
                                {"format", 1},
                                {"variant", to_string(e.config.variant)},
                                {"resolution", e.config.resolution},
                                {"channels", e.config.channels},
                                {"latent_dim", e.config.latent_dim},
                                {"hidden", e.config.hidden},
                                {"downsample", e.config.downsample}};
  tc.add_text("manifest", manifest.dump());
  add_dense(tc, "hidden", e.params.hidden);
  add_dense(tc, "out", e.params.out);
  tc.add_f64("initial_code", {kNumLayers, static_cast<std::uint64_t>(e.config.latent_dim)}, e.initial_code.flat());
  const auto& img = e.average_image;
  tc.add_f64("average_image",
             {static_cast<std::uint64_t>(img.height), static_cast<std::uint64_t>(img.width), static_cast<std::uint64_t>(img.channels)},
             img.data);
  return tc;
}

inline EncoderHandle encoder_from_container(const TensorContainer& tc) {
  const auto m = nlohmann::json::parse(tc.get_text("manifest"));
  require(m.value("kind", "") == "encoder", ErrorCode::Format, "container is not an encoder checkpoint");
  EncoderHandle e;
  e.config.variant = encoder_variant_from_string(m.at("variant").get<std::string>());
  e.config.resolution = m.at("resolution").get<int>();
  e.config.channels = m.at("channels").get<int>();
  e.config.latent_dim = m.at("latent_dim").get<int>();
  e.config.hidden = m.at("hidden").get<int>();
  e.config.downsample = m.at("downsample").get<int>();
  e.params.hidden = read_dense(tc, "hidden", e.config.hidden, e.config.input_size());
  e.params.out = read_dense(tc, "out", e.config.output_size(), e.config.hidden);
  e.initial_code = LatentWPlus::from_flat(e.config.latent_dim, tc.get_f64("initial_code"));
  e.average_image = Image(e.config.resolution, e.config.resolution, e.config.channels);
  e.average_image.data = tc.get_f64("average_image");
  require(e.average_image.data.size() == static_cast<std::size_t>(e.config.resolution) * e.config.resolution * e.config.channels,
          ErrorCode::Format, "average image has the wrong size");
  return e;
}

inline void save_encoder(const EncoderHandle& e, const std::string& path) { encoder_to_container(e).save(path); }
inline EncoderHandle load_encoder(const std::string& path) { return encoder_from_container(TensorContainer::load(path)); }

inline nlohmann::json to_json(const TrainLogEntry& e) {
  return {{"step", e.step},       {"l2", e.loss.l2},   {"lpips", e.loss.lpips}, {"id", e.loss.id},
          {"total", e.loss.total}, {"offset_norm", e.offset_norm}, {"row_norms", e.row_norms}};
}

/// Minimizes the ReStyle reconstruction objective over aligned images with
/// Adam. Each step draws batch * accumulation samples; every sample runs
/// restyle_iters refinement iterations, each contributing its own loss with
/// the current reconstruction treated as a constant input.
inline TrainResult train_encoder(EncoderHandle& enc, const GeneratorHandle& g, const AlignedDataset& data,
                                 const TrainConfig& cfg, PerceptualMetric* perceptual = nullptr,
                                 IdentityMetric* identity = nullptr) {
  cfg.validate();
  TrainResult result;
  if (cfg.steps == 0) return result;
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, std::ios::trunc);
    require(static_cast<bool>(log), ErrorCode::Io, "cannot open training log '" + cfg.log_path + "'");
  }
  auto checkpoint = [&](const std::string& name) {
    if (cfg.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(cfg.checkpoint_dir);
    const auto path = (std::filesystem::path(cfg.checkpoint_dir) / name).string();
    save_encoder(enc, path);
    result.checkpoints.push_back(path);
  };

  auto diverged = [&](int step) {
    checkpoint("encoder_diverged.sg3t");
    throw Error(ErrorCode::Divergence, "encoder loss is not finite at step " + std::to_string(step));
  };

  Adam adam({cfg.lr});
  const int eff = cfg.effective_batch();
  const double scale = 1.0 / (static_cast<double>(eff) * cfg.restyle_iters);
  const int D = enc.config.latent_dim;
  for (int step = 0; step < cfg.steps; ++step) {
    EncoderParams grads = enc.params;
    for (auto v : param_views(grads)) std::fill(v.begin(), v.end(), 0.0);
    TrainLogEntry entry;
    entry.step = step;
    entry.row_norms.assign(kNumLayers, 0.0);
    for (int micro = 0; micro < cfg.accumulation; ++micro) {
      for (int b = 0; b < cfg.batch; ++b) {
        const std::uint64_t index = static_cast<std::uint64_t>(step) * eff + static_cast<std::uint64_t>(micro) * cfg.batch + b;
        const AlignedSample sample = data(mix_seed(cfg.seed, index));
        require(sample.params == TransformParams{}, ErrorCode::InvalidArgument,
                "encoder training accepts canonical-pose images only");
        LatentWPlus code = enc.initial_code;
        Image current = enc.average_image;
        for (int t = 0; t < cfg.restyle_iters; ++t) {
          const auto act = detail::encoder_forward(enc, sample.image, current);
          code += detail::output_to_delta(enc.config, act.output);
          if (!all_finite(code.flat())) diverged(step);
          current = synthesize(g, code);
          Image grad_y;
          const LossBreakdown loss = reconstruction_loss(sample.image, current, cfg.weights, perceptual, identity, &grad_y);
          const double pen = cfg.offset_penalty * detail::offset_norm2(enc.config, act.output);
          const auto back = synthesis_backward(g, code, TransformMatrix::identity(), grad_y);
          detail::encoder_backward(enc, act, back.code, cfg.offset_penalty, scale, grads);
          entry.loss.l2 += loss.l2 * scale;
          entry.loss.lpips += loss.lpips * scale;
          entry.loss.id += loss.id * scale;
          entry.loss.total += (loss.total + pen) * scale;
          entry.offset_norm += std::sqrt(detail::offset_norm2(enc.config, act.output)) * scale;
        }
        for (int k = 0; k < kNumLayers; ++k) {
          double n = 0.0;
          for (int j = 0; j < D; ++j) n += code.row(k)[j] * code.row(k)[j];
          entry.row_norms[k] += std::sqrt(n) / eff;
        }
      }
    }
    if (!std::isfinite(entry.loss.total)) diverged(step);
    adam.step(param_views(enc.params), as_const_views(param_views(grads)));
    if (log) log << to_json(entry).dump() << "\n";
    result.log.push_back(std::move(entry));
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "encoder_step_%06d.sg3t", step + 1);
      checkpoint(name);
    }
  }
  return result;
}

}  // namespace sg3
