#pragma once

// Transform-parameterized style generator.
//
// The synthesis network follows the StyleGAN3 layout at the level that matters
// for editing and inversion: a mapping network z -> w, sixteen per-layer codes
// w0..w15, a first layer whose affine output (sin, cos, x, y) rotates and
// translates a bank of Fourier features, and fifteen modulated channel-mixing
// layers. Mixing layers are 1x1 (no spatial operators), so every output pixel
// is a function of the Fourier features at that pixel's transformed
// coordinate and the network is exactly equivariant to rotation and
// translation. make_toy_generator() builds a small instance used as the
// geometric oracle throughout the tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "image.hpp"
#include "latent.hpp"
#include "tensor_container.hpp"
#include "transform.hpp"

namespace sg3 {

/// Fully connected layer, weight stored row-major (rows = outputs).
struct Dense {
  int rows = 0;
  int cols = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  Dense() = default;
  Dense(int r, int c) : rows(r), cols(c), weight(static_cast<std::size_t>(r) * c, 0.0), bias(r, 0.0) {}

  double w(int i, int j) const { return weight[static_cast<std::size_t>(i) * cols + j]; }

  void apply(std::span<const double> x, std::span<double> y) const {
    for (int i = 0; i < rows; ++i) {
      double acc = bias[i];
      const double* wr = weight.data() + static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) acc += wr[j] * x[j];
      y[i] = acc;
    }
  }

  friend bool operator==(const Dense&, const Dense&) = default;
};

struct GeneratorConfig {
  int resolution = 32;
  int latent_dim = 8;
  int mapping_layers = 2;
  int num_features = 16;          ///< Fourier feature channels (input of layer 1)
  std::vector<int> layer_widths;  ///< output widths of layers 1..15; last is RGB
  std::string alignment = "aligned";
  double translation_unit = 1.0;  ///< user translations are multiplied by this (canvas widths)

  int image_channels() const { return layer_widths.empty() ? 0 : layer_widths.back(); }

  /// Affine output widths per layer: 4 transform parameters for layer 0, then
  /// the input width of each mixing layer.
  std::vector<int> style_widths() const {
    std::vector<int> widths{4, num_features};
    for (std::size_t k = 0; k + 1 < layer_widths.size(); ++k) widths.push_back(layer_widths[k]);
    return widths;
  }

  std::size_t style_dim() const {
    std::size_t n = 0;
    for (int w : style_widths()) n += static_cast<std::size_t>(w);
    return n;
  }

  std::vector<std::size_t> style_offsets() const {
    std::vector<std::size_t> off{0};
    for (int w : style_widths()) off.push_back(off.back() + static_cast<std::size_t>(w));
    return off;
  }

  void validate() const {
    require(resolution > 0 && latent_dim > 0 && mapping_layers >= 1 && num_features > 0, ErrorCode::InvalidArgument,
            "generator config sizes must be positive");
    require(layer_widths.size() == kNumLayers - 1, ErrorCode::InvalidArgument,
            "generator config needs 15 mixing layer widths");
    require(std::all_of(layer_widths.begin(), layer_widths.end(), [](int w) { return w > 0; }),
            ErrorCode::InvalidArgument, "layer widths must be positive");
    require(alignment == "aligned" || alignment == "unaligned", ErrorCode::InvalidArgument,
            "alignment tag must be 'aligned' or 'unaligned'");
  }

  /// Channel layout of the 1024x1024 rotation-equivariant configuration
  /// (channel base 65536, max 1024, 14 layers with 2 critically sampled).
  static GeneratorConfig reference_1024() {
    GeneratorConfig c;
    c.resolution = 1024;
    c.latent_dim = 512;
    c.mapping_layers = 2;
    const int num_layers = 14, num_critical = 2;
    const double first_cutoff = 2.0, last_cutoff = 1024 / 2.0;
    const double channel_base = 65536, channel_max = 1024;
    std::vector<int> channels;
    for (int i = 0; i <= num_layers; ++i) {
      const double e = std::min(static_cast<double>(i) / (num_layers - num_critical), 1.0);
      const double cutoff = first_cutoff * std::pow(last_cutoff / first_cutoff, e);
      channels.push_back(static_cast<int>(std::nearbyint(std::min(channel_base / 2 / cutoff, channel_max))));
    }
    channels.back() = 3;
    c.num_features = channels.front();
    c.layer_widths = channels;
    return c;
  }

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct GeneratorParams {
  std::vector<Dense> mapping;
  std::vector<double> frequencies;  ///< num_features x 2, cycles per canvas width
  std::vector<double> phases;       ///< num_features, radians
  std::vector<Dense> affine;        ///< kNumLayers; affine[0] -> (sin, cos, x, y)
  std::vector<Dense> mix;           ///< kNumLayers - 1; mix[k - 1] is layer k

  friend bool operator==(const GeneratorParams&, const GeneratorParams&) = default;
};

enum class ParamGroup { Mapping, FourierInput, Synthesis };

/// Flat views over a parameter group, in a fixed order (for optimizers and
/// fingerprints). The Fourier input group is the feature bank plus the
/// first-layer affine that drives its transform.
inline std::vector<std::span<double>> param_views(GeneratorParams& p, ParamGroup group) {
  std::vector<std::span<double>> v;
  auto dense = [&v](Dense& d) {
    v.emplace_back(d.weight);
    v.emplace_back(d.bias);
  };
  switch (group) {
    case ParamGroup::Mapping:
      for (auto& d : p.mapping) dense(d);
      break;
    case ParamGroup::FourierInput:
      v.emplace_back(p.frequencies);
      v.emplace_back(p.phases);
      dense(p.affine[0]);
      break;
    case ParamGroup::Synthesis:
      for (std::size_t k = 1; k < p.affine.size(); ++k) dense(p.affine[k]);
      for (auto& d : p.mix) dense(d);
      break;
  }
  return v;
}

inline std::uint64_t param_hash(const GeneratorParams& p, ParamGroup group) {
  auto& mutable_p = const_cast<GeneratorParams&>(p);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto s : param_views(mutable_p, group)) h = fnv1a(s.data(), s.size_bytes(), h);
  return h;
}

inline GeneratorParams zeros_like(const GeneratorParams& p) {
  GeneratorParams z = p;
  for (auto group : {ParamGroup::Mapping, ParamGroup::FourierInput, ParamGroup::Synthesis})
    for (auto s : param_views(z, group)) std::fill(s.begin(), s.end(), 0.0);
  return z;
}

/// A loaded (or constructed) generator. Config is fixed after construction;
/// parameters change only through explicit fine-tuning on a copy.
struct GeneratorHandle {
  GeneratorConfig config;
  GeneratorParams params;
  LatentW average_latent;  ///< w-bar

  int latent_dim() const { return config.latent_dim; }
};

inline constexpr std::uint64_t kDefaultAverageSeed = 20220131;
inline constexpr int kDefaultAverageSamples = 100000;

// ---------------------------------------------------------------------------
// Mapping network

inline LatentZ sample_z(int dim, std::uint64_t seed, std::uint64_t index) {
  Rng rng = make_rng(seed, index);
  LatentZ z{std::vector<double>(dim)};
  for (double& v : z.values) v = normal(rng);
  return z;
}

inline LatentW map_z_to_w(const GeneratorHandle& g, const LatentZ& z) {
  require(z.dim() == g.config.latent_dim, ErrorCode::DimensionMismatch, "z dimension does not match generator");
  require(all_finite(z.values), ErrorCode::NonFinite, "z has non-finite entries");
  std::vector<double> x = z.values;
  double ms = 0.0;
  for (double v : x) ms += v * v;
  const double norm = 1.0 / std::sqrt(ms / x.size() + 1e-8);
  for (double& v : x) v *= norm;
  std::vector<double> y(g.config.latent_dim);
  const auto& layers = g.params.mapping;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].apply(x, y);
    if (i + 1 < layers.size())
      for (double& v : y) v = (v > 0 ? v : 0.2 * v) * std::numbers::sqrt2;
    std::swap(x, y);
  }
  return LatentW{std::move(x)};
}

/// Mean of mapped codes over n seeded draws; stored on the handle.
inline LatentW average_latent(GeneratorHandle& g, int n_samples = kDefaultAverageSamples,
                              std::uint64_t seed = kDefaultAverageSeed) {
  require(n_samples >= 1, ErrorCode::InvalidArgument, "average_latent needs at least one sample");
  std::vector<double> acc(g.config.latent_dim, 0.0);
  for (int i = 0; i < n_samples; ++i) {
    const LatentW w = map_z_to_w(g, sample_z(g.config.latent_dim, seed, static_cast<std::uint64_t>(i)));
    for (int d = 0; d < g.config.latent_dim; ++d) acc[d] += w.values[d];
  }
  for (double& v : acc) v /= n_samples;
  g.average_latent = LatentW{acc};
  return g.average_latent;
}

inline LatentW sample_w(const GeneratorHandle& g, std::uint64_t seed, std::uint64_t index) {
  return map_z_to_w(g, sample_z(g.config.latent_dim, seed, index));
}

// ---------------------------------------------------------------------------
// Styles

inline StyleVector compute_styles(const GeneratorHandle& g, const LatentWPlus& code) {
  require(code.dim() == g.config.latent_dim, ErrorCode::DimensionMismatch, "code dimension does not match generator");
  StyleVector s;
  s.layer_offsets = g.config.style_offsets();
  s.values.assign(s.layer_offsets.back(), 0.0);
  for (int k = 0; k < kNumLayers; ++k) g.params.affine[k].apply(code.row(k), s.layer(k));
  return s;
}

inline LatentWPlus pseudo_align(const LatentWPlus& code, const LatentW& w_bar) {
  LatentWPlus out = code;
  out.set_row(0, w_bar);
  return out;
}

/// Transform produced by the first layer: rotation atan2(sin, cos) and
/// translation (x, y) in canvas widths.
inline TransformMatrix learned_transform(const StyleVector& styles) {
  const auto s0 = styles.layer(0);
  const double theta = std::atan2(s0[0], s0[1]);
  TransformMatrix t;
  const double c = std::cos(theta), s = std::sin(theta);
  t.m = {{{c, s, s0[2]}, {-s, c, s0[3]}, {0, 0, 1}}};
  return t;
}

inline TransformMatrix learned_transform(const GeneratorHandle& g, const LatentWPlus& code) {
  return learned_transform(compute_styles(g, code));
}

inline TransformMatrix user_matrix(const GeneratorConfig& cfg, const TransformParams& p) {
  return params_to_matrix({p.r, p.tx * cfg.translation_unit, p.ty * cfg.translation_unit});
}

// ---------------------------------------------------------------------------
// Synthesis

namespace detail {

/// Translations are snapped to 2^-20 pixel so that composing with a
/// whole-pixel shift moves every sample coordinate by exactly that shift.
inline double snap_pixels(double v) { return std::nearbyint(v * 1048576.0) / 1048576.0; }

/// Per-render state shared by the forward and backward passes.
struct SynthesisPlan {
  int width = 0, height = 0, features = 0, out_channels = 0;
  double rot[2][2] = {{1, 0}, {0, 1}};  ///< rotation block of the total transform
  double shift_px[2] = {0, 0};          ///< snapped total translation in pixels
  double theta = 0.0;                   ///< learned rotation (radians)
  std::vector<std::vector<double>> prefix;       ///< P_k, k = 0..15 (P_0 unused)
  std::vector<std::vector<double>> prefix_bias;  ///< c_k
  std::vector<std::vector<double>> mixed;        ///< A_k = M_k diag(s_k), k = 1..15

  /// Normalized feature coordinate of pixel (x, y).
  void coord(int x, int y, double& qx, double& qy) const {
    const double dx = (x + 0.5 - 0.5 * width) - shift_px[0];
    const double dy = (y + 0.5 - 0.5 * height) - shift_px[1];
    qx = (rot[0][0] * dx + rot[1][0] * dy) / width;
    qy = (rot[0][1] * dx + rot[1][1] * dy) / width;
  }
};

inline SynthesisPlan plan(const GeneratorHandle& g, const StyleVector& styles, const TransformMatrix& user) {
  const auto& cfg = g.config;
  const auto& p = g.params;
  require(styles.size() == cfg.style_dim(), ErrorCode::DimensionMismatch, "style vector length does not match generator");
  require(all_finite(styles.values), ErrorCode::NonFinite, "styles have non-finite entries");
  SynthesisPlan pl;
  pl.width = pl.height = cfg.resolution;
  pl.features = cfg.num_features;
  pl.out_channels = cfg.image_channels();
  const TransformMatrix learned = learned_transform(styles);
  pl.theta = learned.rotation_rad();
  const TransformMatrix total = compose(user, learned);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) pl.rot[i][j] = total.m[i][j];
  pl.shift_px[0] = snap_pixels(total.m[0][2] * cfg.resolution);
  pl.shift_px[1] = snap_pixels(total.m[1][2] * cfg.resolution);

  const int F = cfg.num_features;
  pl.prefix.resize(kNumLayers);
  pl.prefix_bias.resize(kNumLayers);
  pl.mixed.resize(kNumLayers);
  pl.prefix[0].assign(static_cast<std::size_t>(F) * F, 0.0);
  for (int f = 0; f < F; ++f) pl.prefix[0][static_cast<std::size_t>(f) * F + f] = 1.0;
  pl.prefix_bias[0].assign(F, 0.0);
  int in = F;
  for (int k = 1; k < kNumLayers; ++k) {
    const Dense& m = p.mix[k - 1];
    const auto s = styles.layer(k);
    const int out = m.rows;
    auto& a = pl.mixed[k];
    a.resize(static_cast<std::size_t>(out) * in);
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < in; ++j) a[static_cast<std::size_t>(i) * in + j] = m.w(i, j) * s[j];
    auto& pk = pl.prefix[k];
    auto& ck = pl.prefix_bias[k];
    pk.assign(static_cast<std::size_t>(out) * F, 0.0);
    ck.assign(out, 0.0);
    const auto& pprev = pl.prefix[k - 1];
    const auto& cprev = pl.prefix_bias[k - 1];
    for (int i = 0; i < out; ++i) {
      double cacc = m.bias[i];
      for (int j = 0; j < in; ++j) {
        const double aij = a[static_cast<std::size_t>(i) * in + j];
        if (aij == 0.0) continue;
        const double* src = pprev.data() + static_cast<std::size_t>(j) * F;
        double* dst = pk.data() + static_cast<std::size_t>(i) * F;
        for (int f = 0; f < F; ++f) dst[f] += aij * src[f];
        cacc += aij * cprev[j];
      }
      ck[i] = cacc;
    }
    in = out;
  }
  return pl;
}

inline void fourier_features(const GeneratorParams& p, double qx, double qy, std::span<double> out,
                             std::span<double> arg_cos = {}) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  for (std::size_t f = 0; f < out.size(); ++f) {
    const double arg = kTwoPi * (p.frequencies[2 * f] * qx + p.frequencies[2 * f + 1] * qy) + p.phases[f];
    out[f] = std::sin(arg);
    if (!arg_cos.empty()) arg_cos[f] = std::cos(arg);
  }
}

}  // namespace detail

inline Image synthesize_from_styles(const GeneratorHandle& g, const StyleVector& styles, const TransformMatrix& user) {
  const detail::SynthesisPlan pl = detail::plan(g, styles, user);
  const int F = pl.features, C = pl.out_channels;
  const auto& P = pl.prefix.back();
  const auto& c = pl.prefix_bias.back();
  Image img(pl.width, pl.height, C);
  std::vector<double> feat(F);
  for (int y = 0; y < pl.height; ++y) {
    for (int x = 0; x < pl.width; ++x) {
      double qx, qy;
      pl.coord(x, y, qx, qy);
      detail::fourier_features(g.params, qx, qy, feat);
      for (int ch = 0; ch < C; ++ch) {
        double acc = c[ch];
        const double* row = P.data() + static_cast<std::size_t>(ch) * F;
        for (int f = 0; f < F; ++f) acc += row[f] * feat[f];
        img.at(x, y, ch) = acc;
      }
    }
  }
  return img;
}

inline Image synthesize_from_styles(const GeneratorHandle& g, const StyleVector& styles,
                                    const TransformParams& params = {}) {
  return synthesize_from_styles(g, styles, user_matrix(g.config, params));
}

inline Image synthesize(const GeneratorHandle& g, const LatentWPlus& code, const TransformMatrix& user) {
  require(all_finite(code.flat()), ErrorCode::NonFinite, "latent code has non-finite entries");
  return synthesize_from_styles(g, compute_styles(g, code), user);
}

/// y = G(w; (r, tx, ty)); the user transform is composed onto the learned
/// first-layer transform.
inline Image synthesize(const GeneratorHandle& g, const LatentWPlus& code, const TransformParams& params = {}) {
  return synthesize(g, code, user_matrix(g.config, params));
}

// ---------------------------------------------------------------------------
// Backward pass

struct SynthesisGradients {
  StyleVector styles;
  LatentWPlus code;
  GeneratorParams params;  ///< only filled when requested
};

/// Gradients of a scalar loss given dLoss/dImage for y = G(code; user).
/// Parameter gradients are accumulated into `param_grads` when non-null.
inline SynthesisGradients synthesis_backward(const GeneratorHandle& g, const LatentWPlus& code,
                                             const TransformMatrix& user, const Image& image_grad,
                                             GeneratorParams* param_grads = nullptr) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  const auto& cfg = g.config;
  const auto& prm = g.params;
  const StyleVector styles = compute_styles(g, code);
  const detail::SynthesisPlan pl = detail::plan(g, styles, user);
  const int F = pl.features, C = pl.out_channels;
  require(image_grad.width == pl.width && image_grad.height == pl.height && image_grad.channels == C,
          ErrorCode::DimensionMismatch, "image gradient shape mismatch");

  SynthesisGradients grads;
  grads.styles.layer_offsets = styles.layer_offsets;
  grads.styles.values.assign(styles.size(), 0.0);

  const auto& P = pl.prefix.back();
  std::vector<double> gP(static_cast<std::size_t>(C) * F, 0.0), gc(C, 0.0);
  std::vector<double> feat(F), cosv(F), dfeat(F);
  std::vector<double> dfreq(2 * F, 0.0), dphase(F, 0.0);
  double dtheta = 0.0, dtl[2] = {0.0, 0.0};
  const double cl = std::cos(pl.theta), sl = std::sin(pl.theta);
  for (int y = 0; y < pl.height; ++y) {
    for (int x = 0; x < pl.width; ++x) {
      double qx, qy;
      pl.coord(x, y, qx, qy);
      detail::fourier_features(prm, qx, qy, feat, cosv);
      bool any = false;
      for (int ch = 0; ch < C; ++ch) any |= image_grad.at(x, y, ch) != 0.0;
      if (!any) continue;
      std::fill(dfeat.begin(), dfeat.end(), 0.0);
      for (int ch = 0; ch < C; ++ch) {
        const double gv = image_grad.at(x, y, ch);
        gc[ch] += gv;
        double* gprow = gP.data() + static_cast<std::size_t>(ch) * F;
        const double* prow = P.data() + static_cast<std::size_t>(ch) * F;
        for (int f = 0; f < F; ++f) {
          gprow[f] += gv * feat[f];
          dfeat[f] += gv * prow[f];
        }
      }
      double dqx = 0.0, dqy = 0.0;
      for (int f = 0; f < F; ++f) {
        const double da = dfeat[f] * cosv[f];
        dphase[f] += da;
        dfreq[2 * f] += da * kTwoPi * qx;
        dfreq[2 * f + 1] += da * kTwoPi * qy;
        dqx += da * kTwoPi * prm.frequencies[2 * f];
        dqy += da * kTwoPi * prm.frequencies[2 * f + 1];
      }
      // q = R_L^T (u - t_L): dq/dtheta = (-qy, qx), dq/dt_L = -R_L^T.
      dtheta += -qy * dqx + qx * dqy;
      dtl[0] += -(cl * dqx + sl * dqy);
      dtl[1] += -(-sl * dqx + cl * dqy);
    }
  }

  // Layer 0 styles (a = sin-like, b = cos-like, x, y).
  {
    auto ds0 = grads.styles.layer(0);
    const auto s0 = styles.layer(0);
    const double a = s0[0], b = s0[1], n2 = a * a + b * b;
    ds0[0] = dtheta * b / n2;
    ds0[1] = -dtheta * a / n2;
    ds0[2] = dtl[0];
    ds0[3] = dtl[1];
  }

  // Mixing chain, last layer first.
  std::vector<double> tmpP, tmpc;
  for (int k = kNumLayers - 1; k >= 1; --k) {
    const Dense& m = prm.mix[k - 1];
    const int out = m.rows, in = m.cols;
    const auto& a = pl.mixed[k];
    const auto& pprev = pl.prefix[k - 1];
    const auto& cprev = pl.prefix_bias[k - 1];
    const auto s = styles.layer(k);
    auto ds = grads.styles.layer(k);
    Dense* dm = param_grads ? &param_grads->mix[k - 1] : nullptr;
    for (int i = 0; i < out; ++i) {
      const double* gprow = gP.data() + static_cast<std::size_t>(i) * F;
      if (dm) dm->bias[i] += gc[i];
      for (int j = 0; j < in; ++j) {
        const double* prow = pprev.data() + static_cast<std::size_t>(j) * F;
        double da = gc[i] * cprev[j];
        for (int f = 0; f < F; ++f) da += gprow[f] * prow[f];
        ds[j] += da * m.w(i, j);
        if (dm) dm->weight[static_cast<std::size_t>(i) * in + j] += da * s[j];
      }
    }
    tmpP.assign(static_cast<std::size_t>(in) * F, 0.0);
    tmpc.assign(in, 0.0);
    for (int i = 0; i < out; ++i) {
      const double* gprow = gP.data() + static_cast<std::size_t>(i) * F;
      for (int j = 0; j < in; ++j) {
        const double aij = a[static_cast<std::size_t>(i) * in + j];
        if (aij == 0.0) continue;
        double* dst = tmpP.data() + static_cast<std::size_t>(j) * F;
        for (int f = 0; f < F; ++f) dst[f] += aij * gprow[f];
        tmpc[j] += aij * gc[i];
      }
    }
    gP.swap(tmpP);
    gc.swap(tmpc);
  }

  // Affine layers back to the code rows.
  grads.code = LatentWPlus(cfg.latent_dim);
  for (int k = 0; k < kNumLayers; ++k) {
    const Dense& af = prm.affine[k];
    const auto ds = grads.styles.layer(k);
    auto dw = grads.code.row(k);
    const auto w = code.row(k);
    for (int i = 0; i < af.rows; ++i) {
      if (ds[i] == 0.0) continue;
      for (int j = 0; j < af.cols; ++j) dw[j] += ds[i] * af.w(i, j);
    }
    if (param_grads) {
      Dense& daf = param_grads->affine[k];
      for (int i = 0; i < af.rows; ++i) {
        daf.bias[i] += ds[i];
        for (int j = 0; j < af.cols; ++j) daf.weight[static_cast<std::size_t>(i) * af.cols + j] += ds[i] * w[j];
      }
    }
  }
  if (param_grads) {
    for (int f = 0; f < 2 * F; ++f) param_grads->frequencies[f] += dfreq[f];
    for (int f = 0; f < F; ++f) param_grads->phases[f] += dphase[f];
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Latent sampling and probes

/// W+ codes whose rows are independent mapped samples.
inline std::vector<LatentWPlus> sample_wplus_random(const GeneratorHandle& g, int n, std::uint64_t seed) {
  require(n >= 1, ErrorCode::InvalidArgument, "need at least one sample");
  std::vector<LatentWPlus> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    LatentWPlus code(g.config.latent_dim);
    for (int k = 0; k < kNumLayers; ++k)
      code.set_row(k, sample_w(g, seed, static_cast<std::uint64_t>(i) * kNumLayers + k));
    out.push_back(std::move(code));
  }
  return out;
}

enum class ProbeMode { VaryW1, FixW0W1 };

struct ProbeSample {
  LatentWPlus code;
  Image image;
};

/// Layer-role probe series. Element 0 is the baseline code (every row from
/// the same sample); elements 1..n-1 vary w1 (VaryW1) or resample rows 2..15
/// while keeping w0 and w1 (FixW0W1).
inline std::vector<ProbeSample> layer_role_probe(const GeneratorHandle& g, ProbeMode mode, int n, std::uint64_t seed) {
  require(n >= 1, ErrorCode::InvalidArgument, "probe needs at least one sample");
  const LatentW base = sample_w(g, seed, 0);
  std::vector<ProbeSample> out;
  for (int i = 0; i < n; ++i) {
    LatentWPlus code = LatentWPlus::broadcast(base);
    if (i > 0) {
      const LatentW other = sample_w(g, seed, static_cast<std::uint64_t>(i));
      if (mode == ProbeMode::VaryW1) {
        code.set_row(1, other);
      } else {
        for (int k = 2; k < kNumLayers; ++k) code.set_row(k, other);
      }
    }
    out.push_back({code, synthesize(g, code)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

/// Rows (or columns, if rows > cols) orthonormal.
inline std::vector<double> random_semi_orthogonal(int rows, int cols, Rng& rng) {
  const bool transpose = rows > cols;
  const int r = transpose ? cols : rows, c = transpose ? rows : cols;
  std::vector<double> m(static_cast<std::size_t>(r) * c);
  for (double& v : m) v = normal(rng);
  for (int i = 0; i < r; ++i) {
    double* vi = m.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < i; ++j) {
      const double* vj = m.data() + static_cast<std::size_t>(j) * c;
      double dot = 0.0;
      for (int t = 0; t < c; ++t) dot += vi[t] * vj[t];
      for (int t = 0; t < c; ++t) vi[t] -= dot * vj[t];
    }
    double n = 0.0;
    for (int t = 0; t < c; ++t) n += vi[t] * vi[t];
    n = std::sqrt(n);
    for (int t = 0; t < c; ++t) vi[t] /= n;
  }
  if (!transpose) return m;
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(i) * cols + j] = m[static_cast<std::size_t>(j) * rows + i];
  return out;
}

}  // namespace detail

/// Random parameters for a config (no centering); used for reference-size
/// layouts and as the starting point of the toy generator.
inline GeneratorHandle make_random_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_rng(seed, 1);
  GeneratorHandle g;
  g.config = cfg;
  const int D = cfg.latent_dim;
  for (int i = 0; i < cfg.mapping_layers; ++i) {
    Dense d(D, D);
    for (double& v : d.weight) v = normal(rng) / std::sqrt(static_cast<double>(D));
    g.params.mapping.push_back(std::move(d));
  }
  const int F = cfg.num_features;
  g.params.frequencies.resize(2 * F);
  g.params.phases.resize(F);
  for (int f = 0; f < F; ++f) {
    const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double radius = uniform(rng, 0.5, 2.0);
    g.params.frequencies[2 * f] = radius * std::cos(angle);
    g.params.frequencies[2 * f + 1] = radius * std::sin(angle);
    g.params.phases[f] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }
  const auto widths = cfg.style_widths();
  for (int k = 0; k < kNumLayers; ++k) {
    Dense a(widths[k], D);
    for (double& v : a.weight) v = normal(rng) * 0.2 / std::sqrt(static_cast<double>(D));
    std::fill(a.bias.begin(), a.bias.end(), 1.0);
    if (k == 0) a.bias = {0.0, 1.0, 0.0, 0.0};
    g.params.affine.push_back(std::move(a));
  }
  int in = F;
  for (int k = 1; k < kNumLayers; ++k) {
    const int out = cfg.layer_widths[k - 1];
    Dense m(out, in);
    m.weight = detail::random_semi_orthogonal(out, in, rng);
    if (k == kNumLayers - 1)
      for (double& v : m.weight) v *= 0.3;
    for (double& v : m.bias) v = 0.02 * normal(rng);
    g.params.mix.push_back(std::move(m));
    in = out;
  }
  return g;
}

struct ToyOptions {
  int resolution = 32;
  int latent_dim = 8;
  int num_features = 16;
  int width = 8;
  std::uint64_t seed = 7;
  double rotation_std = 0.15;     ///< std of the sin-like first-layer output
  double translation_std = 0.03;  ///< std of the learned translation (canvas widths)
  double style_std = 0.1;         ///< std of mixing-layer modulations around 1
  int average_samples = kDefaultAverageSamples;
  std::string alignment = "aligned";
};

inline GeneratorConfig toy_config(const ToyOptions& o) {
  GeneratorConfig c;
  c.resolution = o.resolution;
  c.latent_dim = o.latent_dim;
  c.mapping_layers = 2;
  c.num_features = o.num_features;
  c.layer_widths.assign(kNumLayers - 1, o.width);
  c.layer_widths.back() = 3;
  c.alignment = o.alignment;
  return c;
}

/// Miniature generator used as the equivariance oracle. Affine layers are
/// centered on w-bar and scaled by the empirical covariance of w, so that
/// w0 = w-bar yields exactly the canonical first-layer transform (sin = 0,
/// x = y = 0) and modulations are 1 +- style_std.
inline GeneratorHandle make_toy_generator(const ToyOptions& o = {}) {
  GeneratorHandle g = make_random_generator(toy_config(o), o.seed);
  const int D = o.latent_dim;
  average_latent(g, o.average_samples, kDefaultAverageSeed);
  const auto& mean = g.average_latent.values;

  std::vector<double> cov(static_cast<std::size_t>(D) * D, 0.0);
  const int n_cov = std::min(o.average_samples, 20000);
  for (int i = 0; i < n_cov; ++i) {
    const LatentW w = sample_w(g, kDefaultAverageSeed, static_cast<std::uint64_t>(i));
    for (int a = 0; a < D; ++a)
      for (int b = 0; b < D; ++b) cov[a * D + b] += (w.values[a] - mean[a]) * (w.values[b] - mean[b]);
  }
  for (double& v : cov) v /= n_cov;

  Rng rng = make_rng(o.seed, 2);
  auto set_row = [&](Dense& a, int i, double target_std) {
    std::vector<double> u(D);
    for (double& v : u) v = normal(rng);
    double var = 0.0;
    for (int p = 0; p < D; ++p)
      for (int q = 0; q < D; ++q) var += u[p] * cov[p * D + q] * u[q];
    const double scale = target_std / std::sqrt(std::max(var, 1e-300));
    for (int j = 0; j < D; ++j) a.weight[static_cast<std::size_t>(i) * D + j] = u[j] * scale;
  };
  auto center = [&](Dense& a, std::span<const double> target) {
    for (int i = 0; i < a.rows; ++i) {
      double acc = 0.0;
      for (int j = 0; j < D; ++j) acc += a.w(i, j) * mean[j];
      a.bias[i] = target[i] - acc;
    }
  };
  Dense& a0 = g.params.affine[0];
  set_row(a0, 0, o.rotation_std);
  std::fill(a0.weight.begin() + D, a0.weight.begin() + 2 * D, 0.0);
  set_row(a0, 2, o.translation_std);
  set_row(a0, 3, o.translation_std);
  const std::array<double, 4> canonical{0.0, 1.0, 0.0, 0.0};
  center(a0, canonical);
  for (int k = 1; k < kNumLayers; ++k) {
    Dense& a = g.params.affine[k];
    for (int i = 0; i < a.rows; ++i) set_row(a, i, o.style_std);
    const std::vector<double> ones(a.rows, 1.0);
    center(a, ones);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json config_to_json(const GeneratorConfig& c) {
  return {{"resolution", c.resolution},         {"latent_dim", c.latent_dim},
          {"mapping_layers", c.mapping_layers}, {"num_features", c.num_features},
          {"layer_widths", c.layer_widths},     {"alignment", c.alignment},
          {"translation_unit", c.translation_unit}};
}

inline GeneratorConfig config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.resolution = j.at("resolution").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.mapping_layers = j.at("mapping_layers").get<int>();
  c.num_features = j.at("num_features").get<int>();
  c.layer_widths = j.at("layer_widths").get<std::vector<int>>();
  c.alignment = j.at("alignment").get<std::string>();
  c.translation_unit = j.value("translation_unit", 1.0);
  c.validate();
  return c;
}

inline void add_dense(TensorContainer& tc, const std::string& prefix, const Dense& d) {
  tc.add_f64(prefix + ".weight", {static_cast<std::uint64_t>(d.rows), static_cast<std::uint64_t>(d.cols)}, d.weight);
  tc.add_f64(prefix + ".bias", {static_cast<std::uint64_t>(d.rows)}, d.bias);
}

inline Dense read_dense(const TensorContainer& tc, const std::string& prefix, int rows, int cols) {
  Dense d(rows, cols);
  d.weight = tc.get_f64(prefix + ".weight");
  d.bias = tc.get_f64(prefix + ".bias");
  require(d.weight.size() == static_cast<std::size_t>(rows) * cols && d.bias.size() == static_cast<std::size_t>(rows),
          ErrorCode::Format, "tensor '" + prefix + "' has the wrong shape");
  return d;
}

/// Manifest entry "manifest" (JSON) plus one tensor per parameter.
inline TensorContainer generator_to_container(const GeneratorHandle& g) {
  TensorContainer tc;
  nlohmann::json manifest{{"kind", "generator"}, {"format", 1}, {"config", config_to_json(g.config)}};
  tc.add_text("manifest", manifest.dump());
  for (std::size_t i = 0; i < g.params.mapping.size(); ++i) add_dense(tc, "mapping." + std::to_string(i), g.params.mapping[i]);
  tc.add_f64("fourier.frequencies", {static_cast<std::uint64_t>(g.config.num_features), 2}, g.params.frequencies);
  tc.add_f64("fourier.phases", {static_cast<std::uint64_t>(g.config.num_features)}, g.params.phases);
  for (int k = 0; k < kNumLayers; ++k) add_dense(tc, "affine." + std::to_string(k), g.params.affine[k]);
  for (int k = 1; k < kNumLayers; ++k) add_dense(tc, "mix." + std::to_string(k), g.params.mix[k - 1]);
  tc.add_f64("average_latent", {static_cast<std::uint64_t>(g.average_latent.dim())}, g.average_latent.values);
  return tc;
}

inline GeneratorHandle generator_from_container(const TensorContainer& tc) {
  const auto manifest = nlohmann::json::parse(tc.get_text("manifest"));
  require(manifest.value("kind", "") == "generator", ErrorCode::Format, "container is not a generator checkpoint");
  GeneratorHandle g;
  g.config = config_from_json(manifest.at("config"));
  const int D = g.config.latent_dim, F = g.config.num_features;
  for (int i = 0; i < g.config.mapping_layers; ++i)
    g.params.mapping.push_back(read_dense(tc, "mapping." + std::to_string(i), D, D));
  g.params.frequencies = tc.get_f64("fourier.frequencies");
  g.params.phases = tc.get_f64("fourier.phases");
  require(g.params.frequencies.size() == static_cast<std::size_t>(2 * F) && g.params.phases.size() == static_cast<std::size_t>(F),
          ErrorCode::Format, "Fourier feature tensors have the wrong shape");
  const auto widths = g.config.style_widths();
  for (int k = 0; k < kNumLayers; ++k) g.params.affine.push_back(read_dense(tc, "affine." + std::to_string(k), widths[k], D));
  int in = F;
  for (int k = 1; k < kNumLayers; ++k) {
    g.params.mix.push_back(read_dense(tc, "mix." + std::to_string(k), g.config.layer_widths[k - 1], in));
    in = g.config.layer_widths[k - 1];
  }
  g.average_latent.values = tc.get_f64("average_latent");
  require(g.average_latent.dim() == D, ErrorCode::Format, "average latent has the wrong size");
  return g;
}

inline void save_generator(const GeneratorHandle& g, const std::string& path) { generator_to_container(g).save(path); }
inline GeneratorHandle load_generator(const std::string& path) {
  return generator_from_container(TensorContainer::load(path));
}

}  // namespace sg3
