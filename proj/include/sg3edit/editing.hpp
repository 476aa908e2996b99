#pragma once

// Edit directions: max-margin boundaries in W, global channel directions in
// S, and their application to codes and style vectors.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clients.hpp"
#include "generator.hpp"

namespace sg3 {

enum class LatentSpace { Z, W, WPlus, S };

inline const char* to_string(LatentSpace s) {
  switch (s) {
    case LatentSpace::Z: return "Z";
    case LatentSpace::W: return "W";
    case LatentSpace::WPlus: return "Wplus";
    case LatentSpace::S: return "S";
  }
  return "?";
}

inline LatentSpace latent_space_from_string(const std::string& s) {
  if (s == "Z" || s == "z") return LatentSpace::Z;
  if (s == "W" || s == "w") return LatentSpace::W;
  if (s == "Wplus" || s == "W+" || s == "wplus") return LatentSpace::WPlus;
  if (s == "S" || s == "s") return LatentSpace::S;
  throw Error(ErrorCode::InvalidArgument, "unknown latent space '" + s + "'");
}

struct EditDirection {
  std::string name;
  LatentSpace space = LatentSpace::W;
  std::vector<double> vector;  ///< unit norm
  nlohmann::json metadata = nlohmann::json::object();  ///< source, attribute, step_range, rows

  std::size_t dim() const { return vector.size(); }
};

struct EditRequest {
  EditDirection direction;
  double step = 0.0;                       ///< delta (W) or strength beta (S)
  std::optional<double> channel_threshold;  ///< S only: keep |v| >= t * max |v|
};

inline double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline void normalize_direction(EditDirection& d) {
  require(all_finite(d.vector), ErrorCode::NonFinite, "direction has non-finite entries");
  const double n = l2_norm(d.vector);
  require(n > 1e-12, ErrorCode::DegenerateDirection, "direction '" + d.name + "' has zero norm");
  for (double& v : d.vector) v /= n;
}

// ---------------------------------------------------------------------------
// Linear boundaries

struct AttributeScoreSet {
  LatentSpace space = LatentSpace::W;
  std::vector<std::vector<double>> latents;  ///< flattened codes
  std::map<std::string, std::vector<double>> scores;

  void validate() const {
    require(!latents.empty(), ErrorCode::InsufficientSamples, "no latents");
    const std::size_t d = latents.front().size();
    for (const auto& l : latents) {
      require(l.size() == d, ErrorCode::DimensionMismatch, "latents have different sizes");
      require(all_finite(l), ErrorCode::NonFinite, "latent has non-finite entries");
    }
    for (const auto& [name, s] : scores) {
      require(s.size() == latents.size(), ErrorCode::DimensionMismatch, "score count differs for '" + name + "'");
      require(all_finite(s), ErrorCode::NonFinite, "scores for '" + name + "' are not finite");
    }
  }
};

struct BoundaryConfig {
  double quantile = 0.02;  ///< fraction taken from each end of the score ranking
  double c = 1.0;          ///< hinge penalty (inverse regularization)
  int max_epochs = 2000;
  double tol = 1e-10;
};

/// Labels the top and bottom score quantiles +1 / -1 and fits an
/// L2-regularized hinge-loss linear separator (dual coordinate descent with
/// an unregularized-in-spirit bias column). Returns the unit normal pointing
/// toward higher scores.
inline EditDirection train_linear_boundary(const AttributeScoreSet& data, const std::string& attribute,
                                           const BoundaryConfig& cfg = {}) {
  data.validate();
  const auto it = data.scores.find(attribute);
  require(it != data.scores.end(), ErrorCode::NotFound, "no scores for attribute '" + attribute + "'");
  require(cfg.quantile > 0 && cfg.quantile <= 0.5, ErrorCode::InvalidArgument, "quantile must be in (0, 0.5]");
  const auto& s = it->second;
  const std::size_t n = s.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&s](std::size_t a, std::size_t b) { return s[a] < s[b]; });
  const std::size_t k = std::min(n / 2, static_cast<std::size_t>(std::ceil(cfg.quantile * n)));
  require(k >= 1, ErrorCode::DegenerateLabels, "too few samples for the quantile split");
  require(s[order[k - 1]] < s[order[n - k]], ErrorCode::DegenerateLabels,
          "top and bottom score groups are not distinct for '" + attribute + "'");

  std::vector<const std::vector<double>*> xs;
  std::vector<double> ys;
  for (std::size_t i = 0; i < k; ++i) {
    xs.push_back(&data.latents[order[i]]);
    ys.push_back(-1.0);
  }
  for (std::size_t i = n - k; i < n; ++i) {
    xs.push_back(&data.latents[order[i]]);
    ys.push_back(1.0);
  }
  // Center on the selected points; the bias column then only absorbs class
  // imbalance, so its regularization barely matters.
  const std::size_t d = xs.front()->size(), m = xs.size();
  std::vector<double> mean(d, 0.0);
  for (const auto* x : xs)
    for (std::size_t j = 0; j < d; ++j) mean[j] += (*x)[j] / static_cast<double>(m);
  std::vector<std::vector<double>> z(m, std::vector<double>(d + 1, 1.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) z[i][j] = (*xs[i])[j] - mean[j];

  std::vector<double> w(d + 1, 0.0), alpha(m, 0.0), qii(m);
  for (std::size_t i = 0; i < m; ++i) qii[i] = std::inner_product(z[i].begin(), z[i].end(), z[i].begin(), 0.0);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    double max_change = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (qii[i] <= 0) continue;
      const double g = ys[i] * std::inner_product(w.begin(), w.end(), z[i].begin(), 0.0) - 1.0;
      const double a = std::clamp(alpha[i] - g / qii[i], 0.0, cfg.c);
      const double delta = a - alpha[i];
      if (delta == 0.0) continue;
      alpha[i] = a;
      for (std::size_t j = 0; j <= d; ++j) w[j] += delta * ys[i] * z[i][j];
      max_change = std::max(max_change, std::abs(delta));
    }
    if (max_change < cfg.tol) break;
  }
  EditDirection dir;
  dir.name = attribute;
  dir.space = data.space;
  dir.vector.assign(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(d));
  normalize_direction(dir);
  dir.metadata = {{"source", "linear_boundary"}, {"attribute", attribute}, {"quantile", cfg.quantile}};
  return dir;
}

// ---------------------------------------------------------------------------
// Application

inline LatentW apply_linear_edit(const LatentW& code, const EditRequest& req) {
  require(req.direction.space == LatentSpace::W, ErrorCode::InvalidArgument, "W code needs a W direction");
  require(req.direction.dim() == static_cast<std::size_t>(code.dim()), ErrorCode::DimensionMismatch,
          "direction dimension mismatch");
  require(std::isfinite(req.step), ErrorCode::NonFinite, "edit step must be finite");
  LatentW out = code;
  for (int j = 0; j < code.dim(); ++j) out.values[j] += req.step * req.direction.vector[j];
  return out;
}

/// W directions are added to every row, or only to metadata["rows"] when
/// present; W+ directions are added to the flattened code.
inline LatentWPlus apply_linear_edit(const LatentWPlus& code, const EditRequest& req) {
  require(std::isfinite(req.step), ErrorCode::NonFinite, "edit step must be finite");
  LatentWPlus out = code;
  const auto& d = req.direction;
  if (d.space == LatentSpace::WPlus) {
    require(d.dim() == out.flat().size(), ErrorCode::DimensionMismatch, "direction dimension mismatch");
    for (std::size_t i = 0; i < d.dim(); ++i) out.flat()[i] += req.step * d.vector[i];
    return out;
  }
  require(d.space == LatentSpace::W, ErrorCode::InvalidArgument, "W+ code needs a W or W+ direction");
  require(d.dim() == static_cast<std::size_t>(code.dim()), ErrorCode::DimensionMismatch, "direction dimension mismatch");
  std::vector<int> rows;
  if (d.metadata.contains("rows")) {
    rows = d.metadata["rows"].get<std::vector<int>>();
  } else {
    rows.resize(kNumLayers);
    std::iota(rows.begin(), rows.end(), 0);
  }
  for (int k : rows) {
    require(k >= 0 && k < kNumLayers, ErrorCode::OutOfBounds, "edit row out of range");
    auto r = out.row(k);
    for (int j = 0; j < code.dim(); ++j) r[j] += req.step * d.vector[j];
  }
  return out;
}

/// styles + beta * v on the direction's support (optionally thresholded).
inline StyleVector apply_s_edit(const StyleVector& styles, const EditRequest& req) {
  const auto& d = req.direction;
  require(d.space == LatentSpace::S, ErrorCode::InvalidArgument, "S edit needs an S direction");
  require(d.dim() == styles.size(), ErrorCode::DimensionMismatch, "S direction length mismatch");
  require(std::isfinite(req.step), ErrorCode::NonFinite, "edit step must be finite");
  double cutoff = 0.0;
  if (req.channel_threshold) {
    double mx = 0.0;
    for (double v : d.vector) mx = std::max(mx, std::abs(v));
    cutoff = *req.channel_threshold * mx;
  }
  StyleVector out = styles;
  for (std::size_t i = 0; i < d.dim(); ++i) {
    const double v = d.vector[i];
    if (v == 0.0 || std::abs(v) < cutoff) continue;
    out.values[i] += req.step * v;
  }
  return out;
}

/// Classifier score of the pseudo-aligned, untransformed rendering.
inline double pseudo_aligned_score(const GeneratorHandle& g, const LatentWPlus& code, ClassifierClient& classifier,
                                   const std::string& attribute) {
  return classifier.score(synthesize(g, pseudo_align(code, g.average_latent)), attribute);
}

// ---------------------------------------------------------------------------
// Global S directions

struct GlobalSConfig {
  double alpha = 1.0;      ///< perturbation, in units of each channel's std over the probes
  double threshold = 0.1;  ///< keep channels with |relevance| >= threshold * max
  std::uint64_t seed = 0;
};

/// Probe styles shared by compute_global_s_direction and anyone who needs to
/// reproduce its renders: probe i's styles with channel c moved by
/// sign * alpha * scale.
inline StyleVector global_s_probe_base(const GeneratorHandle& g, std::uint64_t seed, int probe) {
  return compute_styles(g, LatentWPlus::broadcast(sample_w(g, seed, static_cast<std::uint64_t>(probe))));
}

inline std::vector<double> global_s_channel_scale(const GeneratorHandle& g, int n_probe, std::uint64_t seed) {
  std::vector<StyleVector> base;
  for (int i = 0; i < n_probe; ++i) base.push_back(global_s_probe_base(g, seed, i));
  const std::size_t n = base.front().size();
  std::vector<double> scale(n, 1.0);
  if (n_probe < 2) return scale;
  for (std::size_t c = 0; c < n; ++c) {
    double m = 0, m2 = 0;
    for (const auto& s : base) {
      m += s.values[c];
      m2 += s.values[c] * s.values[c];
    }
    m /= n_probe;
    const double var = std::max(0.0, m2 / n_probe - m * m);
    scale[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return scale;
}

/// Per-channel relevance: mean over probes of the image-embedding change
/// caused by +-alpha perturbations of that channel, projected on the unit
/// text delta. Channels below threshold * max are zeroed.
inline EditDirection compute_global_s_direction(const GeneratorHandle& g, EmbeddingClient& embed,
                                                const std::string& neutral, const std::string& target, int n_probe,
                                                const GlobalSConfig& cfg = {}) {
  require(n_probe >= 1, ErrorCode::InvalidArgument, "need at least one probe latent");
  const auto t0 = embed.embed_text(neutral), t1 = embed.embed_text(target);
  require(t0.size() == t1.size() && !t0.empty(), ErrorCode::DimensionMismatch, "text embeddings differ in size");
  std::vector<double> dt(t0.size());
  for (std::size_t i = 0; i < dt.size(); ++i) dt[i] = t1[i] - t0[i];
  const double dtn = l2_norm(dt);
  require(dtn > 1e-12, ErrorCode::DegenerateDirection, "text prompts have identical embeddings");
  for (double& v : dt) v /= dtn;

  const auto scale = global_s_channel_scale(g, n_probe, cfg.seed);
  const std::size_t n = scale.size();
  std::vector<double> rel(n, 0.0);
  for (int p = 0; p < n_probe; ++p) {
    const StyleVector base = global_s_probe_base(g, cfg.seed, p);
    for (std::size_t c = 0; c < n; ++c) {
      StyleVector plus = base, minus = base;
      plus.values[c] += cfg.alpha * scale[c];
      minus.values[c] -= cfg.alpha * scale[c];
      const auto ep = embed.embed_image(synthesize_from_styles(g, plus));
      const auto em = embed.embed_image(synthesize_from_styles(g, minus));
      require(ep.size() == dt.size() && em.size() == dt.size(), ErrorCode::DimensionMismatch,
              "image and text embeddings differ in size");
      double proj = 0.0;
      for (std::size_t i = 0; i < dt.size(); ++i) proj += (ep[i] - em[i]) * dt[i];
      rel[c] += proj / (2.0 * cfg.alpha * n_probe);
    }
  }
  double mx = 0.0;
  for (double r : rel) mx = std::max(mx, std::abs(r));
  require(mx > 0.0, ErrorCode::DegenerateDirection, "no style channel moves the embedding along the text delta");
  const double cutoff = cfg.threshold * mx;
  EditDirection dir;
  dir.name = target;
  dir.space = LatentSpace::S;
  dir.vector.assign(n, 0.0);
  std::size_t kept = 0;
  for (std::size_t c = 0; c < n; ++c)
    if (std::abs(rel[c]) >= cutoff) {
      dir.vector[c] = rel[c];
      ++kept;
    }
  require(kept > 0, ErrorCode::DegenerateDirection, "relevance threshold removed every channel");
  normalize_direction(dir);
  dir.metadata = {{"source", "global_s"},     {"neutral", neutral}, {"target", target},
                  {"n_probe", n_probe},       {"alpha", cfg.alpha}, {"threshold", cfg.threshold},
                  {"channels", kept}};
  return dir;
}

// ---------------------------------------------------------------------------
// Persistence

inline TensorContainer direction_to_container(const EditDirection& d) {
  TensorContainer tc;
  const nlohmann::json manifest{{"kind", "direction"}, {"name", d.name}, {"space", to_string(d.space)}, {"metadata", d.metadata}};
  tc.add_text("manifest", manifest.dump());
  tc.add_f64("vector", {d.vector.size()}, d.vector);
  return tc;
}

inline EditDirection direction_from_container(const TensorContainer& tc) {
  const auto m = nlohmann::json::parse(tc.get_text("manifest"));
  require(m.value("kind", "") == "direction", ErrorCode::Format, "container is not an edit direction");
  EditDirection d;
  d.name = m.at("name").get<std::string>();
  d.space = latent_space_from_string(m.at("space").get<std::string>());
  d.metadata = m.value("metadata", nlohmann::json::object());
  d.vector = tc.get_f64("vector");
  return d;
}

inline void save_direction(const EditDirection& d, const std::string& path) { direction_to_container(d).save(path); }
inline EditDirection load_direction(const std::string& path) { return direction_from_container(TensorContainer::load(path)); }

/// All *.sg3t directions in a directory, sorted by name.
inline std::vector<EditDirection> load_direction_catalog(const std::string& dir) {
  std::vector<EditDirection> out;
  if (dir.empty() || !std::filesystem::is_directory(dir)) return out;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".sg3t") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back(load_direction(f.string()));
  return out;
}

inline const EditDirection* find_direction(const std::vector<EditDirection>& catalog, const std::string& name) {
  for (const auto& d : catalog)
    if (d.name == name) return &d;
  return nullptr;
}

}  // namespace sg3
