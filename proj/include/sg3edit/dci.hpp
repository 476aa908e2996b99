#pragma once

// Disentanglement / completeness / informativeness of a latent space with
// respect to attribute scores, using L1-regularized linear regressors.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "clients.hpp"
#include "editing.hpp"
#include "generator.hpp"

namespace sg3 {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  friend bool operator==(const Matrix&, const Matrix&) = default;
};

struct LassoConfig {
  double test_fraction = 0.25;
  double validation_fraction = 0.2;  ///< of the training split, for picking lambda
  std::vector<double> lambda_grid{1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 1e-4};  ///< fractions of lambda_max
  int max_sweeps = 20000;
  double tol = 1e-10;
  std::uint64_t seed = 0;
};

struct RegressionFit {
  Matrix importance;   ///< codes x factors, |standardized coefficient|
  Matrix predictions;  ///< test samples x factors
  Matrix targets;      ///< test samples x factors
  std::vector<double> lambdas;  ///< chosen lambda per factor (absolute)
  std::vector<std::size_t> test_indices;
};

namespace detail {

struct Standardized {
  std::vector<double> mean, scale;  ///< scale 0 marks a constant column
};

inline Standardized standardize_stats(const Matrix& x, const std::vector<std::size_t>& rows) {
  Standardized s;
  s.mean.assign(x.cols, 0.0);
  s.scale.assign(x.cols, 0.0);
  const double n = static_cast<double>(rows.size());
  for (auto r : rows)
    for (std::size_t j = 0; j < x.cols; ++j) s.mean[j] += x(r, j) / n;
  for (auto r : rows)
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double d = x(r, j) - s.mean[j];
      s.scale[j] += d * d / n;
    }
  for (double& v : s.scale) v = v > 1e-24 ? std::sqrt(v) : 0.0;
  return s;
}

/// Coordinate descent on (1/2n)|y - Zb|^2 + lambda |b|_1 using the Gram
/// matrix; b is warm-started and updated in place.
inline void lasso_cd(const Matrix& gram, const std::vector<double>& zy, double lambda, std::vector<double>& b,
                     int max_sweeps, double tol) {
  const std::size_t d = zy.size();
  std::vector<double> gb(d, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    if (b[j] != 0.0)
      for (std::size_t k = 0; k < d; ++k) gb[k] += gram(k, j) * b[j];
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double max_delta = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double gjj = gram(j, j);
      if (gjj <= 0.0) continue;
      const double rho = zy[j] - gb[j] + gjj * b[j];
      const double nb = (rho > lambda ? rho - lambda : rho < -lambda ? rho + lambda : 0.0) / gjj;
      const double delta = nb - b[j];
      if (delta == 0.0) continue;
      b[j] = nb;
      for (std::size_t k = 0; k < d; ++k) gb[k] += gram(k, j) * delta;
      max_delta = std::max(max_delta, std::abs(delta));
    }
    if (max_delta < tol) break;
  }
}

struct LassoModel {
  Standardized xs;
  double y_mean = 0.0;
  std::vector<double> coef;  ///< standardized scale

  double predict(const Matrix& x, std::size_t r) const {
    double acc = y_mean;
    for (std::size_t j = 0; j < coef.size(); ++j)
      if (xs.scale[j] > 0.0) acc += coef[j] * (x(r, j) - xs.mean[j]) / xs.scale[j];
    return acc;
  }
};

inline std::vector<LassoModel> fit_path(const Matrix& x, const std::vector<double>& y, const std::vector<std::size_t>& rows,
                                        const std::vector<double>& fractions, const LassoConfig& cfg,
                                        std::vector<double>* lambdas_out = nullptr) {
  LassoModel base;
  base.xs = standardize_stats(x, rows);
  const std::size_t d = x.cols;
  const double n = static_cast<double>(rows.size());
  for (auto r : rows) base.y_mean += y[r] / n;
  Matrix gram(d, d);
  std::vector<double> zy(d, 0.0), z(d);
  for (auto r : rows) {
    for (std::size_t j = 0; j < d; ++j) z[j] = base.xs.scale[j] > 0 ? (x(r, j) - base.xs.mean[j]) / base.xs.scale[j] : 0.0;
    const double yc = y[r] - base.y_mean;
    for (std::size_t j = 0; j < d; ++j) {
      zy[j] += z[j] * yc / n;
      if (z[j] == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) gram(j, k) += z[j] * z[k] / n;
    }
  }
  double lambda_max = 0.0;
  for (double v : zy) lambda_max = std::max(lambda_max, std::abs(v));
  std::vector<LassoModel> out;
  std::vector<double> b(d, 0.0);
  for (double f : fractions) {
    const double lambda = f * lambda_max;
    lasso_cd(gram, zy, lambda, b, cfg.max_sweeps, cfg.tol);
    LassoModel m = base;
    m.coef = b;
    out.push_back(std::move(m));
    if (lambdas_out) lambdas_out->push_back(lambda);
  }
  return out;
}

inline double r_squared(const std::vector<double>& pred, const std::vector<double>& target) {
  const double n = static_cast<double>(target.size());
  const double mean = std::accumulate(target.begin(), target.end(), 0.0) / n;
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    sse += (pred[i] - target[i]) * (pred[i] - target[i]);
    sst += (target[i] - mean) * (target[i] - mean);
  }
  return sst > 0.0 ? 1.0 - sse / sst : 0.0;
}

}  // namespace detail

/// One sparse linear regressor per factor on a seeded train/test split;
/// lambda per factor is chosen on a validation slice of the training split
/// and the model is refit on the whole training split.
inline RegressionFit fit_regressors(const Matrix& codes, const Matrix& attributes, const LassoConfig& cfg = {}) {
  require(codes.rows == attributes.rows, ErrorCode::DimensionMismatch, "codes and attributes differ in sample count");
  require(codes.rows >= 10, ErrorCode::InsufficientSamples, "need at least 10 samples");
  require(attributes.cols >= 1 && codes.cols >= 1, ErrorCode::InvalidArgument, "need at least one code dim and factor");
  require(all_finite(codes.data) && all_finite(attributes.data), ErrorCode::NonFinite, "non-finite regression data");
  require(!cfg.lambda_grid.empty(), ErrorCode::InvalidArgument, "empty lambda grid");
  const std::size_t n = codes.rows;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(cfg.seed, 31);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
  const std::size_t n_test = std::clamp<std::size_t>(static_cast<std::size_t>(std::round(cfg.test_fraction * n)), 1, n - 2);
  const std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_test));
  const std::vector<std::size_t> test(order.end() - static_cast<std::ptrdiff_t>(n_test), order.end());
  const std::size_t n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::round(cfg.validation_fraction * train.size())), 1, train.size() - 1);
  const std::vector<std::size_t> fit_rows(train.begin(), train.end() - static_cast<std::ptrdiff_t>(n_val));
  const std::vector<std::size_t> val_rows(train.end() - static_cast<std::ptrdiff_t>(n_val), train.end());

  RegressionFit out;
  out.importance = Matrix(codes.cols, attributes.cols);
  out.predictions = Matrix(n_test, attributes.cols);
  out.targets = Matrix(n_test, attributes.cols);
  out.test_indices = test;
  for (std::size_t k = 0; k < attributes.cols; ++k) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = attributes(i, k);
    const auto path = detail::fit_path(codes, y, fit_rows, cfg.lambda_grid, cfg);
    std::size_t best = 0;
    double best_r2 = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < path.size(); ++p) {
      std::vector<double> pred, tgt;
      for (auto r : val_rows) {
        pred.push_back(path[p].predict(codes, r));
        tgt.push_back(y[r]);
      }
      const double r2 = detail::r_squared(pred, tgt);
      if (r2 > best_r2 + 1e-12) {
        best_r2 = r2;
        best = p;
      }
    }
    // Refit on the full training split along the same path up to the choice.
    const std::vector<double> fractions(cfg.lambda_grid.begin(), cfg.lambda_grid.begin() + static_cast<std::ptrdiff_t>(best) + 1);
    std::vector<double> lambdas;
    const auto model = detail::fit_path(codes, y, train, fractions, cfg, &lambdas).back();
    out.lambdas.push_back(lambdas.back());
    for (std::size_t j = 0; j < codes.cols; ++j) out.importance(j, k) = std::abs(model.coef[j]);
    for (std::size_t t = 0; t < n_test; ++t) {
      out.predictions(t, k) = model.predict(codes, test[t]);
      out.targets(t, k) = y[test[t]];
    }
  }
  return out;
}

struct DCIReport {
  std::string space;
  double disentanglement = 0.0;
  double completeness = 0.0;
  double informativeness = 0.0;
  Matrix importance;
  std::vector<double> per_code_weights;     ///< rho_i
  std::vector<double> per_code_scores;      ///< d_i
  std::vector<double> per_factor_scores;    ///< c_j
  std::vector<double> per_factor_r2;
  int n_samples = 0;
  std::uint64_t seed = 0;
};

namespace detail {

/// 1 - entropy of p (normalized from w) in base `base`; an all-zero vector
/// has entropy 1. A single category has entropy 0.
inline double one_minus_entropy(const std::vector<double>& w, std::size_t base) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (total <= 0.0) return 0.0;
  if (base <= 1) return 1.0;
  double h = 0.0;
  for (double v : w)
    if (v > 0.0) {
      const double p = v / total;
      h -= p * std::log(p);
    }
  return std::clamp(1.0 - h / std::log(static_cast<double>(base)), 0.0, 1.0);
}

}  // namespace detail

/// D, C, I from an importance matrix (codes x factors) and held-out
/// predictions. D weights per-code scores by row mass, C weights per-factor
/// scores by column mass; I is the mean held-out R^2 clamped to [0, 1].
inline DCIReport dci_scores(const Matrix& r, const Matrix& predictions, const Matrix& targets) {
  require(r.rows >= 1 && r.cols >= 1, ErrorCode::InvalidArgument, "importance matrix is empty");
  require(all_finite(r.data), ErrorCode::NonFinite, "importance matrix has non-finite entries");
  require(std::all_of(r.data.begin(), r.data.end(), [](double v) { return v >= 0.0; }), ErrorCode::InvalidArgument,
          "importance matrix must be non-negative");
  const double total = std::accumulate(r.data.begin(), r.data.end(), 0.0);
  require(total > 0.0, ErrorCode::InvalidArgument, "importance matrix is all zero");
  require(predictions.rows == targets.rows && predictions.cols == targets.cols, ErrorCode::DimensionMismatch,
          "predictions and targets differ in shape");
  require(predictions.rows == 0 || predictions.cols == r.cols, ErrorCode::DimensionMismatch,
          "prediction factor count differs from importance matrix");
  DCIReport rep;
  rep.importance = r;
  for (std::size_t i = 0; i < r.rows; ++i) {
    std::vector<double> row(r.data.begin() + static_cast<std::ptrdiff_t>(i * r.cols),
                            r.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * r.cols));
    const double mass = std::accumulate(row.begin(), row.end(), 0.0);
    rep.per_code_scores.push_back(detail::one_minus_entropy(row, r.cols));
    rep.per_code_weights.push_back(mass / total);
    rep.disentanglement += rep.per_code_weights.back() * rep.per_code_scores.back();
  }
  for (std::size_t j = 0; j < r.cols; ++j) {
    std::vector<double> col(r.rows);
    for (std::size_t i = 0; i < r.rows; ++i) col[i] = r(i, j);
    const double mass = std::accumulate(col.begin(), col.end(), 0.0);
    rep.per_factor_scores.push_back(detail::one_minus_entropy(col, r.rows));
    rep.completeness += mass / total * rep.per_factor_scores.back();
  }
  double info = 0.0;
  for (std::size_t j = 0; j < predictions.cols; ++j) {
    std::vector<double> p(predictions.rows), t(predictions.rows);
    for (std::size_t i = 0; i < predictions.rows; ++i) {
      p[i] = predictions(i, j);
      t[i] = targets(i, j);
    }
    const double r2 = predictions.rows > 0 ? detail::r_squared(p, t) : 0.0;
    rep.per_factor_r2.push_back(r2);
    info += std::clamp(r2, 0.0, 1.0);
  }
  rep.informativeness = predictions.cols > 0 ? info / predictions.cols : 0.0;
  rep.disentanglement = std::clamp(rep.disentanglement, 0.0, 1.0);
  rep.completeness = std::clamp(rep.completeness, 0.0, 1.0);
  return rep;
}

struct DciSample {
  std::vector<double> features;  ///< the latent in the requested space
  Image image;
};

/// Sample i of a DCI run: a mapped W code lifted to every layer, its
/// representation in the requested space, and the image shown to the
/// classifier (pseudo-aligned for unaligned generators when requested).
inline DciSample dci_sample(const GeneratorHandle& g, LatentSpace space, std::uint64_t seed, std::uint64_t index,
                            bool pseudo_align_images) {
  require(space != LatentSpace::WPlus, ErrorCode::InvalidArgument,
          "DCI over W+ is not supported: independently sampled W+ rows do not produce natural images");
  const LatentZ z = sample_z(g.config.latent_dim, seed, index);
  const LatentW w = map_z_to_w(g, z);
  const LatentWPlus code = LatentWPlus::broadcast(w);
  DciSample s;
  switch (space) {
    case LatentSpace::Z: s.features = z.values; break;
    case LatentSpace::W: s.features = w.values; break;
    case LatentSpace::S: s.features = compute_styles(g, code).values; break;
    case LatentSpace::WPlus: break;
  }
  const bool pa = pseudo_align_images && g.config.alignment == "unaligned";
  s.image = synthesize(g, pa ? pseudo_align(code, g.average_latent) : code);
  return s;
}

inline DCIReport run_dci_pipeline(const GeneratorHandle& g, LatentSpace space, int n_samples, ClassifierClient& classifier,
                                  const std::vector<std::string>& attributes, bool pseudo_align_images,
                                  std::uint64_t seed, const LassoConfig& lasso = {}) {
  require(space != LatentSpace::WPlus, ErrorCode::InvalidArgument,
          "DCI over W+ is not supported: independently sampled W+ rows do not produce natural images");
  require(n_samples >= 10, ErrorCode::InsufficientSamples, "DCI needs at least 10 samples");
  require(!attributes.empty(), ErrorCode::InvalidArgument, "DCI needs at least one attribute");
  Matrix codes, scores(static_cast<std::size_t>(n_samples), attributes.size());
  for (int i = 0; i < n_samples; ++i) {
    const auto s = dci_sample(g, space, seed, static_cast<std::uint64_t>(i), pseudo_align_images);
    if (i == 0) codes = Matrix(static_cast<std::size_t>(n_samples), s.features.size());
    std::copy(s.features.begin(), s.features.end(), codes.data.begin() + static_cast<std::ptrdiff_t>(i * codes.cols));
    for (std::size_t a = 0; a < attributes.size(); ++a) scores(i, a) = classifier.score(s.image, attributes[a]);
  }
  LassoConfig cfg = lasso;
  cfg.seed = seed;
  const auto fit = fit_regressors(codes, scores, cfg);
  DCIReport rep = dci_scores(fit.importance, fit.predictions, fit.targets);
  rep.space = to_string(space);
  rep.n_samples = n_samples;
  rep.seed = seed;
  return rep;
}

inline nlohmann::json to_json(const DCIReport& r) {
  return {{"space", r.space},
          {"D", r.disentanglement},
          {"C", r.completeness},
          {"I", r.informativeness},
          {"n_samples", r.n_samples},
          {"seed", r.seed},
          {"per_factor_r2", r.per_factor_r2}};
}

inline TensorContainer dci_to_container(const DCIReport& r) {
  TensorContainer tc;
  tc.add_text("manifest", nlohmann::json{{"kind", "dci_report"}, {"report", to_json(r)}}.dump());
  tc.add_f64("R", {r.importance.rows, r.importance.cols}, r.importance.data);
  tc.add_f64("per_code_weights", {r.per_code_weights.size()}, r.per_code_weights);
  return tc;
}

}  // namespace sg3
