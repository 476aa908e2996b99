#pragma once

// External model clients: attribute classifiers, joint image/text embedders,
// perceptual and identity metrics, and landmark detectors. Each is a small
// abstract interface; deterministic in-process implementations used by the
// desk-scale tests live here too. HTTP implementations are in
// http_clients.hpp.

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "geometry.hpp"
#include "image.hpp"

namespace sg3 {

class ClassifierClient {
 public:
  virtual ~ClassifierClient() = default;
  virtual double score(const Image& image, const std::string& attribute) = 0;
};

class EmbeddingClient {
 public:
  virtual ~EmbeddingClient() = default;
  virtual std::vector<double> embed_image(const Image& image) = 0;
  virtual std::vector<double> embed_text(const std::string& text) = 0;
};

/// Distance between two images (lower is closer). When grad_y is non-null
/// the client must fill dDistance/dy or throw ClientUnavailable.
class PerceptualMetric {
 public:
  virtual ~PerceptualMetric() = default;
  virtual double distance(const Image& x, const Image& y, Image* grad_y) = 0;
};

/// Identity similarity in [-1, 1] (higher is the same person).
class IdentityMetric {
 public:
  virtual ~IdentityMetric() = default;
  virtual double similarity(const Image& x, const Image& y, Image* grad_y) = 0;
};

class LandmarkDetector {
 public:
  virtual ~LandmarkDetector() = default;
  /// Landmarks in frame pixels, or nullopt when no face is found.
  virtual std::optional<Detection> detect(const Image& frame, int frame_index) = 0;
};

// ---------------------------------------------------------------------------
// JSON helpers shared by file and HTTP clients

inline nlohmann::json image_to_json(const Image& img) {
  return {{"width", img.width}, {"height", img.height}, {"channels", img.channels}, {"data", img.data}};
}

inline Image image_from_json(const nlohmann::json& j) {
  Image img(j.at("width").get<int>(), j.at("height").get<int>(), j.at("channels").get<int>());
  img.data = j.at("data").get<std::vector<double>>();
  require(img.data.size() == static_cast<std::size_t>(img.width) * img.height * img.channels, ErrorCode::Format,
          "image payload has the wrong length");
  return img;
}

inline nlohmann::json detection_to_json(const Detection& d) {
  nlohmann::json j{{"left_eye", d.left_eye}, {"right_eye", d.right_eye}};
  if (d.mouth) j["mouth"] = *d.mouth;
  if (d.face) j["face"] = {d.face->x, d.face->y, d.face->width, d.face->height};
  return j;
}

inline Detection detection_from_json(const nlohmann::json& j) {
  Detection d;
  d.left_eye = j.at("left_eye").get<Point>();
  d.right_eye = j.at("right_eye").get<Point>();
  if (j.contains("mouth") && !j["mouth"].is_null()) d.mouth = j["mouth"].get<Point>();
  if (j.contains("face") && !j["face"].is_null()) {
    const auto f = j["face"].get<std::vector<int>>();
    require(f.size() == 4, ErrorCode::Format, "face box needs [x, y, width, height]");
    d.face = Box{f[0], f[1], f[2], f[3]};
  }
  return d;
}

// ---------------------------------------------------------------------------
// Landmark detectors

/// Returns pre-computed detections by frame index.
class ScriptedLandmarkDetector : public LandmarkDetector {
 public:
  explicit ScriptedLandmarkDetector(std::map<int, std::optional<Detection>> by_index) : by_index_(std::move(by_index)) {}

  std::optional<Detection> detect(const Image&, int frame_index) override {
    const auto it = by_index_.find(frame_index);
    return it == by_index_.end() ? std::nullopt : it->second;
  }

 private:
  std::map<int, std::optional<Detection>> by_index_;
};

/// Reads detections from a JSON file written by an external tool:
///   {"frames": [{"index": 0, "left_eye": [x, y], "right_eye": [x, y],
///                "mouth": [x, y], "face": [x, y, w, h]}, ...]}
/// Frames that are missing or null have no detectable face.
class FileLandmarkDetector : public LandmarkDetector {
 public:
  explicit FileLandmarkDetector(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), ErrorCode::ClientUnavailable, "cannot open landmark file '" + path + "'");
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Format, "landmark file '" + path + "': " + e.what());
    }
    for (const auto& item : j.at("frames")) {
      const int index = item.at("index").get<int>();
      if (item.contains("left_eye") && !item["left_eye"].is_null())
        detections_[index] = detection_from_json(item);
      else
        detections_[index] = std::nullopt;
    }
  }

  std::optional<Detection> detect(const Image&, int frame_index) override {
    const auto it = detections_.find(frame_index);
    return it == detections_.end() ? std::nullopt : it->second;
  }

  static void write(const std::string& path, const std::vector<std::optional<Detection>>& frames) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t i = 0; i < frames.size(); ++i) {
      nlohmann::json item = frames[i] ? detection_to_json(*frames[i]) : nlohmann::json::object();
      item["index"] = i;
      arr.push_back(item);
    }
    std::ofstream f(path);
    require(static_cast<bool>(f), ErrorCode::Io, "cannot write landmark file '" + path + "'");
    f << nlohmann::json{{"frames", arr}}.dump(1) << "\n";
  }

 private:
  std::map<int, std::optional<Detection>> detections_;
};

// ---------------------------------------------------------------------------
// Deterministic metrics with gradients

/// Mean squared error after 2x box downsampling. Stands in for a learned
/// perceptual distance: smooth, differentiable, and blind to the highest
/// frequencies.
class DownsampledMsePerceptual : public PerceptualMetric {
 public:
  double distance(const Image& x, const Image& y, Image* grad_y) override {
    require_same_shape(x, y, "perceptual");
    const int w = x.width / 2, h = x.height / 2, c = x.channels;
    require(w > 0 && h > 0, ErrorCode::InvalidArgument, "image too small for the perceptual metric");
    const double n = static_cast<double>(w) * h * c;
    double acc = 0.0;
    if (grad_y) *grad_y = Image(y.width, y.height, c);
    for (int j = 0; j < h; ++j)
      for (int i = 0; i < w; ++i)
        for (int ch = 0; ch < c; ++ch) {
          double d = 0.0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) d += y.at(2 * i + dx, 2 * j + dy, ch) - x.at(2 * i + dx, 2 * j + dy, ch);
          d *= 0.25;
          acc += d * d;
          if (grad_y)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) grad_y->at(2 * i + dx, 2 * j + dy, ch) = 2.0 * d * 0.25 / n;
        }
    return acc / n;
  }
};

/// Cosine similarity of fixed random projections of the two images.
class ProjectionIdentity : public IdentityMetric {
 public:
  explicit ProjectionIdentity(int dims = 16, std::uint64_t seed = 4242) : dims_(dims), seed_(seed) {}

  double similarity(const Image& x, const Image& y, Image* grad_y) override {
    require_same_shape(x, y, "identity");
    ensure(x.data.size());
    const auto u = project(x), v = project(y);
    double uv = 0, uu = 0, vv = 0;
    for (int k = 0; k < dims_; ++k) {
      uv += u[k] * v[k];
      uu += u[k] * u[k];
      vv += v[k] * v[k];
    }
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    if (nu < 1e-12 || nv < 1e-12) {
      if (grad_y) *grad_y = Image(y.width, y.height, y.channels);
      return 0.0;
    }
    const double cos = uv / (nu * nv);
    if (grad_y) {
      *grad_y = Image(y.width, y.height, y.channels);
      std::vector<double> dv(dims_);
      for (int k = 0; k < dims_; ++k) dv[k] = u[k] / (nu * nv) - cos * v[k] / vv;
      for (std::size_t i = 0; i < y.data.size(); ++i) {
        double acc = 0;
        for (int k = 0; k < dims_; ++k) acc += proj_[k * n_ + i] * dv[k];
        grad_y->data[i] = acc;
      }
    }
    return cos;
  }

 private:
  void ensure(std::size_t n) {
    if (n == n_) return;
    n_ = n;
    proj_.resize(static_cast<std::size_t>(dims_) * n);
    Rng rng = make_rng(seed_);
    for (double& p : proj_) p = normal(rng) / std::sqrt(static_cast<double>(n));
  }
  std::vector<double> project(const Image& img) const {
    std::vector<double> out(dims_, 0.0);
    for (int k = 0; k < dims_; ++k) {
      const double* row = proj_.data() + static_cast<std::size_t>(k) * n_;
      double acc = 0;
      for (std::size_t i = 0; i < n_; ++i) acc += row[i] * img.data[i];
      out[k] = acc;
    }
    return out;
  }

  int dims_;
  std::uint64_t seed_;
  std::size_t n_ = 0;
  std::vector<double> proj_;
};

/// Classifier backed by a callable; used to wire oracle classifiers that read
/// toy-generator internals.
class FunctionClassifier : public ClassifierClient {
 public:
  using Fn = std::function<double(const Image&, const std::string&)>;
  explicit FunctionClassifier(Fn fn) : fn_(std::move(fn)) {}
  double score(const Image& image, const std::string& attribute) override { return fn_(image, attribute); }

 private:
  Fn fn_;
};

}  // namespace sg3
