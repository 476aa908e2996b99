#pragma once

// HTTP/JSON implementations of the client interfaces. Every request is a POST
// with a JSON body; images travel as {width, height, channels, data}.
//
//   classifier   POST <base>/score       {image, attribute}        -> {score}
//   embedding    POST <base>/embed_image {image}                   -> {embedding}
//                POST <base>/embed_text  {text}                    -> {embedding}
//   perceptual   POST <base>/distance    {x, y, want_grad}         -> {distance, grad?}
//   identity     POST <base>/similarity  {x, y, want_grad}         -> {similarity, grad?}
//   landmarks    POST <base>/detect      {image, frame_index}      -> {detection: {...} | null}

#include <string>

#include <httplib.h>
#include <json.hpp>

#include "clients.hpp"

namespace sg3 {

class HttpJsonClient {
 public:
  /// base_url like "http://127.0.0.1:9000/api".
  explicit HttpJsonClient(const std::string& base_url, int timeout_seconds = 30) {
    const auto scheme_end = base_url.find("://");
    require(scheme_end != std::string::npos, ErrorCode::InvalidArgument, "client URL needs a scheme: " + base_url);
    const auto path_start = base_url.find('/', scheme_end + 3);
    host_ = base_url.substr(0, path_start);
    prefix_ = path_start == std::string::npos ? "" : base_url.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    timeout_ = timeout_seconds;
  }

  nlohmann::json post(const std::string& path, const nlohmann::json& body) const {
    httplib::Client cli(host_);
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    auto res = cli.Post(prefix_ + path, body.dump(), "application/json");
    require(static_cast<bool>(res), ErrorCode::ClientUnavailable,
            "no response from " + host_ + prefix_ + path + " (" + httplib::to_string(res.error()) + ")");
    require(res->status == 200, ErrorCode::ClientUnavailable,
            host_ + prefix_ + path + " returned HTTP " + std::to_string(res->status));
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ClientUnavailable, "malformed JSON from " + host_ + prefix_ + path + ": " + e.what());
    }
  }

 private:
  std::string host_, prefix_;
  int timeout_ = 30;
};

class HttpClassifier : public ClassifierClient {
 public:
  explicit HttpClassifier(const std::string& url) : http_(url) {}
  double score(const Image& image, const std::string& attribute) override {
    return http_.post("/score", {{"image", image_to_json(image)}, {"attribute", attribute}}).at("score").get<double>();
  }

 private:
  HttpJsonClient http_;
};

class HttpEmbedding : public EmbeddingClient {
 public:
  explicit HttpEmbedding(const std::string& url) : http_(url) {}
  std::vector<double> embed_image(const Image& image) override {
    return http_.post("/embed_image", {{"image", image_to_json(image)}}).at("embedding").get<std::vector<double>>();
  }
  std::vector<double> embed_text(const std::string& text) override {
    return http_.post("/embed_text", {{"text", text}}).at("embedding").get<std::vector<double>>();
  }

 private:
  HttpJsonClient http_;
};

class HttpPerceptual : public PerceptualMetric {
 public:
  explicit HttpPerceptual(const std::string& url) : http_(url) {}
  double distance(const Image& x, const Image& y, Image* grad_y) override {
    const auto r = http_.post("/distance", {{"x", image_to_json(x)}, {"y", image_to_json(y)}, {"want_grad", grad_y != nullptr}});
    if (grad_y) {
      require(r.contains("grad"), ErrorCode::ClientUnavailable, "perceptual service returned no gradient");
      *grad_y = image_from_json(r["grad"]);
    }
    return r.at("distance").get<double>();
  }

 private:
  HttpJsonClient http_;
};

class HttpIdentity : public IdentityMetric {
 public:
  explicit HttpIdentity(const std::string& url) : http_(url) {}
  double similarity(const Image& x, const Image& y, Image* grad_y) override {
    const auto r = http_.post("/similarity", {{"x", image_to_json(x)}, {"y", image_to_json(y)}, {"want_grad", grad_y != nullptr}});
    if (grad_y) {
      require(r.contains("grad"), ErrorCode::ClientUnavailable, "identity service returned no gradient");
      *grad_y = image_from_json(r["grad"]);
    }
    return r.at("similarity").get<double>();
  }

 private:
  HttpJsonClient http_;
};

class HttpLandmarkDetector : public LandmarkDetector {
 public:
  explicit HttpLandmarkDetector(const std::string& url) : http_(url) {}
  std::optional<Detection> detect(const Image& frame, int frame_index) override {
    const auto r = http_.post("/detect", {{"image", image_to_json(frame)}, {"frame_index", frame_index}});
    if (!r.contains("detection") || r["detection"].is_null()) return std::nullopt;
    return detection_from_json(r["detection"]);
  }

 private:
  HttpJsonClient http_;
};

}  // namespace sg3
