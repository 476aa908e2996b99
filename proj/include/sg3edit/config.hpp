#pragma once

// Flat key = value configuration shared by the CLI and the HTTP service.
// Blank lines and lines starting with '#' are ignored; unknown keys are
// rejected so typos fail loudly. See kConfigKeys for the documented set.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "core.hpp"

namespace sg3 {

struct ConfigKey {
  std::string_view name;
  std::string_view default_value;
  std::string_view help;
};

inline constexpr ConfigKey kConfigKeys[] = {
    {"generator", "", "generator checkpoint (.sg3t)"},
    {"encoder", "", "encoder checkpoint (.sg3t)"},
    {"directions_dir", "directions", "directory of saved edit directions"},
    {"sessions_dir", "sessions", "root directory for service sessions"},
    {"landmarks", "", "landmark JSON file or http(s) URL of a detector client"},
    {"classifier_url", "", "attribute classifier client"},
    {"embedding_url", "", "joint image/text embedding client"},
    {"perceptual", "builtin", "perceptual metric: builtin, none, or an http(s) URL"},
    {"identity", "builtin", "identity metric: builtin, none, or an http(s) URL"},
    {"threads", "1", "worker threads for per-frame stages"},
    {"seed", "0", "base seed for every stochastic step"},
    {"preprocess.crop_mode", "union", "fixed crop: union (padded face boxes) or eye_distance"},
    {"preprocess.padding", "0.2", "relative growth of the union crop"},
    {"transcode.decode", "ffmpeg -v error -i {input} {output}/frame_%06d.png",
     "command splitting a video file into PNG frames; {input} and {output} are replaced"},
    {"transcode.encode", "ffmpeg -v error -y -framerate 30 -i {input}/frame_%06d.png {output}",
     "command assembling PNG frames into a video file; {input} and {output} are replaced"},
    {"invert.restyle_iters", "3", "encoder refinement passes per frame"},
    {"smoothing.normalize", "false", "divide the window weights by their sum"},
    {"pti.steps", "8000", "pivotal tuning optimizer steps"},
    {"pti.lr", "3e-4", "pivotal tuning learning rate"},
    {"pti.lr_schedule", "constant", "pivotal tuning schedule: constant or cosine"},
    {"pti.batch", "2", "frames per pivotal tuning step"},
    {"pti.weight_l2", "1", "pixel L2 weight"},
    {"pti.weight_lpips", "1", "perceptual weight"},
    {"pti.weight_id", "0", "identity weight"},
    {"pti.freeze_fourier_input", "true", "keep the Fourier-input layer fixed"},
    {"pti.freeze_mapping", "true", "keep the mapping network fixed"},
    {"train.steps", "2000", "encoder training steps"},
    {"train.lr", "1e-4", "encoder learning rate"},
    {"train.variant", "psp_like", "encoder variant: psp_like or e4e_like"},
    {"train.hidden", "64", "encoder hidden width"},
    {"train.weight_l2", "1", "encoder pixel L2 weight"},
    {"train.weight_lpips", "0.8", "encoder perceptual weight"},
    {"train.weight_id", "0.1", "encoder identity weight"},
    {"boundary.samples", "2000", "latents scored for boundary training"},
    {"boundary.quantile", "0.02", "fraction of samples labelled at each end of the score ranking"},
};

inline const ConfigKey* find_config_key(std::string_view name) {
  for (const auto& k : kConfigKeys)
    if (k.name == name) return &k;
  return nullptr;
}

class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::string& origin = "config") {
    Config c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      const std::string where = origin + ":" + std::to_string(lineno);
      require(eq != std::string::npos, ErrorCode::Format, where + ": expected key = value");
      c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)), where);
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), ErrorCode::Io, "cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    Config c = parse(ss.str(), path);
    c.origin_ = path;
    return c;
  }

  void set(const std::string& key, const std::string& value, const std::string& where = "config") {
    require(find_config_key(key) != nullptr, ErrorCode::InvalidArgument, where + ": unknown key '" + key + "'");
    values_[key] = value;
  }

  bool is_set(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& origin() const { return origin_; }

  std::string get(const std::string& key) const {
    const ConfigKey* k = find_config_key(key);
    require(k != nullptr, ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
    const auto it = values_.find(key);
    return it == values_.end() ? std::string(k->default_value) : it->second;
  }

  /// A path value; relative paths resolve against the config file's directory.
  std::string get_path(const std::string& key) const {
    const std::string v = get(key);
    if (v.empty() || origin_.empty() || v.find("://") != std::string::npos) return v;
    const std::filesystem::path p(v);
    if (p.is_absolute()) return v;
    return (std::filesystem::path(origin_).parent_path() / p).lexically_normal().string();
  }

  double get_double(const std::string& key) const {
    const std::string v = get(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      require(used == v.size(), ErrorCode::Format, "");
      return d;
    } catch (const std::exception&) {
      throw Error(ErrorCode::Format, "config key '" + key + "' is not a number: '" + v + "'");
    }
  }

  long long get_int(const std::string& key) const {
    const std::string v = get(key);
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    require(ec == std::errc() && p == v.data() + v.size(), ErrorCode::Format,
            "config key '" + key + "' is not an integer: '" + v + "'");
    return out;
  }

  std::uint64_t get_seed(const std::string& key = "seed") const {
    const long long v = get_int(key);
    require(v >= 0, ErrorCode::Format, "config key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  bool get_bool(const std::string& key) const {
    std::string v = get(key);
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(ErrorCode::Format, "config key '" + key + "' is not a boolean: '" + v + "'");
  }

  /// Documented keys with defaults, as a config file.
  static std::string describe() {
    std::string out;
    for (const auto& k : kConfigKeys) {
      out += "# " + std::string(k.help) + "\n";
      out += std::string(k.name) + " = " + std::string(k.default_value) + "\n";
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  std::string origin_;
};

}  // namespace sg3
