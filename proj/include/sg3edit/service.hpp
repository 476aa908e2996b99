#pragma once

// HTTP service over session directories. Stage jobs run asynchronously and
// are polled through /status; previews are synchronous and read-only. Each
// session has a reader-writer gate: previews are readers, stage jobs and
// uploads are writers, and a request that cannot enter gets 409.
//
//   POST /sessions                      {kind}                     -> {id}
//   POST /sessions/{id}/frames          multipart: frames[], landmarks
//   POST /sessions/{id}/invert          {restyle_iters}            -> 202
//   POST /sessions/{id}/smooth | /pti | /render                    -> 202
//   POST /sessions/{id}/expand          {directions, delta, include_corners, feather}
//   POST /sessions/{id}/edit            {edits: [{direction_name, step}]}
//   POST /sessions/{id}/edit/preview    {direction_name, step, frame_index, params}
//   GET  /sessions/{id}/status
//   GET  /sessions/{id}/frames/{i}/{reconstruction|render|expand}
//   GET  /directions

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "pipeline.hpp"

namespace sg3 {

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::NotFound: return 404;
    case ErrorCode::StageOrder:
    case ErrorCode::LockConflict: return 409;
    case ErrorCode::InvalidArgument:
    case ErrorCode::Format:
    case ErrorCode::InconsistentSpec:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::OutOfBounds:
    case ErrorCode::NonFinite:
    case ErrorCode::NoFaceDetected:
    case ErrorCode::DegenerateLandmarks:
    case ErrorCode::DegenerateDirection: return 422;
    case ErrorCode::ClientUnavailable: return 503;
    default: return 500;
  }
}

inline nlohmann::json error_json(ErrorCode c, const std::string& message) {
  return {{"error", {{"code", to_string(c)}, {"message", message}}}};
}

class Service {
 public:
  explicit Service(Config cfg) : cfg_(std::move(cfg)), root_(cfg_.get_path("sessions_dir")) {
    fs::create_directories(root_);
    routes();
  }

  ~Service() {
    stop();
    wait_for_jobs();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  httplib::Server& http() { return server_; }

  /// Binds to an ephemeral port and serves on a background thread.
  int start_background(const std::string& host = "127.0.0.1") {
    const int port = server_.bind_to_any_port(host);
    require(port > 0, ErrorCode::Io, "cannot bind " + host);
    listener_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port;
  }

  bool listen(const std::string& host, int port) { return server_.listen(host, port); }

  void stop() {
    if (server_.is_running()) server_.stop();
    if (listener_.joinable()) listener_.join();
  }

  void wait_for_jobs() {
    std::vector<std::thread> jobs;
    {
      std::lock_guard<std::mutex> g(jobs_mu_);
      jobs.swap(jobs_);
    }
    for (auto& t : jobs) t.join();
  }

  std::string session_dir(const std::string& id) const { return (root_ / id).string(); }

 private:
  /// Reader-writer gate without thread affinity: a job may release the
  /// writer slot from a different thread than the request that took it.
  struct Slot {
    std::mutex mu;
    bool writer = false;
    int readers = 0;
    std::string running;
    nlohmann::json last_job = nullptr;

    bool try_write(const std::string& job) {
      std::lock_guard<std::mutex> g(mu);
      if (writer || readers > 0) return false;
      writer = true;
      running = job;
      return true;
    }
    void end_write(nlohmann::json result) {
      std::lock_guard<std::mutex> g(mu);
      writer = false;
      running.clear();
      last_job = std::move(result);
    }
    bool try_read() {
      std::lock_guard<std::mutex> g(mu);
      if (writer) return false;
      ++readers;
      return true;
    }
    void end_read() {
      std::lock_guard<std::mutex> g(mu);
      --readers;
    }
    nlohmann::json job_state() {
      std::lock_guard<std::mutex> g(mu);
      return {{"running", running.empty() ? nlohmann::json(nullptr) : nlohmann::json(running)}, {"last", last_job}};
    }
  };

  struct ReadGuard {
    Slot* slot;
    ~ReadGuard() { slot->end_read(); }
  };

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static void reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static Handler guarded(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const Error& e) {
        reply(res, http_status(e.code()), error_json(e.code(), e.what()));
      } catch (const nlohmann::json::exception& e) {
        reply(res, 422, error_json(ErrorCode::Format, std::string("malformed body: ") + e.what()));
      } catch (const std::exception& e) {
        reply(res, 500, {{"error", {{"code", "Internal"}, {"message", e.what()}}}});
      }
    };
  }

  static nlohmann::json body_json(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    nlohmann::json j = nlohmann::json::parse(req.body);
    require(j.is_object(), ErrorCode::Format, "request body must be a JSON object");
    return j;
  }

  std::shared_ptr<Slot> slot(const std::string& id) {
    require(fs::exists(root_ / id / "manifest.json"), ErrorCode::NotFound, "unknown session '" + id + "'");
    std::lock_guard<std::mutex> g(slots_mu_);
    auto& s = slots_[id];
    if (!s) s = std::make_shared<Slot>();
    return s;
  }

  std::string new_id() {
    static std::atomic<std::uint64_t> counter{0};
    std::random_device rd;
    for (;;) {
      const std::uint64_t v = mix_seed((static_cast<std::uint64_t>(rd()) << 32) ^ rd(), counter++);
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
      if (!fs::exists(root_ / buf)) return buf;
    }
  }

  std::shared_ptr<const GeneratorHandle> generator(const std::string& path) {
    const auto stamp = fs::last_write_time(path);
    std::lock_guard<std::mutex> g(cache_mu_);
    auto it = cache_.find(path);
    if (it != cache_.end() && it->second.first == stamp) return it->second.second;
    auto h = std::make_shared<const GeneratorHandle>(load_generator(path));
    cache_[path] = {stamp, h};
    return h;
  }

  /// Validates synchronously, then runs `job` on a worker while holding the
  /// session's writer slot.
  void start_job(httplib::Response& res, const std::string& id, Stage stage, std::function<nlohmann::json()> job) {
    auto s = slot(id);
    const std::string name = stage_name(stage);
    require(s->try_write(name), ErrorCode::LockConflict, "session '" + id + "' is busy");
    try {
      load_session(session_dir(id)).require_ready(stage);
    } catch (...) {
      s->end_write(s->job_state()["last"]);
      throw;
    }
    std::lock_guard<std::mutex> g(jobs_mu_);
    jobs_.emplace_back([s, name, job = std::move(job)] {
      nlohmann::json result;
      try {
        result = {{"stage", name}, {"ok", true}, {"result", job()}};
      } catch (const Error& e) {
        result = {{"stage", name}, {"ok", false}, {"error", error_json(e.code(), e.what())["error"]}};
      } catch (const std::exception& e) {
        result = {{"stage", name}, {"ok", false}, {"error", {{"code", "Internal"}, {"message", e.what()}}}};
      }
      s->end_write(std::move(result));
    });
    reply(res, 202, {{"id", id}, {"stage", name}, {"accepted", true}});
  }

  void routes() {
    const std::string sid = "/sessions/([0-9a-f]{16})";
    server_.set_payload_max_length(512u << 20);

    server_.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_json(req);
      const std::string kind = body.value("kind", "video");
      require(kind == "video" || kind == "image", ErrorCode::InvalidArgument, "kind must be video or image");
      VideoSession s;
      s.id = new_id();
      s.kind = kind;
      save_session(s, session_dir(s.id));
      reply(res, 201, {{"id", s.id}, {"kind", kind}});
    }));

    server_.Post(sid + "/frames", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      auto s = slot(id);
      require(req.is_multipart_form_data(), ErrorCode::Format, "frames upload must be multipart/form-data");
      auto files = req.get_file_values("frames");
      require(!files.empty(), ErrorCode::Format, "no 'frames' parts in upload");
      std::stable_sort(files.begin(), files.end(), [](const auto& a, const auto& b) { return a.filename < b.filename; });
      require(s->try_write("upload"), ErrorCode::LockConflict, "session '" + id + "' is busy");
      nlohmann::json report;
      try {
        const fs::path input = fs::path(session_dir(id)) / "input";
        fs::remove_all(input);
        fs::create_directories(input);
        for (std::size_t i = 0; i < files.size(); ++i) {
          decode_png(files[i].content, "part '" + files[i].filename + "'");
          write_file_bytes((input / frame_filename(static_cast<int>(i))).string(), files[i].content);
        }
        std::string landmarks;
        if (req.has_file("landmarks")) {
          landmarks = (fs::path(session_dir(id)) / "landmarks.json").string();
          write_file_bytes(landmarks, req.get_file_value("landmarks").content);
        }
        report = run_preprocess(cfg_, session_dir(id), input.string(), landmarks);
      } catch (...) {
        s->end_write(s->job_state()["last"]);
        throw;
      }
      s->end_write({{"stage", "preprocess"}, {"ok", true}, {"result", report}});
      reply(res, 200, report);
    }));

    server_.Post(sid + "/invert", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto body = body_json(req);
      std::optional<int> iters;
      if (body.contains("restyle_iters")) {
        require(body["restyle_iters"].is_number_integer() && body["restyle_iters"].get<int>() >= 1, ErrorCode::Format,
                "restyle_iters must be a positive integer");
        iters = body["restyle_iters"].get<int>();
      }
      start_job(res, id, Stage::Encode, [this, id, iters] { return run_invert(cfg_, session_dir(id), iters); });
    }));

    server_.Post(sid + "/smooth", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      body_json(req);
      start_job(res, id, Stage::Smooth, [this, id] { return run_smooth(cfg_, session_dir(id)); });
    }));

    server_.Post(sid + "/pti", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      body_json(req);
      start_job(res, id, Stage::Pti, [this, id] { return run_pti(cfg_, session_dir(id)); });
    }));

    server_.Post(sid + "/render", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      body_json(req);
      start_job(res, id, Stage::Render, [this, id] { return run_render(cfg_, session_dir(id)); });
    }));

    server_.Post(sid + "/expand", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto body = body_json(req);
      ExpansionSpec spec;
      spec.directions = parse_directions(body.at("directions").get<std::vector<std::string>>());
      spec.delta = body.at("delta").get<double>();
      spec.include_corners = body.value("include_corners", true);
      spec.feather = body.value("feather", 0);
      spec.validate();
      start_job(res, id, Stage::Expand, [this, id, spec] { return run_expand(cfg_, session_dir(id), spec); });
    }));

    server_.Post(sid + "/edit", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto body = body_json(req);
      std::vector<NamedStep> steps;
      for (const auto& e : body.at("edits")) {
        NamedStep st{e.at("direction_name").get<std::string>(), e.at("step").get<double>(), std::nullopt};
        if (e.contains("channel_threshold")) st.channel_threshold = e["channel_threshold"].get<double>();
        steps.push_back(st);
      }
      auto s = slot(id);
      require(s->try_write("edit"), ErrorCode::LockConflict, "session '" + id + "' is busy");
      nlohmann::json out;
      try {
        out = run_set_edit(cfg_, session_dir(id), steps);
      } catch (...) {
        s->end_write(s->job_state()["last"]);
        throw;
      }
      s->end_write(s->job_state()["last"]);
      reply(res, 200, out);
    }));

    server_.Post(sid + "/edit/preview", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto body = body_json(req);
      const std::string direction = body.value("direction_name", "");
      const double step = body.value("step", 0.0);
      const int frame = body.value("frame_index", 0);
      std::optional<TransformParams> params;
      if (body.contains("params") && !body["params"].is_null()) {
        const auto& p = body["params"];
        params = TransformParams{p.value("r", 0.0), p.value("tx", 0.0), p.value("ty", 0.0)};
      }
      auto s = slot(id);
      require(s->try_read(), ErrorCode::LockConflict, "session '" + id + "' is being written");
      ReadGuard guard{s.get()};
      const VideoSession session = load_session(session_dir(id));
      const auto g = generator(active_generator_path(cfg_, session, session_dir(id)));
      res.status = 200;
      res.set_content(preview_png(cfg_, *g, session, frame, direction, step, params), "image/png");
    }));

    server_.Get(sid + "/status", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      auto s = slot(id);
      auto status = session_status(session_dir(id));
      status["job"] = s->job_state();
      reply(res, 200, status);
    }));

    server_.Get(sid + "/frames/([0-9]+)/(reconstruction|render|expand)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      slot(id);
      const fs::path file = fs::path(session_dir(id)) / req.matches[3].str() / frame_filename(std::stoi(req.matches[2]));
      require(fs::exists(file), ErrorCode::NotFound, "no " + req.matches[3].str() + " for frame " + req.matches[2].str());
      res.status = 200;
      res.set_content(read_file_bytes(file.string()), "image/png");
    }));

    server_.Get("/directions", guarded([this](const httplib::Request&, httplib::Response& res) {
      reply(res, 200, {{"directions", direction_catalog_json(cfg_)}});
    }));

    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) res.set_content(error_json(ErrorCode::NotFound, "no such route").dump(), "application/json");
    });
  }

  Config cfg_;
  fs::path root_;
  httplib::Server server_;
  std::thread listener_;
  std::mutex slots_mu_;
  std::map<std::string, std::shared_ptr<Slot>> slots_;
  std::mutex jobs_mu_;
  std::vector<std::thread> jobs_;
  std::mutex cache_mu_;
  std::map<std::string, std::pair<fs::file_time_type, std::shared_ptr<const GeneratorHandle>>> cache_;
};

}  // namespace sg3
