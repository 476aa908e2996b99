#include <catch_amalgamated.hpp>

#include <chrono>
#include <filesystem>
#include <thread>

#include <sg3edit/service.hpp>
#include <sg3edit/toy_fixture.hpp>

using namespace sg3;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  fs::path root;
  ToyFixturePaths toy;
  Config cfg;
};

Fixture make_fixture(const std::string& name, int pti_steps) {
  Fixture f;
  f.root = fs::temp_directory_path() / name;
  fs::remove_all(f.root);
  fs::create_directories(f.root / "directions");
  ToyVideoSpec spec;
  spec.frames = 4;
  spec.rotation_amplitude = 5.0;
  spec.translation_amplitude = 0.03;
  const auto g = make_aligned_toy_generator();
  f.toy = write_toy_fixture((f.root / "fixture").string(), g, spec);
  save_encoder(make_encoder(g, EncoderVariant::PspLike, 16, 3), (f.root / "encoder.sg3t").string());
  EditDirection d{"smile", LatentSpace::W, std::vector<double>(static_cast<std::size_t>(g.config.latent_dim), 0.0), {}};
  d.vector[1] = 1.0;
  save_direction(d, (f.root / "directions" / "smile.sg3t").string());
  f.cfg.set("generator", f.toy.generator);
  f.cfg.set("encoder", (f.root / "encoder.sg3t").string());
  f.cfg.set("directions_dir", (f.root / "directions").string());
  f.cfg.set("sessions_dir", (f.root / "sessions").string());
  f.cfg.set("identity", "none");
  f.cfg.set("pti.steps", std::to_string(pti_steps));
  f.cfg.set("invert.restyle_iters", "2");
  return f;
}

httplib::MultipartFormDataItems upload_items(const Fixture& f) {
  httplib::MultipartFormDataItems items;
  for (int i = 0; i < 4; ++i) {
    const auto name = frame_filename(i);
    items.push_back({"frames", read_file_bytes((fs::path(f.toy.frames_dir) / name).string()), name, "image/png"});
  }
  items.push_back({"landmarks", read_file_bytes(f.toy.landmarks), "landmarks.json", "application/json"});
  return items;
}

json status_of(httplib::Client& cli, const std::string& id) {
  auto r = cli.Get("/sessions/" + id + "/status");
  REQUIRE(r);
  REQUIRE(r->status == 200);
  return json::parse(r->body);
}

/// Polls until no job is running and returns the last job record.
json wait_idle(httplib::Client& cli, const std::string& id) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::minutes(3);
  for (;;) {
    const auto s = status_of(cli, id);
    if (s["job"]["running"].is_null()) return s["job"]["last"];
    REQUIRE(std::chrono::steady_clock::now() < deadline);
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

int post(httplib::Client& cli, const std::string& path, const std::string& body = "{}") {
  auto r = cli.Post(path, body, "application/json");
  REQUIRE(r);
  return r->status;
}

std::string create_session(httplib::Client& cli, const std::string& kind = "video") {
  auto r = cli.Post("/sessions", json{{"kind", kind}}.dump(), "application/json");
  REQUIRE(r);
  REQUIRE(r->status == 201);
  return json::parse(r->body)["id"].get<std::string>();
}

std::string files_digest(const fs::path& dir) {
  std::string acc;
  for (const char* name : {"manifest.json", "frames.sg3t"}) acc += read_file_bytes((dir / name).string());
  return std::to_string(fnv1a(acc.data(), acc.size()));
}

}  // namespace

TEST_CASE("service rejects unknown sessions and malformed bodies") {
  auto f = make_fixture("sg3edit_service_errors", 5);
  Service svc(f.cfg);
  httplib::Client cli("127.0.0.1", svc.start_background());

  CHECK(post(cli, "/sessions/0123456789abcdef/invert") == 404);
  CHECK(cli.Get("/sessions/0123456789abcdef/status")->status == 404);
  CHECK(post(cli, "/sessions", "{not json") == 422);
  CHECK(post(cli, "/sessions", R"({"kind": "audio"})") == 422);
  CHECK(cli.Get("/nowhere")->status == 404);

  const auto id = create_session(cli);
  CHECK(post(cli, "/sessions/" + id + "/render") == 409);
  CHECK(post(cli, "/sessions/" + id + "/invert") == 409);
  CHECK(post(cli, "/sessions/" + id + "/frames", "{}") == 422);

  auto up = cli.Post("/sessions/" + id + "/frames", upload_items(f));
  REQUIRE(up);
  REQUIRE(up->status == 200);
  CHECK(json::parse(up->body)["frames"] == 4);
  CHECK(post(cli, "/sessions/" + id + "/invert", R"({"restyle_iters": "three"})") == 422);
  CHECK(post(cli, "/sessions/" + id + "/invert", R"({"restyle_iters": 0})") == 422);
  CHECK(post(cli, "/sessions/" + id + "/expand", R"({"directions": ["sideways"], "delta": 0.25})") == 422);
  CHECK(post(cli, "/sessions/" + id + "/edit/preview", R"({"frame_index": 0})") == 409);

  const auto image = create_session(cli, "image");
  auto up2 = cli.Post("/sessions/" + image + "/frames", upload_items(f));
  REQUIRE(up2);
  CHECK(up2->status == 422);
}

TEST_CASE("service runs the video workflow end to end") {
  auto f = make_fixture("sg3edit_service_flow", 20);
  Service svc(f.cfg);
  httplib::Client cli("127.0.0.1", svc.start_background());
  cli.set_read_timeout(120);

  auto dirs = cli.Get("/directions");
  REQUIRE(dirs);
  const auto catalog = json::parse(dirs->body)["directions"];
  REQUIRE(catalog.size() == 1);
  CHECK(catalog[0]["name"] == "smile");
  CHECK(catalog[0]["space"] == "W");

  const auto id = create_session(cli);
  const auto base = "/sessions/" + id;
  auto up = cli.Post(base + "/frames", upload_items(f));
  REQUIRE(up);
  REQUIRE(up->status == 200);
  const auto report = json::parse(up->body);
  CHECK(report["frames"] == 4);
  CHECK(report["warnings"].empty());

  REQUIRE(post(cli, base + "/invert") == 202);
  auto last = wait_idle(cli, id);
  REQUIRE(last["ok"] == true);
  CHECK(last["result"]["restyle_iters"] == 2);

  const fs::path session_dir = svc.session_dir(id);
  const auto digest = files_digest(session_dir);
  auto recon = cli.Get(base + "/frames/1/reconstruction");
  REQUIRE(recon);
  REQUIRE(recon->status == 200);
  for (int k = 0; k < 3; ++k) {
    auto p0 = cli.Post(base + "/edit/preview", R"({"direction_name": "smile", "step": 0, "frame_index": 1})",
                       "application/json");
    REQUIRE(p0);
    REQUIRE(p0->status == 200);
    CHECK(p0->get_header_value("Content-Type") == "image/png");
    CHECK(p0->body == recon->body);
  }
  auto p1 = cli.Post(base + "/edit/preview", R"({"direction_name": "smile", "step": 1.5, "frame_index": 1})",
                     "application/json");
  REQUIRE(p1);
  CHECK(p1->status == 200);
  CHECK(p1->body != recon->body);
  auto posed = cli.Post(base + "/edit/preview", R"({"frame_index": 1, "params": {"r": 10, "tx": 0.1, "ty": 0}})",
                        "application/json");
  REQUIRE(posed);
  CHECK(posed->status == 200);
  CHECK(posed->body != recon->body);
  CHECK(post(cli, base + "/edit/preview", R"({"frame_index": 9})") == 422);
  CHECK(post(cli, base + "/edit/preview", R"({"direction_name": "frown", "step": 1})") == 404);
  CHECK(files_digest(session_dir) == digest);

  for (const char* stage : {"smooth", "pti", "render"}) {
    REQUIRE(post(cli, base + "/" + stage) == 202);
    last = wait_idle(cli, id);
    INFO(last.dump());
    REQUIRE(last["ok"] == true);
  }
  auto status = status_of(cli, id);
  for (const char* stage : {"preprocess", "invert", "smooth", "pti", "render"}) CHECK(status["stages"][stage] == true);
  CHECK(status["stages"]["expand"] == false);
  auto rendered = cli.Get(base + "/frames/0/render");
  REQUIRE(rendered);
  CHECK(rendered->status == 200);
  CHECK(decode_png(rendered->body).width == 32);

  REQUIRE(post(cli, base + "/expand", R"({"directions": ["up", "right"], "delta": 0.25})") == 202);
  last = wait_idle(cli, id);
  REQUIRE(last["ok"] == true);
  CHECK(last["result"]["width"] == 40);
  CHECK(last["result"]["height"] == 40);
  CHECK(last["result"]["max_seam_residual"] == 0.0);

  auto edit = cli.Post(base + "/edit", R"({"edits": [{"direction_name": "smile", "step": 2}]})", "application/json");
  REQUIRE(edit);
  CHECK(edit->status == 200);
  status = status_of(cli, id);
  CHECK(status["edit"][0]["direction_name"] == "smile");
  CHECK(status["stages"]["smooth"] == false);
  CHECK(status["stages"]["render"] == false);
  CHECK(status["stages"]["pti"] == true);
  CHECK(cli.Get(base + "/frames/0/render")->status == 404);

  SECTION("the shared core gives the same artifacts outside the service") {
    const auto dir = (f.root / "direct").string();
    run_preprocess(f.cfg, dir, f.toy.frames_dir, f.toy.landmarks);
    run_invert(f.cfg, dir);
    run_smooth(f.cfg, dir);
    run_pti(f.cfg, dir);
    CHECK(read_file_bytes((fs::path(dir) / "pti_generator.sg3t").string()) ==
          read_file_bytes((session_dir / "pti_generator.sg3t").string()));
    for (int i = 0; i < 4; ++i)
      CHECK(read_file_bytes((fs::path(dir) / "reconstruction" / frame_filename(i)).string()) ==
            read_file_bytes((session_dir / "reconstruction" / frame_filename(i)).string()));
  }
}

TEST_CASE("a second writer on a busy session gets 409") {
  auto f = make_fixture("sg3edit_service_lock", 4000);
  Service svc(f.cfg);
  httplib::Client cli("127.0.0.1", svc.start_background());
  const auto id = create_session(cli);
  const auto base = "/sessions/" + id;
  REQUIRE(cli.Post(base + "/frames", upload_items(f))->status == 200);
  REQUIRE(post(cli, base + "/invert") == 202);
  wait_idle(cli, id);
  REQUIRE(post(cli, base + "/smooth") == 202);
  wait_idle(cli, id);

  REQUIRE(post(cli, base + "/pti") == 202);
  CHECK(post(cli, base + "/pti") == 409);
  CHECK(post(cli, base + "/render") == 409);
  CHECK(post(cli, base + "/edit/preview", R"({"frame_index": 0})") == 409);
  CHECK(status_of(cli, id)["job"]["running"] == "pti");
  const auto last = wait_idle(cli, id);
  CHECK(last["ok"] == true);
  CHECK(post(cli, base + "/render") == 202);
  wait_idle(cli, id);
}
