#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <sg3edit/pipeline.hpp>
#include <sg3edit/service.hpp>
#include <sg3edit/toy_fixture.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sg3;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool json_output = false;
};

Config resolve_config(const Globals& g) {
  Config cfg = g.config_path.empty() ? Config{} : Config::load(g.config_path);
  if (g.seed) cfg.set("seed", std::to_string(*g.seed), "--seed");
  if (g.deterministic) cfg.set("threads", "1", "--deterministic");
  return cfg;
}

void emit(const Globals& g, const json& summary, const std::string& text) {
  if (g.json_output)
    std::cout << summary.dump() << "\n";
  else
    std::cout << text << "\n";
}

std::string dci_table(const DCIReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-6s %8s %8s %8s\n%-6s %8.3f %8.3f %8.3f", "space", "D", "C", "I", r.space.c_str(),
                r.disentanglement, r.completeness, r.informativeness);
  return buf;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Edit, invert and re-render faces and face videos with an equivariant generator"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_flag("--deterministic", g.deterministic, "single-threaded, bit-reproducible execution");
  app.add_flag("--json", g.json_output, "print a JSON summary on stdout");

  std::string session, frames_dir, landmarks, out, video_out, host = "127.0.0.1";
  int restyle_iters = 0, preview_frame = -1, samples = 0, frames = 20, port = 8080, feather = 0;
  std::vector<std::string> edit_names;
  std::vector<double> edit_steps;
  std::string directions = "up", space = "W", attributes, attribute;
  double delta = 0.25, rotation = ToyVideoSpec{}.rotation_amplitude, translation = ToyVideoSpec{}.translation_amplitude;
  bool no_corners = false, pseudo_align_images = false;

  auto* pre = app.add_subcommand("preprocess", "detect, crop and align a frame sequence into a session");
  pre->add_option("--session", session, "session directory")->required();
  pre->add_option("--frames", frames_dir, "directory of PNG frames, or a video file for the configured transcoder")
      ->required()
      ->check(CLI::ExistingPath);
  pre->add_option("--landmarks", landmarks, "landmark JSON file or detector URL (default: config)");

  auto* inv = app.add_subcommand("invert", "encode every aligned frame");
  inv->add_option("--session", session, "session directory")->required();
  inv->add_option("--restyle-iters", restyle_iters, "refinement passes (default: config)")->check(CLI::PositiveNumber);

  auto* edit = app.add_subcommand("edit", "set the session edit, or preview one frame with --preview-frame");
  edit->add_option("--session", session, "session directory")->required();
  edit->add_option("--direction", edit_names, "direction name from the catalog (repeatable)");
  edit->add_option("--step", edit_steps, "step for the matching --direction (repeatable)");
  edit->add_option("--preview-frame", preview_frame, "write a preview PNG of this frame instead of committing");
  edit->add_option("--out", out, "preview PNG path");

  auto* smo = app.add_subcommand("smooth", "temporally smooth codes and transforms");
  smo->add_option("--session", session, "session directory")->required();

  auto* pti = app.add_subcommand("pti", "pivotal tuning of the generator on the session frames");
  pti->add_option("--session", session, "session directory")->required();

  auto* ren = app.add_subcommand("render", "render the edited, smoothed frames");
  ren->add_option("--session", session, "session directory")->required();
  ren->add_option("--out", out, "also copy the frames here");
  ren->add_option("--video", video_out, "also assemble the frames into this video file");

  auto* exp = app.add_subcommand("expand", "render with an expanded field of view");
  exp->add_option("--session", session, "session directory")->required();
  exp->add_option("--directions", directions, "comma list of up, down, left, right");
  exp->add_option("--delta", delta, "band width in canvas widths");
  exp->add_flag("--no-corners", no_corners, "skip diagonal shifts");
  exp->add_option("--feather", feather, "blend width in pixels at seams (0 keeps hard seams)")->check(CLI::NonNegativeNumber);
  exp->add_option("--out", out, "also copy the frames here");
  exp->add_option("--video", video_out, "also assemble the frames into this video file");

  auto* dci = app.add_subcommand("dci", "disentanglement, completeness and informativeness of a latent space");
  dci->add_option("--space", space, "Z, W or S");
  dci->add_option("--samples", samples, "number of sampled latents")->required();
  dci->add_option("--attributes", attributes, "comma list of classifier attributes")->required();
  dci->add_flag("--pseudo-align", pseudo_align_images, "score pseudo-aligned images");
  dci->add_option("--out", out, "write the importance matrix container here");

  auto* tenc = app.add_subcommand("train-encoder", "train an encoder against the configured generator");
  tenc->add_option("--out", out, "encoder checkpoint path")->required();
  std::string log_path;
  tenc->add_option("--log", log_path, "line-delimited JSON training log");

  auto* tbnd = app.add_subcommand("train-boundary", "fit a linear attribute boundary in W");
  tbnd->add_option("--attribute", attribute, "classifier attribute")->required();
  tbnd->add_option("--samples", samples, "number of scored latents (default: config)");
  tbnd->add_option("--out", out, "direction path (default: directions_dir/<attribute>.sg3t)");

  auto* serve = app.add_subcommand("serve", "run the HTTP service");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port");

  auto* toy = app.add_subcommand("make-toy-fixture", "write a scripted toy video with its generator and landmarks");
  toy->add_option("--out", out, "fixture directory")->required();
  toy->add_option("--frames", frames, "number of frames")->check(CLI::PositiveNumber);
  toy->add_option("--rotation", rotation, "pose sweep amplitude in degrees");
  toy->add_option("--translation", translation, "pose sweep amplitude in canvas widths");

  auto* keys = app.add_subcommand("config-keys", "print every documented config key with its default");

  CLI11_PARSE(app, argc, argv);

  try {
    const Config cfg = resolve_config(g);
    auto copy_frames = [&](const std::string& from) {
      if (out.empty()) return;
      fs::create_directories(out);
      for (const auto& f : fs::directory_iterator(from))
        fs::copy_file(f.path(), fs::path(out) / f.path().filename(), fs::copy_options::overwrite_existing);
    };

    auto finish_video = [&](const std::string& from) {
      if (!video_out.empty()) encode_video(cfg, from, video_out);
    };

    if (*pre) {
      if (fs::is_regular_file(frames_dir)) {
        const std::string decoded = (fs::path(session) / "input_frames").string();
        decode_video(cfg, frames_dir, decoded);
        frames_dir = decoded;
      }
      const auto r = run_preprocess(cfg, session, frames_dir, landmarks);
      emit(g, r, "preprocessed " + std::to_string(r["frames"].get<int>()) + " frames, crop " + r["crop"].dump());
    } else if (*inv) {
      const auto r = run_invert(cfg, session, restyle_iters > 0 ? std::optional<int>(restyle_iters) : std::nullopt);
      emit(g, r, "inverted " + std::to_string(r["frames"].get<int>()) + " frames");
    } else if (*edit) {
      require(edit_names.size() == edit_steps.size(), ErrorCode::InvalidArgument,
              "every --direction needs a matching --step");
      std::vector<NamedStep> steps;
      for (std::size_t i = 0; i < edit_names.size(); ++i) steps.push_back({edit_names[i], edit_steps[i], std::nullopt});
      if (preview_frame >= 0) {
        require(!out.empty(), ErrorCode::InvalidArgument, "--preview-frame needs --out");
        require(steps.size() <= 1, ErrorCode::InvalidArgument, "a preview takes at most one direction");
        const VideoSession s = open_session(session);
        const GeneratorHandle gen = active_generator(cfg, s, session);
        const auto png = preview_png(cfg, gen, s, preview_frame, steps.empty() ? "" : steps[0].direction_name,
                                     steps.empty() ? 0.0 : steps[0].step);
        write_file_bytes(out, png);
        emit(g, {{"stage", "preview"}, {"frame_index", preview_frame}, {"output", out}}, "wrote " + out);
      } else {
        const auto r = run_set_edit(cfg, session, steps);
        emit(g, r, "edit set: " + r["edit"].dump());
      }
    } else if (*smo) {
      const auto r = run_smooth(cfg, session);
      emit(g, r, "smoothed " + std::to_string(r["frames"].get<int>()) + " frames");
    } else if (*pti) {
      const auto r = run_pti(cfg, session);
      char buf[128];
      std::snprintf(buf, sizeof buf, "pivotal tuning: loss %.4g -> %.4g", r["initial_loss"].get<double>(),
                    r["final_loss"].get<double>());
      emit(g, r, buf);
    } else if (*ren) {
      const auto r = run_render(cfg, session);
      copy_frames(r["output"].get<std::string>());
      finish_video(r["output"].get<std::string>());
      emit(g, r, "rendered " + std::to_string(r["frames"].get<int>()) + " frames to " + r["output"].get<std::string>());
    } else if (*exp) {
      ExpansionSpec spec{parse_directions(split_csv(directions)), delta, !no_corners, feather};
      const auto r = run_expand(cfg, session, spec);
      copy_frames(r["output"].get<std::string>());
      finish_video(r["output"].get<std::string>());
      emit(g, r, "expanded " + std::to_string(r["frames"].get<int>()) + " frames to " + std::to_string(r["width"].get<int>()) +
                     "x" + std::to_string(r["height"].get<int>()));
    } else if (*dci) {
      const GeneratorHandle gen = load_base_generator(cfg);
      auto classifier = make_classifier(cfg);
      const auto rep = run_dci_pipeline(gen, latent_space_from_string(space), samples, *classifier, split_csv(attributes),
                                        pseudo_align_images, cfg.get_seed());
      if (!out.empty()) dci_to_container(rep).save(out);
      emit(g, to_json(rep), dci_table(rep));
    } else if (*tenc) {
      const GeneratorHandle gen = load_base_generator(cfg);
      auto enc = make_encoder(gen, encoder_variant_from_string(cfg.get("train.variant")),
                              static_cast<int>(cfg.get_int("train.hidden")), cfg.get_seed());
      TrainConfig tc = train_config(cfg);
      tc.log_path = log_path;
      auto perceptual = make_perceptual(cfg);
      auto identity = make_identity(cfg);
      const auto res = train_encoder(enc, gen, generator_dataset(gen, cfg.get_seed()), tc, perceptual.get(), identity.get());
      save_encoder(enc, out);
      json r{{"stage", "train-encoder"}, {"steps", tc.steps}, {"output", out}};
      if (!res.log.empty()) r["final_loss"] = res.log.back().loss.total;
      emit(g, r, "trained encoder for " + std::to_string(tc.steps) + " steps, saved " + out);
    } else if (*tbnd) {
      const GeneratorHandle gen = load_base_generator(cfg);
      auto classifier = make_classifier(cfg);
      BoundaryConfig bc;
      bc.quantile = cfg.get_double("boundary.quantile");
      const int n = samples > 0 ? samples : static_cast<int>(cfg.get_int("boundary.samples"));
      const auto d = train_boundary_from_generator(gen, *classifier, attribute, n, cfg.get_seed(), bc);
      const std::string path =
          out.empty() ? (fs::path(cfg.get_path("directions_dir")) / (attribute + ".sg3t")).string() : out;
      if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
      save_direction(d, path);
      emit(g, {{"stage", "train-boundary"}, {"attribute", attribute}, {"samples", n}, {"output", path}},
           "saved direction '" + attribute + "' to " + path);
    } else if (*serve) {
      Service svc(cfg);
      std::cerr << "listening on " << host << ":" << port << "\n";
      require(svc.listen(host, port), ErrorCode::Io, "cannot listen on " + host + ":" + std::to_string(port));
    } else if (*toy) {
      ToyVideoSpec spec;
      spec.frames = frames;
      spec.rotation_amplitude = rotation;
      spec.translation_amplitude = translation;
      const auto paths = write_toy_fixture(out, make_aligned_toy_generator(), spec);
      emit(g,
           {{"stage", "make-toy-fixture"},
            {"generator", paths.generator},
            {"frames", paths.frames_dir},
            {"landmarks", paths.landmarks},
            {"truth", paths.truth}},
           "wrote toy fixture to " + out);
    } else if (*keys) {
      std::cout << Config::describe();
    }
  } catch (const Error& e) {
    const json err = error_json(e.code(), e.what());
    if (g.json_output) std::cout << err.dump() << "\n";
    std::cerr << err.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    const json err{{"error", {{"code", "Internal"}, {"message", e.what()}}}};
    if (g.json_output) std::cout << err.dump() << "\n";
    std::cerr << err.dump() << "\n";
    return 3;
  }
  return 0;
}
