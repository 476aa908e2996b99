#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include <sg3edit/encoder.hpp>

#include "toy.hpp"

using namespace sg3;
using Catch::Approx;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("sg3edit_test_encoder_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TrainConfig quick_config(int steps) {
  TrainConfig cfg;
  cfg.weights = {1.0, 0.0, 0.0};
  cfg.steps = steps;
  cfg.seed = 3;
  cfg.lr = 3e-4;
  return cfg;
}

/// A psp_like encoder trained briefly on aligned toy renders, shared by the
/// inversion tests.
const EncoderHandle& trained() {
  static const EncoderHandle e = [] {
    const auto& g = testing::toy();
    EncoderHandle enc = make_encoder(g, EncoderVariant::PspLike, 64, 1);
    train_encoder(enc, g, generator_dataset(g, 100), quick_config(300));
    return enc;
  }();
  return e;
}

Detection detection_for(const TransformParams& p, int res) {
  const auto l = transform_landmarks(canonical_landmarks(), params_to_matrix(p));
  auto px = [res](const Point& q) { return Point{q[0] * res, q[1] * res}; };
  return Detection{px(l.left_eye), px(l.right_eye), px(*l.mouth), std::nullopt};
}

}  // namespace

TEST_CASE("encode is deterministic with a full code") {
  const auto& g = testing::toy();
  const auto e = make_encoder(g, EncoderVariant::PspLike);
  const Image x = synthesize(g, testing::random_code(g, 1, 0));
  const auto a = encode(e, x), b = encode(e, x);
  CHECK(a == b);
  CHECK(a.dim() == g.config.latent_dim);
  CHECK(a.flat().size() == static_cast<std::size_t>(kNumLayers * g.config.latent_dim));
  CHECK(all_finite(a.flat()));
}

TEST_CASE("e4e offsets start at zero so all rows match the base row") {
  const auto& g = testing::toy();
  const auto e = make_encoder(g, EncoderVariant::E4eLike);
  const Image x = synthesize(g, testing::random_code(g, 2, 0));
  const auto code = encode(e, x);
  for (int k = 1; k < kNumLayers; ++k)
    for (int j = 0; j < code.dim(); ++j) CHECK(code.row(k)[j] == code.row(0)[j]);
}

TEST_CASE("encoding the average image returns the initial code") {
  const auto& g = testing::toy();
  const auto e = make_encoder(g, EncoderVariant::PspLike);
  CHECK(encode(e, e.average_image) == e.initial_code);
}

TEST_CASE("one restyle iteration equals a single encode") {
  const auto& g = testing::toy();
  const auto e = make_encoder(g, EncoderVariant::PspLike);
  const Image x = synthesize(g, testing::random_code(g, 3, 0));
  const auto r = restyle_invert(e, g, x, 1);
  CHECK(r.code == encode(e, x));
  REQUIRE(r.per_iter_losses.size() == 1);
  CHECK(r.per_iter_losses[0] == Approx(mean_squared_error(x, synthesize(g, r.code))).epsilon(1e-14));
  CHECK(restyle_invert(e, g, x, 3).per_iter_losses.size() == 3);
  CHECK_THROWS_AS(restyle_invert(e, g, x, 0), Error);
  CHECK_THROWS_AS(encode(e, Image(16, 16, 3)), Error);
}

TEST_CASE("zero training steps leave parameters bit-identical") {
  const auto& g = testing::toy();
  auto e = make_encoder(g, EncoderVariant::E4eLike);
  const auto before = e.params;
  const auto res = train_encoder(e, g, generator_dataset(g, 1), quick_config(0));
  CHECK(e.params == before);
  CHECK(res.log.empty());
}

TEST_CASE("gradient accumulation matches one large batch") {
  const auto& g = testing::toy();
  for (auto variant : {EncoderVariant::PspLike, EncoderVariant::E4eLike}) {
    auto a = make_encoder(g, variant, 32, 5);
    auto b = a;
    TrainConfig ca = quick_config(1), cb = quick_config(1);
    ca.batch = 2;
    ca.accumulation = 4;
    cb.batch = 8;
    cb.accumulation = 1;
    train_encoder(a, g, generator_dataset(g, 7), ca);
    train_encoder(b, g, generator_dataset(g, 7), cb);
    auto va = param_views(a.params), vb = param_views(b.params);
    double worst = 0.0;
    for (std::size_t k = 0; k < va.size(); ++k)
      for (std::size_t i = 0; i < va[k].size(); ++i) worst = std::max(worst, std::abs(va[k][i] - vb[k][i]));
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("deterministic training is bit-reproducible and logs every step") {
  const auto& g = testing::toy();
  const auto dir = temp_dir("repro");
  auto a = make_encoder(g, EncoderVariant::E4eLike, 32, 9);
  auto b = a;
  auto cfg = quick_config(4);
  cfg.checkpoint_every = 2;
  cfg.checkpoint_dir = (dir / "ckpt").string();
  cfg.log_path = (dir / "train.jsonl").string();
  const auto ra = train_encoder(a, g, generator_dataset(g, 2), cfg);
  cfg.checkpoint_dir.clear();
  cfg.log_path.clear();
  train_encoder(b, g, generator_dataset(g, 2), cfg);
  CHECK(a.params == b.params);
  REQUIRE(ra.log.size() == 4);
  REQUIRE(ra.checkpoints.size() == 2);
  CHECK(fs::path(ra.checkpoints[1]).filename() == "encoder_step_000004.sg3t");
  CHECK(load_encoder(ra.checkpoints[1]).params == a.params);
  std::ifstream log(dir / "train.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "l2", "lpips", "id", "total"}) CHECK(j.contains(key));
    CHECK(j["row_norms"].size() == kNumLayers);
    ++lines;
  }
  CHECK(lines == 4);
}

TEST_CASE("encoder checkpoints round-trip") {
  const auto& g = testing::toy();
  const auto dir = temp_dir("roundtrip");
  const auto e = make_encoder(g, EncoderVariant::E4eLike, 16, 4);
  save_encoder(e, (dir / "e.sg3t").string());
  const auto r = load_encoder((dir / "e.sg3t").string());
  CHECK(r.config == e.config);
  CHECK(r.params == e.params);
  CHECK(r.initial_code == e.initial_code);
  CHECK(r.average_image == e.average_image);
}

TEST_CASE("training rejects non-canonical samples") {
  const auto& g = testing::toy();
  auto e = make_encoder(g, EncoderVariant::PspLike, 16);
  AlignedDataset posed = [&g](std::uint64_t i) {
    return AlignedSample{synthesize(g, LatentWPlus::broadcast(sample_w(g, 1, i))), {5.0, 0.0, 0.0}};
  };
  CHECK_THROWS_AS(train_encoder(e, g, posed, quick_config(1)), Error);
}

TEST_CASE("divergence aborts with a checkpoint") {
  const auto& g = testing::toy();
  const auto dir = temp_dir("diverge");
  auto e = make_encoder(g, EncoderVariant::PspLike, 16);
  AlignedDataset bad = [&g](std::uint64_t) {
    Image img(g.config.resolution, g.config.resolution, 3, std::nan(""));
    return AlignedSample{img, {}};
  };
  auto cfg = quick_config(2);
  cfg.checkpoint_dir = dir.string();
  try {
    train_encoder(e, g, bad, cfg);
    FAIL("expected Divergence");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::Divergence);
  }
  CHECK(fs::exists(dir / "encoder_diverged.sg3t"));
}

TEST_CASE("training reduces the reconstruction loss") {
  const auto& g = testing::toy();
  const auto& e = trained();
  const auto fresh = make_encoder(g, EncoderVariant::PspLike, 64, 1);
  double before = 0.0, after = 0.0;
  for (int i = 0; i < 16; ++i) {
    const Image x = synthesize(g, LatentWPlus::broadcast(sample_w(g, 999, i)));
    before += restyle_invert(fresh, g, x, 3).per_iter_losses.back();
    after += restyle_invert(e, g, x, 3).per_iter_losses.back();
  }
  CHECK(after < 0.5 * before);
}

TEST_CASE("canonical input inverts like the aligned path") {
  const auto& g = testing::toy();
  const auto& e = trained();
  const Image x = synthesize(g, LatentWPlus::broadcast(sample_w(g, 5, 0)));
  ScriptedLandmarkDetector det({{0, detection_for({}, g.config.resolution)}});
  const auto r = invert_unaligned(e, g, x, det);
  CHECK(std::abs(r.params.r) < 1e-9);
  CHECK(std::abs(r.params.tx) < 1e-12);
  CHECK(std::abs(r.params.ty) < 1e-12);
  const auto ref = restyle_invert(e, g, x, 3);
  double diff = 0.0;
  for (std::size_t i = 0; i < ref.code.flat().size(); ++i) diff = std::max(diff, std::abs(ref.code.flat()[i] - r.code.flat()[i]));
  CHECK(diff < 1e-9);
}

TEST_CASE("unaligned inversion recovers the pose and helps reconstruction") {
  const auto& g = testing::toy();
  const auto& e = trained();
  Rng rng = make_rng(44);
  int helped = 0;
  const int cases = 8;
  for (int i = 0; i < cases; ++i) {
    const TransformParams p{uniform(rng, -20, 20), uniform(rng, -0.08, 0.08), uniform(rng, -0.08, 0.08)};
    const Image x = synthesize(g, LatentWPlus::broadcast(sample_w(g, 6, i)), p);
    ScriptedLandmarkDetector det({{0, detection_for(p, g.config.resolution)}});
    const auto r = invert_unaligned(e, g, x, det);
    CHECK(r.params.r == Approx(p.r).margin(1e-3));
    CHECK(r.params.tx == Approx(p.tx).margin(1e-3));
    CHECK(r.params.ty == Approx(p.ty).margin(1e-3));
    const double posed = mean_squared_error(x, synthesize(g, r.code, r.params));
    const double unposed = mean_squared_error(x, synthesize(g, r.code, TransformParams{}));
    if (posed <= unposed) ++helped;
  }
  CHECK(helped == cases);
}

TEST_CASE("undetectable faces are reported") {
  const auto& g = testing::toy();
  const auto e = make_encoder(g, EncoderVariant::PspLike, 16);
  ScriptedLandmarkDetector none({});
  try {
    invert_unaligned(e, g, e.average_image, none);
    FAIL("expected NoFaceDetected");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::NoFaceDetected);
  }
}
