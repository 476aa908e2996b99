#include <catch_amalgamated.hpp>

#include <filesystem>
#include <map>

#include <sg3edit/editing.hpp>

#include "toy.hpp"

using namespace sg3;
using Catch::Approx;

namespace {

AttributeScoreSet grid_set(int side) {
  AttributeScoreSet set;
  std::vector<double> s;
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) {
      const double x = -1.0 + 2.0 * i / (side - 1), y = -1.0 + 2.0 * j / (side - 1);
      set.latents.push_back({x, y});
      s.push_back(x);
    }
  set.scores["x"] = s;
  return set;
}

EditDirection w_direction(int dim, std::uint64_t seed) {
  EditDirection d;
  d.name = "test";
  Rng rng = make_rng(seed);
  for (int i = 0; i < dim; ++i) d.vector.push_back(normal(rng));
  normalize_direction(d);
  return d;
}

double max_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Embedding client that recognizes the perturbed probe renders of
/// compute_global_s_direction by hash. Only `channel` moves the embedding
/// along the text delta; every other channel moves it orthogonally.
class ForcedEmbedding : public EmbeddingClient {
 public:
  ForcedEmbedding(const GeneratorHandle& g, int n_probe, std::size_t channel, const GlobalSConfig& cfg) {
    const auto scale = global_s_channel_scale(g, n_probe, cfg.seed);
    for (int p = 0; p < n_probe; ++p) {
      const StyleVector base = global_s_probe_base(g, cfg.seed, p);
      for (std::size_t c = 0; c < base.size(); ++c)
        for (double sign : {1.0, -1.0}) {
          StyleVector s = base;
          s.values[c] += sign * cfg.alpha * scale[c];
          const auto h = synthesize_from_styles(g, s).hash();
          table_[h] = c == channel ? std::vector<double>{sign, 0.3, 0.0} : std::vector<double>{0.0, sign, 0.2};
        }
    }
  }
  std::vector<double> embed_image(const Image& img) override {
    const auto it = table_.find(img.hash());
    return it == table_.end() ? std::vector<double>{0.0, 0.0, 0.0} : it->second;
  }
  std::vector<double> embed_text(const std::string& text) override {
    if (text == "same") return {0.0, 0.0, 1.0};
    return text == "neutral" ? std::vector<double>{0.0, 0.0, 1.0} : std::vector<double>{2.0, 0.0, 1.0};
  }

 private:
  std::map<std::uint64_t, std::vector<double>> table_;
};

}  // namespace

TEST_CASE("boundary on linearly scored grid is the axis direction") {
  const auto dir = train_linear_boundary(grid_set(50), "x");
  CHECK(dir.vector[0] == Approx(1.0).margin(1e-3));
  CHECK(dir.vector[1] == Approx(0.0).margin(1e-3));
  CHECK(l2_norm(dir.vector) == Approx(1.0).margin(1e-9));
  CHECK(dir.space == LatentSpace::W);
}

TEST_CASE("boundary on random latents points toward higher scores") {
  AttributeScoreSet set;
  Rng rng = make_rng(8);
  std::vector<double> s;
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> l{normal(rng), normal(rng), normal(rng)};
    s.push_back(0.6 * l[0] - 0.8 * l[2]);
    set.latents.push_back(l);
  }
  set.scores["a"] = s;
  const auto dir = train_linear_boundary(set, "a", {0.05});
  CHECK(0.6 * dir.vector[0] - 0.8 * dir.vector[2] > 0.98);
}

TEST_CASE("negated scores flip the boundary, rescaled scores keep it") {
  auto set = grid_set(50);
  const auto base = train_linear_boundary(set, "x");
  auto neg = set, scaled = set;
  for (double& v : neg.scores["x"]) v = -v;
  for (double& v : scaled.scores["x"]) v *= 3.7;
  const auto flipped = train_linear_boundary(neg, "x");
  const auto same = train_linear_boundary(scaled, "x");
  for (int j = 0; j < 2; ++j) CHECK(flipped.vector[j] == Approx(-base.vector[j]).margin(1e-6));
  CHECK(same.vector == base.vector);
}

TEST_CASE("degenerate score sets are rejected") {
  auto set = grid_set(10);
  set.scores["flat"] = std::vector<double>(100, 0.5);
  try {
    train_linear_boundary(set, "flat");
    FAIL("expected DegenerateLabels");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateLabels);
  }
  CHECK_THROWS_AS(train_linear_boundary(set, "missing"), Error);
  set.scores["short"] = {1.0, 2.0};
  CHECK_THROWS_AS(train_linear_boundary(set, "x"), Error);
}

TEST_CASE("linear edits are additive and reversible") {
  const auto& g = testing::toy();
  const auto code = testing::random_code(g, 10, 0);
  EditRequest req{w_direction(g.config.latent_dim, 1), 0.0, std::nullopt};
  CHECK(apply_linear_edit(code, req) == code);
  req.step = 0.7;
  const auto fwd = apply_linear_edit(code, req);
  req.step = -0.7;
  CHECK(max_diff(apply_linear_edit(fwd, req).flat(), code.flat()) <= 1e-12);
  req.step = 0.35;
  const auto half = apply_linear_edit(apply_linear_edit(code, req), req);
  CHECK(max_diff(half.flat(), fwd.flat()) <= 1e-12);
  for (int k = 0; k < kNumLayers; ++k)
    for (int j = 0; j < code.dim(); ++j)
      CHECK(fwd.row(k)[j] == Approx(code.row(k)[j] + 0.7 * req.direction.vector[j]).margin(1e-12));

  const LatentW w = sample_w(g, 1, 0);
  req.step = 0.7;
  const auto ew = apply_linear_edit(w, req);
  CHECK(max_diff(apply_linear_edit(LatentWPlus::broadcast(w), req).row(5), ew.values) <= 1e-15);
}

TEST_CASE("row-masked W edits and W+ edits touch only their targets") {
  const auto& g = testing::toy();
  const auto code = testing::random_code(g, 11, 0);
  EditRequest req{w_direction(g.config.latent_dim, 2), 1.0, std::nullopt};
  req.direction.metadata["rows"] = std::vector<int>{3, 4};
  const auto out = apply_linear_edit(code, req);
  for (int k = 0; k < kNumLayers; ++k) {
    const bool touched = k == 3 || k == 4;
    CHECK((max_diff(out.row(k), code.row(k)) > 0.0) == touched);
  }
  EditDirection wp = w_direction(kNumLayers * g.config.latent_dim, 3);
  wp.space = LatentSpace::WPlus;
  const auto o2 = apply_linear_edit(code, {wp, 0.5, std::nullopt});
  for (std::size_t i = 0; i < wp.dim(); ++i) CHECK(o2.flat()[i] == Approx(code.flat()[i] + 0.5 * wp.vector[i]).margin(1e-12));
}

TEST_CASE("edit space and size mismatches are rejected") {
  const auto& g = testing::toy();
  const auto code = testing::random_code(g, 12, 0);
  EditDirection s = w_direction(g.config.style_dim(), 4);
  s.space = LatentSpace::S;
  CHECK_THROWS_AS(apply_linear_edit(code, {s, 1.0, std::nullopt}), Error);
  CHECK_THROWS_AS(apply_linear_edit(code, {w_direction(3, 5), 1.0, std::nullopt}), Error);
  CHECK_THROWS_AS(apply_linear_edit(code, {w_direction(g.config.latent_dim, 5), std::nan(""), std::nullopt}), Error);
  const auto styles = compute_styles(g, code);
  CHECK_THROWS_AS(apply_s_edit(styles, {w_direction(g.config.latent_dim, 6), 1.0, std::nullopt}), Error);
  EditDirection zero{"z", LatentSpace::W, std::vector<double>(4, 0.0), {}};
  CHECK_THROWS_AS(normalize_direction(zero), Error);
}

TEST_CASE("S edits change only the direction support") {
  const auto& g = testing::toy();
  const auto styles = compute_styles(g, testing::random_code(g, 13, 0));
  EditDirection d{"s", LatentSpace::S, std::vector<double>(styles.size(), 0.0), {}};
  const std::size_t lo = styles.layer_offsets[6], hi = styles.layer_offsets[7];
  for (std::size_t i = lo; i < hi; ++i) d.vector[i] = (i % 2 ? 1.0 : -0.02) * static_cast<double>(i - lo + 1);
  normalize_direction(d);
  CHECK(apply_s_edit(styles, {d, 0.0, std::nullopt}) == styles);
  const auto out = apply_s_edit(styles, {d, 2.0, std::nullopt});
  for (int k = 0; k < kNumLayers; ++k) {
    if (k == 6) continue;
    const auto a = out.layer(k), b = styles.layer(k);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  const auto back = apply_s_edit(out, {d, -2.0, std::nullopt});
  CHECK(max_diff(back.values, styles.values) <= 1e-12);
  const auto thr = apply_s_edit(styles, {d, 2.0, 0.5});
  double mx = 0.0;
  for (double v : d.vector) mx = std::max(mx, std::abs(v));
  for (std::size_t i = lo; i < hi; ++i)
    CHECK((thr.values[i] != styles.values[i]) == (std::abs(d.vector[i]) >= 0.5 * mx));
}

TEST_CASE("pseudo-aligned scores use the canonical pose") {
  const auto& g = testing::toy();
  FunctionClassifier constant([](const Image&, const std::string&) { return 0.42; });
  CHECK(pseudo_aligned_score(g, testing::random_code(g, 14, 0), constant, "any") == 0.42);
  const auto canonical = learned_transform(g, LatentWPlus::broadcast(g.average_latent));
  std::map<std::uint64_t, double> rotation_of;
  FunctionClassifier reads_pose([&](const Image& img, const std::string&) { return rotation_of.at(img.hash()); });
  for (int i = 0; i < 10; ++i) {
    const auto code = testing::random_code(g, 15, i);
    const auto aligned = pseudo_align(code, g.average_latent);
    rotation_of[synthesize(g, aligned).hash()] = matrix_to_params(learned_transform(g, aligned)).r;
    CHECK(learned_transform(g, aligned) == canonical);
    CHECK(pseudo_aligned_score(g, code, reads_pose, "r") == matrix_to_params(canonical).r);
  }
  auto aligned_code = LatentWPlus::broadcast(g.average_latent);
  aligned_code.set_row(3, sample_w(g, 2, 0));
  CHECK(synthesize(g, pseudo_align(aligned_code, g.average_latent)) == synthesize(g, aligned_code));
  rotation_of.clear();
  rotation_of[synthesize(g, aligned_code).hash()] = 7.0;
  CHECK(pseudo_aligned_score(g, aligned_code, reads_pose, "r") == 7.0);
}

TEST_CASE("global S direction finds the one relevant channel") {
  const auto& g = testing::toy();
  GlobalSConfig cfg;
  cfg.seed = 21;
  const int n_probe = 2;
  const std::size_t channel = 37;
  ForcedEmbedding embed(g, n_probe, channel, cfg);
  const auto dir = compute_global_s_direction(g, embed, "neutral", "target", n_probe, cfg);
  REQUIRE(dir.vector.size() == static_cast<std::size_t>(g.config.style_dim()));
  for (std::size_t c = 0; c < dir.vector.size(); ++c) CHECK(dir.vector[c] == (c == channel ? 1.0 : 0.0));
  CHECK(dir.space == LatentSpace::S);

  try {
    compute_global_s_direction(g, embed, "neutral", "same", n_probe, cfg);
    FAIL("expected DegenerateDirection");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateDirection);
  }
  cfg.threshold = std::numeric_limits<double>::infinity();
  try {
    compute_global_s_direction(g, embed, "neutral", "target", n_probe, cfg);
    FAIL("expected DegenerateDirection");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateDirection);
  }
}

TEST_CASE("directions persist and load as a catalog") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "sg3edit_test_editing_catalog";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto a = w_direction(8, 30);
  a.name = "smile";
  a.metadata = {{"source", "linear_boundary"}, {"step_range", {-3, 3}}};
  auto b = w_direction(124, 31);
  b.name = "hair";
  b.space = LatentSpace::S;
  save_direction(a, (dir / "smile.sg3t").string());
  save_direction(b, (dir / "hair.sg3t").string());
  const auto cat = load_direction_catalog(dir.string());
  REQUIRE(cat.size() == 2);
  CHECK(cat[0].name == "hair");
  const auto* s = find_direction(cat, "smile");
  REQUIRE(s != nullptr);
  CHECK(s->vector == a.vector);
  CHECK(s->metadata == a.metadata);
  CHECK(find_direction(cat, "nope") == nullptr);
  CHECK(load_direction_catalog((dir / "missing").string()).empty());
}
