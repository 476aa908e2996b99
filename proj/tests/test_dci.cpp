#include <catch_amalgamated.hpp>

#include <sg3edit/dci.hpp>

#include "toy.hpp"

using namespace sg3;
using Catch::Approx;

namespace {

DCIReport scores_only(const Matrix& r) {
  const Matrix p(0, r.cols);
  return dci_scores(r, p, p);
}

}  // namespace

TEST_CASE("identity importance gives perfect D and C") {
  for (std::size_t k : {1u, 2u, 5u}) {
    const auto rep = scores_only(testing::identity_matrix(k));
    CHECK(rep.disentanglement == 1.0);
    CHECK(rep.completeness == 1.0);
  }
}

TEST_CASE("uniform importance gives zero D and C") {
  const auto rep = scores_only(Matrix(4, 4, 0.3));
  CHECK(rep.disentanglement == Approx(0.0).margin(1e-12));
  CHECK(rep.completeness == Approx(0.0).margin(1e-12));
}

TEST_CASE("one code split evenly over two factors has zero disentanglement") {
  Matrix r(1, 2, 0.5);
  const auto rep = scores_only(r);
  CHECK(rep.disentanglement == Approx(0.0).margin(1e-12));
  CHECK(rep.per_code_scores[0] == Approx(0.0).margin(1e-12));
}

TEST_CASE("entropy scores match a direct evaluation") {
  Matrix r(2, 3);
  r.data = {0.6, 0.3, 0.1, 0.0, 0.2, 0.8};
  auto ent = [](std::vector<double> p, double base) {
    double s = 0.0, h = 0.0;
    for (double v : p) s += v;
    for (double v : p)
      if (v > 0) h -= v / s * std::log(v / s);
    return 1.0 - h / std::log(base);
  };
  const double d0 = ent({0.6, 0.3, 0.1}, 3), d1 = ent({0.0, 0.2, 0.8}, 3);
  const double D = (1.0 / 2.0) * d0 + (1.0 / 2.0) * d1;
  const double c0 = ent({0.6, 0.0}, 2), c1 = ent({0.3, 0.2}, 2), c2 = ent({0.1, 0.8}, 2);
  const double C = 0.3 * c0 + 0.25 * c1 + 0.45 * c2;
  const auto rep = scores_only(r);
  CHECK(rep.disentanglement == Approx(D).epsilon(1e-12));
  CHECK(rep.completeness == Approx(C).epsilon(1e-12));
}

TEST_CASE("scores are invariant to permutations of codes and factors") {
  Matrix r = testing::dense_mixing(5, 3, 11);
  for (double& v : r.data) v = std::abs(v);
  const auto base = scores_only(r);
  Matrix p(5, 3);
  const std::array<int, 5> rp{3, 0, 4, 1, 2};
  const std::array<int, 3> cp{2, 0, 1};
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) p(i, j) = r(rp[i], cp[j]);
  const auto perm = scores_only(p);
  CHECK(perm.disentanglement == Approx(base.disentanglement).epsilon(1e-12));
  CHECK(perm.completeness == Approx(base.completeness).epsilon(1e-12));
}

TEST_CASE("per-code and per-factor scores ignore scaling of their own row or column") {
  Matrix r = testing::dense_mixing(4, 3, 12);
  for (double& v : r.data) v = std::abs(v);
  const auto base = scores_only(r);
  Matrix rows = r, cols = r, global = r;
  for (std::size_t j = 0; j < 3; ++j) rows(1, j) *= 7.0;
  for (std::size_t i = 0; i < 4; ++i) cols(i, 2) *= 0.2;
  for (double& v : global.data) v *= 3.5;
  const auto rr = scores_only(rows), cr = scores_only(cols), gr = scores_only(global);
  for (std::size_t i = 0; i < 4; ++i) CHECK(rr.per_code_scores[i] == Approx(base.per_code_scores[i]).epsilon(1e-12));
  for (std::size_t j = 0; j < 3; ++j) CHECK(cr.per_factor_scores[j] == Approx(base.per_factor_scores[j]).epsilon(1e-12));
  CHECK(gr.disentanglement == Approx(base.disentanglement).epsilon(1e-12));
  CHECK(gr.completeness == Approx(base.completeness).epsilon(1e-12));
  CHECK(base.disentanglement >= 0.0);
  CHECK(base.disentanglement <= 1.0);
  CHECK(base.completeness >= 0.0);
  CHECK(base.completeness <= 1.0);
}

TEST_CASE("invalid importance matrices are rejected") {
  CHECK_THROWS_AS(scores_only(Matrix(3, 3, 0.0)), Error);
  Matrix neg(2, 2, 1.0);
  neg(0, 1) = -0.5;
  CHECK_THROWS_AS(scores_only(neg), Error);
  Matrix nan(2, 2, 1.0);
  nan(1, 1) = std::nan("");
  CHECK_THROWS_AS(scores_only(nan), Error);
}

TEST_CASE("lasso recovers a sparse linear map") {
  const std::size_t n = 300, d = 6;
  Matrix x(n, d), y(n, 2);
  Rng rng = make_rng(3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) = normal(rng);
    y(i, 0) = 2.0 * x(i, 1);
    y(i, 1) = -x(i, 4) + 0.5 * x(i, 0);
  }
  const auto fit = fit_regressors(x, y);
  for (std::size_t j = 0; j < d; ++j) {
    if (j != 1) CHECK(fit.importance(j, 0) < 1e-3);
    if (j != 4 && j != 0) CHECK(fit.importance(j, 1) < 1e-3);
  }
  CHECK(fit.importance(1, 0) > 1.5);
  CHECK(fit.importance(4, 1) > fit.importance(0, 1));
  const auto rep = dci_scores(fit.importance, fit.predictions, fit.targets);
  CHECK(rep.informativeness > 0.999);
}

TEST_CASE("regressor fits are deterministic and need enough samples") {
  Matrix x(40, 3), y(40, 1);
  Rng rng = make_rng(4);
  for (std::size_t i = 0; i < 40; ++i) {
    for (std::size_t j = 0; j < 3; ++j) x(i, j) = normal(rng);
    y(i, 0) = x(i, 0) - x(i, 2) + 0.1 * normal(rng);
  }
  const auto a = fit_regressors(x, y), b = fit_regressors(x, y);
  CHECK(a.importance == b.importance);
  CHECK(a.predictions == b.predictions);
  Matrix small(9, 3), ys(9, 1);
  try {
    fit_regressors(small, ys);
    FAIL("expected InsufficientSamples");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InsufficientSamples);
  }
}

TEST_CASE("constant attributes report zero informativeness") {
  Matrix r(2, 1, 1.0), p(5, 1, 2.0), t(5, 1, 2.0);
  CHECK(dci_scores(r, p, t).informativeness == 0.0);
}

TEST_CASE("pipeline on toy oracle channels separates identity from dense mixing") {
  const auto& g = testing::toy();
  const int n = 400;
  const std::uint64_t seed = 77;
  const std::size_t d = static_cast<std::size_t>(g.config.latent_dim);
  auto ident = testing::latent_oracle(g, LatentSpace::W, seed, n, testing::identity_matrix(d));
  const auto a = run_dci_pipeline(g, LatentSpace::W, n, ident, testing::attribute_names(d), true, seed);
  CHECK(a.disentanglement >= 0.99);
  CHECK(a.completeness >= 0.99);
  CHECK(a.informativeness >= 0.99);
  auto dense = testing::latent_oracle(g, LatentSpace::W, seed, n, testing::dense_mixing(d, d, 9));
  const auto b = run_dci_pipeline(g, LatentSpace::W, n, dense, testing::attribute_names(d), true, seed);
  CHECK(b.disentanglement <= a.disentanglement - 0.2);
  CHECK(b.informativeness >= 0.99);
}

TEST_CASE("pipeline supports Z and S and rejects W+") {
  const auto& g = testing::toy();
  const int n = 60;
  FunctionClassifier brightness([](const Image& img, const std::string&) {
    double s = 0.0;
    for (double v : img.data) s += v;
    return s / static_cast<double>(img.size());
  });
  for (LatentSpace sp : {LatentSpace::Z, LatentSpace::S}) {
    const auto rep = run_dci_pipeline(g, sp, n, brightness, {"brightness"}, true, 5);
    CHECK(rep.space == to_string(sp));
    CHECK(rep.n_samples == n);
    const auto j = to_json(rep);
    CHECK(j.contains("D"));
    CHECK(j.contains("C"));
    CHECK(j.contains("I"));
  }
  CHECK_THROWS_AS(run_dci_pipeline(g, LatentSpace::WPlus, n, brightness, {"b"}, true, 5), Error);
  CHECK_THROWS_AS(run_dci_pipeline(g, LatentSpace::W, 5, brightness, {"b"}, true, 5), Error);
  const auto s1 = dci_sample(g, LatentSpace::S, 5, 3, true);
  CHECK(s1.features.size() == static_cast<std::size_t>(g.config.style_dim()));
}
