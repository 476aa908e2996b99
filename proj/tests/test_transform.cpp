#include <catch_amalgamated.hpp>

#include <sg3edit/geometry.hpp>
#include <sg3edit/tensor_container.hpp>

using namespace sg3;
using Catch::Approx;

TEST_CASE("identity params give the identity matrix") {
  CHECK(params_to_matrix({}) == TransformMatrix::identity());
}

TEST_CASE("pure translation matrix matches hand form") {
  const auto t = params_to_matrix({0, 0.25, 0});
  TransformMatrix want;
  want.m[0][2] = 0.25;
  CHECK(t == want);
}

TEST_CASE("opposite rotations cancel") {
  const auto t = compose(params_to_matrix({20, 0, 0}), params_to_matrix({-20, 0, 0}));
  CHECK(max_abs_diff(t, TransformMatrix::identity()) < 1e-12);
}

TEST_CASE("positive rotation turns content counter-clockwise on screen") {
  // A point to the right of center must move up (smaller y) for r = +90.
  const auto p = params_to_matrix({90, 0, 0}).apply(0.25, 0.0);
  CHECK(p[0] == Approx(0.0).margin(1e-15));
  CHECK(p[1] == Approx(-0.25));
}

TEST_CASE("translations compose additively") {
  Rng rng = make_rng(11);
  for (int i = 0; i < 100; ++i) {
    const double a = uniform(rng, -1, 1), b = uniform(rng, -1, 1), c = uniform(rng, -1, 1), d = uniform(rng, -1, 1);
    const auto lhs = compose(params_to_matrix({0, a, b}), params_to_matrix({0, c, d}));
    CHECK(max_abs_diff(lhs, params_to_matrix({0, a + c, b + d})) < 1e-15);
  }
}

TEST_CASE("compose is associative and stays rigid") {
  Rng rng = make_rng(12);
  auto draw = [&] { return params_to_matrix({uniform(rng, -180, 180), uniform(rng, -1, 1), uniform(rng, -1, 1)}); };
  for (int i = 0; i < 200; ++i) {
    const auto a = draw(), b = draw(), c = draw();
    const auto left = compose(compose(a, b), c), right = compose(a, compose(b, c));
    CHECK(max_abs_diff(left, right) < 1e-12);
    CHECK(is_rigid(left));
    CHECK(max_abs_diff(compose(a, inverse_rigid(a)), TransformMatrix::identity()) < 1e-12);
  }
}

TEST_CASE("params round-trip through matrices") {
  Rng rng = make_rng(13);
  for (int i = 0; i < 100; ++i) {
    const TransformParams p{uniform(rng, -179, 179), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    const auto q = matrix_to_params(params_to_matrix(p));
    CHECK(q.r == Approx(p.r).margin(1e-10));
    CHECK(q.tx == p.tx);
    CHECK(q.ty == p.ty);
  }
}

TEST_CASE("nearest_rigid projects scaled identity and noisy rotations") {
  TransformMatrix s;
  for (auto& row : s.m)
    for (double& v : row) v *= 3.25 / 3.0;
  CHECK(max_abs_diff(nearest_rigid(s), TransformMatrix::identity()) < 1e-15);

  auto t = params_to_matrix({30, 0.1, -0.2});
  t.m[0][1] += 1e-3;
  const auto r = nearest_rigid(t);
  CHECK(is_rigid(r));
  CHECK(rad_to_deg(r.rotation_rad()) == Approx(30).margin(0.1));
}

// ---------------------------------------------------------------------------
// Landmark alignment

TEST_CASE("identical landmark sets give zero transform") {
  const auto l = canonical_landmarks();
  const auto p = estimate_alignment(l, l);
  CHECK(p.r == 0.0);
  CHECK(p.tx == Approx(0).margin(1e-15));
  CHECK(p.ty == Approx(0).margin(1e-15));
}

TEST_CASE("forward-transformed landmarks are recovered") {
  const auto canon = canonical_landmarks();
  for (const TransformParams want : {TransformParams{-20, 0, 0}, TransformParams{20, 0.1, 0.1}}) {
    const auto moved = transform_landmarks(canon, params_to_matrix(want));
    const auto got = estimate_alignment(moved, canon);
    CHECK(got.r == Approx(want.r).margin(1e-6));
    CHECK(got.tx == Approx(want.tx).margin(1e-6));
    CHECK(got.ty == Approx(want.ty).margin(1e-6));
  }
}

TEST_CASE("coincident eyes are degenerate") {
  LandmarkSet l{{0.5, 0.5}, {0.5, 0.5}, std::nullopt};
  try {
    estimate_alignment(l, canonical_landmarks());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateLandmarks);
  }
}

TEST_CASE("eye distance drift is flagged") {
  const auto canon = canonical_landmarks();
  LandmarkSet wide = canon;
  wide.right_eye[0] += 0.05;
  CHECK(estimate_alignment_detailed(wide, canon).scale_warning);
  CHECK_FALSE(estimate_alignment_detailed(canon, canon).scale_warning);
}

// ---------------------------------------------------------------------------
// Expansion and stitching

TEST_CASE("expansion transforms follow direction conventions") {
  const auto right = expansion_transforms({kRight, 0.25, true});
  REQUIRE(right.size() == 1);
  CHECK(right[0].second == params_to_matrix({0, -0.25, 0}));
  const auto up = expansion_transforms({kUp, 0.25, true});
  CHECK(up[0].second == params_to_matrix({0, 0, 0.25}));
  const auto down = expansion_transforms({kDown, 0.25, true});
  CHECK(down[0].second == params_to_matrix({0, 0, -0.25}));
  const auto rd = expansion_transforms({kRight | kDown, 0.25, true});
  REQUIRE(rd.size() == 3);
  CHECK(rd[2].first == ExpansionTag{1, 1});
  CHECK(rd[2].second == compose(rd[1].second, rd[0].second));
  CHECK(expansion_transforms({kRight | kDown, 0.25, false}).size() == 2);
}

TEST_CASE("invalid expansion specs are rejected") {
  CHECK_THROWS_AS(expansion_transforms({0, 0.25, true}), Error);
  CHECK_THROWS_AS(expansion_transforms({kUp, -0.1, true}), Error);
}

TEST_CASE("stitch with no shifted renders returns the base") {
  Image base(8, 8, 3, 0.5);
  const auto res = stitch(base, {}, {kRight, 0.25, true});
  CHECK(res.canvas == base);
  CHECK(res.coverage.count_equal(1) == 64);
}

TEST_CASE("stitch rejects tags the expansion does not request") {
  Image base(8, 8);
  CHECK_THROWS_AS(stitch(base, {{ExpansionTag{-1, 0}, base}}, {kRight, 0.25, true}), Error);
  CHECK_THROWS_AS(stitch(base, {{ExpansionTag{1, 1}, base}}, {kRight | kDown, 0.25, true}), Error);
}

TEST_CASE("feathered stitch ramps toward the shifted render at the seam") {
  Rng rng = make_rng(15);
  Image base(16, 16, 3), right(16, 16, 3);
  for (double& v : base.data) v = uniform(rng, -1, 1);
  for (double& v : right.data) v = uniform(rng, -1, 1);
  const std::vector<std::pair<ExpansionTag, Image>> shifted{{ExpansionTag{1, 0}, right}};
  const auto hard = stitch(base, shifted, {kRight, 0.25, true});
  const auto soft = stitch(base, shifted, {kRight, 0.25, true, 2});
  CHECK(soft.coverage.count_equal(1) == 20 * 16);
  CHECK(soft.seam_residual == hard.seam_residual);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 20; ++x)
      for (int c = 0; c < 3; ++c) {
        const int d = 15 - x;
        double want = hard.canvas.at(x, y, c);
        if (d >= 0 && d < 2) {
          const double a = (2.0 - d) / 3.0;
          want = (1 - a) * base.at(x, y, c) + a * right.at(x - 4, y, c);
        }
        CHECK(soft.canvas.at(x, y, c) == Approx(want).margin(1e-15));
      }
  CHECK(stitch(base, {{ExpansionTag{1, 0}, shift_pixels(base, -4, 0).image}}, {kRight, 0.25, true, 3}).canvas ==
        stitch(base, {{ExpansionTag{1, 0}, shift_pixels(base, -4, 0).image}}, {kRight, 0.25, true}).canvas);
  CHECK_THROWS_AS(stitch(base, shifted, {kRight, 0.25, true, 13}), Error);
  CHECK_THROWS_AS(stitch(base, shifted, {kRight, 0.25, true, -1}), Error);
}

// ---------------------------------------------------------------------------
// Images

TEST_CASE("integer warps equal pixel shifts") {
  Rng rng = make_rng(14);
  Image img(16, 16);
  for (double& v : img.data) v = uniform(rng, -1, 1);
  const auto w = warp(img, params_to_matrix({0, 3.0 / 16, -2.0 / 16}));
  const auto s = shift_pixels(img, 3, -2);
  CHECK(w.valid.count_equal(1) <= s.valid.count_equal(1));
  CHECK(max_abs_diff(w.image, s.image, &w.valid) == 0.0);
}

// ---------------------------------------------------------------------------
// Tensor container

TEST_CASE("container round-trips every dtype bit-exactly") {
  TensorContainer tc;
  const std::vector<double> d{1.5, -0.0, 1e-300, std::numeric_limits<double>::infinity()};
  const std::vector<float> f{1.25f, -3.5f};
  const std::vector<std::int32_t> i32{-7, 9, 11};
  const std::vector<std::int64_t> i64{std::numeric_limits<std::int64_t>::min()};
  const std::vector<std::uint8_t> u8{0, 255, 17};
  tc.add<double>("d", {2, 2}, d);
  tc.add<float>("f", {2}, f);
  tc.add<std::int32_t>("i32", {3}, i32);
  tc.add<std::int64_t>("i64", {1}, i64);
  tc.add<std::uint8_t>("u8", {3}, u8);
  const auto bytes = tc.serialize();
  const auto back = TensorContainer::deserialize(bytes);
  CHECK(back.serialize() == bytes);
  CHECK(back.get<double>("d")[1] == 0.0);
  CHECK(std::signbit(back.get<double>("d")[1]));
  CHECK(back.get<float>("f") == f);
  CHECK(back.get<std::int32_t>("i32") == i32);
  CHECK(back.get<std::int64_t>("i64") == i64);
  CHECK(back.get<std::uint8_t>("u8") == u8);
  CHECK(back.at("d").shape == std::vector<std::uint64_t>{2, 2});
}

TEST_CASE("container header layout is fixed") {
  TensorContainer tc;
  const std::vector<std::uint8_t> one{42};
  tc.add<std::uint8_t>("a", {1}, one);
  const auto b = tc.serialize();
  const std::vector<std::uint8_t> want{'S', 'G', '3', 'T', 1, 0, 0, 0, 1, 0, 0, 0,  // magic, version, count
                                       1, 0, 0, 0, 'a',                           // name
                                       4,                                         // dtype u8
                                       1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0,        // ndim, dims
                                       1, 0, 0, 0, 0, 0, 0, 0,                    // byte length
                                       42};
  CHECK(b == want);
}

TEST_CASE("container rejects corrupt data") {
  TensorContainer tc;
  const std::vector<double> v{1, 2, 3};
  tc.add_f64("v", {3}, v);
  auto b = tc.serialize();
  auto truncated = b;
  truncated.pop_back();
  CHECK_THROWS_AS(TensorContainer::deserialize(truncated), Error);
  auto trailing = b;
  trailing.push_back(0);
  CHECK_THROWS_AS(TensorContainer::deserialize(trailing), Error);
  auto magic = b;
  magic[0] = 'X';
  CHECK_THROWS_AS(TensorContainer::deserialize(magic), Error);
  CHECK_THROWS_AS(tc.add_f64("v", {3}, v), Error);
  CHECK_THROWS_AS(tc.add_f64("w", {4}, v), Error);
}
