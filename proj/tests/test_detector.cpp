#include <doctest.h>

#include "dualroi/detector.hpp"
#include "dualroi/errors.hpp"
#include "dualroi/phantom.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

using namespace dualroi;

namespace {

const std::vector<double> kScales{1.0, 2.0, 4.0, 8.0};

RasterD flat(int n, double v = 1.0) { return RasterD::Constant(n, n, v); }

std::pair<int, int> argmax(const RasterD& m) {
  Eigen::Index r, c;
  m.maxCoeff(&r, &c);
  return {static_cast<int>(r), static_cast<int>(c)};
}


}  // namespace

TEST_CASE("focal response peaks on a Gaussian blob") {
  RasterD img = flat(64);
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) img(r, c) += 0.5 * std::exp(-((r - 30.0) * (r - 30.0) + (c - 35.0) * (c - 35.0)) / (2 * 16.0));
  const FeatureStack fs = compute_features(img, kScales, 8.0);
  const auto [r, c] = argmax(fs.planes[FeaturePlane::blob]);
  CHECK(std::hypot(r - 30.0, c - 35.0) <= 2.0);
  CHECK(fs.planes[FeaturePlane::convergence](30, 35) > 0.5);
  for (const auto& p : fs.planes) {
    CHECK(p.rows() == 64);
    CHECK(p.cols() == 64);
  }
  const RasterD& idx = fs.planes[FeaturePlane::scale_index];
  CHECK(idx.minCoeff() >= 0);
  CHECK(idx.maxCoeff() < static_cast<double>(kScales.size()));
}

TEST_CASE("flat image has no gradient convergence") {
  const FeatureStack fs = compute_features(flat(40, 3.0), kScales, 6.0);
  CHECK(fs.planes[FeaturePlane::convergence].array().abs().maxCoeff() < 1e-9);
}

TEST_CASE("spiculation peaks at the centre of a star") {
  RasterD img = flat(80);
  const double cr = 41, cc = 38;
  for (int k = 0; k < 8; ++k) {
    const double a = k * std::numbers::pi / 8;
    for (int r = 0; r < 80; ++r)
      for (int c = 0; c < 80; ++c) {
        const double perp = -(r - cr) * std::cos(a) + (c - cc) * std::sin(a);
        if (std::hypot(r - cr, c - cc) < 30) img(r, c) += 0.3 * std::exp(-perp * perp / 2.0);
      }
  }
  const FeatureStack fs = compute_features(img, kScales, 12.0);
  for (int plane : {FeaturePlane::spiculation_resultant, FeaturePlane::spiculation_excess}) {
    const auto [r, c] = argmax(fs.planes[plane]);
    CHECK(std::hypot(r - cr, c - cc) <= 3.0);
  }
}

TEST_CASE("features are rotation tolerant") {
  GenConfig g;
  g.n_cases = 1;
  g.image_size = 96;
  const auto sc = generate_case(g, 4, 0);
  const RasterD img = log_units(log_transform(sc.current().views[0]).pixels);
  const std::vector<double> scales{0.8, 1.6, 3.2};
  const FeatureStack a = compute_features(img, scales, 6.0);
  const FeatureStack b = compute_features(rotate90(img, 1), scales, 6.0);
  for (int k = 0; k < kFeatureCount; ++k)
    CHECK((rotate90(a.planes[k], 1) - b.planes[k]).array().abs().maxCoeff() < 1e-9);
}

TEST_CASE("feature preconditions") {
  CHECK_THROWS_AS(compute_features(flat(16), std::vector<double>{1.0}, 4.0), ConfigError);
  CHECK_THROWS_AS(compute_features(flat(16), std::vector<double>{1.0, 20.0}, 4.0), ConfigError);
}

TEST_CASE("random forest") {
  SUBCASE("axis-aligned separable data is fit exactly") {
    Rng rng = make_rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    RowMatrix X(200, 3);
    std::vector<int> y(200);
    for (int i = 0; i < 200; ++i) {
      for (int k = 0; k < 3; ++k) X(i, k) = u(rng);
      y[i] = X(i, 0) > 0.4;
    }
    RandomForest f;
    ForestParams p;
    p.max_features = 3;
    p.trees = 8;
    f.fit(X, y, p, 5);
    int correct = 0;
    for (int i = 0; i < 200; ++i) correct += (f.predict(X.row(i).data()) > 0.5) == (y[i] == 1);
    CHECK(correct == 200);
  }
  SUBCASE("deterministic for a fixed seed, also on duplicated data") {
    Rng rng = make_rng(2);
    std::normal_distribution<double> n;
    RowMatrix X(100, 5);
    std::vector<int> y(100);
    for (int i = 0; i < 100; ++i) {
      for (int k = 0; k < 5; ++k) X(i, k) = n(rng);
      y[i] = X(i, 1) + 0.5 * n(rng) > 0;
    }
    RowMatrix X2(200, 5);
    X2 << X, X;
    std::vector<int> y2 = y;
    y2.insert(y2.end(), y.begin(), y.end());
    RandomForest a, b;
    a.fit(X2, y2, ForestParams{}, 9);
    b.fit(X2, y2, ForestParams{}, 9);
    CHECK(a.trees() == b.trees());
    // without bagging, duplication leaves every split unchanged
    ForestParams nb;
    nb.bootstrap = false;
    nb.min_samples_leaf = 1;
    nb.max_features = 5;
    nb.trees = 3;
    RandomForest c, d;
    c.fit(X, y, nb, 4);
    d.fit(X2, y2, nb, 4);
    for (int i = 0; i < 100; ++i) CHECK(c.predict(X.row(i).data()) == d.predict(X.row(i).data()));
  }
  SUBCASE("single class is a training error") {
    RowMatrix X = RowMatrix::Zero(10, 2);
    std::vector<int> y(10, 1);
    RandomForest f;
    CHECK_THROWS_AS(f.fit(X, y, ForestParams{}, 1), TrainingError);
    CHECK_THROWS_AS(f.predict(X.row(0).data()), StateError);
  }
  SUBCASE("serialization round trip") {
    RowMatrix X(50, 2);
    std::vector<int> y(50);
    for (int i = 0; i < 50; ++i) {
      X(i, 0) = i;
      X(i, 1) = (i * 7) % 11;
      y[i] = i % 3 == 0;
    }
    RandomForest f;
    f.fit(X, y, ForestParams{}, 2);
    std::stringstream ss;
    f.save(ss);
    const RandomForest g = RandomForest::load(ss);
    CHECK(g.trees() == f.trees());
  }
}

TEST_CASE("nonmax_suppress") {
  SUBCASE("two close peaks keep the higher") {
    RasterD m = RasterD::Zero(30, 30);
    m(10, 10) = 0.9;
    m(10, 15) = 0.8;
    const auto out = nonmax_suppress(m, 10.0, 0.1);
    REQUIRE(out.size() == 1);
    CHECK(out[0].center == Pixel{10, 10});
    CHECK(out[0].score == 0.9);
  }
  SUBCASE("constant map has no strict maxima") { CHECK(nonmax_suppress(flat(20, 0.5), 3.0, 0.0).empty()); }
  SUBCASE("matches the brute-force oracle on random maps") {
    Rng rng = make_rng(12);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 100; ++trial) {
      RasterD m(24, 31);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::round(u(rng) * 50) / 50;  // some ties
      const double radius = 1.5 + 4 * u(rng), thr = 0.3 * u(rng);
      const auto out = nonmax_suppress(m, radius, thr);
      const auto ref = oracle::nms(m, radius, thr);
      REQUIRE(out.size() == ref.size());
      for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i].center == ref[i]);
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (i) CHECK(out[i - 1].score >= out[i].score);
        for (std::size_t j = i + 1; j < out.size(); ++j)
          CHECK(std::hypot(out[i].center.row - out[j].center.row, out[i].center.col - out[j].center.col) > radius);
      }
    }
  }
  CHECK_THROWS_AS(nonmax_suppress(flat(4), 0.0, 0.0), ConfigError);
}

TEST_CASE("candidate labels use the physical hit radius") {
  Image im;
  im.spacing_microns = 200;
  LesionTruth t;
  t.center = {100, 100};
  t.malignant = true;
  t.radius_px = 10;
  im.truth.push_back(t);
  CHECK(label_for(im, {100, 135}) == CandidateLabel::malignant);  // 0.7 cm = 35 px
  CHECK(label_for(im, {100, 136}) == CandidateLabel::normal);
  im.spacing_microns = 625;  // 0.7 cm = 11.2 px
  CHECK(label_for(im, {100, 111}) == CandidateLabel::malignant);
  CHECK(label_for(im, {100, 112}) == CandidateLabel::normal);
}

TEST_CASE("extract_patch") {
  CHECK(patch_side_px(5.0, 200.0) == 250);
  CHECK(patch_side_px(5.0, 625.0) == 80);
  RasterD img(60, 70);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = 1.0 + static_cast<double>(i);
  SUBCASE("interior patch is the raw sub-array") {
    const RasterD p = extract_patch(img, {30, 35}, 20);
    CHECK(p == img.block(20, 25, 20, 20));
  }
  SUBCASE("corner patch is three quarters zero") {
    const RasterD p = extract_patch(img, {0, 0}, 20);
    const auto zeros = (p.array() == 0.0).count();
    CHECK(zeros == 300);
  }
}

TEST_CASE("augmentation") {
  PatchMeta meta{{50, 60}, 6.0, 625.0};
  CHECK(augment(meta, SampleKind::positive, 3).size() == 132);
  CHECK(augment(meta, SampleKind::negative, 3).size() == 4);
  const auto specs = augment(meta, SampleKind::positive, 3);
  int translations = 0, scalings = 0;
  const AugmentationPlan plan(meta, SampleKind::positive, 3);
  for (const auto& s : specs) {
    if (s.variant == VariantKind::translation) {
      ++translations;
      CHECK(std::abs(s.shift.row) <= plan.translation_range_px() + 0.5);
      CHECK(std::abs(s.shift.col) <= plan.translation_range_px() + 0.5);
    }
    if (s.variant == VariantKind::scaling) ++scalings;
  }
  CHECK(translations == 64);
  CHECK(scalings == 64);
  CHECK(plan.translation_range_px() == doctest::Approx(8.0));
  CHECK(plan.corner_range_px() == doctest::Approx(9.6));
  // lazily enumerated specs agree with the eager list
  for (int i = 0; i < plan.size(); ++i) CHECK(plan.spec(i).shift.row == specs[i].shift.row);

  RasterD img(100, 100);
  Rng rng = make_rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
  SUBCASE("four rotations compose to the identity") {
    const RasterD p = materialize(img, meta, specs[5], 40);
    RasterD q = p;
    for (int k = 0; k < 4; ++k) q = rotate90(q, 1);
    CHECK(q == p);
  }
  SUBCASE("zero-range augmentation at the image centre is the identity") {
    PatchMeta m0{{50, 50}, 6.0, 625.0, 0.0, 0.0};
    const RasterD base = extract_patch(img, m0.center, 40);
    const AugmentationPlan p0(m0, SampleKind::positive, 1);
    for (int i = 0; i < p0.size(); i += 4) CHECK(materialize(img, m0, p0.spec(i), 40) == base);
  }
}
