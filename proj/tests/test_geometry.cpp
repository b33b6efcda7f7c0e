#include <doctest.h>

#include "dualroi/errors.hpp"
#include "dualroi/geometry.hpp"
#include "dualroi/phantom.hpp"

#include <cmath>
#include <numbers>

using namespace dualroi;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Half-disc breast on the left border with a brighter wedge above a line at
// `theta_deg` (normal angle), plus mild deterministic texture.
Raster16 wedge_image(double theta_deg, double rho, int size = 200) {
  Raster16 img = Raster16::Zero(size, size);
  Rng rng = make_rng(static_cast<std::uint64_t>(theta_deg * 10));
  std::normal_distribution<double> n(0, 150);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      if (std::hypot(r - size / 2.0, c) > 0.75 * size) continue;
      double v = 30000 + n(rng);
      if (c * std::cos(theta_deg * kDeg) + r * std::sin(theta_deg * kDeg) < rho) v += 6000;
      img(r, c) = static_cast<std::uint16_t>(v);
    }
  return img;
}

RasterD as_double(const Raster16& a) { return a.cast<double>() / 6000.0; }

double dice(const Mask& a, const Mask& b) {
  const double inter = (a.cast<int>().array() * b.cast<int>().array()).sum();
  return 2 * inter / (a.cast<double>().sum() + b.cast<double>().sum());
}

}  // namespace

TEST_CASE("segment_breast") {
  GenConfig g;
  g.n_cases = 3;
  const auto cases = generate_dataset(g, 31);
  for (const auto& sc : cases)
    for (const auto& im : sc.current().views) {
      const Image li = log_transform(im);
      CHECK(dice(segment_breast(li.pixels), im.true_mask) > 0.95);
    }
  SUBCASE("all black is an error") { CHECK_THROWS_AS(segment_breast(Raster16::Zero(32, 32)), SegmentationError); }
  SUBCASE("invariant to a constant offset") {
    const Raster16 px = log_transform(cases[0].current().views[1]).pixels;
    Raster16 shifted = px;
    for (Eigen::Index i = 0; i < shifted.size(); ++i) shifted.data()[i] = static_cast<std::uint16_t>(px.data()[i] + 500);
    REQUIRE(px.maxCoeff() < 65000);
    CHECK(segment_breast(shifted) == segment_breast(px));
  }
  SUBCASE("holes are filled and only the largest blob kept") {
    Raster16 img = Raster16::Zero(40, 40);
    img.block(5, 5, 20, 20).setConstant(1000);
    img.block(10, 10, 3, 3).setZero();
    img.block(30, 30, 4, 4).setConstant(1000);
    const Mask m = segment_breast(img);
    CHECK(m.cast<int>().sum() == 400);
    CHECK(m(11, 11) == 1);
    CHECK(m(31, 31) == 0);
  }
}

TEST_CASE("fit_pectoral on synthetic edges") {
  for (double theta : {45.0, 60.0, 30.0}) {
    CAPTURE(theta);
    const double rho = 60.0;
    const Raster16 img = wedge_image(theta, rho);
    const Mask mask = segment_breast(img);
    const PectoralFit fit = fit_pectoral(as_double(img), mask);
    CHECK_FALSE(fit.fallback);
    CHECK(std::abs(fit.line.theta_deg - theta) <= 2.0);
    CHECK(std::abs(fit.line.rho - rho) <= 3.0);
  }
  SUBCASE("no edge falls back to the chest border") {
    Raster16 img = Raster16::Zero(100, 100);
    img.block(10, 5, 80, 60).setConstant(20000);
    const Mask mask = segment_breast(img);
    const PectoralFit fit = fit_pectoral(as_double(img), mask);
    CHECK(fit.fallback);
    CHECK(fit.line.theta_deg == 0.0);
    CHECK(fit.line.rho == 5.0);
  }
}

TEST_CASE("CC landmarks on a semicircle") {
  Image im;
  im.view = View::cc;
  im.pixels = Raster16::Zero(120, 120);
  for (int r = 0; r < 120; ++r)
    for (int c = 10; c < 120; ++c)
      if (std::hypot(r - 57.0, c - 10.0) <= 45.0) im.pixels(r, c) = 40000;
  const Landmarks lm = extract_landmarks(im);
  CHECK(std::abs(lm.p1 - 57) <= 2);
  CHECK(std::abs(lm.front.col - 55) <= 2);
  CHECK(lm.p2 == 10);
  CHECK_FALSE(lm.pectoral);

  SUBCASE("translation equivariance") {
    Image moved = im;
    moved.pixels.setZero();
    const int dr = 7, dc = 11;
    for (int r = 0; r + dr < 120; ++r)
      for (int c = 0; c + dc < 120; ++c) moved.pixels(r + dr, c + dc) = im.pixels(r, c);
    const Landmarks m2 = extract_landmarks(moved);
    CHECK(m2.p1 == lm.p1 + dr);
    CHECK(m2.p2 == lm.p2 + dc);
  }
}

TEST_CASE("MLO translation equivariance") {
  Image im;
  im.view = View::mlo;
  im.pixels = wedge_image(40.0, 50.0, 160);
  // shrink the breast away from the image border so content can move
  Image small = im;
  small.pixels.setZero();
  small.pixels.block(0, 0, 140, 140) = im.pixels.block(10, 0, 140, 140);
  const Landmarks a = extract_landmarks(small);
  Image moved = small;
  moved.pixels.setZero();
  moved.pixels.block(6, 9, 140, 140) = small.pixels.block(0, 0, 140, 140);
  const Landmarks b = extract_landmarks(moved);
  CHECK(a.pectoral);
  CHECK(b.pectoral);
  CHECK(std::abs(b.p1 - (a.p1 + 6)) <= 1);
  CHECK(std::abs(b.p2 - (a.p2 + 9)) <= 1);
}

TEST_CASE("landmark accuracy on phantom MLO images") {
  GenConfig g;
  g.n_cases = 25;
  g.missing_prior_fraction = 1.0;
  int n = 0, ok = 0;
  for (const auto& sc : generate_dataset(g, 77))
    for (const auto& im : sc.current().views) {
      const Landmarks lm = extract_landmarks(log_transform(im));
      CHECK(lm.p1 >= 0);
      CHECK(lm.p1 < im.rows());
      CHECK(lm.p2 >= 0);
      CHECK(lm.p2 < im.cols());
      if (im.view != View::mlo) continue;
      ++n;
      ok += std::abs(lm.p1 - im.true_landmarks.p1) <= 5 && std::abs(lm.p2 - im.true_landmarks.p2) <= 5;
    }
  CHECK(ok >= 0.9 * n);
}

TEST_CASE("map_location algebra") {
  Landmarks a, b;
  a.p1 = 100;
  a.p2 = 60;
  b.p1 = 110;
  b.p2 = 50;
  const MappedLocation m = map_location({120, 80}, a, b, 256, 256);
  CHECK(m.target == Pixel{130, 70});
  CHECK_FALSE(m.was_clipped);
  CHECK(map_location({120, 80}, a, a, 256, 256).target == Pixel{120, 80});

  Rng rng = make_rng(8);
  std::uniform_int_distribution<int> u(-300, 300);
  for (int i = 0; i < 1000; ++i) {
    Landmarks s, d;
    s.p1 = u(rng);
    s.p2 = u(rng);
    d.p1 = u(rng);
    d.p2 = u(rng);
    const Pixel q{u(rng), u(rng)}, t{u(rng), u(rng)};
    const Pixel there = map_location(q, s, d, 256, 256).target;
    CHECK(map_location(there, d, s, 256, 256).target == q);
    CHECK(map_location(q + t, s, d, 256, 256).target == there + t);
    CHECK(map_location(q, s, s, 256, 256).target == q);
  }
  SUBCASE("clipping") {
    const MappedLocation c = map_location({250, 5}, a, b, 256, 256);
    CHECK(c.was_clipped);
    CHECK(c.clipped == Pixel{255, 0});
    CHECK(c.target == Pixel{260, -5});
  }
}

TEST_CASE("jitter") {
  CHECK(jitter({50, 50}, 64, 10.0, 1, 200, 200).size() == 64);
  for (const Pixel& p : jitter({50, 60}, 20, 0.0, 1, 200, 200)) CHECK(p == Pixel{50, 60});
  CHECK(jitter({50, 50}, 64, 10.0, 3, 200, 200) == jitter({50, 50}, 64, 10.0, 3, 200, 200));
  const auto many = jitter({500, 500}, 10000, 10.0, 5, 1000, 1000);
  double mr = 0, mc = 0;
  for (const Pixel& p : many) {
    mr += p.row;
    mc += p.col;
  }
  mr /= many.size();
  mc /= many.size();
  double vr = 0, vc = 0;
  for (const Pixel& p : many) {
    vr += (p.row - mr) * (p.row - mr);
    vc += (p.col - mc) * (p.col - mc);
  }
  CHECK(std::abs(mr - 500) < 0.5);
  CHECK(std::abs(mc - 500) < 0.5);
  CHECK(std::abs(std::sqrt(vr / (many.size() - 1)) - 10) < 0.5);
  CHECK(std::abs(std::sqrt(vc / (many.size() - 1)) - 10) < 0.5);
  for (const Pixel& p : jitter({0, 0}, 100, 10.0, 2, 50, 50)) {
    CHECK(p.row >= 0);
    CHECK(p.col >= 0);
  }
  CHECK_THROWS_AS(jitter({0, 0}, 0, 1.0, 1, 5, 5), ConfigError);
}
