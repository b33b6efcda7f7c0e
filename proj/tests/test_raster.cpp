#include <doctest.h>

#include "dualroi/errors.hpp"
#include "dualroi/raster.hpp"
#include "dualroi/rng.hpp"

#include <filesystem>

using namespace dualroi;

TEST_CASE("rotate90 four times is the identity") {
  Raster16 a(5, 7);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = static_cast<std::uint16_t>(i * 37);
  Raster16 b = a;
  for (int k = 0; k < 4; ++k) b = rotate90(b, 1);
  CHECK(b == a);
  CHECK(rotate90(a, 1).rows() == 7);
  CHECK(rotate90(a, 2) == rotate90(rotate90(a, 1), 1));
  CHECK(rotate90(a, -1) == rotate90(a, 3));
  // counter-clockwise: top-right corner moves to top-left
  CHECK(rotate90(a, 1)(0, 0) == a(0, 6));
}

TEST_CASE("gaussian filter") {
  SUBCASE("constant stays constant, derivatives vanish") {
    RasterD c = RasterD::Constant(20, 20, 3.0);
    CHECK((gaussian_filter(c, 2.0).array() - 3.0).abs().maxCoeff() < 1e-12);
    CHECK(gaussian_filter(c, 2.0, 1, 0).array().abs().maxCoeff() < 1e-12);
    CHECK(gaussian_filter(c, 2.0, 0, 2).array().abs().maxCoeff() < 1e-12);
  }
  SUBCASE("first derivative of a ramp") {
    RasterD ramp(40, 40);
    for (int r = 0; r < 40; ++r)
      for (int c = 0; c < 40; ++c) ramp(r, c) = 0.5 * c;
    const RasterD d = gaussian_filter(ramp, 1.5, 0, 1);
    CHECK(d(20, 20) == doctest::Approx(0.5).epsilon(1e-3));
  }
  SUBCASE("commutes with rotation") {
    Rng rng = make_rng(3);
    std::normal_distribution<double> n;
    RasterD x(17, 23);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
    const RasterD a = rotate90(gaussian_filter(x, 1.7), 1);
    const RasterD b = gaussian_filter(rotate90(x, 1), 1.7);
    CHECK((a - b).array().abs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(gaussian_filter(RasterD::Zero(4, 4), 0.0), ConfigError);
}

TEST_CASE("bilinear") {
  RasterD a(2, 2);
  a << 0, 1, 2, 3;
  CHECK(bilinear(a, 0.5, 0.5) == doctest::Approx(1.5));
  CHECK(bilinear(a, 1, 1) == 3.0);
  CHECK(bilinear(a, -1, 0, -7) == -7.0);
}

TEST_CASE("pgm round trip") {
  Raster16 a(3, 4);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = static_cast<std::uint16_t>(i * 5000 + 7);
  const auto path = (std::filesystem::temp_directory_path() / "dualroi_rt.pgm").string();
  write_pgm(path, a);
  CHECK(read_pgm(path) == a);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_pgm(path), IoError);
}
