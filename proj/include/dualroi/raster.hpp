#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace dualroi {

/// Row-major 2-D raster; row index first, as in image coordinates.
template <class Scalar>
using Raster = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Raster16 = Raster<std::uint16_t>;
using RasterD = Raster<double>;
using Mask = Raster<std::uint8_t>;

/// Integer pixel location.
struct Pixel {
  int row = 0;
  int col = 0;

  friend bool operator==(const Pixel&, const Pixel&) = default;
  friend Pixel operator+(Pixel a, Pixel b) { return {a.row + b.row, a.col + b.col}; }
  friend Pixel operator-(Pixel a, Pixel b) { return {a.row - b.row, a.col - b.col}; }
};

/// Sub-pixel location.
struct Point {
  double row = 0.0;
  double col = 0.0;
};

inline double distance(Point a, Point b) { return std::hypot(a.row - b.row, a.col - b.col); }

template <class Scalar>
bool in_bounds(const Raster<Scalar>& r, int row, int col) {
  return row >= 0 && col >= 0 && row < r.rows() && col < r.cols();
}

/// Rotates counter-clockwise by quarter_turns * 90 degrees.
template <class Scalar>
Raster<Scalar> rotate90(const Raster<Scalar>& in, int quarter_turns) {
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return in;
  const Eigen::Index R = in.rows(), C = in.cols();
  Raster<Scalar> out(q == 2 ? R : C, q == 2 ? C : R);
  for (Eigen::Index r = 0; r < R; ++r)
    for (Eigen::Index c = 0; c < C; ++c) {
      if (q == 1) out(C - 1 - c, r) = in(r, c);
      else if (q == 2) out(R - 1 - r, C - 1 - c) = in(r, c);
      else out(c, R - 1 - r) = in(r, c);
    }
  return out;
}

/// Separable Gaussian derivative filter with mirrored borders.
/// `order_row`/`order_col` in {0,1,2} select the derivative along each axis.
RasterD gaussian_filter(const RasterD& in, double sigma, int order_row = 0, int order_col = 0);

/// Bilinear sample at (row, col); `outside` is returned beyond the raster.
double bilinear(const RasterD& in, double row, double col, double outside = 0.0);

RasterD to_double(const Raster16& in, double scale = 1.0 / 65535.0);
Raster16 to_u16(const RasterD& in, double scale = 65535.0);

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples).
void write_pgm(const std::string& path, const Raster16& image);
Raster16 read_pgm(const std::string& path);

}  // namespace dualroi
