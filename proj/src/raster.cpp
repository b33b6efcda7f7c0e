#include "dualroi/raster.hpp"

#include "dualroi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace dualroi {
namespace {

std::vector<double> gaussian_kernel(double sigma, int order) {
  const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
  std::vector<double> g(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += (g[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : g) v /= sum;
  if (order == 0) return g;
  std::vector<double> k(g.size());
  const double s2 = sigma * sigma;
  for (int i = -radius; i <= radius; ++i) {
    const double x = i;
    k[i + radius] = order == 1 ? -x / s2 * g[i + radius] : (x * x / (s2 * s2) - 1.0 / s2) * g[i + radius];
  }
  // Make the truncated kernels exact on polynomials: zero response to
  // constants, unit response to x (order 1) or x^2 / 2 (order 2).
  if (order == 2) {
    double mean = 0.0;
    for (double v : k) mean += v;
    mean /= static_cast<double>(k.size());
    for (double& v : k) v -= mean;
  }
  double moment = 0.0;
  for (int i = -radius; i <= radius; ++i) moment += (order == 1 ? -i : 0.5 * i * i) * k[i + radius];
  for (double& v : k) v /= moment;
  return k;
}

int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace

RasterD gaussian_filter(const RasterD& in, double sigma, int order_row, int order_col) {
  if (!(sigma > 0.0)) throw ConfigError("gaussian sigma must be > 0");
  const int R = static_cast<int>(in.rows()), C = static_cast<int>(in.cols());
  const auto kr = gaussian_kernel(sigma, order_row);
  const auto kc = gaussian_kernel(sigma, order_col);
  const int rr = static_cast<int>(kr.size() / 2), rc = static_cast<int>(kc.size() / 2);

  RasterD tmp(R, C);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int j = -rc; j <= rc; ++j) s += kc[j + rc] * in(r, mirror(c - j, C));
      tmp(r, c) = s;
    }
  RasterD out(R, C);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int i = -rr; i <= rr; ++i) s += kr[i + rr] * tmp(mirror(r - i, R), c);
      out(r, c) = s;
    }
  return out;
}

double bilinear(const RasterD& in, double row, double col, double outside) {
  const double r0 = std::floor(row), c0 = std::floor(col);
  const double fr = row - r0, fc = col - c0;
  auto px = [&](double r, double c) {
    const auto ri = static_cast<Eigen::Index>(r), ci = static_cast<Eigen::Index>(c);
    if (r < 0 || c < 0 || ri >= in.rows() || ci >= in.cols()) return outside;
    return in(ri, ci);
  };
  if (fr == 0.0 && fc == 0.0) return px(r0, c0);
  return (1 - fr) * ((1 - fc) * px(r0, c0) + fc * px(r0, c0 + 1)) +
         fr * ((1 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1));
}

RasterD to_double(const Raster16& in, double scale) { return in.cast<double>() * scale; }

Raster16 to_u16(const RasterD& in, double scale) {
  Raster16 out(in.rows(), in.cols());
  for (Eigen::Index i = 0; i < in.size(); ++i)
    out.data()[i] = static_cast<std::uint16_t>(std::clamp(std::round(in.data()[i] * scale), 0.0, 65535.0));
  return out;
}

void write_pgm(const std::string& path, const Raster16& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << image.cols() << ' ' << image.rows() << "\n65535\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(image.size()) * 2);
  for (Eigen::Index i = 0; i < image.size(); ++i) {
    buf[2 * i] = static_cast<unsigned char>(image.data()[i] >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(image.data()[i] & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing " + path);
}

Raster16 read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  int cols = 0, rows = 0, maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  in.get();
  if (magic != "P5" || cols <= 0 || rows <= 0 || maxval <= 0 || maxval > 65535)
    throw IoError(path + " is not a binary PGM");
  Raster16 img(rows, cols);
  const bool wide = maxval > 255;
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    if (wide) {
      const int hi = in.get(), lo = in.get();
      img.data()[i] = static_cast<std::uint16_t>((hi << 8) | lo);
    } else {
      img.data()[i] = static_cast<std::uint16_t>(in.get());
    }
  }
  if (!in) throw IoError(path + " is truncated");
  return img;
}

}  // namespace dualroi
