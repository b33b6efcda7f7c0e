#pragma once

// Brute-force reference implementations used only by tests. None of these
// share code with the library paths they check.

#include "dualroi/raster.hpp"
#include "dualroi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using dualroi::Tensor;

inline Tensor random_tensor(dualroi::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = u(rng);
  return t;
}

/// Six nested loops over (k, oy, ox, c, ky, kx).
inline Tensor conv_loops(const Tensor& in, const Tensor& w, const Tensor& b, int stride) {
  const std::size_t C = in.shape[0], H = in.shape[1], W = in.shape[2];
  const std::size_t K = w.shape[0], k = w.shape[2];
  const std::size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  Tensor out({K, Ho, Wo});
  for (std::size_t kk = 0; kk < K; ++kk)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double s = b.data[kk];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
              s += w.data[((kk * C + c) * k + ky) * k + kx] * in.data[(c * H + oy * stride + ky) * W + ox * stride + kx];
        out.data[(kk * Ho + oy) * Wo + ox] = s;
      }
  return out;
}

inline Tensor pool_loops(const Tensor& in, int window, int stride) {
  const std::size_t C = in.shape[0], H = in.shape[1], W = in.shape[2];
  const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
  Tensor out({C, Ho, Wo});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double m = -INFINITY;
        for (int dy = 0; dy < window; ++dy)
          for (int dx = 0; dx < window; ++dx)
            m = std::max(m, in.data[(c * H + oy * stride + dy) * W + ox * stride + dx]);
        out.data[(c * Ho + oy) * Wo + ox] = m;
      }
  return out;
}

/// Central finite-difference gradient of a scalar function of `x`.
inline std::vector<double> finite_difference(const std::function<double(const Tensor&)>& f, Tensor x,
                                             double eps = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data[i];
    x.data[i] = orig + eps;
    const double up = f(x);
    x.data[i] = orig - eps;
    const double down = f(x);
    x.data[i] = orig;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

/// max |a-b| / max(1e-8, max|b|) style relative error over a whole vector.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 1e-8;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return num / den;
}

/// All-pairs Mann-Whitney count: P(s+ > s-) + 0.5 P(tie).
inline double auc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

}  // namespace oracle

namespace oracle {

/// ROC points by thresholding at every distinct score, O(n^2).
inline void roc_points(const std::vector<double>& s, const std::vector<int>& y, std::vector<double>& fx,
                       std::vector<double>& ty) {
  std::vector<double> th(s);
  std::sort(th.begin(), th.end(), std::greater<>());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  double P = 0, N = 0;
  for (int v : y) (v ? P : N) += 1;
  fx.assign(1, 0.0);
  ty.assign(1, 0.0);
  for (double t : th) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) (y[i] ? tp : fp) += 1;
    fx.push_back(fp / N);
    ty.push_back(tp / P);
  }
}

/// Area over [lo, hi] of the piecewise-linear curve, by integrating each
/// segment's linear function analytically, divided by the width.
inline double pauc_trapezoid(const std::vector<double>& fx, const std::vector<double>& ty, double lo, double hi) {
  double area = 0;
  for (std::size_t i = 1; i < fx.size(); ++i) {
    const double a = fx[i - 1], b = fx[i];
    if (b == a) continue;
    const double l = std::max(a, lo), r = std::min(b, hi);
    if (r <= l) continue;
    // integral of ty[i-1] + k (x - a) from l to r
    const double k = (ty[i] - ty[i - 1]) / (b - a);
    area += ty[i - 1] * (r - l) + 0.5 * k * ((r - a) * (r - a) - (l - a) * (l - a));
  }
  return area / (hi - lo);
}

// Same definition as nonmax_suppress, written as the plain O(n^2) scan.
inline std::vector<dualroi::Pixel> nms(const dualroi::RasterD& m, double radius, double thr) {
  struct P {
    double v;
    int r, c;
  };
  std::vector<P> all;
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) {
      bool strict = m(r, c) >= thr;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc)
          if ((dr || dc) && dualroi::in_bounds(m, r + dr, c + dc) && m(r + dr, c + dc) >= m(r, c)) strict = false;
      if (strict) all.push_back({m(r, c), r, c});
    }
  std::vector<dualroi::Pixel> kept;
  std::vector<bool> dead(all.size(), false);
  while (true) {
    int best = -1;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (dead[i]) continue;
      if (best < 0 || all[i].v > all[best].v ||
          (all[i].v == all[best].v && std::make_pair(all[i].r, all[i].c) < std::make_pair(all[best].r, all[best].c)))
        best = static_cast<int>(i);
    }
    if (best < 0) break;
    kept.push_back({all[best].r, all[best].c});
    for (std::size_t i = 0; i < all.size(); ++i)
      if (std::hypot(all[i].r - all[best].r, all[i].c - all[best].c) <= radius) dead[i] = true;
  }
  return kept;
}

}  // namespace oracle
