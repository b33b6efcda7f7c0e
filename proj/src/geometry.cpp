#include "dualroi/geometry.hpp"

#include "dualroi/errors.hpp"
#include "dualroi/rng.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>

namespace dualroi {

namespace {
constexpr double kDeg = std::numbers::pi / 180.0;
}

double Line::distance(double row, double col) const {
  return col * std::cos(theta_deg * kDeg) + row * std::sin(theta_deg * kDeg) - rho;
}

int otsu_threshold(const Raster16& pixels) {
  std::vector<double> hist(65536, 0.0);
  for (Eigen::Index i = 0; i < pixels.size(); ++i) hist[pixels.data()[i]] += 1.0;
  const double total = static_cast<double>(pixels.size());
  double sum_all = 0.0;
  for (int v = 0; v < 65536; ++v) sum_all += v * hist[v];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int threshold = -1;
  for (int t = 0; t < 65535; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      threshold = t;
    }
  }
  return threshold;
}

namespace {

// Labels 4-connected components of `on`; returns per-pixel labels (0 = off)
// and the component sizes indexed by label.
std::pair<Raster<int>, std::vector<int>> components(const Mask& on) {
  const int R = static_cast<int>(on.rows()), C = static_cast<int>(on.cols());
  Raster<int> label = Raster<int>::Zero(R, C);
  std::vector<int> sizes{0};
  std::deque<Pixel> queue;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      if (!on(r, c) || label(r, c)) continue;
      const int id = static_cast<int>(sizes.size());
      sizes.push_back(0);
      label(r, c) = id;
      queue.push_back({r, c});
      while (!queue.empty()) {
        const Pixel p = queue.front();
        queue.pop_front();
        ++sizes[id];
        const Pixel nb[4] = {{p.row - 1, p.col}, {p.row + 1, p.col}, {p.row, p.col - 1}, {p.row, p.col + 1}};
        for (const Pixel& n : nb)
          if (n.row >= 0 && n.col >= 0 && n.row < R && n.col < C && on(n.row, n.col) && !label(n.row, n.col)) {
            label(n.row, n.col) = id;
            queue.push_back(n);
          }
      }
    }
  return {label, sizes};
}

}  // namespace

Mask segment_breast(const Raster16& log_pixels) {
  const int t = otsu_threshold(log_pixels);
  if (t < 0) throw SegmentationError("segmentation: image has a single grey level");
  Mask fg = (log_pixels.array() > t).cast<std::uint8_t>();
  auto [label, sizes] = components(fg);
  if (sizes.size() < 2) throw SegmentationError("segmentation: empty foreground");
  const int keep = static_cast<int>(std::max_element(sizes.begin() + 1, sizes.end()) - sizes.begin());
  Mask mask = (label.array() == keep).cast<std::uint8_t>();

  // fill holes: background components that do not touch the image border
  Mask bg = (mask.array() == 0).cast<std::uint8_t>();
  auto [bl, bs] = components(bg);
  std::vector<bool> outer(bs.size(), false);
  const int R = static_cast<int>(mask.rows()), C = static_cast<int>(mask.cols());
  for (int r = 0; r < R; ++r) outer[bl(r, 0)] = outer[bl(r, C - 1)] = true;
  for (int c = 0; c < C; ++c) outer[bl(0, c)] = outer[bl(R - 1, c)] = true;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      if (bl(r, c) && !outer[bl(r, c)]) mask(r, c) = 1;
  return mask;
}

namespace {

struct Box {
  int r0, r1, c0, c1;  // inclusive
};

Box bounding_box(const Mask& m) {
  Box b{static_cast<int>(m.rows()), -1, static_cast<int>(m.cols()), -1};
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c)
      if (m(r, c)) {
        b.r0 = std::min(b.r0, r);
        b.r1 = std::max(b.r1, r);
        b.c0 = std::min(b.c0, c);
        b.c1 = std::max(b.c1, c);
      }
  if (b.r1 < 0) throw SegmentationError("empty mask");
  return b;
}

Mask erode(const Mask& m, int steps) {
  Mask cur = m;
  const int R = static_cast<int>(m.rows()), C = static_cast<int>(m.cols());
  for (int s = 0; s < steps; ++s) {
    Mask next = cur;
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        if (!cur(r, c)) continue;
        // the image border is not a tissue edge
        if ((r > 0 && !cur(r - 1, c)) || (r + 1 < R && !cur(r + 1, c)) || (c > 0 && !cur(r, c - 1)) ||
            (c + 1 < C && !cur(r, c + 1)))
          next(r, c) = 0;
      }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace

Line chest_border(const Mask& mask) {
  return {static_cast<double>(bounding_box(mask).c0), 0.0};
}

PectoralFit fit_pectoral(const RasterD& log_image, const Mask& mask, const HoughOptions& o) {
  const Box box = bounding_box(mask);
  const int r_end = box.r0 + static_cast<int>(std::lround(o.region_fraction * (box.r1 - box.r0 + 1)));
  const int c_end = box.c0 + static_cast<int>(std::lround(o.region_fraction * (box.c1 - box.c0 + 1)));
  const Mask inner = erode(mask, o.border_margin_px);
  const RasterD gr = gaussian_filter(log_image, o.gradient_sigma_px, 1, 0);
  const RasterD gc = gaussian_filter(log_image, o.gradient_sigma_px, 0, 1);

  struct Edge {
    int r, c;
    double gr, gc, mag;
  };
  std::vector<Edge> edges;
  double peak = 0.0;
  for (int r = box.r0; r < r_end; ++r)
    for (int c = box.c0; c < c_end; ++c) {
      if (!inner(r, c)) continue;
      const double m = std::hypot(gr(r, c), gc(r, c));
      edges.push_back({r, c, gr(r, c), gc(r, c), m});
      peak = std::max(peak, m);
    }
  std::erase_if(edges, [&](const Edge& e) { return e.mag < o.edge_fraction * peak || e.mag == 0.0; });

  PectoralFit fit;
  fit.line = chest_border(mask);
  fit.fallback = true;
  if (edges.empty()) return fit;

  const int n_theta = static_cast<int>(std::lround(o.theta_max_deg - o.theta_min_deg)) + 1;
  const int rho_max = static_cast<int>(std::ceil(std::hypot(mask.rows(), mask.cols())));
  std::vector<int> acc(static_cast<std::size_t>(n_theta) * (2 * rho_max + 1), 0);
  const double cos_tol = std::cos(20.0 * kDeg);
  for (const Edge& e : edges)
    for (int t = 0; t < n_theta; ++t) {
      const double th = (o.theta_min_deg + t) * kDeg;
      const double ct = std::cos(th), st = std::sin(th);
      // the gradient must be roughly normal to the candidate line
      if (std::abs(e.gc * ct + e.gr * st) < cos_tol * e.mag) continue;
      const int rho = static_cast<int>(std::lround(e.c * ct + e.r * st));
      ++acc[static_cast<std::size_t>(t) * (2 * rho_max + 1) + rho + rho_max];
    }
  const auto best = std::max_element(acc.begin(), acc.end());
  fit.votes = *best;
  if (fit.votes < o.min_votes) return fit;
  const auto at = static_cast<int>(best - acc.begin());
  Line coarse{static_cast<double>(at % (2 * rho_max + 1) - rho_max), o.theta_min_deg + at / (2 * rho_max + 1)};

  // total least squares over the edge pixels near the coarse line
  double sr = 0, sc = 0, n = 0;
  for (const Edge& e : edges)
    if (std::abs(coarse.distance(e.r, e.c)) <= o.refine_band_px) {
      sr += e.r;
      sc += e.c;
      n += 1;
    }
  fit.line = coarse;
  fit.fallback = false;
  if (n >= 3) {
    const double mr = sr / n, mc = sc / n;
    double srr = 0, scc = 0, src = 0;
    for (const Edge& e : edges)
      if (std::abs(coarse.distance(e.r, e.c)) <= o.refine_band_px) {
        srr += (e.r - mr) * (e.r - mr);
        scc += (e.c - mc) * (e.c - mc);
        src += (e.r - mr) * (e.c - mc);
      }
    // normal = eigenvector of the smaller eigenvalue of the scatter matrix
    const double phi = 0.5 * std::atan2(2 * src, scc - srr);  // principal (along-line) angle
    double theta = phi / kDeg + 90.0;                          // normal angle
    while (theta > 90.0) theta -= 180.0;
    while (theta <= -90.0) theta += 180.0;
    if (std::abs(theta - coarse.theta_deg) <= 3.0) {
      const double rho = mc * std::cos(theta * kDeg) + mr * std::sin(theta * kDeg);
      fit.line = {rho, theta};
    }
  }
  return fit;
}

Landmarks landmarks_from(const Mask& mask, const Line& line) {
  const int R = static_cast<int>(mask.rows()), C = static_cast<int>(mask.cols());
  struct P {
    int r, c;
    double d;
  };
  std::vector<P> contour;
  double best = -1e300;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      if (!mask(r, c)) continue;
      const bool edge = (r > 0 && !mask(r - 1, c)) || (r + 1 < R && !mask(r + 1, c)) ||
                        (c > 0 && !mask(r, c - 1)) || (c + 1 < C && !mask(r, c + 1));
      if (!edge) continue;
      const double d = line.distance(r, c);
      contour.push_back({r, c, d});
      best = std::max(best, d);
    }
  if (contour.empty()) throw SegmentationError("mask has no contour");
  // average the near-tied extreme pixels so a flat apex gives its centre
  double mr = 0, mc = 0, n = 0;
  for (const P& p : contour)
    if (p.d >= best - 0.5) {
      mr += p.r;
      mc += p.c;
      n += 1;
    }
  mr /= n;
  mc /= n;
  Landmarks lm;
  lm.line = line;
  lm.front = {static_cast<int>(std::lround(mr)), static_cast<int>(std::lround(mc))};
  lm.p1 = std::clamp(lm.front.row, 0, R - 1);
  const double foot = mc - line.distance(mr, mc) * std::cos(line.theta_deg * kDeg);
  lm.p2 = std::clamp(static_cast<int>(std::lround(foot)), 0, C - 1);
  return lm;
}

Landmarks extract_landmarks(const Image& log_image, const HoughOptions& options) {
  const Mask mask = segment_breast(log_image.pixels);
  if (log_image.view != View::mlo) return landmarks_from(mask, chest_border(mask));
  const RasterD img = log_image.pixels.cast<double>() * (std::log(65536.0) / 65535.0);
  const PectoralFit fit = fit_pectoral(img, mask, options);
  Landmarks lm = landmarks_from(mask, fit.line);
  lm.pectoral = !fit.fallback;
  lm.fallback = fit.fallback;
  return lm;
}

MappedLocation map_location(Pixel q, const Landmarks& src, const Landmarks& dst, int rows, int cols) {
  MappedLocation m;
  m.source = q;
  m.target = {q.row - src.p1 + dst.p1, q.col - src.p2 + dst.p2};
  m.clipped = {std::clamp(m.target.row, 0, rows - 1), std::clamp(m.target.col, 0, cols - 1)};
  m.was_clipped = !(m.clipped == m.target);
  return m;
}

std::vector<Pixel> jitter(Pixel q, int n, double sigma_px, std::uint64_t seed, int rows, int cols) {
  if (n < 1) throw ConfigError("jitter needs n >= 1");
  if (sigma_px < 0) throw ConfigError("jitter sigma must be >= 0");
  std::vector<Pixel> out;
  out.reserve(n);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const double dr = sigma_px * g(rng), dc = sigma_px * g(rng);
    out.push_back({std::clamp(static_cast<int>(std::lround(q.row + dr)), 0, rows - 1),
                   std::clamp(static_cast<int>(std::lround(q.col + dc)), 0, cols - 1)});
  }
  return out;
}

Raster16 landmark_overlay(const Raster16& log_pixels, const Landmarks& lm) {
  Raster16 out = log_pixels;
  const int R = static_cast<int>(out.rows()), C = static_cast<int>(out.cols());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      if (std::abs(lm.line.distance(r, c)) < 0.5) out(r, c) = 65535;
  auto mark = [&](Pixel p) {
    for (int d = -3; d <= 3; ++d) {
      if (in_bounds(out, p.row + d, p.col)) out(p.row + d, p.col) = 65535;
      if (in_bounds(out, p.row, p.col + d)) out(p.row, p.col + d) = 65535;
    }
  };
  mark(lm.front);
  mark({lm.p1, lm.p2});
  return out;
}

}  // namespace dualroi
