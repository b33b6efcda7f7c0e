#include "dualroi/detector.hpp"

#include "dualroi/errors.hpp"
#include "dualroi/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dualroi {

std::array<double, kFeatureCount> FeatureStack::at(int row, int col) const {
  std::array<double, kFeatureCount> f{};
  for (int k = 0; k < kFeatureCount; ++k) f[k] = planes[k](row, col);
  return f;
}

double mm_to_px(double mm, double spacing_microns) { return mm * 1000.0 / spacing_microns; }

RasterD log_units(const Raster16& log_pixels) {
  return log_pixels.cast<double>() * (std::log(65536.0) / 65535.0);
}

namespace {

struct Offset {
  int dr, dc;
  double inv_len;  // 1 / |o|
  double cos2, sin2;  // doubled radial angle
};

std::vector<Offset> disc_offsets(double r_out, double r_in) {
  std::vector<Offset> out;
  const int R = static_cast<int>(std::floor(r_out));
  for (int dr = -R; dr <= R; ++dr)
    for (int dc = -R; dc <= R; ++dc) {
      const double d2 = dr * dr + dc * dc;
      if (d2 == 0 || d2 > r_out * r_out || d2 < r_in * r_in) continue;
      const double len = std::sqrt(d2);
      const double c = dc / len, s = dr / len;
      out.push_back({dr, dc, 1.0 / len, c * c - s * s, 2 * c * s});
    }
  return out;
}

}  // namespace

FeatureStack compute_features(const RasterD& image, std::span<const double> scales_px, double spiculation_radius_px,
                              double convergence_radius_factor) {
  if (scales_px.size() < 2) throw ConfigError("compute_features needs at least two scales");
  const int R = static_cast<int>(image.rows()), C = static_cast<int>(image.cols());
  for (double s : scales_px)
    if (!(s > 0.0) || s >= std::min(R, C)) throw ConfigError("feature scale outside (0, image extent)");
  if (!(spiculation_radius_px > 1.0)) throw ConfigError("spiculation radius must exceed 1 px");

  const int S = static_cast<int>(scales_px.size());
  FeatureStack fs;
  fs.scales.assign(scales_px.begin(), scales_px.end());
  for (auto& p : fs.planes) p = RasterD::Zero(R, C);

  // focal response and best scale
  std::vector<RasterD> gr(S), gc(S);
  RasterD& blob = fs.planes[FeaturePlane::blob];
  RasterD& best = fs.planes[FeaturePlane::scale_index];
  blob.setConstant(-std::numeric_limits<double>::infinity());
  for (int s = 0; s < S; ++s) {
    const double sg = scales_px[s];
    const RasterD resp = -sg * sg * (gaussian_filter(image, sg, 2, 0) + gaussian_filter(image, sg, 0, 2));
    for (Eigen::Index i = 0; i < resp.size(); ++i)
      if (resp.data()[i] > blob.data()[i]) {
        blob.data()[i] = resp.data()[i];
        best.data()[i] = s;
      }
    gr[s] = gaussian_filter(image, sg, 1, 0);
    gc[s] = gaussian_filter(image, sg, 0, 1);
  }

  // line orientation field at the finest scale (at least one pixel)
  const double sl = std::max(1.0, scales_px[0]);
  const RasterD hrr = gaussian_filter(image, sl, 2, 0);
  const RasterD hcc = gaussian_filter(image, sl, 0, 2);
  const RasterD hrc = gaussian_filter(image, sl, 1, 1);
  RasterD w(R, C), c2(R, C), s2(R, C);
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double a = hcc.data()[i], b = hrc.data()[i], d = hrr.data()[i];
    const double disc = std::hypot(0.5 * (a - d), b);
    const double lmin = 0.5 * (a + d) - disc;
    w.data()[i] = std::max(0.0, -lmin);
    // along-line direction = eigenvector of the larger eigenvalue
    const double phi2 = std::atan2(2 * b, a - d);
    c2.data()[i] = std::cos(phi2);
    s2.data()[i] = std::sin(phi2);
  }

  std::vector<std::vector<Offset>> conv_discs(S);
  for (int s = 0; s < S; ++s) conv_discs[s] = disc_offsets(std::max(2.0, convergence_radius_factor * scales_px[s]), 0.5);
  const std::vector<Offset> spic_disc = disc_offsets(spiculation_radius_px, 2.0);
  const double cone = std::cos(std::numbers::pi / 4);  // |angle| < 22.5 deg after doubling

  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      if (image(r, c) <= 0.0) {
        for (auto& p : fs.planes) p(r, c) = 0.0;
        continue;
      }
      const int s = static_cast<int>(best(r, c));
      // gradient convergence: mean cosine between gradient and inward direction
      double acc = 0.0;
      int n = 0;
      for (const Offset& o : conv_discs[s]) {
        const int rr = r + o.dr, cc = c + o.dc;
        if (rr < 0 || cc < 0 || rr >= R || cc >= C) continue;
        ++n;
        const double g_r = gr[s](rr, cc), g_c = gc[s](rr, cc);
        const double mag = std::hypot(g_r, g_c);
        if (mag < 1e-12) continue;
        acc += -(g_r * o.dr + g_c * o.dc) * o.inv_len / mag;
      }
      fs.planes[FeaturePlane::convergence](r, c) = n > 0 ? acc / n : 0.0;

      // spiculation: radial alignment of line orientations
      // (strength-weighted, averaged over the disc so faint noise stays small)
      double res = 0.0, excess = 0.0;
      int m = 0;
      for (const Offset& o : spic_disc) {
        const int rr = r + o.dr, cc = c + o.dc;
        if (rr < 0 || cc < 0 || rr >= R || cc >= C) continue;
        ++m;
        const double wt = w(rr, cc);
        if (wt == 0.0) continue;
        const double align = c2(rr, cc) * o.cos2 + s2(rr, cc) * o.sin2;
        res += wt * align;
        excess += wt * ((align > cone ? 1.0 : 0.0) - 0.25);
      }
      fs.planes[FeaturePlane::spiculation_resultant](r, c) = m > 0 ? res / m : 0.0;
      fs.planes[FeaturePlane::spiculation_excess](r, c) = m > 0 ? excess / m : 0.0;
    }
  return fs;
}

FeatureStack compute_features(const Image& log_image, const FeatureOptions& options) {
  std::vector<double> px;
  for (double mm : options.scales_mm) px.push_back(mm_to_px(mm, log_image.spacing_microns));
  return compute_features(log_units(log_image.pixels), px, mm_to_px(options.spiculation_radius_mm, log_image.spacing_microns),
                          options.convergence_radius_factor);
}

// ---------------------------------------------------------------------------

std::string to_string(SecondaryKind k) { return k == SecondaryKind::contralateral ? "contralateral" : "prior"; }

SecondaryKind parse_secondary(const std::string& s) {
  if (s == "contralateral") return SecondaryKind::contralateral;
  if (s == "prior") return SecondaryKind::prior;
  throw ConfigError("unknown secondary kind '" + s + "'");
}

std::vector<Candidate> nonmax_suppress(const RasterD& map, double radius_px, double threshold) {
  if (!(radius_px > 0.0)) throw ConfigError("nms radius must be > 0");
  const int R = static_cast<int>(map.rows()), C = static_cast<int>(map.cols());
  std::vector<Candidate> peaks;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      const double v = map(r, c);
      if (!(v >= threshold)) continue;
      bool strict = true;
      for (int dr = -1; dr <= 1 && strict; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if ((dr == 0 && dc == 0) || r + dr < 0 || c + dc < 0 || r + dr >= R || c + dc >= C) continue;
          if (map(r + dr, c + dc) >= v) {
            strict = false;
            break;
          }
        }
      if (!strict) continue;
      Candidate cand;
      cand.center = {r, c};
      cand.score = v;
      peaks.push_back(cand);
    }
  std::stable_sort(peaks.begin(), peaks.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  std::vector<Candidate> kept;
  const double r2 = radius_px * radius_px;
  for (auto& p : peaks) {
    bool ok = true;
    for (const auto& k : kept) {
      const double dr = p.center.row - k.center.row, dc = p.center.col - k.center.col;
      if (dr * dr + dc * dc <= r2) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(std::move(p));
  }
  return kept;
}

CandidateLabel label_for(const Image& image, Pixel center, double hit_radius_cm) {
  const double limit = hit_radius_cm * image.px_per_cm();
  for (const auto& t : image.truth)
    if (t.malignant && std::hypot(center.row - t.center.row, center.col - t.center.col) <= limit)
      return CandidateLabel::malignant;
  return CandidateLabel::normal;
}

// ---------------------------------------------------------------------------

std::vector<PixelSample> sample_pixels(const FeatureStack& stack, const RasterD& image, const Image& truth,
                                       int negatives, Rng& rng, double positive_fraction) {
  std::vector<PixelSample> out;
  const int R = stack.rows(), C = stack.cols();
  const double hit = 0.7 * truth.px_per_cm();
  for (const auto& t : truth.truth) {
    if (!t.malignant) continue;
    const double rad = positive_fraction * t.radius_px;
    for (int r = static_cast<int>(std::floor(t.center.row - rad)); r <= std::ceil(t.center.row + rad); ++r)
      for (int c = static_cast<int>(std::floor(t.center.col - rad)); c <= std::ceil(t.center.col + rad); ++c) {
        if (r < 0 || c < 0 || r >= R || c >= C || image(r, c) <= 0) continue;
        if (std::hypot(r - t.center.row, c - t.center.col) > rad) continue;
        out.push_back({stack.at(r, c), 1});
      }
  }
  std::uniform_int_distribution<int> ur(0, R - 1), uc(0, C - 1);
  int drawn = 0;
  for (int attempt = 0; drawn < negatives && attempt < 50 * negatives; ++attempt) {
    const int r = ur(rng), c = uc(rng);
    if (image(r, c) <= 0) continue;
    bool near = false;
    for (const auto& t : truth.truth)
      if (t.malignant && std::hypot(r - t.center.row, c - t.center.col) <= hit) near = true;
    if (near) continue;
    out.push_back({stack.at(r, c), 0});
    ++drawn;
  }
  return out;
}

RandomForest train_pixel_classifier(std::span<const PixelSample> samples, const ForestParams& params,
                                    std::uint64_t seed) {
  RowMatrix X(samples.size(), kFeatureCount);
  std::vector<int> y(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (int k = 0; k < kFeatureCount; ++k) X(i, k) = samples[i].features[k];
    y[i] = samples[i].label;
  }
  RandomForest f;
  f.fit(X, y, params, seed);
  return f;
}

RasterD likelihood_map(const RandomForest& forest, const FeatureStack& stack, const RasterD& image) {
  RasterD out = RasterD::Zero(stack.rows(), stack.cols());
  for (int r = 0; r < stack.rows(); ++r)
    for (int c = 0; c < stack.cols(); ++c) {
      if (image(r, c) <= 0) continue;
      const auto f = stack.at(r, c);
      out(r, c) = forest.predict(f.data());
    }
  return out;
}

// ---------------------------------------------------------------------------

int patch_side_px(double side_cm, double spacing_microns) {
  if (!(side_cm > 0) || !(spacing_microns > 0)) throw ConfigError("patch side and spacing must be > 0");
  return static_cast<int>(std::lround(side_cm * 10000.0 / spacing_microns));
}

RasterD extract_patch(const RasterD& image, Pixel center, int side_px) {
  RasterD out = RasterD::Zero(side_px, side_px);
  const int r0 = center.row - side_px / 2, c0 = center.col - side_px / 2;
  const int R = static_cast<int>(image.rows()), C = static_cast<int>(image.cols());
  const int rb = std::max(0, r0), re = std::min(R, r0 + side_px);
  const int cb = std::max(0, c0), ce = std::min(C, c0 + side_px);
  if (rb < re && cb < ce) out.block(rb - r0, cb - c0, re - rb, ce - cb) = image.block(rb, cb, re - rb, ce - cb);
  return out;
}

AugmentationPlan::AugmentationPlan(const PatchMeta& meta, SampleKind kind, std::uint64_t seed)
    : meta_(meta), kind_(kind), seed_(seed) {}

int AugmentationPlan::size() const {
  return kind_ == SampleKind::positive ? (1 + kTranslations + kScalings) * kRotations : kRotations;
}

double AugmentationPlan::translation_range_px() const {
  return meta_.translation_px >= 0 ? meta_.translation_px : 25.0 * 200.0 / meta_.spacing_microns;
}

double AugmentationPlan::corner_range_px() const {
  return meta_.corner_px >= 0 ? meta_.corner_px : 30.0 * 200.0 / meta_.spacing_microns;
}

PatchSpec AugmentationPlan::spec(int i) const {
  if (i < 0 || i >= size()) throw ConfigError("augmentation index out of range");
  PatchSpec p;
  p.rotation = i % kRotations;
  const int v = i / kRotations;
  if (v == 0) return p;
  Rng rng = make_rng(seed_, {static_cast<std::uint64_t>(v)});
  auto u = [&](double range) {
    return range > 0 ? std::uniform_real_distribution<double>(-range, range)(rng) : 0.0;
  };
  if (v <= kTranslations) {
    p.variant = VariantKind::translation;
    const double t = translation_range_px();
    p.shift = {std::round(u(t)), std::round(u(t))};
    return p;
  }
  p.variant = VariantKind::scaling;
  // bounding box of the lesion, at least 1 cm on a side
  const double half = std::max(meta_.lesion_radius_px, 0.5 * 10000.0 / meta_.spacing_microns);
  const double k = corner_range_px();
  const double top = u(k), left = u(k), bottom = u(k), right = u(k);
  p.scale_row = std::clamp((2 * half + bottom - top) / (2 * half), 0.5, 2.0);
  p.scale_col = std::clamp((2 * half + right - left) / (2 * half), 0.5, 2.0);
  p.shift = {0.5 * (top + bottom), 0.5 * (left + right)};
  return p;
}

std::vector<PatchSpec> augment(const PatchMeta& meta, SampleKind kind, std::uint64_t seed) {
  AugmentationPlan plan(meta, kind, seed);
  std::vector<PatchSpec> out;
  out.reserve(plan.size());
  for (int i = 0; i < plan.size(); ++i) out.push_back(plan.spec(i));
  return out;
}

RasterD materialize(const RasterD& image, const PatchMeta& meta, const PatchSpec& spec, int side_px) {
  RasterD patch;
  const bool integral = spec.shift.row == std::round(spec.shift.row) && spec.shift.col == std::round(spec.shift.col);
  if (spec.scale_row == 1.0 && spec.scale_col == 1.0 && integral) {
    patch = extract_patch(image, {meta.center.row + static_cast<int>(spec.shift.row),
                                  meta.center.col + static_cast<int>(spec.shift.col)},
                          side_px);
  } else {
    patch.resize(side_px, side_px);
    const double half = side_px / 2;
    for (int i = 0; i < side_px; ++i)
      for (int j = 0; j < side_px; ++j) {
        const double r = meta.center.row + spec.shift.row + (i - half + 0.5) * spec.scale_row - 0.5;
        const double c = meta.center.col + spec.shift.col + (j - half + 0.5) * spec.scale_col - 0.5;
        patch(i, j) = bilinear(image, r, c, 0.0);
      }
  }
  return rotate90(patch, spec.rotation);
}

}  // namespace dualroi
