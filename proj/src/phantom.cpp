#include "dualroi/phantom.hpp"

#include "dualroi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

namespace dualroi {

double Range::sample(Rng& rng) const {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double Range::density(double x) const {
  if (!(hi > lo) || x < lo || x > hi) return 0.0;
  return 1.0 / (hi - lo);
}

void GenConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("phantom config: ") + what);
  };
  require(n_cases > 0, "n_cases must be > 0");
  require(image_size >= 64, "image_size must be >= 64");
  require(spacing_microns > 0.0, "spacing_microns must be > 0");
  require(lesion_prevalence >= 0.0 && lesion_prevalence < 1.0, "lesion_prevalence must lie in [0,1)");
  require(missing_prior_fraction >= 0.0 && missing_prior_fraction <= 1.0, "missing_prior_fraction outside [0,1]");
  require(second_prior_fraction >= 0.0 && second_prior_fraction <= 1.0, "second_prior_fraction outside [0,1]");
  require(skip_fraction >= 0.0 && skip_fraction < 1.0, "skip_fraction outside [0,1)");
  require(min_distractors >= 0 && max_distractors >= min_distractors, "bad distractor counts");
  require(unpaired_distractor_fraction >= 0.0 && unpaired_distractor_fraction <= 1.0,
          "unpaired_distractor_fraction outside [0,1]");
  require(asymmetry_strength >= 0.0 && asymmetry_strength <= 1.0, "asymmetry_strength outside [0,1]");
  require(growth_rate >= 0.0 && growth_rate <= 1.0, "growth_rate outside [0,1]");
  for (const auto* m : {&malignant, &distractor}) {
    require(m->radius_mm.lo > 0.0 && m->radius_mm.hi >= m->radius_mm.lo, "bad radius range");
    require(m->contrast.lo > 0.0 && m->contrast.hi >= m->contrast.lo, "bad contrast range");
    require(m->spiculated_probability >= 0.0 && m->spiculated_probability <= 1.0, "bad spiculation probability");
  }
  require(counterpart_ratio.lo > 0.0 && counterpart_ratio.hi > counterpart_ratio.lo, "bad counterpart ratio");
}

namespace {

void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
void from_json(const nlohmann::json& j, Range& r) {
  r.lo = j.at(0).get<double>();
  r.hi = j.at(1).get<double>();
}
void to_json(nlohmann::json& j, const AppearanceModel& m) {
  nlohmann::json r, c;
  to_json(r, m.radius_mm);
  to_json(c, m.contrast);
  j = {{"radius_mm", r}, {"contrast", c}, {"spiculated_probability", m.spiculated_probability}};
}
void from_json(const nlohmann::json& j, AppearanceModel& m) {
  if (j.contains("radius_mm")) from_json(j["radius_mm"], m.radius_mm);
  if (j.contains("contrast")) from_json(j["contrast"], m.contrast);
  m.spiculated_probability = j.value("spiculated_probability", m.spiculated_probability);
}

}  // namespace

void to_json(nlohmann::json& j, const GenConfig& c) {
  nlohmann::json mal, dis, ratio;
  to_json(mal, c.malignant);
  to_json(dis, c.distractor);
  to_json(ratio, c.counterpart_ratio);
  j = {{"n_cases", c.n_cases},
       {"image_size", c.image_size},
       {"spacing_microns", c.spacing_microns},
       {"lesion_prevalence", c.lesion_prevalence},
       {"missing_prior_fraction", c.missing_prior_fraction},
       {"second_prior_fraction", c.second_prior_fraction},
       {"skip_fraction", c.skip_fraction},
       {"min_distractors", c.min_distractors},
       {"max_distractors", c.max_distractors},
       {"unpaired_distractor_fraction", c.unpaired_distractor_fraction},
       {"asymmetry_strength", c.asymmetry_strength},
       {"growth_rate", c.growth_rate},
       {"malignant", mal},
       {"distractor", dis},
       {"counterpart_ratio", ratio},
       {"registration_noise_px", c.registration_noise_px},
       {"texture_fine_std", c.texture_fine_std},
       {"texture_coarse_std", c.texture_coarse_std},
       {"texture_fine_sigma_mm", c.texture_fine_sigma_mm},
       {"texture_coarse_sigma_mm", c.texture_coarse_sigma_mm}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  c.n_cases = j.value("n_cases", c.n_cases);
  c.image_size = j.value("image_size", c.image_size);
  c.spacing_microns = j.value("spacing_microns", c.spacing_microns);
  c.lesion_prevalence = j.value("lesion_prevalence", c.lesion_prevalence);
  c.missing_prior_fraction = j.value("missing_prior_fraction", c.missing_prior_fraction);
  c.second_prior_fraction = j.value("second_prior_fraction", c.second_prior_fraction);
  c.skip_fraction = j.value("skip_fraction", c.skip_fraction);
  c.min_distractors = j.value("min_distractors", c.min_distractors);
  c.max_distractors = j.value("max_distractors", c.max_distractors);
  c.unpaired_distractor_fraction = j.value("unpaired_distractor_fraction", c.unpaired_distractor_fraction);
  c.asymmetry_strength = j.value("asymmetry_strength", c.asymmetry_strength);
  c.growth_rate = j.value("growth_rate", c.growth_rate);
  if (j.contains("malignant")) from_json(j["malignant"], c.malignant);
  if (j.contains("distractor")) from_json(j["distractor"], c.distractor);
  if (j.contains("counterpart_ratio")) from_json(j["counterpart_ratio"], c.counterpart_ratio);
  c.registration_noise_px = j.value("registration_noise_px", c.registration_noise_px);
  c.texture_fine_std = j.value("texture_fine_std", c.texture_fine_std);
  c.texture_coarse_std = j.value("texture_coarse_std", c.texture_coarse_std);
  c.texture_fine_sigma_mm = j.value("texture_fine_sigma_mm", c.texture_fine_sigma_mm);
  c.texture_coarse_sigma_mm = j.value("texture_coarse_sigma_mm", c.texture_coarse_sigma_mm);
}

// ---------------------------------------------------------------------------
// latent model

LatentStructure sample_latent(const GenConfig& config, bool malignant, Rng& rng) {
  const AppearanceModel& m = malignant ? config.malignant : config.distractor;
  LatentStructure s;
  s.malignant = malignant;
  s.radius_mm = m.radius_mm.sample(rng);
  s.contrast = m.contrast.sample(rng);
  s.spiculated = std::bernoulli_distribution(m.spiculated_probability)(rng);
  const double jitter = config.counterpart_ratio.sample(rng);
  if (malignant) {
    s.contralateral_ratio = (1.0 - config.asymmetry_strength) * jitter;
  } else {
    const bool unpaired = std::bernoulli_distribution(config.unpaired_distractor_fraction)(rng);
    s.contralateral_ratio = unpaired ? 0.0 : jitter;
  }
  return s;
}

namespace {

double appearance_likelihood(const AppearanceModel& m, const LatentStructure& s) {
  return m.radius_mm.density(s.radius_mm) * m.contrast.density(s.contrast) *
         (s.spiculated ? m.spiculated_probability : 1.0 - m.spiculated_probability);
}

// Zero ratios are a point mass; comparing masses with masses and densities
// with densities keeps the likelihood ratio well defined.
double ratio_likelihood(const GenConfig& c, const LatentStructure& s, bool malignant) {
  const bool zero = s.contralateral_ratio == 0.0;
  if (malignant) {
    const double keep = 1.0 - c.asymmetry_strength;
    if (keep == 0.0) return zero ? 1.0 : 0.0;
    if (zero) return 0.0;
    return Range{keep * c.counterpart_ratio.lo, keep * c.counterpart_ratio.hi}.density(s.contralateral_ratio);
  }
  const double u = c.unpaired_distractor_fraction;
  return zero ? u : (1.0 - u) * c.counterpart_ratio.density(s.contralateral_ratio);
}

}  // namespace

double oracle_posterior(const GenConfig& config, const LatentStructure& s, bool use_pair) {
  double fm = appearance_likelihood(config.malignant, s);
  double fd = appearance_likelihood(config.distractor, s);
  if (use_pair) {
    fm *= ratio_likelihood(config, s, true);
    fd *= ratio_likelihood(config, s, false);
  }
  if (fm + fd == 0.0) return 0.5;
  return fm / (fm + fd);
}

// ---------------------------------------------------------------------------
// geometry

namespace {

constexpr double kPi = std::numbers::pi;

// Half-ellipse breast with its centre on the chest wall (column 0), plus an
// optional pectoral wedge bounded by the line through (0, c0) and (r0, 0).
struct Shape {
  int size = 256;
  double rc = 0.0, ax = 0.0, ay = 0.0;
  bool pectoral = false;
  double theta = 0.0;  // radians; normal angle from the column axis
  double rho = 0.0;
  double pectoral_gain = 0.0;
  double base = 0.0;

  double ellipse_rho(double r, double c) const { return std::hypot(c / ax, (r - rc) / ay); }

  // Approximate distance to the ellipse boundary, positive inside.
  double edge_distance(double r, double c) const {
    const double q = ellipse_rho(r, c);
    if (q < 1e-9) return std::min(ax, ay);
    const double gx = c / (ax * ax * q), gy = (r - rc) / (ay * ay * q);
    return (1.0 - q) / std::hypot(gx, gy);
  }

  // Signed distance to the pectoral line, positive on the breast side.
  double pectoral_distance(double r, double c) const {
    return c * std::cos(theta) + r * std::sin(theta) - rho;
  }

  bool inside(double r, double c) const {
    return r >= 0 && c >= 0 && r <= size - 1 && c <= size - 1 && ellipse_rho(r, c) <= 1.0;
  }
};

struct BaseShape {
  double rc = 0, ax = 0, ay = 0, theta_deg = 0, c0 = 0;
};

BaseShape sample_base_shape(View view, int size, Rng& rng) {
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  BaseShape b;
  if (view == View::cc) {
    b.rc = size * u(0.47, 0.53);
    b.ay = size * u(0.36, 0.43);
    b.ax = size * u(0.55, 0.70);
  } else {
    b.rc = size * u(0.40, 0.46);
    b.ay = size * u(0.50, 0.54);
    b.ax = size * u(0.58, 0.72);
    b.theta_deg = u(22.0, 38.0);
    b.c0 = size * u(0.22, 0.32);
  }
  return b;
}

Shape perturb_shape(const BaseShape& b, View view, int size, Rng& rng) {
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double px = size / 256.0;
  Shape s;
  s.size = size;
  s.rc = b.rc + u(-3.0, 3.0) * px;
  s.ax = b.ax * u(0.96, 1.04);
  s.ay = std::min(b.ay * u(0.96, 1.04), size - 4.0 - s.rc);
  s.base = u(7.45, 7.55);
  if (view == View::mlo) {
    s.pectoral = true;
    const double theta_deg = b.theta_deg + u(-2.0, 2.0);
    s.theta = theta_deg * kPi / 180.0;
    s.rho = b.c0 * u(0.95, 1.05) * std::cos(s.theta);
    s.pectoral_gain = u(0.35, 0.55);
  }
  return s;
}

TrueLandmarks true_landmarks(const Shape& s) {
  TrueLandmarks t;
  if (!s.pectoral) {
    t.front = {s.rc, s.ax};
    t.p1 = s.rc;
    t.p2 = 0.0;
    return t;
  }
  t.has_pectoral = true;
  t.theta_deg = s.theta * 180.0 / kPi;
  t.rho = s.rho;
  double best = -1e300;
  const int steps = 20000;
  for (int i = 0; i <= steps; ++i) {
    const double a = -kPi / 2 + kPi * i / steps;
    const double r = s.rc + s.ay * std::sin(a), c = s.ax * std::cos(a);
    if (r < 0 || r > s.size - 1) continue;
    const double d = s.pectoral_distance(r, c);
    if (d > best) {
      best = d;
      t.front = {r, c};
    }
  }
  t.p1 = t.front.row;
  t.p2 = std::clamp(t.front.col - best * std::cos(s.theta), 0.0, s.size - 1.0);
  return t;
}

Mask render_mask(const Shape& s) {
  Mask m(s.size, s.size);
  for (int r = 0; r < s.size; ++r)
    for (int c = 0; c < s.size; ++c) m(r, c) = s.ellipse_rho(r, c) <= 1.0 ? 1 : 0;
  return m;
}

RasterD band_limited_noise(int size, double sigma_px, double target_std, Rng& rng) {
  std::normal_distribution<double> n01;
  RasterD w(size, size);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n01(rng);
  RasterD b = gaussian_filter(w, sigma_px);
  const double mean = b.mean();
  const double sd = std::sqrt((b.array() - mean).square().mean());
  return ((b.array() - mean) * (target_std / sd)).matrix();
}

void add_structure(RasterD& d, const LesionTruth& t, Rng& rng) {
  const double R = t.radius_px;
  const double reach = t.spiculated ? 2.5 * R : R;
  const int r0 = static_cast<int>(std::floor(t.center.row - reach - 2));
  const int r1 = static_cast<int>(std::ceil(t.center.row + reach + 2));
  const int c0 = static_cast<int>(std::floor(t.center.col - reach - 2));
  const int c1 = static_cast<int>(std::ceil(t.center.col + reach + 2));
  std::vector<double> angles;
  if (t.spiculated) {
    const int n = std::uniform_int_distribution<int>(6, 10)(rng);
    for (int k = 0; k < n; ++k) angles.push_back(std::uniform_real_distribution<double>(0, 2 * kPi)(rng));
  }
  for (int r = std::max(0, r0); r <= std::min<int>(d.rows() - 1, r1); ++r)
    for (int c = std::max(0, c0); c <= std::min<int>(d.cols() - 1, c1); ++c) {
      const double dr = r - t.center.row, dc = c - t.center.col;
      const double u2 = (dr * dr + dc * dc) / (R * R);
      double v = u2 < 1.0 ? (1.0 - u2) * (1.0 - u2) : 0.0;
      for (double a : angles) {
        const double along = dr * std::sin(a) + dc * std::cos(a);
        const double perp = -dr * std::cos(a) + dc * std::sin(a);
        if (along < 0 || along > reach) continue;
        v += 0.35 * (1.0 - along / reach) * std::exp(-perp * perp / (2 * 0.7 * 0.7));
      }
      d(r, c) += t.contrast * v;
    }
}

Raster16 render(const GenConfig& cfg, const Shape& s, const std::vector<LesionTruth>& structures, Rng& rng) {
  const double px_per_mm = 1000.0 / cfg.spacing_microns;
  RasterD d = band_limited_noise(s.size, cfg.texture_fine_sigma_mm * px_per_mm, cfg.texture_fine_std, rng);
  d += band_limited_noise(s.size, cfg.texture_coarse_sigma_mm * px_per_mm, cfg.texture_coarse_std, rng);
  for (const auto& t : structures) add_structure(d, t, rng);

  Raster16 out(s.size, s.size);
  for (int r = 0; r < s.size; ++r)
    for (int c = 0; c < s.size; ++c) {
      const double m = std::clamp(0.5 + s.edge_distance(r, c) / 1.5, 0.0, 1.0);
      if (m == 0.0) {
        out(r, c) = 0;
        continue;
      }
      const double q = s.ellipse_rho(r, c);
      double v = s.base + 0.25 * std::sqrt(std::max(0.0, 1.0 - q * q)) + d(r, c);
      if (s.pectoral) v += s.pectoral_gain * std::clamp(0.5 - s.pectoral_distance(r, c), 0.0, 1.0);
      out(r, c) = static_cast<std::uint16_t>(std::clamp(std::round(std::expm1(m * v)), 0.0, 65535.0));
    }
  return out;
}

struct Slot {
  int exam = 0;
  Laterality lat = Laterality::left;
};

bool placeable(const Shape& s, Point q, double R, const std::vector<LesionTruth>& existing) {
  const double margin = R + 3.0;
  if (q.row < margin || q.col < margin || q.row > s.size - 1 - margin || q.col > s.size - 1 - margin) return false;
  if (s.edge_distance(q.row, q.col) < margin) return false;
  if (s.pectoral && s.pectoral_distance(q.row, q.col) < margin + 2.0) return false;
  for (const auto& e : existing)
    if (distance(e.center, q) < R + e.radius_px + 3.0) return false;
  return true;
}

}  // namespace

StudyCase generate_case(const GenConfig& cfg, std::uint64_t seed, int case_id) {
  Rng rng = make_rng(seed, {static_cast<std::uint64_t>(case_id)});
  auto bern = [&](double p) { return std::bernoulli_distribution(p)(rng); };
  const int size = cfg.image_size;
  const double px_per_mm = 1000.0 / cfg.spacing_microns;

  // screening rounds, oldest first
  int priors = 0;
  if (!bern(cfg.missing_prior_fraction)) priors = bern(cfg.second_prior_fraction) ? 2 : 1;
  std::vector<int> steps;
  for (int k = 0; k < priors; ++k) steps.push_back(bern(cfg.skip_fraction) ? 2 : 1);
  std::vector<int> rounds{0};
  for (auto it = steps.rbegin(); it != steps.rend(); ++it) rounds.push_back(rounds.back() + *it);
  const int n_exams = static_cast<int>(rounds.size());
  const int current = n_exams - 1;

  StudyCase sc;
  sc.case_id = case_id;
  sc.exams.resize(n_exams);
  for (int e = 0; e < n_exams; ++e) sc.exams[e].timestamp = rounds[e];

  const bool positive = bern(cfg.lesion_prevalence);
  const Laterality affected = bern(0.5) ? Laterality::right : Laterality::left;
  LatentStructure lesion;
  if (positive) lesion = sample_latent(cfg, true, rng);
  int next_id = 1;

  for (View view : {View::cc, View::mlo}) {
    const BaseShape base = sample_base_shape(view, size, rng);
    std::vector<Slot> slots;
    std::vector<Shape> shapes;
    std::vector<TrueLandmarks> marks;
    std::vector<std::vector<LesionTruth>> placed;
    for (int e = 0; e < n_exams; ++e)
      for (Laterality lat : {Laterality::left, Laterality::right}) {
        slots.push_back({e, lat});
        shapes.push_back(perturb_shape(base, view, size, rng));
        marks.push_back(true_landmarks(shapes.back()));
      }
    placed.resize(slots.size());
    auto slot_of = [&](int e, Laterality lat) { return 2 * e + (lat == Laterality::right ? 1 : 0); };

    // Places one structure: `render_in` lists (slot, radius, contrast, role)
    // with the home image first. Retries until every copy fits.
    struct Copy {
      int slot;
      double radius_px, contrast;
      StructureRole role;
    };
    auto place = [&](const std::vector<Copy>& copies, const LatentStructure& s, bool malignant) {
      const int home = copies.front().slot;
      const Shape& hs = shapes[home];
      std::normal_distribution<double> reg(0.0, cfg.registration_noise_px);
      for (int attempt = 0; attempt < 500; ++attempt) {
        const Point q{std::uniform_real_distribution<double>(std::max(0.0, hs.rc - hs.ay),
                                                             std::min(size - 1.0, hs.rc + hs.ay))(rng),
                      std::uniform_real_distribution<double>(0.0, std::min(size - 1.0, hs.ax))(rng)};
        const Point off{q.row - marks[home].p1, q.col - marks[home].p2};
        std::vector<Point> centers;
        bool ok = true;
        for (const auto& cp : copies) {
          Point p = q;
          if (cp.slot != home) {
            p = {marks[cp.slot].p1 + off.row + reg(rng), marks[cp.slot].p2 + off.col + reg(rng)};
          }
          if (!placeable(shapes[cp.slot], p, cp.radius_px, placed[cp.slot])) {
            ok = false;
            break;
          }
          centers.push_back(p);
        }
        if (!ok) continue;
        const int id = next_id++;
        for (std::size_t k = 0; k < copies.size(); ++k) {
          LesionTruth t;
          t.id = id;
          t.center = centers[k];
          t.radius_px = copies[k].radius_px;
          t.contrast = copies[k].contrast;
          t.spiculated = s.spiculated;
          t.role = copies[k].role;
          t.malignant = malignant && t.role == StructureRole::lesion;
          if (malignant) {
            t.asymmetry_strength = cfg.asymmetry_strength;
            t.growth_rate = cfg.growth_rate;
          }
          placed[copies[k].slot].push_back(t);
        }
        return;
      }
    };

    if (positive) {
      const double R = lesion.radius_mm * px_per_mm;
      std::vector<Copy> copies{{slot_of(current, affected), R, lesion.contrast, StructureRole::lesion}};
      for (int e = 0; e < n_exams; ++e) {
        if (lesion.contralateral_ratio > 0.0)
          copies.push_back({slot_of(e, opposite(affected)), R, lesion.contrast * lesion.contralateral_ratio,
                            StructureRole::asymmetry_residual});
        if (e == current) continue;
        const double shrunk = R * std::pow(1.0 - cfg.growth_rate, rounds[current] - rounds[e]);
        if (shrunk >= 1.0) copies.push_back({slot_of(e, affected), shrunk, lesion.contrast, StructureRole::lesion});
      }
      place(copies, lesion, true);
    }

    const int n = std::uniform_int_distribution<int>(cfg.min_distractors, cfg.max_distractors)(rng);
    for (int k = 0; k < n; ++k) {
      const LatentStructure s = sample_latent(cfg, false, rng);
      const Laterality home = bern(0.5) ? Laterality::right : Laterality::left;
      const double R = s.radius_mm * px_per_mm;
      std::vector<Copy> copies{{slot_of(current, home), R, s.contrast, StructureRole::distractor}};
      for (int e = 0; e < n_exams; ++e) {
        if (e != current) copies.push_back({slot_of(e, home), R, s.contrast, StructureRole::distractor});
        if (s.contralateral_ratio > 0.0)
          copies.push_back({slot_of(e, opposite(home)), R, s.contrast * s.contralateral_ratio,
                            StructureRole::distractor});
      }
      place(copies, s, false);
    }

    for (std::size_t i = 0; i < slots.size(); ++i) {
      Image im;
      im.spacing_microns = cfg.spacing_microns;
      im.laterality = slots[i].lat;
      im.view = view;
      im.timestamp = rounds[slots[i].exam];
      im.structures = placed[i];
      for (const auto& t : placed[i])
        if (t.malignant) im.truth.push_back(t);
      im.true_mask = render_mask(shapes[i]);
      im.true_landmarks = marks[i];
      Rng img_rng = make_rng(seed, {static_cast<std::uint64_t>(case_id), 1000 + static_cast<std::uint64_t>(i),
                                    view == View::cc ? 0u : 1u});
      im.pixels = render(cfg, shapes[i], im.structures, img_rng);
      sc.exams[slots[i].exam].views.push_back(std::move(im));
    }
  }
  return sc;
}

std::vector<StudyCase> generate_dataset(const GenConfig& config, std::uint64_t seed) {
  config.validate();
  std::vector<StudyCase> cases;
  cases.reserve(config.n_cases);
  for (int i = 0; i < config.n_cases; ++i) cases.push_back(generate_case(config, seed, i));
  return cases;
}

RasterD log_attenuation(const Raster16& raw) {
  return raw.cast<double>().unaryExpr([](double v) { return std::log1p(v); });
}

Image log_transform(const Image& raw) {
  Image out = raw;
  const double scale = 65535.0 / std::log(65536.0);
  out.pixels = to_u16(log_attenuation(raw.pixels), scale);
  return out;
}

// ---------------------------------------------------------------------------
// persistence

namespace {

nlohmann::json truth_json(const LesionTruth& t) {
  return {{"id", t.id},
          {"center", {t.center.row, t.center.col}},
          {"radius_px", t.radius_px},
          {"malignant", t.malignant},
          {"asymmetry_strength", t.asymmetry_strength},
          {"growth_rate", t.growth_rate},
          {"contrast", t.contrast},
          {"spiculated", t.spiculated},
          {"role", to_string(t.role)}};
}

LesionTruth truth_from_json(const nlohmann::json& j) {
  LesionTruth t;
  t.id = j.at("id");
  t.center = {j.at("center").at(0), j.at("center").at(1)};
  t.radius_px = j.at("radius_px");
  t.malignant = j.at("malignant");
  t.asymmetry_strength = j.at("asymmetry_strength");
  t.growth_rate = j.at("growth_rate");
  t.contrast = j.at("contrast");
  t.spiculated = j.at("spiculated");
  t.role = parse_role(j.at("role"));
  return t;
}

std::string image_file(int case_id, int ts, const Image& im) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "case%04d_t%d_%s_%s.pgm", case_id, ts, to_string(im.laterality).c_str(),
                to_string(im.view).c_str());
  return buf;
}

}  // namespace

void save_dataset(const std::vector<StudyCase>& cases, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  nlohmann::json manifest;
  manifest["cases"] = nlohmann::json::array();
  for (const auto& sc : cases) {
    nlohmann::json jc{{"case_id", sc.case_id}, {"split_tag", to_string(sc.split)}};
    jc["exams"] = nlohmann::json::array();
    for (const auto& ex : sc.exams) {
      nlohmann::json je{{"timestamp", ex.timestamp}};
      je["views"] = nlohmann::json::array();
      for (const auto& im : ex.views) {
        const std::string rel = "images/" + image_file(sc.case_id, ex.timestamp, im);
        write_pgm((fs::path(dir) / rel).string(), im.pixels);
        nlohmann::json jv{{"laterality", to_string(im.laterality)},
                          {"view", to_string(im.view)},
                          {"file", rel},
                          {"spacing_microns", im.spacing_microns}};
        jv["truth"] = nlohmann::json::array();
        for (const auto& t : im.truth) jv["truth"].push_back(truth_json(t));
        jv["structures"] = nlohmann::json::array();
        for (const auto& t : im.structures) jv["structures"].push_back(truth_json(t));
        const auto& lm = im.true_landmarks;
        jv["landmarks"] = {{"p1", lm.p1},
                           {"p2", lm.p2},
                           {"front", {lm.front.row, lm.front.col}},
                           {"has_pectoral", lm.has_pectoral},
                           {"rho", lm.rho},
                           {"theta_deg", lm.theta_deg}};
        je["views"].push_back(jv);
      }
      jc["exams"].push_back(je);
    }
    manifest["cases"].push_back(jc);
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(1) << '\n';
}

std::vector<StudyCase> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad manifest: ") + e.what());
  }
  std::vector<StudyCase> cases;
  for (const auto& jc : manifest.at("cases")) {
    StudyCase sc;
    sc.case_id = jc.at("case_id");
    sc.split = parse_split(jc.at("split_tag"));
    for (const auto& je : jc.at("exams")) {
      Exam ex;
      ex.timestamp = je.at("timestamp");
      for (const auto& jv : je.at("views")) {
        Image im;
        im.laterality = parse_laterality(jv.at("laterality"));
        im.view = parse_view(jv.at("view"));
        im.timestamp = ex.timestamp;
        im.spacing_microns = jv.at("spacing_microns");
        im.pixels = read_pgm((fs::path(dir) / jv.at("file").get<std::string>()).string());
        for (const auto& t : jv.at("truth")) im.truth.push_back(truth_from_json(t));
        for (const auto& t : jv.at("structures")) im.structures.push_back(truth_from_json(t));
        const auto& jl = jv.at("landmarks");
        im.true_landmarks.p1 = jl.at("p1");
        im.true_landmarks.p2 = jl.at("p2");
        im.true_landmarks.front = {jl.at("front").at(0), jl.at("front").at(1)};
        im.true_landmarks.has_pectoral = jl.at("has_pectoral");
        im.true_landmarks.rho = jl.at("rho");
        im.true_landmarks.theta_deg = jl.at("theta_deg");
        ex.views.push_back(std::move(im));
      }
      sc.exams.push_back(std::move(ex));
    }
    cases.push_back(std::move(sc));
  }
  return cases;
}

}  // namespace dualroi
