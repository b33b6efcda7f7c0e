#include "dualroi/eval.hpp"

#include "dualroi/errors.hpp"
#include "dualroi/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <unordered_map>

namespace dualroi {

namespace {

void check_scored(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw NumericError("non-finite score");
    if (labels[i] != 0 && labels[i] != 1) throw ConfigError("labels must be 0 or 1");
    pos += labels[i];
  }
  if (pos == 0 || pos == labels.size()) throw UndefinedAucError("AUC is undefined for a single class");
}

bool both_classes(const std::vector<int>& labels) {
  bool pos = false, neg = false;
  for (int v : labels) (v ? pos : neg) = true;
  return pos && neg;
}

struct Resampler {
  std::vector<std::vector<std::size_t>> units;

  Resampler(const ScoredSet& set, ResampleUnit unit) {
    if (unit == ResampleUnit::candidate || set.group_ids.empty()) {
      for (std::size_t i = 0; i < set.size(); ++i) units.push_back({i});
      return;
    }
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < set.size(); ++i) {
      auto [it, fresh] = index.try_emplace(set.group_ids[i], units.size());
      if (fresh) units.emplace_back();
      units[it->second].push_back(i);
    }
  }

  /// Draws until both classes are present; returns the candidate indices.
  std::vector<std::size_t> draw(const std::vector<int>& labels, std::uint64_t seed, int iteration, int& redraws,
                                int max_redraws) const {
    std::vector<std::size_t> idx;
    std::vector<int> lab;
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rng rng = make_rng(seed, {static_cast<std::uint64_t>(iteration), attempt});
      std::uniform_int_distribution<std::size_t> pick(0, units.size() - 1);
      idx.clear();
      lab.clear();
      for (std::size_t k = 0; k < units.size(); ++k)
        for (std::size_t i : units[pick(rng)]) {
          idx.push_back(i);
          lab.push_back(labels[i]);
        }
      if (both_classes(lab)) return idx;
      if (++redraws > max_redraws) throw UndefinedAucError("too many single-class bootstrap resamples");
    }
  }
};

void gather(const ScoredSet& set, const std::vector<std::size_t>& idx, std::vector<double>& s, std::vector<int>& l) {
  s.resize(idx.size());
  l.resize(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    s[k] = set.scores[idx[k]];
    l[k] = set.labels[idx[k]];
  }
}

std::vector<double> curve_on_grid(const RocCurve& c, std::span<const double> grid) {
  // Vertical steps share an fpr; keep the highest tpr so knots are strictly increasing.
  std::vector<double> x, y;
  for (std::size_t i = 0; i < c.fpr.size(); ++i) {
    if (!x.empty() && c.fpr[i] == x.back())
      y.back() = std::max(y.back(), c.tpr[i]);
    else
      x.push_back(c.fpr[i]), y.push_back(c.tpr[i]);
  }
  auto v = natural_cubic_spline(x, y, grid);
  for (double& t : v) t = std::clamp(t, 0.0, 1.0);
  return v;
}

}  // namespace

void ScoredSet::validate() const {
  if (labels.size() != scores.size()) throw DimensionError("scored set: labels and scores differ in length");
  if (!group_ids.empty() && group_ids.size() != scores.size())
    throw DimensionError("scored set: group ids and scores differ in length");
  check_scored(scores, labels);
}

RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double P = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double N = static_cast<double>(labels.size()) - P;
  RocCurve c;
  c.fpr.push_back(0.0);
  c.tpr.push_back(0.0);
  c.thresholds.push_back(INFINITY);
  double tp = 0.0, fp = 0.0;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    for (; k < order.size() && scores[order[k]] == s; ++k) (labels[order[k]] ? tp : fp) += 1.0;
    c.fpr.push_back(fp / N);
    c.tpr.push_back(tp / P);
    c.thresholds.push_back(s);
  }
  return c;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0, P = 0.0;
  for (std::size_t k = 0; k < n;) {
    std::size_t j = k;
    while (j < n && scores[order[j]] == scores[order[k]]) ++j;
    const double midrank = 0.5 * static_cast<double>(k + 1 + j);  // mean of ranks k+1..j
    for (std::size_t m = k; m < j; ++m)
      if (labels[order[m]]) rank_sum += midrank, P += 1.0;
    k = j;
  }
  const double N = static_cast<double>(n) - P;
  return (rank_sum - P * (P + 1.0) / 2.0) / (P * N);
}

double partial_auc(const RocCurve& c, double lo, double hi) {
  if (!(lo >= 0.0 && hi <= 1.0 && lo < hi)) throw ConfigError("partial AUC interval must satisfy 0 <= lo < hi <= 1");
  double area = 0.0;
  for (std::size_t i = 1; i < c.fpr.size(); ++i) {
    const double x0 = c.fpr[i - 1], x1 = c.fpr[i];
    if (x1 <= x0) continue;
    const double a = std::max(lo, x0), b = std::min(hi, x1);
    if (b <= a) continue;
    const double slope = (c.tpr[i] - c.tpr[i - 1]) / (x1 - x0);
    const double ya = c.tpr[i - 1] + slope * (a - x0), yb = c.tpr[i - 1] + slope * (b - x0);
    area += 0.5 * (ya + yb) * (b - a);
  }
  return area / (hi - lo);
}

double partial_auc(std::span<const double> scores, std::span<const int> labels, double lo, double hi) {
  return partial_auc(roc_curve(scores, labels), lo, hi);
}

std::string to_string(ResampleUnit u) { return u == ResampleUnit::case_level ? "case" : "candidate"; }

ResampleUnit parse_resample_unit(const std::string& s) {
  if (s == "case") return ResampleUnit::case_level;
  if (s == "candidate") return ResampleUnit::candidate;
  throw ConfigError("unknown resample unit '" + s + "'");
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw ConfigError("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const double h = q * static_cast<double>(v.size() - 1);
  const auto k = static_cast<std::size_t>(std::floor(h));
  if (k + 1 >= v.size()) return v.back();
  return v[k] + (h - static_cast<double>(k)) * (v[k + 1] - v[k]);
}

std::vector<double> natural_cubic_spline(std::span<const double> x, std::span<const double> y,
                                         std::span<const double> at) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw ConfigError("spline needs at least two knots");
  for (std::size_t i = 1; i < n; ++i)
    if (!(x[i] > x[i - 1])) throw ConfigError("spline knots must be strictly increasing");
  // Second derivatives m with m[0] = m[n-1] = 0 (Thomas algorithm).
  std::vector<double> m(n, 0.0);
  if (n > 2) {
    std::vector<double> diag(n - 2), upper(n - 2), rhs(n - 2);
    for (std::size_t i = 1; i + 1 < n; ++i) {
      const double h0 = x[i] - x[i - 1], h1 = x[i + 1] - x[i];
      diag[i - 1] = 2.0 * (h0 + h1);
      upper[i - 1] = h1;
      rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    for (std::size_t i = 1; i < n - 2; ++i) {
      const double w = (x[i + 1] - x[i]) / diag[i - 1];  // row i couples knot i+1 to knot i
      diag[i] -= w * upper[i - 1];
      rhs[i] -= w * rhs[i - 1];
    }
    m[n - 2] = rhs[n - 3] / diag[n - 3];
    for (std::size_t i = n - 3; i-- > 0;) m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
  }
  std::vector<double> out(at.size());
  std::size_t seg = 0;
  for (std::size_t k = 0; k < at.size(); ++k) {
    const double t = std::clamp(at[k], x[0], x[n - 1]);
    if (k == 0 || t < x[seg]) seg = 0;
    while (seg + 2 < n && t > x[seg + 1]) ++seg;
    const double h = x[seg + 1] - x[seg];
    const double a = (x[seg + 1] - t) / h, b = (t - x[seg]) / h;
    out[k] = a * y[seg] + b * y[seg + 1] + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * h * h / 6.0;
  }
  return out;
}

RocResult bootstrap_ci(const ScoredSet& set, const BootstrapOptions& opt) {
  set.validate();
  if (opt.n_boot < 1) throw ConfigError("bootstrap needs at least one resample");
  if (opt.grid_points < 2) throw ConfigError("curve grid needs at least two points");
  RocResult r;
  r.curve = roc_curve(set.scores, set.labels);
  r.auc = roc_auc(set.scores, set.labels);
  r.pauc = partial_auc(r.curve, opt.pauc_lo, opt.pauc_hi);

  const Resampler rs(set, opt.unit);
  const int cap = opt.n_boot * opt.max_redraws_per_sample;
  if (opt.mean_curve) {
    r.grid_fpr.resize(opt.grid_points);
    for (int g = 0; g < opt.grid_points; ++g) r.grid_fpr[g] = static_cast<double>(g) / (opt.grid_points - 1);
  }
  std::vector<std::vector<double>> columns(r.grid_fpr.size(), std::vector<double>(opt.n_boot));
  std::vector<double> s;
  std::vector<int> l;
  r.bootstrap_aucs.resize(opt.n_boot);
  for (int b = 0; b < opt.n_boot; ++b) {
    gather(set, rs.draw(set.labels, opt.seed, b, r.redraws, cap), s, l);
    r.bootstrap_aucs[b] = roc_auc(s, l);
    if (opt.mean_curve) {
      const auto v = curve_on_grid(roc_curve(s, l), r.grid_fpr);
      for (std::size_t g = 0; g < v.size(); ++g) columns[g][b] = v[g];
    }
  }
  r.ci_lo = percentile(r.bootstrap_aucs, 0.025);
  r.ci_hi = percentile(r.bootstrap_aucs, 0.975);
  for (auto& col : columns) {
    r.mean_tpr.push_back(std::accumulate(col.begin(), col.end(), 0.0) / opt.n_boot);
    r.tpr_lo.push_back(percentile(col, 0.025));
    r.tpr_hi.push_back(percentile(col, 0.975));
  }
  return r;
}

SignificanceResult significance_test(const ScoredSet& a, const ScoredSet& b, Metric metric,
                                     const BootstrapOptions& opt) {
  a.validate();
  b.validate();
  if (a.labels != b.labels || a.group_ids != b.group_ids)
    throw ConfigError("significance test needs paired sets over the same candidates");
  if (opt.n_boot < 1) throw ConfigError("bootstrap needs at least one resample");
  auto value = [&](std::span<const double> s, std::span<const int> l) {
    return metric == Metric::auc ? roc_auc(s, l) : partial_auc(s, l, opt.pauc_lo, opt.pauc_hi);
  };
  SignificanceResult res;
  res.observed_difference = value(a.scores, a.labels) - value(b.scores, b.labels);
  const Resampler rs(a, opt.unit);
  int redraws = 0;
  std::vector<double> sa, sb;
  std::vector<int> l;
  std::size_t le = 0, ge = 0;
  for (int k = 0; k < opt.n_boot; ++k) {
    const auto idx = rs.draw(a.labels, opt.seed, k, redraws, opt.n_boot * opt.max_redraws_per_sample);
    gather(a, idx, sa, l);
    gather(b, idx, sb, l);
    const double d = value(sa, l) - value(sb, l);
    res.differences.push_back(d);
    le += d <= 0.0;
    ge += d >= 0.0;
  }
  res.p_value = std::min(1.0, 2.0 * static_cast<double>(std::min(le, ge)) / opt.n_boot);
  return res;
}

nlohmann::json to_json(const RocResult& r, const BootstrapOptions& o) {
  return {{"auc", r.auc},
          {"pauc", r.pauc},
          {"pauc_interval", {o.pauc_lo, o.pauc_hi}},
          {"ci95", {r.ci_lo, r.ci_hi}},
          {"ci_method", "percentile"},
          {"n_boot", o.n_boot},
          {"resample_unit", to_string(o.unit)},
          {"single_class_redraws", r.redraws}};
}

void write_curve_csv(const std::string& path, std::span<const NamedRoc> curves) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "name,fpr,tpr\n";
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.result->curve.fpr.size(); ++i)
      out << c.name << ',' << c.result->curve.fpr[i] << ',' << c.result->curve.tpr[i] << '\n';
  if (!out) throw IoError("failed writing " + path);
}

void write_roc_svg(const std::string& path, std::span<const NamedRoc> curves, const std::string& title) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  constexpr double W = 520, H = 520, x0 = 60, y0 = 460, side = 400;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  char buf[128];
  auto pt = [&](double fpr, double tpr) {
    std::snprintf(buf, sizeof buf, "%.2f,%.2f ", x0 + side * fpr, y0 - side * tpr);
    return std::string(buf);
  };
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"30\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n"
      << "<rect x=\"" << x0 << "\" y=\"" << y0 - side << "\" width=\"" << side << "\" height=\"" << side
      << "\" fill=\"none\" stroke=\"black\"/>\n"
      << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 + side << "\" y2=\"" << y0 - side
      << "\" stroke=\"#999\" stroke-dasharray=\"4,4\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double v = t / 5.0;
    std::snprintf(buf, sizeof buf, "%.1f", v);
    out << "<text x=\"" << x0 + side * v << "\" y=\"" << y0 + 18 << "\" text-anchor=\"middle\" font-size=\"11\">"
        << buf << "</text>\n<text x=\"" << x0 - 8 << "\" y=\"" << y0 - side * v + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << buf << "</text>\n";
  }
  out << "<text x=\"" << x0 + side / 2 << "\" y=\"" << y0 + 40
      << "\" text-anchor=\"middle\" font-size=\"13\">False positive rate</text>\n"
      << "<text x=\"18\" y=\"" << y0 - side / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
      << y0 - side / 2 << ")\">True positive rate</text>\n";
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const RocResult& r = *curves[k].result;
    const char* col = colors[k % 6];
    if (!r.grid_fpr.empty()) {
      out << "<polygon fill=\"" << col << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
      for (std::size_t g = 0; g < r.grid_fpr.size(); ++g) out << pt(r.grid_fpr[g], r.tpr_hi[g]);
      for (std::size_t g = r.grid_fpr.size(); g-- > 0;) out << pt(r.grid_fpr[g], r.tpr_lo[g]);
      out << "\"/>\n<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << col << "\" points=\"";
      for (std::size_t g = 0; g < r.grid_fpr.size(); ++g) out << pt(r.grid_fpr[g], r.mean_tpr[g]);
    } else {
      out << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << col << "\" points=\"";
      for (std::size_t i = 0; i < r.curve.fpr.size(); ++i) out << pt(r.curve.fpr[i], r.curve.tpr[i]);
    }
    out << "\"/>\n";
    std::snprintf(buf, sizeof buf, "%s AUC %.3f [%.3f, %.3f]", curves[k].name.c_str(), r.auc, r.ci_lo, r.ci_hi);
    out << "<rect x=\"" << x0 + 170 << "\" y=\"" << y0 - 22 - 18 * k - 9 << "\" width=\"12\" height=\"4\" fill=\""
        << col << "\"/>\n<text x=\"" << x0 + 188 << "\" y=\"" << y0 - 22 - 18 * k - 4 << "\" font-size=\"12\">" << buf
        << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace dualroi
