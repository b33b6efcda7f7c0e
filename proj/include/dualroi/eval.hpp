#pragma once

#include "json.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dualroi {

/// Candidate scores with binary labels and the case each candidate came from.
struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::string> group_ids;  // empty means every candidate is its own group

  void validate() const;
  std::size_t size() const { return scores.size(); }
};

/// Operating points from the highest threshold down; starts at (0,0), ends at (1,1).
/// Tied scores form a single diagonal step.
struct RocCurve {
  std::vector<double> fpr, tpr, thresholds;
};

RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels);

/// Mann-Whitney statistic P(s+ > s-) + P(tie)/2 via midranks.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Trapezoidal area of the curve over fpr in [lo, hi], divided by hi - lo.
double partial_auc(const RocCurve& curve, double lo = 0.0, double hi = 0.2);
double partial_auc(std::span<const double> scores, std::span<const int> labels, double lo = 0.0, double hi = 0.2);

enum class ResampleUnit { case_level, candidate };
std::string to_string(ResampleUnit u);
ResampleUnit parse_resample_unit(const std::string& s);

enum class Metric { auc, pauc };

struct BootstrapOptions {
  int n_boot = 5000;
  std::uint64_t seed = 0;
  ResampleUnit unit = ResampleUnit::case_level;
  int grid_points = 512;
  bool mean_curve = true;
  double pauc_lo = 0.0, pauc_hi = 0.2;
  int max_redraws_per_sample = 100;  // single-class resamples redrawn at most n_boot * this
};

struct RocResult {
  RocCurve curve;
  double auc = 0.0;
  double pauc = 0.0;
  std::vector<double> bootstrap_aucs;
  double ci_lo = 0.0, ci_hi = 0.0;
  int redraws = 0;
  // Natural cubic spline of every bootstrap curve on a uniform FPR grid,
  // averaged pointwise, with the pointwise 2.5/97.5 percentiles.
  std::vector<double> grid_fpr, mean_tpr, tpr_lo, tpr_hi;
};

RocResult bootstrap_ci(const ScoredSet& set, const BootstrapOptions& options = {});

struct SignificanceResult {
  double p_value = 1.0;
  double observed_difference = 0.0;  // metric(A) - metric(B) on the full set
  std::vector<double> differences;
};

/// Paired bootstrap over shared resamples; two-sided
/// p = min(1, 2 min(#{d <= 0}, #{d >= 0}) / n_boot).
SignificanceResult significance_test(const ScoredSet& a, const ScoredSet& b, Metric metric,
                                     const BootstrapOptions& options = {});

/// Linear-interpolated percentile (q in [0, 1]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

/// Natural cubic spline through strictly increasing knots, evaluated at `at`.
std::vector<double> natural_cubic_spline(std::span<const double> x, std::span<const double> y,
                                         std::span<const double> at);

nlohmann::json to_json(const RocResult& r, const BootstrapOptions& options);

struct NamedRoc {
  std::string name;
  const RocResult* result = nullptr;
};

/// name,fpr,tpr rows of each raw curve.
void write_curve_csv(const std::string& path, std::span<const NamedRoc> curves);
/// Mean bootstrap curves with shaded pointwise bands.
void write_roc_svg(const std::string& path, std::span<const NamedRoc> curves, const std::string& title);

}  // namespace dualroi
