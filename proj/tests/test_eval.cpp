#include "dualroi/errors.hpp"
#include "dualroi/eval.hpp"
#include "binormal.hpp"
#include "doctest.h"
#include "oracles.hpp"

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <random>

using namespace dualroi;

TEST_CASE("auc examples") {
  CHECK(roc_auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
  CHECK(roc_auc(std::vector<double>(6, 0.3), std::vector<int>{1, 0, 1, 0, 0, 1}) == 0.5);
  CHECK(roc_auc(std::vector<double>{0.9, 0.5, 0.4}, std::vector<int>{1, 0, 1}) == 0.5);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedAucError);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), DimensionError);
}

TEST_CASE("auc and curve against the pair-count oracle") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 120; ++t) {
    const int n = 2 + static_cast<int>(rng() % 1000);
    std::vector<double> s(n);
    std::vector<int> y(n);
    std::uniform_int_distribution<int> level(0, t % 2 ? 20 : 1000000);
    for (int i = 0; i < n; ++i) {
      s[i] = level(rng) / 20.0;
      y[i] = static_cast<int>(rng() % 3 == 0);
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(std::abs(roc_auc(s, y) - oracle::auc_pairs(s, y)) < 1e-12);
    RocCurve c = roc_curve(s, y);
    CHECK(c.fpr.front() == 0.0);
    CHECK(c.tpr.front() == 0.0);
    CHECK(c.fpr.back() == 1.0);
    CHECK(c.tpr.back() == 1.0);
    for (std::size_t i = 1; i < c.fpr.size(); ++i) {
      CHECK(c.fpr[i] >= c.fpr[i - 1]);
      CHECK(c.tpr[i] >= c.tpr[i - 1]);
    }
    CHECK(std::abs(partial_auc(c, 0.0, 1.0) - roc_auc(s, y)) < 1e-12);
    if (n <= 300) {
      std::vector<double> fx, ty;
      oracle::roc_points(s, y, fx, ty);
      CHECK(std::abs(partial_auc(c, 0.0, 0.2) - oracle::pauc_trapezoid(fx, ty, 0.0, 0.2)) < 1e-9);
      CHECK(std::abs(partial_auc(c, 0.13, 0.71) - oracle::pauc_trapezoid(fx, ty, 0.13, 0.71)) < 1e-9);
    }
  }
}

TEST_CASE("partial auc") {
  std::vector<double> s{0.9, 0.8, 0.3, 0.2};
  std::vector<int> y{1, 1, 0, 0};
  CHECK(partial_auc(s, y, 0.0, 0.2) == 1.0);
  CHECK(partial_auc(s, y, 0.5, 0.9) == 1.0);
  std::vector<double> flat(4, 0.5);
  CHECK(partial_auc(flat, y, 0.0, 0.2) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK_THROWS_AS(partial_auc(s, y, 0.2, 0.2), ConfigError);
  CHECK_THROWS_AS(partial_auc(s, y, -0.1, 0.2), ConfigError);
}

TEST_CASE("natural cubic spline") {
  std::vector<double> x{0.0, 0.1, 0.35, 0.4, 0.8, 1.0}, y{0.0, 0.5, 0.55, 0.7, 0.9, 1.0};
  // Dense solve of the same conditions as the oracle.
  const int n = 6;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  A(0, 0) = A(n - 1, n - 1) = 1.0;
  for (int i = 1; i < n - 1; ++i) {
    const double h0 = x[i] - x[i - 1], h1 = x[i + 1] - x[i];
    A(i, i - 1) = h0;
    A(i, i) = 2 * (h0 + h1);
    A(i, i + 1) = h1;
    b(i) = 6 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
  }
  Eigen::VectorXd m = A.fullPivLu().solve(b);
  std::vector<double> at;
  for (int k = 0; k <= 50; ++k) at.push_back(k / 50.0);
  auto got = natural_cubic_spline(x, y, at);
  for (std::size_t k = 0; k < at.size(); ++k) {
    int s = 0;
    while (s < n - 2 && at[k] > x[s + 1]) ++s;
    const double h = x[s + 1] - x[s], t = at[k];
    const double ref = m(s) * std::pow(x[s + 1] - t, 3) / (6 * h) + m(s + 1) * std::pow(t - x[s], 3) / (6 * h) +
                       (y[s] / h - m(s) * h / 6) * (x[s + 1] - t) + (y[s + 1] / h - m(s + 1) * h / 6) * (t - x[s]);
    CHECK(got[k] == doctest::Approx(ref).epsilon(1e-12));
  }
  auto knots = natural_cubic_spline(x, y, x);
  for (int i = 0; i < n; ++i) CHECK(knots[i] == doctest::Approx(y[i]).epsilon(1e-12));
  std::vector<double> lx{0.0, 0.5, 1.0}, ly{0.0, 0.5, 1.0}, q{0.25, 0.75};
  CHECK(natural_cubic_spline(lx, ly, q)[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK_THROWS_AS(natural_cubic_spline(std::vector<double>{0.0, 0.0}, ly, q), ConfigError);
}

TEST_CASE("percentile") {
  CHECK(percentile({3.0, 1.0, 2.0}, 0.5) == 2.0);
  CHECK(percentile({0.0, 10.0}, 0.25) == 2.5);
  CHECK(percentile({4.0}, 0.975) == 4.0);
}

TEST_CASE("bootstrap") {
  ScoredSet degenerate;
  for (int i = 0; i < 40; ++i) {
    degenerate.scores.push_back(i % 2 ? 0.9 : 0.1);
    degenerate.labels.push_back(i % 2);
    degenerate.group_ids.push_back("c" + std::to_string(i / 4));
  }
  BootstrapOptions o;
  o.n_boot = 300;
  o.seed = 4;
  RocResult r = bootstrap_ci(degenerate, o);
  CHECK(r.auc == 1.0);
  CHECK(r.ci_lo == 1.0);
  CHECK(r.ci_hi == 1.0);
  CHECK(r.grid_fpr.size() == 512);
  CHECK(r.mean_tpr[0] == 1.0);

  auto set = binormal::draw(60, 90, 0.8, 3);
  for (std::size_t i = 0; i < set.size(); ++i) set.group_ids[i] = "case" + std::to_string(i % 25);
  RocResult a = bootstrap_ci(set, o), b = bootstrap_ci(set, o);
  CHECK(a.bootstrap_aucs == b.bootstrap_aucs);
  CHECK(a.mean_tpr == b.mean_tpr);
  CHECK(a.ci_lo <= a.auc);
  CHECK(a.auc <= a.ci_hi);
  for (std::size_t g = 1; g < a.grid_fpr.size(); ++g) {
    CHECK(a.tpr_lo[g] <= a.tpr_hi[g]);
    CHECK(a.mean_tpr[g] >= 0.0);
    CHECK(a.mean_tpr[g] <= 1.0);
  }
  BootstrapOptions cand = o;
  cand.unit = ResampleUnit::candidate;
  CHECK(bootstrap_ci(set, cand).bootstrap_aucs != a.bootstrap_aucs);

  // One positive case among many negatives forces single-class redraws.
  ScoredSet sparse;
  for (int i = 0; i < 30; ++i) {
    sparse.scores.push_back(i * 0.01);
    sparse.labels.push_back(i == 0 ? 1 : 0);
    sparse.group_ids.push_back(std::to_string(i));
  }
  sparse.labels[29] = 1;
  RocResult rs = bootstrap_ci(sparse, o);
  CHECK(rs.redraws > 0);
  o.max_redraws_per_sample = 0;
  CHECK_THROWS_AS(bootstrap_ci(sparse, o), UndefinedAucError);

  nlohmann::json j = to_json(a, cand);
  CHECK(j["resample_unit"] == "candidate");
  CHECK(j["ci95"][0].get<double>() == a.ci_lo);
}

TEST_CASE("bootstrap coverage on a binormal model") {
  CHECK(binormal::coverage_hits(100) >= 90);
}

TEST_CASE("paired significance") {
  BootstrapOptions o;
  o.n_boot = 2000;
  o.seed = 8;
  auto a = binormal::draw(60, 60, 0.8, 1);
  CHECK(significance_test(a, a, Metric::auc, o).p_value == 1.0);
  CHECK(significance_test(a, a, Metric::pauc, o).p_value == 1.0);

  ScoredSet perfect, random;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u;
  for (int i = 0; i < 500; ++i) {
    const int y = i % 2;
    perfect.scores.push_back(y + u(rng));
    random.scores.push_back(u(rng));
    perfect.labels.push_back(y);
    perfect.group_ids.push_back(std::to_string(i / 5));
  }
  random.labels = perfect.labels;
  random.group_ids = perfect.group_ids;
  auto ab = significance_test(perfect, random, Metric::auc, o);
  auto ba = significance_test(random, perfect, Metric::auc, o);
  CHECK(ab.p_value < 0.01);
  CHECK(ab.p_value == ba.p_value);
  CHECK(ab.observed_difference > 0.3);

  auto b = binormal::draw(60, 60, 0.75, 2);
  b.labels = a.labels;
  b.group_ids = a.group_ids;
  CHECK(significance_test(a, b, Metric::pauc, o).p_value == significance_test(b, a, Metric::pauc, o).p_value);
  b.labels[0] = 1 - b.labels[0];
  CHECK_THROWS_AS(significance_test(a, b, Metric::auc, o), ConfigError);
}

TEST_CASE("report files") {
  auto set = binormal::draw(30, 30, 0.8, 4);
  BootstrapOptions o;
  o.n_boot = 50;
  RocResult r = bootstrap_ci(set, o);
  const auto dir = std::filesystem::temp_directory_path();
  std::vector<NamedRoc> named{{"model", &r}};
  write_curve_csv((dir / "dualroi_roc.csv").string(), named);
  write_roc_svg((dir / "dualroi_roc.svg").string(), named, "ROC");
  std::ifstream csv(dir / "dualroi_roc.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "name,fpr,tpr");
  std::ifstream svg(dir / "dualroi_roc.svg");
  std::string body((std::istreambuf_iterator<char>(svg)), {});
  CHECK(body.find("<polygon") != std::string::npos);
  CHECK(body.find("</svg>") != std::string::npos);
  std::filesystem::remove(dir / "dualroi_roc.csv");
  std::filesystem::remove(dir / "dualroi_roc.svg");
}
