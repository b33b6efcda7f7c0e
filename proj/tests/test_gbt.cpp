#include "dualroi/errors.hpp"
#include "dualroi/gbt.hpp"
#include "doctest.h"
#include "gbt_synth.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace dualroi;

TEST_CASE("single split separates 1-D data") {
  RowMatrix X(20, 1);
  std::vector<int> y(20);
  for (int i = 0; i < 20; ++i) {
    X(i, 0) = i / 19.0;
    y[i] = X(i, 0) > 0.5;
  }
  GbtParams p;
  p.rounds = 1;
  p.max_depth = 1;
  p.shrinkage = 1.0;
  GbtModel m = fit_gbt(X, y, p);
  REQUIRE(m.trees.size() == 1);
  CHECK(m.trees[0].size() == 3);
  auto pred = m.predict(X);
  for (int i = 0; i < 20; ++i) CHECK((pred[i] > 0.5) == (y[i] == 1));
}

TEST_CASE("zero shrinkage keeps the base score") {
  auto d = synth::random_labels(60, 3);
  GbtParams p;
  p.shrinkage = 0.0;
  p.rounds = 5;
  GbtModel m = fit_gbt(d.X, d.y, p);
  const double mean = std::count(d.y.begin(), d.y.end(), 1) / 60.0;
  CHECK(m.base_score == doctest::Approx(std::log(mean / (1 - mean))).epsilon(1e-14));
  for (Eigen::Index i = 0; i < d.X.rows(); ++i) CHECK(m.margin(d.X.row(i).data()) == m.base_score);
}

TEST_CASE("training loss never rises") {
  auto d = synth::random_labels(200, 7);
  for (double eta : {0.1, 0.3, 1.0})
    for (int depth : {1, 3, 6}) {
      GbtParams p;
      p.rounds = 100;
      p.shrinkage = eta;
      p.max_depth = depth;
      std::vector<double> trace;
      fit_gbt(d.X, d.y, p, &trace);
      REQUIRE(trace.size() == 101);
      for (std::size_t t = 1; t < trace.size(); ++t) CHECK(trace[t] <= trace[t - 1]);
      CHECK(trace.back() < trace.front());
    }
}

TEST_CASE("errors") {
  auto d = synth::random_labels(24, 1);
  std::vector<int> one(24, 1);
  CHECK_THROWS_AS(fit_gbt(d.X, one, {}), TrainingError);
  GbtParams bad;
  bad.shrinkage = 1.5;
  CHECK_THROWS_AS(fit_gbt(d.X, d.y, bad), ConfigError);
  CHECK_THROWS_AS(cross_validate(d.X, d.y, default_grid(), {}, 16, 1), ConfigError);
  GbtModel empty;
  CHECK_THROWS_AS(empty.predict(d.X), StateError);
}

TEST_CASE("permutation invariance and serialization") {
  auto d = synth::depth2_rule(150, 11);
  GbtParams p;
  p.rounds = 20;
  GbtModel m = fit_gbt(d.X, d.y, p);
  std::vector<int> perm{5, 2, 7, 0, 1, 6, 3, 4};
  RowMatrix Xp(d.X.rows(), 8);
  for (int f = 0; f < 8; ++f) Xp.col(f) = d.X.col(perm[f]);
  GbtModel mp = fit_gbt(Xp, d.y, p);
  // Evaluated on the training rows: two columns can induce the same partition
  // there, and which one is kept is then arbitrary.
  auto a = m.predict(d.X), b = mp.predict(Xp);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));

  std::stringstream buf;
  m.save(buf);
  GbtModel back = GbtModel::load(buf);
  CHECK(back == m);
  CHECK(back.predict(d.X) == a);
  std::stringstream junk("GBTMxx");
  CHECK_THROWS_AS(GbtModel::load(junk), IoError);

  const auto path = (std::filesystem::temp_directory_path() / "dualroi_pred.csv").string();
  std::vector<std::string> ids{"a", "b"};
  std::vector<double> post{0.25, 0.5};
  write_predictions_csv(path, ids, post);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "sample_id,posterior");
  CHECK(row == "a,0.25");
  std::filesystem::remove(path);
}

TEST_CASE("folds and grid selection") {
  auto d = synth::depth2_rule(160, 2);
  auto folds = stratified_folds(d.y, 16, 9);
  CHECK(folds == stratified_folds(d.y, 16, 9));
  for (int k = 0; k < 16; ++k) {
    int pos = 0, all = 0;
    for (std::size_t i = 0; i < folds.size(); ++i)
      if (folds[i] == k) ++all, pos += d.y[i];
    CHECK(all >= 9);
    CHECK(pos >= 1);
  }

  GbtParams base;
  base.rounds = 10;
  std::vector<GridPoint> one{{0.3, 4}};
  CHECK(cross_validate(d.X, d.y, one, base, 16, 1).best == one[0]);

  std::vector<GridPoint> dup{{0.1, 3}, {0.1, 3}, {0.1, 3}};
  auto res = cross_validate(d.X, d.y, dup, base, 16, 1);
  CHECK(res.mean_logloss[0] == res.mean_logloss[2]);
  CHECK(res.best == dup[0]);

  std::vector<GridPoint> shuffled{{0.3, 6}, {0.05, 2}, {0.1, 2}};
  res = cross_validate(d.X, d.y, shuffled, base, 16, 1);
  CHECK(res.grid.front() == GridPoint{0.05, 2});
  CHECK(res.grid.back() == GridPoint{0.3, 6});
}

TEST_CASE("cross-validation recovers the generating depth") {
  CHECK(synth::depth_recovery_hits() >= 8);
}

TEST_CASE("coordinate search") {
  auto tr = synth::depth2_rule(200, 21), va = synth::depth2_rule(200, 22);
  GbtParams start;
  start.rounds = 5;
  std::vector<int> rounds{5, 20, 60};
  std::vector<double> weights{0.5, 1.0, 4.0};
  auto res = coordinate_search(tr.X, tr.y, va.X, va.y, start, rounds, weights);
  CHECK(res.evaluations >= 5);
  CHECK(res.validation_logloss <= logloss(fit_gbt(tr.X, tr.y, start).predict(va.X), va.y));
  CHECK(res.params.rounds != 5);
}
