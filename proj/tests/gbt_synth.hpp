#pragma once

// Controlled generator for the depth-recovery check: y = [x0 > 0.5 and x1 > 0.5]
// over 8 uniform features, with 10% of labels flipped.

#include "dualroi/gbt.hpp"
#include "dualroi/rng.hpp"

#include <vector>

namespace synth {

struct Data {
  dualroi::RowMatrix X;
  std::vector<int> y;
};

inline Data depth2_rule(int n, std::uint64_t seed) {
  dualroi::Rng rng = dualroi::make_rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Data d{dualroi::RowMatrix(n, 8), std::vector<int>(n)};
  for (int i = 0; i < n; ++i) {
    for (int f = 0; f < 8; ++f) d.X(i, f) = u(rng);
    int v = d.X(i, 0) > 0.5 && d.X(i, 1) > 0.5;
    if (u(rng) < 0.1) v = 1 - v;
    d.y[i] = v;
  }
  return d;
}

inline Data random_labels(int n, std::uint64_t seed) {
  dualroi::Rng rng = dualroi::make_rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Data d{dualroi::RowMatrix(n, 8), std::vector<int>(n)};
  for (int i = 0; i < n; ++i) {
    for (int f = 0; f < 8; ++f) d.X(i, f) = u(rng);
    d.y[i] = u(rng) < 0.5;
  }
  return d;
}

/// Runs the 16-fold selection on ten seeded datasets; returns how many pick depth 2 or 3.
inline int depth_recovery_hits() {
  dualroi::GbtParams base;
  base.rounds = 50;
  const auto grid = dualroi::default_grid();
  int hits = 0;
  for (int t = 0; t < 10; ++t) {
    const Data d = depth2_rule(400, 100 + t);
    const auto res = dualroi::cross_validate(d.X, d.y, grid, base, 16, t);
    hits += res.best.max_depth == 2 || res.best.max_depth == 3;
  }
  return hits;
}

}  // namespace synth
