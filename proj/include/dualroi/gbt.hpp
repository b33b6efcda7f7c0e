#pragma once

#include "dualroi/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace dualroi {

struct GbtParams {
  int rounds = 100;
  double shrinkage = 0.1;  // eta, in [0, 1]
  int max_depth = 3;
  double lambda = 1.0;  // L2 penalty on leaf values
  double min_child_weight = 1.0;  // minimum hessian sum per child
  double max_leaf = 10.0;  // |leaf value| bound before shrinkage

  void validate() const;
};

/// Logistic-loss gradient boosting with exact greedy splits and Newton leaves.
class GbtModel {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;  // x[feature] < threshold goes left
    int left = -1, right = -1;
    double value = 0.0;
    friend bool operator==(const Node&, const Node&) = default;
  };
  using Tree = std::vector<Node>;

  double base_score = 0.0;  // logit
  double shrinkage = 0.1;
  int max_depth = 0;
  int width = 0;
  std::vector<Tree> trees;

  double margin(const double* row) const;
  double predict(const double* row) const;  // sigmoid(margin)
  std::vector<double> predict(const RowMatrix& X) const;

  void save(std::ostream& out) const;
  static GbtModel load(std::istream& in);
  void save(const std::string& path) const;
  static GbtModel load(const std::string& path);
};

bool operator==(const GbtModel& a, const GbtModel& b);

/// `loss_trace`, when given, receives the mean training logloss before the
/// first round and after every round.
GbtModel fit_gbt(const RowMatrix& X, std::span<const int> y, const GbtParams& params,
                 std::vector<double>* loss_trace = nullptr);

double logloss(std::span<const double> p, std::span<const int> y);

struct GridPoint {
  double shrinkage = 0.1;
  int max_depth = 3;
  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

std::vector<GridPoint> default_grid();  // eta {0.05, 0.1, 0.3} x depth {2, 3, 4, 6}

/// Per-class shuffled round-robin fold assignment.
std::vector<int> stratified_folds(std::span<const int> y, int n_folds, std::uint64_t seed);

struct CvResult {
  GridPoint best;
  std::vector<GridPoint> grid;  // in evaluation order, sorted by (depth, eta)
  std::vector<double> mean_logloss;
};

/// Selects (eta, depth) by mean validation logloss over `n_folds` stratified
/// folds; ties go to the smaller depth, then the smaller eta. `base` supplies
/// every other parameter.
CvResult cross_validate(const RowMatrix& X, std::span<const int> y, std::span<const GridPoint> grid,
                        const GbtParams& base, int n_folds, std::uint64_t seed);

/// Coordinate search over rounds and min_child_weight on a fixed validation
/// set, starting from `start`. Each sweep tries every candidate value of one
/// coordinate holding the other fixed; stops when a sweep changes nothing.
struct CoordinateSearchResult {
  GbtParams params;
  double validation_logloss = 0.0;
  int evaluations = 0;
};
CoordinateSearchResult coordinate_search(const RowMatrix& Xtr, std::span<const int> ytr, const RowMatrix& Xval,
                                         std::span<const int> yval, const GbtParams& start,
                                         std::span<const int> round_values, std::span<const double> child_weights,
                                         int max_sweeps = 4);

/// CSV with header sample_id,posterior.
void write_predictions_csv(const std::string& path, std::span<const std::string> ids, std::span<const double> p);

}  // namespace dualroi
