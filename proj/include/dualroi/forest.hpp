#pragma once

#include "dualroi/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace dualroi {

struct ForestParams {
  int trees = 64;
  int max_depth = 12;
  int min_samples_leaf = 5;
  int max_features = 0;  // 0 selects round(sqrt(width))
  bool bootstrap = true;

  void validate() const;
};

/// Bagged Gini decision trees for binary labels; predicts P(y = 1).
class RandomForest {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1, right = -1;
    double value = 0.0;  // positive fraction at a leaf
    friend bool operator==(const Node&, const Node&) = default;
  };
  using Tree = std::vector<Node>;

  /// Rows of X are samples. Labels must be 0/1 with both present.
  void fit(const RowMatrix& X, std::span<const int> y, const ForestParams& params, std::uint64_t seed);
  double predict(const double* row) const;
  std::vector<double> predict(const RowMatrix& X) const;

  const std::vector<Tree>& trees() const { return trees_; }
  int width() const { return width_; }
  bool fitted() const { return !trees_.empty(); }

  void save(std::ostream& out) const;
  static RandomForest load(std::istream& in);

 private:
  std::vector<Tree> trees_;
  int width_ = 0;
};

}  // namespace dualroi
