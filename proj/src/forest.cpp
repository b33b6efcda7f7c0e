#include "dualroi/forest.hpp"

#include "dualroi/errors.hpp"
#include "binio.hpp"
#include "dualroi/rng.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

namespace dualroi {

void ForestParams::validate() const {
  if (trees < 1 || max_depth < 1 || min_samples_leaf < 1 || max_features < 0)
    throw ConfigError("random forest: trees, depth and leaf size must be >= 1");
}

namespace {

struct Builder {
  const RowMatrix& X;
  std::span<const int> y;
  const ForestParams& params;
  int mtry;
  Rng rng;
  RandomForest::Tree tree;

  double gini(double pos, double n) const {
    if (n <= 0) return 0.0;
    const double p = pos / n;
    return 2.0 * p * (1.0 - p);
  }

  int build(std::vector<int>& idx, int begin, int end, int depth) {
    const int n = end - begin;
    double pos = 0;
    for (int i = begin; i < end; ++i) pos += y[idx[i]];
    const int node = static_cast<int>(tree.size());
    tree.push_back({});
    tree[node].value = pos / n;
    if (depth >= params.max_depth || n < 2 * params.min_samples_leaf || pos == 0 || pos == n) return node;

    // random feature subset
    std::vector<int> feats(X.cols());
    std::iota(feats.begin(), feats.end(), 0);
    for (int k = 0; k < mtry; ++k) {
      std::uniform_int_distribution<int> pick(k, static_cast<int>(feats.size()) - 1);
      std::swap(feats[k], feats[pick(rng)]);
    }

    const double parent = gini(pos, n);
    double best_gain = 1e-12;
    int best_feat = -1;
    double best_thr = 0.0;
    std::vector<std::pair<double, int>> col(n);
    for (int k = 0; k < mtry; ++k) {
      const int f = feats[k];
      for (int i = 0; i < n; ++i) col[i] = {X(idx[begin + i], f), y[idx[begin + i]]};
      std::sort(col.begin(), col.end());
      double left_pos = 0;
      for (int i = 0; i + 1 < n; ++i) {
        left_pos += col[i].second;
        const int nl = i + 1, nr = n - nl;
        if (col[i].first == col[i + 1].first) continue;
        if (nl < params.min_samples_leaf || nr < params.min_samples_leaf) continue;
        const double g = parent - (nl * gini(left_pos, nl) + nr * gini(pos - left_pos, nr)) / n;
        if (g > best_gain) {
          best_gain = g;
          best_feat = f;
          best_thr = 0.5 * (col[i].first + col[i + 1].first);
        }
      }
    }
    if (best_feat < 0) return node;

    const auto mid = std::stable_partition(idx.begin() + begin, idx.begin() + end,
                                           [&](int s) { return X(s, best_feat) <= best_thr; });
    const int split = static_cast<int>(mid - idx.begin());
    tree[node].feature = best_feat;
    tree[node].threshold = best_thr;
    const int l = build(idx, begin, split, depth + 1);
    const int r = build(idx, split, end, depth + 1);
    tree[node].left = l;
    tree[node].right = r;
    return node;
  }
};

}  // namespace

void RandomForest::fit(const RowMatrix& X, std::span<const int> y, const ForestParams& params, std::uint64_t seed) {
  params.validate();
  if (static_cast<std::size_t>(X.rows()) != y.size() || X.rows() == 0)
    throw DimensionError("random forest: sample and label counts differ");
  int pos = 0;
  for (int v : y) {
    if (v != 0 && v != 1) throw TrainingError("random forest: labels must be 0 or 1");
    pos += v;
  }
  if (pos == 0 || pos == static_cast<int>(y.size())) throw TrainingError("random forest: single-class training set");
  if (!X.allFinite()) throw NumericError("random forest: non-finite features");

  width_ = static_cast<int>(X.cols());
  const int mtry = params.max_features > 0 ? std::min(params.max_features, width_)
                                           : std::max(1, static_cast<int>(std::lround(std::sqrt(width_))));
  trees_.clear();
  const int n = static_cast<int>(X.rows());
  for (int t = 0; t < params.trees; ++t) {
    Builder b{X, y, params, mtry, make_rng(seed, {static_cast<std::uint64_t>(t)}), {}};
    std::vector<int> idx(n);
    if (params.bootstrap) {
      std::uniform_int_distribution<int> draw(0, n - 1);
      for (int& i : idx) i = draw(b.rng);
      std::sort(idx.begin(), idx.end());
    } else {
      std::iota(idx.begin(), idx.end(), 0);
    }
    b.build(idx, 0, n, 0);
    trees_.push_back(std::move(b.tree));
  }
}

double RandomForest::predict(const double* row) const {
  if (trees_.empty()) throw StateError("random forest: predict before fit");
  double s = 0.0;
  for (const auto& tree : trees_) {
    int k = 0;
    while (tree[k].feature >= 0) k = row[tree[k].feature] <= tree[k].threshold ? tree[k].left : tree[k].right;
    s += tree[k].value;
  }
  return s / static_cast<double>(trees_.size());
}

std::vector<double> RandomForest::predict(const RowMatrix& X) const {
  if (X.cols() != width_) throw DimensionError("random forest: feature width mismatch");
  std::vector<double> out(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] = predict(X.row(i).data());
  return out;
}

namespace {

using binio::put;

template <class T>
T get(std::istream& in) {
  return binio::get<T>(in, "random forest");
}

}  // namespace

void RandomForest::save(std::ostream& out) const {
  out.write("RFST", 4);
  put<std::uint32_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(width_));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(trees_.size()));
  for (const auto& tree : trees_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tree.size()));
    for (const auto& n : tree) {
      put<std::int32_t>(out, n.feature);
      put<double>(out, n.threshold);
      put<std::int32_t>(out, n.left);
      put<std::int32_t>(out, n.right);
      put<double>(out, n.value);
    }
  }
}

RandomForest RandomForest::load(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "RFST") throw IoError("random forest: bad magic");
  if (get<std::uint32_t>(in) != 1) throw IoError("random forest: unsupported version");
  RandomForest f;
  f.width_ = static_cast<int>(get<std::uint32_t>(in));
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t t = 0; t < count; ++t) {
    Tree tree(get<std::uint32_t>(in));
    for (auto& n : tree) {
      n.feature = get<std::int32_t>(in);
      n.threshold = get<double>(in);
      n.left = get<std::int32_t>(in);
      n.right = get<std::int32_t>(in);
      n.value = get<double>(in);
    }
    f.trees_.push_back(std::move(tree));
  }
  return f;
}

}  // namespace dualroi
