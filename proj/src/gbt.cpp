#include "dualroi/gbt.hpp"

#include "dualroi/errors.hpp"
#include "dualroi/rng.hpp"
#include "binio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace dualroi {

namespace {

constexpr double kProbFloor = 1e-15;

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// log(1 + exp(-s)) for s = +-margin, stable for large |s|.
double softplus_neg(double s) { return s > 0 ? std::log1p(std::exp(-s)) : -s + std::log1p(std::exp(s)); }

double sample_loss(double margin, int y) { return softplus_neg(y == 1 ? margin : -margin); }

void check_xy(const RowMatrix& X, std::span<const int> y) {
  if (static_cast<std::size_t>(X.rows()) != y.size()) throw DimensionError("gbt: row count differs from label count");
  if (X.rows() == 0 || X.cols() == 0) throw TrainingError("gbt: empty training set");
  if (!X.allFinite()) throw NumericError("gbt: non-finite feature value");
  bool pos = false, neg = false;
  for (int v : y) {
    if (v != 0 && v != 1) throw ConfigError("gbt: labels must be 0 or 1");
    (v ? pos : neg) = true;
  }
  if (!pos || !neg) throw TrainingError("gbt: training labels hold a single class");
}

RowMatrix take_rows(const RowMatrix& X, const std::vector<int>& idx) {
  RowMatrix out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(idx[i]);
  return out;
}

// Per-feature row order with the values laid out in that order, so the split
// scan reads memory sequentially.
struct SortedColumns {
  std::vector<std::vector<int>> rows;
  std::vector<std::vector<double>> values;
};

struct SplitScan {
  double gl = 0.0, hl = 0.0, last = 0.0;
  std::uint64_t key = 0;  // order-free fingerprint of the left member set
  bool seen = false;
};

struct Candidate {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
  std::uint64_t key = 0;
};

class TreeBuilder {
 public:
  TreeBuilder(const RowMatrix& X, const SortedColumns& sorted, const GbtParams& p)
      : X_(X), sorted_(sorted), p_(p), node_of_(static_cast<std::size_t>(X.rows())), row_key_(node_of_.size()) {
    for (std::size_t i = 0; i < row_key_.size(); ++i) row_key_[i] = splitmix64(static_cast<std::uint64_t>(i));
  }

  GbtModel::Tree build(const std::vector<double>& g, const std::vector<double>& h, std::vector<int>& leaf_of) {
    GbtModel::Tree tree(1);
    std::fill(node_of_.begin(), node_of_.end(), 0);
    G_.assign(1, 0.0);
    H_.assign(1, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) G_[0] += g[i], H_[0] += h[i];
    std::vector<int> active{0};

    for (int depth = 0; depth < p_.max_depth && !active.empty(); ++depth) {
      std::vector<char> is_active(tree.size(), 0);
      for (int nd : active)
        if (H_[nd] >= 2.0 * p_.min_child_weight) is_active[nd] = 1;
      std::vector<Candidate> best(tree.size());
      std::vector<SplitScan> scan(tree.size());
      for (int f = 0; f < X_.cols(); ++f) {
        for (int nd : active) scan[nd] = SplitScan{};
        const auto& order = sorted_.rows[f];
        const auto& values = sorted_.values[f];
        for (std::size_t k = 0; k < order.size(); ++k) {
          const int i = order[k];
          const int nd = node_of_[i];
          if (nd < 0 || !is_active[nd]) continue;
          SplitScan& s = scan[nd];
          const double x = values[k];
          if (s.seen && x > s.last) consider(nd, f, s, x, best[nd]);
          s.gl += g[i];
          s.hl += h[i];
          s.key += row_key_[i];
          s.last = x;
          s.seen = true;
        }
      }
      std::vector<int> next;
      for (int nd : active) {
        if (best[nd].feature < 0) continue;
        const int l = static_cast<int>(tree.size());
        tree[nd].feature = best[nd].feature;
        tree[nd].threshold = best[nd].threshold;
        tree[nd].left = l;
        tree[nd].right = l + 1;
        tree.resize(tree.size() + 2);
        G_.resize(tree.size(), 0.0);
        H_.resize(tree.size(), 0.0);
        next.push_back(l);
        next.push_back(l + 1);
      }
      if (next.empty()) break;
      for (std::size_t i = 0; i < node_of_.size(); ++i) {
        const int nd = node_of_[i];
        if (nd < 0 || tree[nd].feature < 0) continue;
        const int child = X_(static_cast<Eigen::Index>(i), tree[nd].feature) < tree[nd].threshold ? tree[nd].left
                                                                                                  : tree[nd].right;
        node_of_[i] = child;
        G_[child] += g[i];
        H_[child] += h[i];
      }
      active = std::move(next);
    }

    for (std::size_t nd = 0; nd < tree.size(); ++nd)
      if (tree[nd].feature < 0)
        tree[nd].value = std::clamp(-G_[nd] / (H_[nd] + p_.lambda), -p_.max_leaf, p_.max_leaf);
    leaf_of = node_of_;
    return tree;
  }

 private:
  void consider(int nd, int f, const SplitScan& s, double x, Candidate& best) const {
    const double hr = H_[nd] - s.hl;
    if (s.hl < p_.min_child_weight || hr < p_.min_child_weight) return;
    const double gr = G_[nd] - s.gl;
    const double gain = s.gl * s.gl / (s.hl + p_.lambda) + gr * gr / (hr + p_.lambda) -
                        G_[nd] * G_[nd] / (H_[nd] + p_.lambda);
    // Gradients take few distinct values, so different partitions often tie
    // exactly; the membership key keeps the choice independent of column order.
    const double tol = 1e-12 * std::max(1.0, std::abs(best.gain));
    if (gain < best.gain - tol) return;
    if (gain <= best.gain + tol && (best.feature < 0 || s.key >= best.key)) return;
    if (gain <= 1e-12) return;
    double thr = s.last + 0.5 * (x - s.last);
    if (!(s.last < thr)) thr = x;
    best = {gain, f, thr, s.key};
  }

  const RowMatrix& X_;
  const SortedColumns& sorted_;
  const GbtParams& p_;
  std::vector<int> node_of_;
  std::vector<std::uint64_t> row_key_;
  std::vector<double> G_, H_;
};

}  // namespace

void GbtParams::validate() const {
  if (rounds < 1) throw ConfigError("gbt: rounds must be at least 1");
  if (!(shrinkage >= 0.0 && shrinkage <= 1.0)) throw ConfigError("gbt: shrinkage outside [0, 1]");
  if (max_depth < 1) throw ConfigError("gbt: max_depth must be at least 1");
  if (!(lambda >= 0.0)) throw ConfigError("gbt: lambda must be non-negative");
  if (!(min_child_weight >= 0.0)) throw ConfigError("gbt: min_child_weight must be non-negative");
  if (!(max_leaf > 0.0) || !std::isfinite(max_leaf)) throw ConfigError("gbt: max_leaf must be positive and finite");
}

double GbtModel::margin(const double* row) const {
  double s = 0.0;
  for (const Tree& t : trees) {
    int nd = 0;
    while (t[nd].feature >= 0) nd = row[t[nd].feature] < t[nd].threshold ? t[nd].left : t[nd].right;
    s += t[nd].value;
  }
  return base_score + shrinkage * s;
}

double GbtModel::predict(const double* row) const { return sigmoid(margin(row)); }

std::vector<double> GbtModel::predict(const RowMatrix& X) const {
  if (trees.empty()) throw StateError("gbt: model is not fitted");
  if (X.cols() != width) throw DimensionError("gbt: feature width differs from the model");
  std::vector<double> out(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] = predict(X.row(i).data());
  return out;
}

bool operator==(const GbtModel& a, const GbtModel& b) {
  return a.base_score == b.base_score && a.shrinkage == b.shrinkage && a.max_depth == b.max_depth &&
         a.width == b.width && a.trees == b.trees;
}

double logloss(std::span<const double> p, std::span<const int> y) {
  if (p.size() != y.size() || p.empty()) throw DimensionError("logloss: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbFloor, 1.0 - kProbFloor);
    s -= y[i] ? std::log(q) : std::log1p(-q);
  }
  return s / static_cast<double>(p.size());
}

GbtModel fit_gbt(const RowMatrix& X, std::span<const int> y, const GbtParams& params, std::vector<double>* loss_trace) {
  params.validate();
  check_xy(X, y);
  const std::size_t n = y.size();
  const double mean = static_cast<double>(std::count(y.begin(), y.end(), 1)) / static_cast<double>(n);

  GbtModel model;
  model.base_score = std::log(mean / (1.0 - mean));
  model.shrinkage = params.shrinkage;
  model.max_depth = params.max_depth;
  model.width = static_cast<int>(X.cols());

  SortedColumns sorted;
  sorted.rows.assign(static_cast<std::size_t>(X.cols()), std::vector<int>(n));
  sorted.values.assign(static_cast<std::size_t>(X.cols()), std::vector<double>(n));
  const Eigen::MatrixXd cols = X;  // column-major copy
  for (Eigen::Index f = 0; f < X.cols(); ++f) {
    auto& idx = sorted.rows[f];
    std::iota(idx.begin(), idx.end(), 0);
    const double* col = cols.col(f).data();
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return col[a] < col[b]; });
    for (std::size_t k = 0; k < n; ++k) sorted.values[f][k] = col[idx[k]];
  }

  std::vector<double> margin(n, model.base_score), g(n), h(n), trial(n);
  auto total_loss = [&](const std::vector<double>& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += sample_loss(m[i], y[i]);
    return s;
  };
  double loss = total_loss(margin);
  if (loss_trace) loss_trace->assign(1, loss / static_cast<double>(n));

  TreeBuilder builder(X, sorted, params);
  std::vector<int> leaf_of;
  for (int r = 0; r < params.rounds; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(margin[i]);
      g[i] = p - y[i];
      h[i] = std::max(p * (1.0 - p), 1e-16);
    }
    GbtModel::Tree tree = builder.build(g, h, leaf_of);

    // A Newton step can overshoot where the curvature collapses; halve the
    // offending leaf until its own loss does not rise.
    std::vector<std::vector<int>> members(tree.size());
    for (std::size_t i = 0; i < n; ++i) members[leaf_of[i]].push_back(static_cast<int>(i));
    for (std::size_t nd = 0; nd < tree.size(); ++nd) {
      if (tree[nd].feature >= 0 || members[nd].empty()) continue;
      double before = 0.0;
      for (int i : members[nd]) before += sample_loss(margin[i], y[i]);
      for (int k = 0; k < 60; ++k) {
        double after = 0.0;
        for (int i : members[nd]) after += sample_loss(margin[i] + params.shrinkage * tree[nd].value, y[i]);
        if (after <= before) break;
        tree[nd].value = k == 59 ? 0.0 : 0.5 * tree[nd].value;
      }
    }
    for (std::size_t i = 0; i < n; ++i) trial[i] = margin[i] + params.shrinkage * tree[leaf_of[i]].value;
    double next = total_loss(trial);
    if (next > loss) {
      // Summation order can still add a rounding-level rise; drop the step.
      for (auto& node : tree) node.value = 0.0;
      trial = margin;
      next = loss;
    }
    margin.swap(trial);
    loss = next;
    model.trees.push_back(std::move(tree));
    if (loss_trace) loss_trace->push_back(loss / static_cast<double>(n));
  }
  return model;
}

std::vector<GridPoint> default_grid() {
  std::vector<GridPoint> grid;
  for (double eta : {0.05, 0.1, 0.3})
    for (int depth : {2, 3, 4, 6}) grid.push_back({eta, depth});
  return grid;
}

std::vector<int> stratified_folds(std::span<const int> y, int n_folds, std::uint64_t seed) {
  if (n_folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  std::vector<int> fold(y.size(), -1);
  for (int cls : {0, 1}) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == cls) idx.push_back(static_cast<int>(i));
    if (static_cast<int>(idx.size()) < n_folds)
      throw ConfigError("cross-validation needs at least " + std::to_string(n_folds) + " samples per class");
    Rng rng = make_rng(seed, {static_cast<std::uint64_t>(cls)});
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) fold[idx[k]] = static_cast<int>(k % n_folds);
  }
  return fold;
}

CvResult cross_validate(const RowMatrix& X, std::span<const int> y, std::span<const GridPoint> grid,
                        const GbtParams& base, int n_folds, std::uint64_t seed) {
  if (grid.empty()) throw ConfigError("cross-validation grid is empty");
  check_xy(X, y);
  const std::vector<int> fold = stratified_folds(y, n_folds, seed);

  CvResult res;
  res.grid.assign(grid.begin(), grid.end());
  std::stable_sort(res.grid.begin(), res.grid.end(), [](const GridPoint& a, const GridPoint& b) {
    return a.max_depth != b.max_depth ? a.max_depth < b.max_depth : a.shrinkage < b.shrinkage;
  });

  std::vector<std::vector<int>> train(n_folds), test(n_folds);
  for (std::size_t i = 0; i < y.size(); ++i)
    for (int k = 0; k < n_folds; ++k) (fold[i] == k ? test[k] : train[k]).push_back(static_cast<int>(i));

  for (const GridPoint& gp : res.grid) {
    GbtParams p = base;
    p.shrinkage = gp.shrinkage;
    p.max_depth = gp.max_depth;
    double sum = 0.0;
    for (int k = 0; k < n_folds; ++k) {
      std::vector<int> ytr, yte;
      for (int i : train[k]) ytr.push_back(y[i]);
      for (int i : test[k]) yte.push_back(y[i]);
      const GbtModel m = fit_gbt(take_rows(X, train[k]), ytr, p);
      sum += logloss(m.predict(take_rows(X, test[k])), yte);
    }
    res.mean_logloss.push_back(sum / n_folds);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < res.grid.size(); ++i)
    if (res.mean_logloss[i] < res.mean_logloss[best]) best = i;
  res.best = res.grid[best];
  return res;
}

CoordinateSearchResult coordinate_search(const RowMatrix& Xtr, std::span<const int> ytr, const RowMatrix& Xval,
                                         std::span<const int> yval, const GbtParams& start,
                                         std::span<const int> round_values, std::span<const double> child_weights,
                                         int max_sweeps) {
  CoordinateSearchResult res;
  res.params = start;
  auto eval = [&](const GbtParams& p) {
    ++res.evaluations;
    return logloss(fit_gbt(Xtr, ytr, p).predict(Xval), yval);
  };
  res.validation_logloss = eval(start);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool changed = false;
    for (int r : round_values) {
      if (r == res.params.rounds) continue;
      GbtParams p = res.params;
      p.rounds = r;
      const double l = eval(p);
      if (l < res.validation_logloss) res = {p, l, res.evaluations}, changed = true;
    }
    for (double w : child_weights) {
      if (w == res.params.min_child_weight) continue;
      GbtParams p = res.params;
      p.min_child_weight = w;
      const double l = eval(p);
      if (l < res.validation_logloss) res = {p, l, res.evaluations}, changed = true;
    }
    if (!changed) break;
  }
  return res;
}

namespace {

using binio::put;

template <class T>
T get(std::istream& in) {
  return binio::get<T>(in, "gbt model");
}

}  // namespace

void GbtModel::save(std::ostream& out) const {
  out.write("GBTM", 4);
  put<std::uint32_t>(out, 1);
  put<double>(out, base_score);
  put<double>(out, shrinkage);
  put<std::int32_t>(out, max_depth);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(width));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(trees.size()));
  for (const Tree& t : trees) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.size()));
    for (const Node& n : t) {
      put<std::int32_t>(out, n.feature);
      put<double>(out, n.threshold);
      put<std::int32_t>(out, n.left);
      put<std::int32_t>(out, n.right);
      put<double>(out, n.value);
    }
  }
  if (!out) throw IoError("gbt model: write failed");
}

GbtModel GbtModel::load(std::istream& in) {
  binio::expect_magic(in, "GBTM", "gbt model");
  if (get<std::uint32_t>(in) != 1) throw IoError("gbt model: unsupported version");
  GbtModel m;
  m.base_score = get<double>(in);
  m.shrinkage = get<double>(in);
  m.max_depth = get<std::int32_t>(in);
  m.width = static_cast<int>(get<std::uint32_t>(in));
  m.trees.resize(get<std::uint32_t>(in));
  for (Tree& t : m.trees) {
    t.resize(get<std::uint32_t>(in));
    for (Node& n : t) {
      n.feature = get<std::int32_t>(in);
      n.threshold = get<double>(in);
      n.left = get<std::int32_t>(in);
      n.right = get<std::int32_t>(in);
      n.value = get<double>(in);
      if (n.feature >= m.width || (n.feature >= 0 && (n.left < 0 || n.right < 0 ||
                                                      n.left >= static_cast<int>(t.size()) ||
                                                      n.right >= static_cast<int>(t.size()))))
        throw IoError("gbt model: corrupt tree");
    }
  }
  return m;
}

void GbtModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  save(out);
}

GbtModel GbtModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return load(in);
}

void write_predictions_csv(const std::string& path, std::span<const std::string> ids, std::span<const double> p) {
  if (ids.size() != p.size()) throw DimensionError("predictions: id and posterior counts differ");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "sample_id,posterior\n";
  for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << ',' << p[i] << '\n';
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace dualroi
