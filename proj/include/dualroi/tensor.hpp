#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace dualroi {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

/// Dense row-major float64 array with an optional gradient slot.
///
/// `grad` is either empty (no gradient) or exactly `data.size()` long.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor vector(std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// Element of a rank-3 tensor [C,H,W].
  double& at(std::size_t c, std::size_t h, std::size_t w) { return data[(c * shape[1] + h) * shape[2] + w]; }
  double at(std::size_t c, std::size_t h, std::size_t w) const {
    return data[(c * shape[1] + h) * shape[2] + w];
  }

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.assign(data.size(), 0.0); }

  /// View as rows x cols; rows*cols must equal size().
  MatrixMap matrix(std::size_t rows, std::size_t cols);
  ConstMatrixMap matrix(std::size_t rows, std::size_t cols) const;
  VectorMap flat() { return VectorMap(data.data(), static_cast<Eigen::Index>(data.size())); }
  ConstVectorMap flat() const { return ConstVectorMap(data.data(), static_cast<Eigen::Index>(data.size())); }

  Tensor reshaped(Shape s) const;

  /// Throws DimensionError unless product(shape) == data.size() and grad is empty or same size.
  void check_invariants() const;
  /// Throws NumericError naming `where` if any value is NaN/Inf.
  void check_finite(std::string_view where) const;
};

bool operator==(const Tensor& a, const Tensor& b);

}  // namespace dualroi
