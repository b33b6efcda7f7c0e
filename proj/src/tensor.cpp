#include "dualroi/tensor.hpp"

#include "dualroi/errors.hpp"

#include <cmath>
#include <sstream>

namespace dualroi {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (numel(shape) != data.size())
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
}

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

MatrixMap Tensor::matrix(std::size_t rows, std::size_t cols) {
  if (rows * cols != data.size()) throw DimensionError("matrix view does not cover tensor");
  return MatrixMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMatrixMap Tensor::matrix(std::size_t rows, std::size_t cols) const {
  if (rows * cols != data.size()) throw DimensionError("matrix view does not cover tensor");
  return ConstMatrixMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Tensor Tensor::reshaped(Shape s) const {
  if (numel(s) != data.size())
    throw DimensionError("cannot reshape " + shape_string(shape) + " to " + shape_string(s));
  return Tensor(std::move(s), data);
}

void Tensor::check_invariants() const {
  if (numel(shape) != data.size()) throw DimensionError("tensor payload does not match shape");
  if (!grad.empty() && grad.size() != data.size()) throw DimensionError("gradient slot shape mismatch");
}

void Tensor::check_finite(std::string_view where) const {
  for (double v : data)
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + std::string(where));
}

bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }

}  // namespace dualroi
