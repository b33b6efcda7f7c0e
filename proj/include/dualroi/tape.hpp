#pragma once

#include "dualroi/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace dualroi {

/// Reverse-mode differentiation tape.
///
/// Operations append nodes in execution order; `backward` walks them in
/// reverse. Parameters are borrowed (not copied) and must outlive the tape.
/// Reusing one parameter node in several places sums its gradient.
class Tape {
 public:
  using Var = std::size_t;

  Var constant(Tensor value);
  /// When `grad_sink` is given, gradients for this parameter are added into
  /// it directly (it must hold value.size() entries) instead of the tape.
  Var parameter(const Tensor& value, std::vector<double>* grad_sink = nullptr);

  Var conv2d(Var input, Var kernels, Var bias, int stride);
  Var maxpool(Var input, int window, int stride);
  Var dense(Var input, Var weight, Var bias);
  Var elu(Var input, double alpha = 1.0);
  Var sigmoid(Var input);
  Var softmax(Var logits);
  /// Multiplies by a fixed mask (see ops::dropout_mask).
  Var dropout(Var input, double rate, std::uint64_t seed);
  /// Affine map with fixed coefficients: scale * (x - offset).
  Var affine(Var input, double offset, double scale);
  Var flatten(Var input);
  Var concat(Var a, Var b);
  Var sum(Var input);
  /// Scalar -log(probs[label]).
  Var cross_entropy(Var probs, std::size_t label);

  const Tensor& value(Var v) const;
  /// Gradient of the last backward() target with respect to `v`.
  const std::vector<double>& grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and back-propagates. Throws StateError when
  /// `loss` was never recorded or is not a scalar.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    std::vector<double> grad;
    std::function<void(Tape&, Var self)> backprop;
    std::vector<double>* sink = nullptr;

    bool is_leaf_constant() const { return !borrowed && !backprop; }
  };

  Var push(Tensor value, std::function<void(Tape&, Var)> backprop);
  const Tensor& val(Var v) const { return nodes_[v].borrowed ? *nodes_[v].borrowed : nodes_[v].owned; }
  void accumulate(Var v, std::span<const double> g);
  void accumulate(Var v, std::vector<double>&& g);
  void check(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace dualroi
