#pragma once

// Pure forward/backward kernels for the layer types used by the networks.
// Every function takes and returns values; none keeps state between calls.

#include "dualroi/tensor.hpp"

#include <cstdint>
#include <vector>

namespace dualroi::ops {

/// Unfolds a [C,H,W] input into a [C*k*k, H'*W'] matrix of receptive fields.
RowMatrix im2col(const Tensor& input, int kernel, int stride);
/// Adjoint of im2col: scatters columns back into a [C,H,W] gradient.
Tensor col2im(const RowMatrix& cols, const Shape& input_shape, int kernel, int stride);

/// 'Valid' cross-correlation of input[C,H,W] with kernels[K,C,k,k] plus a per-kernel bias.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride);

struct Conv2dGrads {
  Tensor input;
  Tensor kernels;
  Tensor bias;
};
Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernels, int stride, const Tensor& grad_out);

Tensor elu(const Tensor& input, double alpha = 1.0);
Tensor elu_backward(const Tensor& input, const Tensor& grad_out, double alpha = 1.0);

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};
PoolResult maxpool_forward(const Tensor& input, int window, int stride);
Tensor maxpool(const Tensor& input, int window, int stride);
Tensor maxpool_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax, const Tensor& grad_out);

Tensor dense_forward(const Tensor& input, const Tensor& weight, const Tensor& bias);
struct DenseGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};
DenseGrads dense_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out);

Tensor softmax(const Tensor& logits);
Tensor softmax_backward(const Tensor& probs, const Tensor& grad_out);

Tensor sigmoid(const Tensor& input);
Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out);

/// Inverted-dropout mask: entries are 0 or 1/(1-rate), drawn from `seed`.
Tensor dropout_mask(const Shape& shape, double rate, std::uint64_t seed);

/// -log p[label].
double cross_entropy(const Tensor& probs, std::size_t label);

}  // namespace dualroi::ops
