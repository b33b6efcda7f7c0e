#include "dualroi/ops.hpp"

#include "dualroi/errors.hpp"
#include "dualroi/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace dualroi::ops {
namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape));
}

std::size_t out_extent(std::size_t in, std::size_t window, std::size_t stride) {
  return (in - window) / stride + 1;
}

}  // namespace

RowMatrix im2col(const Tensor& input, int kernel, int stride) {
  require_rank(input, 3, "conv input");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t k = static_cast<std::size_t>(kernel), s = static_cast<std::size_t>(stride);
  if (kernel < 1 || stride < 1) throw DimensionError("kernel size and stride must be >= 1");
  if (H < k || W < k) throw DimensionError("conv input " + shape_string(input.shape) + " smaller than kernel");
  const std::size_t Ho = out_extent(H, k, s), Wo = out_extent(W, k, s);
  RowMatrix cols(static_cast<Eigen::Index>(C * k * k), static_cast<Eigen::Index>(Ho * Wo));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols.row(static_cast<Eigen::Index>((c * k + ky) * k + kx)).data();
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const double* src = &input.data[(c * H + oy * s + ky) * W + kx];
          if (s == 1) std::copy(src, src + Wo, row + oy * Wo);
          else
            for (std::size_t ox = 0; ox < Wo; ++ox) row[oy * Wo + ox] = src[ox * s];
        }
      }
  return cols;
}

Tensor col2im(const RowMatrix& cols, const Shape& input_shape, int kernel, int stride) {
  const std::size_t C = input_shape[0], H = input_shape[1], W = input_shape[2];
  const std::size_t k = static_cast<std::size_t>(kernel), s = static_cast<std::size_t>(stride);
  const std::size_t Ho = out_extent(H, k, s), Wo = out_extent(W, k, s);
  Tensor out(input_shape, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols.row(static_cast<Eigen::Index>((c * k + ky) * k + kx)).data();
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          double* dst = &out.data[(c * H + oy * s + ky) * W + kx];
          const double* src = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) dst[ox * s] += src[ox];
        }
      }
  return out;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride) {
  require_rank(input, 3, "conv input");
  require_rank(kernels, 4, "conv kernels");
  const std::size_t K = kernels.dim(0), C = kernels.dim(1), k = kernels.dim(2);
  if (kernels.dim(3) != k) throw DimensionError("conv kernels must be square");
  if (input.dim(0) != C)
    throw DimensionError("conv input has " + std::to_string(input.dim(0)) + " channels, kernels expect " +
                         std::to_string(C));
  if (bias.size() != K) throw DimensionError("conv bias length must equal kernel count");
  input.check_finite("conv2d input");

  const RowMatrix cols = im2col(input, static_cast<int>(k), stride);
  const std::size_t Ho = out_extent(input.dim(1), k, stride), Wo = out_extent(input.dim(2), k, stride);
  Tensor out({K, Ho, Wo});
  auto o = out.matrix(K, Ho * Wo);
  o.noalias() = kernels.matrix(K, C * k * k) * cols;
  o.colwise() += bias.flat();
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernels, int stride, const Tensor& grad_out) {
  const std::size_t K = kernels.dim(0), C = kernels.dim(1), k = kernels.dim(2);
  const RowMatrix cols = im2col(input, static_cast<int>(k), stride);
  const std::size_t n = static_cast<std::size_t>(cols.cols());
  if (grad_out.size() != K * n) throw DimensionError("conv grad_out shape mismatch");
  const auto g = grad_out.matrix(K, n);

  Conv2dGrads grads;
  grads.kernels = Tensor(kernels.shape);
  grads.kernels.matrix(K, C * k * k).noalias() = g * cols.transpose();
  grads.bias = Tensor({K});
  grads.bias.flat() = g.rowwise().sum();
  const RowMatrix gcols = kernels.matrix(K, C * k * k).transpose() * g;
  grads.input = col2im(gcols, input.shape, static_cast<int>(k), stride);
  return grads;
}

Tensor elu(const Tensor& input, double alpha) {
  Tensor out(input.shape);
  const auto x = input.flat().array();
  out.flat().array() = (x > 0.0).select(x, alpha * (x.min(0.0).exp() - 1.0));
  return out;
}

Tensor elu_backward(const Tensor& input, const Tensor& grad_out, double alpha) {
  Tensor g(input.shape);
  const auto x = input.flat().array();
  g.flat().array() = grad_out.flat().array() * (x > 0.0).select(1.0, alpha * x.min(0.0).exp());
  return g;
}

PoolResult maxpool_forward(const Tensor& input, int window, int stride) {
  require_rank(input, 3, "maxpool input");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (window < 1 || stride < 1) throw DimensionError("pool window and stride must be >= 1");
  const std::size_t w = static_cast<std::size_t>(window), s = static_cast<std::size_t>(stride);
  if (w > H || w > W) throw DimensionError("pool window larger than input " + shape_string(input.shape));
  const std::size_t Ho = out_extent(H, w, s), Wo = out_extent(W, w, s);
  PoolResult r{Tensor({C, Ho, Wo}), std::vector<std::size_t>(C * Ho * Wo)};
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const std::size_t origin = (c * H + oy * s) * W + ox * s;
        std::size_t best = origin;
        double best_v = input.data[origin];
        for (std::size_t dy = 0; dy < w; ++dy) {
          const std::size_t row = origin + dy * W;
          for (std::size_t dx = 0; dx < w; ++dx)
            if (input.data[row + dx] > best_v) best_v = input.data[best = row + dx];
        }
        const std::size_t o = (c * Ho + oy) * Wo + ox;
        r.output.data[o] = best_v;
        r.argmax[o] = best;
      }
  return r;
}

Tensor maxpool(const Tensor& input, int window, int stride) { return maxpool_forward(input, window, stride).output; }

Tensor maxpool_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax, const Tensor& grad_out) {
  Tensor g(input_shape, 0.0);
  for (std::size_t o = 0; o < argmax.size(); ++o) g.data[argmax[o]] += grad_out.data[o];
  return g;
}

Tensor dense_forward(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "dense weight");
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  if (input.size() != n)
    throw DimensionError("dense input width " + std::to_string(input.size()) + " != " + std::to_string(n));
  if (bias.size() != m) throw DimensionError("dense bias length mismatch");
  Tensor out({m});
  out.flat().noalias() = weight.matrix(m, n) * input.flat();
  out.flat() += bias.flat();
  return out;
}

DenseGrads dense_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out) {
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  DenseGrads g{Tensor(input.shape), Tensor(weight.shape), grad_out};
  g.bias.shape = {m};
  g.weight.matrix(m, n).noalias() = grad_out.flat() * input.flat().transpose();
  g.input.flat().noalias() = weight.matrix(m, n).transpose() * grad_out.flat();
  return g;
}

Tensor softmax(const Tensor& logits) {
  logits.check_finite("softmax logits");
  Tensor p(logits.shape);
  if (logits.size() == 0) return p;
  const double mx = *std::max_element(logits.data.begin(), logits.data.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p.data[i] = std::exp(logits.data[i] - mx));
  for (double& v : p.data) v /= z;
  return p;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& grad_out) {
  const double dot = probs.flat().dot(grad_out.flat());
  Tensor g(probs.shape);
  for (std::size_t i = 0; i < probs.size(); ++i) g.data[i] = probs.data[i] * (grad_out.data[i] - dot);
  return g;
}

Tensor sigmoid(const Tensor& input) {
  Tensor out(input.shape);
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double x = input.data[i];
    out.data[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return out;
}

Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out) {
  Tensor g(output.shape);
  for (std::size_t i = 0; i < output.size(); ++i)
    g.data[i] = grad_out.data[i] * output.data[i] * (1.0 - output.data[i]);
  return g;
}

Tensor dropout_mask(const Shape& shape, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1)");
  Tensor m(shape, 1.0);
  if (rate == 0.0) return m;
  Rng rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  for (double& v : m.data) v = keep(rng) ? scale : 0.0;
  return m;
}

double cross_entropy(const Tensor& probs, std::size_t label) {
  if (label >= probs.size()) throw DimensionError("label out of range for cross-entropy");
  return -std::log(std::max(probs.data[label], std::numeric_limits<double>::min()));
}

}  // namespace dualroi::ops
