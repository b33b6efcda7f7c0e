#include "dualroi/tape.hpp"

#include "dualroi/errors.hpp"
#include "dualroi/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace dualroi {

Tape::Var Tape::push(Tensor value, std::function<void(Tape&, Var)> backprop) {
  value.check_finite("tape forward");
  nodes_.push_back(Node{std::move(value), nullptr, {}, std::move(backprop), nullptr});
  return nodes_.size() - 1;
}

void Tape::check(Var v) const {
  if (v >= nodes_.size()) throw StateError("tape variable " + std::to_string(v) + " was never recorded");
}

void Tape::accumulate(Var v, std::vector<double>&& g) {
  auto& n = nodes_[v];
  if (!n.sink && n.grad.empty()) {
    n.grad = std::move(g);
    return;
  }
  accumulate(v, std::span<const double>(g));
}

void Tape::accumulate(Var v, std::span<const double> g) {
  auto& dst = nodes_[v].sink ? *nodes_[v].sink : nodes_[v].grad;
  if (dst.empty()) dst.assign(g.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tape::Var Tape::constant(Tensor value) { return push(std::move(value), nullptr); }

Tape::Var Tape::parameter(const Tensor& value, std::vector<double>* grad_sink) {
  if (grad_sink && grad_sink->size() != value.size()) throw DimensionError("gradient sink size mismatch");
  nodes_.push_back(Node{Tensor(), &value, {}, nullptr, grad_sink});
  return nodes_.size() - 1;
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return val(v);
}

const std::vector<double>& Tape::grad(Var v) const {
  check(v);
  if (!backward_done_) throw StateError("gradient requested before backward");
  return nodes_[v].sink ? *nodes_[v].sink : nodes_[v].grad;
}

Tape::Var Tape::conv2d(Var input, Var kernels, Var bias, int stride) {
  check(input), check(kernels), check(bias);
  const Tensor& x = val(input);
  const Tensor& w = val(kernels);
  Tensor out = ops::conv2d_forward(x, w, val(bias), stride);
  auto cols = std::make_shared<RowMatrix>(ops::im2col(x, static_cast<int>(w.dim(2)), stride));
  return push(std::move(out), [=](Tape& t, Var self) {
    const Tensor& wk = t.val(kernels);
    const std::size_t K = wk.dim(0), n = static_cast<std::size_t>(cols->cols());
    ConstMatrixMap g(t.nodes_[self].grad.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(n));
    const RowMatrix gk = g * cols->transpose();
    const Eigen::VectorXd gb = g.rowwise().sum();
    const RowMatrix gcols = wk.matrix(K, wk.size() / K).transpose() * g;
    t.accumulate(kernels, std::span<const double>(gk.data(), static_cast<std::size_t>(gk.size())));
    t.accumulate(bias, std::span<const double>(gb.data(), static_cast<std::size_t>(gb.size())));
    if (!t.nodes_[input].is_leaf_constant())
      t.accumulate(input, std::move(ops::col2im(gcols, t.val(input).shape, static_cast<int>(wk.dim(2)), stride).data));
  });
}

Tape::Var Tape::maxpool(Var input, int window, int stride) {
  check(input);
  auto pooled = ops::maxpool_forward(val(input), window, stride);
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(pooled.argmax));
  return push(std::move(pooled.output), [=](Tape& t, Var self) {
    const auto& g = t.nodes_[self].grad;
    std::vector<double> gi(t.val(input).size(), 0.0);
    for (std::size_t o = 0; o < argmax->size(); ++o) gi[(*argmax)[o]] += g[o];
    t.accumulate(input, std::move(gi));
  });
}

Tape::Var Tape::dense(Var input, Var weight, Var bias) {
  check(input), check(weight), check(bias);
  Tensor out = ops::dense_forward(val(input), val(weight), val(bias));
  return push(std::move(out), [=](Tape& t, Var self) {
    const Tensor& x = t.val(input);
    const Tensor& w = t.val(weight);
    const auto& g = t.nodes_[self].grad;
    const std::size_t m = w.dim(0), n = w.dim(1);
    ConstVectorMap gv(g.data(), static_cast<Eigen::Index>(m));
    auto& wn = t.nodes_[weight];
    auto& wsink = wn.sink ? *wn.sink : wn.grad;
    if (wsink.empty()) wsink.assign(w.size(), 0.0);
    MatrixMap(wsink.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() +=
        gv * x.flat().transpose();
    t.accumulate(bias, g);
    if (!t.nodes_[input].is_leaf_constant()) {
      const Eigen::VectorXd gx = w.matrix(m, n).transpose() * gv;
      t.accumulate(input, std::span<const double>(gx.data(), static_cast<std::size_t>(gx.size())));
    }
  });
}

Tape::Var Tape::elu(Var input, double alpha) {
  check(input);
  return push(ops::elu(val(input), alpha), [=](Tape& t, Var self) {
    const Tensor& x = t.val(input);
    const Tensor& y = t.val(self);
    const auto& g = t.nodes_[self].grad;
    std::vector<double> gi(g.size());
    // for x <= 0, d/dx alpha*(exp(x)-1) = y + alpha
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] = g[i] * (x.data[i] > 0.0 ? 1.0 : y.data[i] + alpha);
    t.accumulate(input, std::move(gi));
  });
}

Tape::Var Tape::sigmoid(Var input) {
  check(input);
  return push(ops::sigmoid(val(input)), [=](Tape& t, Var self) {
    Tensor g(t.val(self).shape, t.nodes_[self].grad);
    t.accumulate(input, ops::sigmoid_backward(t.val(self), g).data);
  });
}

Tape::Var Tape::softmax(Var logits) {
  check(logits);
  return push(ops::softmax(val(logits)), [=](Tape& t, Var self) {
    Tensor g(t.val(self).shape, t.nodes_[self].grad);
    t.accumulate(logits, ops::softmax_backward(t.val(self), g).data);
  });
}

Tape::Var Tape::dropout(Var input, double rate, std::uint64_t seed) {
  check(input);
  auto mask = std::make_shared<Tensor>(ops::dropout_mask(val(input).shape, rate, seed));
  Tensor out = val(input);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask->data[i];
  return push(std::move(out), [=](Tape& t, Var self) {
    std::vector<double> g = t.nodes_[self].grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask->data[i];
    t.accumulate(input, g);
  });
}

Tape::Var Tape::affine(Var input, double offset, double scale) {
  check(input);
  Tensor out = val(input);
  for (double& v : out.data) v = scale * (v - offset);
  return push(std::move(out), [=](Tape& t, Var self) {
    std::vector<double> g = t.nodes_[self].grad;
    for (double& v : g) v *= scale;
    t.accumulate(input, g);
  });
}

Tape::Var Tape::flatten(Var input) {
  check(input);
  Tensor out = val(input).reshaped({val(input).size()});
  return push(std::move(out), [=](Tape& t, Var self) { t.accumulate(input, t.nodes_[self].grad); });
}

Tape::Var Tape::concat(Var a, Var b) {
  check(a), check(b);
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  std::vector<double> joined(x.data);
  joined.insert(joined.end(), y.data.begin(), y.data.end());
  const std::size_t na = x.size();
  return push(Tensor::vector(std::move(joined)), [=](Tape& t, Var self) {
    const auto& g = t.nodes_[self].grad;
    t.accumulate(a, std::vector<double>(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(na)));
    t.accumulate(b, std::vector<double>(g.begin() + static_cast<std::ptrdiff_t>(na), g.end()));
  });
}

Tape::Var Tape::sum(Var input) {
  check(input);
  double s = 0.0;
  for (double v : val(input).data) s += v;
  return push(Tensor({1}, std::vector<double>{s}), [=](Tape& t, Var self) {
    t.accumulate(input, std::vector<double>(t.val(input).size(), t.nodes_[self].grad[0]));
  });
}

Tape::Var Tape::cross_entropy(Var probs, std::size_t label) {
  check(probs);
  const double loss = ops::cross_entropy(val(probs), label);
  return push(Tensor({1}, std::vector<double>{loss}), [=](Tape& t, Var self) {
    const Tensor& p = t.val(probs);
    std::vector<double> g(p.size(), 0.0);
    g[label] = -t.nodes_[self].grad[0] / std::max(p.data[label], std::numeric_limits<double>::min());
    t.accumulate(probs, g);
  });
}

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw StateError("backward called before any forward pass");
  check(loss);
  if (val(loss).size() != 1) throw StateError("backward target must be a scalar");
  for (auto& n : nodes_) n.grad.clear();
  nodes_[loss].grad.assign(1, 1.0);
  for (Var v = loss + 1; v-- > 0;) {
    auto& n = nodes_[v];
    if (!n.grad.empty() && n.backprop) n.backprop(*this, v);
  }
  for (Var v = 0; v < nodes_.size(); ++v) {
    auto& n = nodes_[v];
    if (n.sink) continue;
    if (n.grad.empty()) n.grad.assign(val(v).size(), 0.0);
    for (double g : n.grad)
      if (!std::isfinite(g)) throw NumericError("non-finite gradient");
  }
  backward_done_ = true;
}

}  // namespace dualroi
