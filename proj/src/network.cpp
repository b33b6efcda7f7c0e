#include "dualroi/network.hpp"

#include "dualroi/errors.hpp"
#include "dualroi/rng.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>

namespace dualroi {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::dense: return "dense";
    case LayerKind::elu: return "elu";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax: return "softmax";
    case LayerKind::sigmoid: return "sigmoid";
  }
  return "?";
}

LayerSpec LayerSpec::conv(int kernels, int size, int stride) {
  LayerSpec l;
  l.kind = LayerKind::conv;
  l.kernel_count = kernels;
  l.kernel_size = size;
  l.stride = stride;
  return l;
}

LayerSpec LayerSpec::pool(int window, int stride) {
  LayerSpec l;
  l.kind = LayerKind::maxpool;
  l.kernel_size = window;
  l.stride = stride;
  return l;
}

LayerSpec LayerSpec::dense(int units) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.units = units;
  return l;
}

LayerSpec LayerSpec::elu_layer(double alpha) {
  LayerSpec l;
  l.kind = LayerKind::elu;
  l.alpha = alpha;
  return l;
}

LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec l;
  l.kind = LayerKind::dropout;
  l.dropout_rate = rate;
  return l;
}

LayerSpec LayerSpec::softmax_layer() {
  LayerSpec l;
  l.kind = LayerKind::softmax;
  return l;
}

void LayerSpec::validate() const {
  if (stride < 1) throw ConfigError(to_string(kind) + " layer stride must be >= 1");
  switch (kind) {
    case LayerKind::conv:
      if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("conv kernel size must be odd and >= 1");
      if (kernel_count < 1) throw ConfigError("conv layer needs at least one kernel");
      break;
    case LayerKind::maxpool:
      if (kernel_size < 1) throw ConfigError("pool window must be >= 1");
      break;
    case LayerKind::dense:
      if (units < 1) throw ConfigError("dense layer needs units >= 1");
      break;
    case LayerKind::dropout:
      if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1)");
      break;
    case LayerKind::elu:
      if (!(alpha > 0.0)) throw ConfigError("elu alpha must be > 0");
      break;
    default:
      break;
  }
}

NetworkSpec NetworkSpec::vgg_like(int input_size, int streams, const VggOptions& o) {
  NetworkSpec s;
  s.input_size = input_size;
  s.streams = streams;
  for (std::size_t i = 0; i < o.conv_kernels.size(); ++i) {
    const bool last = i + 1 == o.conv_kernels.size();
    s.tower.push_back(LayerSpec::conv(o.conv_kernels[i], o.kernel_size, last ? o.final_conv_stride : o.conv_stride));
    s.tower.push_back(LayerSpec::elu_layer());
    if (!last) s.tower.push_back(LayerSpec::pool(o.pool_window, o.pool_stride));
  }
  for (int i = 0; i < o.fc_layers; ++i) {
    s.head.push_back(LayerSpec::dense(o.fc_units));
    s.head.push_back(LayerSpec::elu_layer());
    s.head.push_back(LayerSpec::dropout(o.dropout_rate));
  }
  s.head.push_back(LayerSpec::dense(o.classes));
  s.head.push_back(LayerSpec::softmax_layer());
  s.validate();
  return s;
}

Shape NetworkSpec::tower_output_shape() const {
  std::size_t c = static_cast<std::size_t>(input_channels), h = static_cast<std::size_t>(input_size),
              w = h;
  for (const auto& l : tower) {
    if (l.kind == LayerKind::conv || l.kind == LayerKind::maxpool) {
      const auto k = static_cast<std::size_t>(l.kernel_size);
      if (h < k || w < k)
        throw ConfigError("input size " + std::to_string(input_size) + " too small for the tower");
      h = (h - k) / static_cast<std::size_t>(l.stride) + 1;
      w = (w - k) / static_cast<std::size_t>(l.stride) + 1;
      if (l.kind == LayerKind::conv) c = static_cast<std::size_t>(l.kernel_count);
    } else if (l.kind == LayerKind::dense || l.kind == LayerKind::softmax || l.kind == LayerKind::sigmoid) {
      throw ConfigError(to_string(l.kind) + " layer not allowed in the convolutional tower");
    }
  }
  return {c, h, w};
}

std::size_t NetworkSpec::head_input_width() const {
  return numel(tower_output_shape()) * static_cast<std::size_t>(streams);
}

std::vector<NetworkSpec::ParamSlot> NetworkSpec::parameter_layout() const {
  std::vector<ParamSlot> slots;
  std::size_t c = static_cast<std::size_t>(input_channels);
  for (std::size_t i = 0; i < tower.size(); ++i) {
    const auto& l = tower[i];
    if (l.kind != LayerKind::conv) continue;
    const auto k = static_cast<std::size_t>(l.kernel_size), K = static_cast<std::size_t>(l.kernel_count);
    slots.push_back({{K, c, k, k}, {K}, c * k * k, i, true});
    c = K;
  }
  std::size_t width = head_input_width();
  for (std::size_t i = 0; i < head.size(); ++i) {
    const auto& l = head[i];
    if (l.kind != LayerKind::dense) continue;
    const auto m = static_cast<std::size_t>(l.units);
    slots.push_back({{m, width}, {m}, width, i, false});
    width = m;
  }
  return slots;
}

std::size_t NetworkSpec::fc1_width() const {
  for (const auto& l : head)
    if (l.kind == LayerKind::dense) return static_cast<std::size_t>(l.units);
  throw ConfigError("network head has no dense layer");
}

std::size_t NetworkSpec::tower_parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : parameter_layout())
    if (s.in_tower) n += numel(s.weight) + numel(s.bias);
  return n;
}

void NetworkSpec::validate() const {
  if (input_size < 1 || input_channels < 1) throw ConfigError("network input extents must be positive");
  if (streams < 1) throw ConfigError("network needs at least one stream");
  for (const auto& l : tower) l.validate();
  for (const auto& l : head) {
    l.validate();
    if (l.kind == LayerKind::conv || l.kind == LayerKind::maxpool)
      throw ConfigError(to_string(l.kind) + " layer not allowed after flattening");
  }
  if (head.empty()) throw ConfigError("network head is empty");
  (void)tower_output_shape();
}

bool operator==(const NetworkState& a, const NetworkState& b) {
  return a.rng_seed == b.rng_seed && a.weights == b.weights && a.biases == b.biases;
}

namespace {

// Variance of a unit normal truncated to [-c, c].
double truncated_variance(double c) {
  const double pdf = std::exp(-0.5 * c * c) / std::sqrt(2.0 * M_PI);
  const double mass = std::erf(c / std::sqrt(2.0));
  return 1.0 - 2.0 * c * pdf / mass;
}

// Solves c = 2 * sqrt(truncated_variance(c)) by bisection (c ~ 1.4515).
double truncation_point() {
  double lo = 1.0, hi = 2.5;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (mid - 2.0 * std::sqrt(truncated_variance(mid)) > 0.0 ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

Tensor msra_init(const LayerSpec& layer, std::size_t input_width, std::uint64_t seed) {
  Shape shape;
  std::size_t fan_in = 0;
  if (layer.kind == LayerKind::conv) {
    const auto k = static_cast<std::size_t>(layer.kernel_size);
    shape = {static_cast<std::size_t>(layer.kernel_count), input_width, k, k};
    fan_in = input_width * k * k;
  } else if (layer.kind == LayerKind::dense) {
    shape = {static_cast<std::size_t>(layer.units), input_width};
    fan_in = input_width;
  } else {
    throw ConfigError("msra_init needs a conv or dense layer");
  }
  if (fan_in == 0) throw ConfigError("msra_init: fan_in is zero");
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  // The base normal is widened so that, after rejecting draws beyond 2*sd,
  // the surviving samples still have standard deviation sd.
  static const double cut = truncation_point();
  const double base_sd = 2.0 * sd / cut;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor w(shape);
  for (double& v : w.data) {
    double z;
    do z = normal(rng);
    while (std::abs(z) > cut);
    v = z * base_sd;
  }
  return w;
}

Tensor msra_bias(const LayerSpec& layer) {
  const std::size_t n = layer.kind == LayerKind::conv ? static_cast<std::size_t>(layer.kernel_count)
                                                       : static_cast<std::size_t>(layer.units);
  return Tensor({n}, 0.001);
}

NetworkState init_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  NetworkState state;
  state.rng_seed = seed;
  std::uint64_t idx = 0;
  for (const auto& slot : spec.parameter_layout()) {
    const auto& layer = slot.in_tower ? spec.tower[slot.layer] : spec.head[slot.layer];
    state.weights.push_back(msra_init(layer, slot.weight[1], derive_seed(seed, {idx++})));
    state.biases.push_back(msra_bias(layer));
  }
  return state;
}

void check_compatible(const NetworkSpec& spec, const NetworkState& state) {
  const auto layout = spec.parameter_layout();
  if (state.weights.size() != layout.size() || state.biases.size() != layout.size())
    throw StateError("network state has " + std::to_string(state.weights.size()) + " layers, spec expects " +
                     std::to_string(layout.size()));
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (state.weights[i].shape != layout[i].weight || state.biases[i].shape != layout[i].bias)
      throw StateError("network state layer " + std::to_string(i) + " has shape " +
                       shape_string(state.weights[i].shape) + ", spec expects " + shape_string(layout[i].weight));
}

ParamGrads ParamGrads::zeros_like(const NetworkState& state) {
  ParamGrads g;
  for (const auto& w : state.weights) g.weights.emplace_back(w.shape, 0.0);
  for (const auto& b : state.biases) g.biases.emplace_back(b.shape, 0.0);
  return g;
}

void ParamGrads::add(const ParamGrads& other) {
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i].flat() += other.weights[i].flat();
  for (std::size_t i = 0; i < biases.size(); ++i) biases[i].flat() += other.biases[i].flat();
}

void ParamGrads::scale(double s) {
  for (auto& w : weights) w.flat() *= s;
  for (auto& b : biases) b.flat() *= s;
}

NetworkState sgd_step(NetworkState state, const ParamGrads& grads, double lr, double l2) {
  if (!(lr > 0.0) || l2 < 0.0) throw ConfigError("sgd_step needs lr > 0 and l2 >= 0");
  auto update = [&](std::vector<Tensor>& params, const std::vector<Tensor>& g) {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < params[i].size(); ++j)
        params[i].data[j] -= lr * (g[i].data[j] + l2 * params[i].data[j]);
  };
  update(state.weights, grads.weights);
  update(state.biases, grads.biases);
  return state;
}

void MomentumSgd::step(NetworkState& state, const ParamGrads& grads, double lr, double l2) {
  if (!(lr > 0.0) || l2 < 0.0) throw ConfigError("optimizer needs lr > 0 and l2 >= 0");
  for (const auto& g : grads.weights) g.check_finite("weight gradient");
  for (const auto& g : grads.biases) g.check_finite("bias gradient");
  if (velocity_.weights.empty()) velocity_ = ParamGrads::zeros_like(state);
  auto update = [&](std::vector<Tensor>& params, std::vector<Tensor>& vel, const std::vector<Tensor>& g) {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < params[i].size(); ++j) {
        double& v = vel[i].data[j];
        v = momentum_ * v + g[i].data[j] + l2 * params[i].data[j];
        params[i].data[j] -= lr * v;
      }
  };
  update(state.weights, velocity_.weights, grads.weights);
  update(state.biases, velocity_.biases, grads.biases);
}

namespace {

constexpr char kMagic[4] = {'A', 'S', 'Y', 'M'};
constexpr std::uint32_t kStateVersion = 1;

template <class T>
void put(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("truncated network state");
  return value;
}

void put_shape(std::ostream& out, const Shape& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  for (auto d : s) put<std::uint64_t>(out, d);
}

Shape get_shape(std::istream& in) {
  const auto rank = get<std::uint32_t>(in);
  if (rank > 8) throw IoError("implausible tensor rank in network state");
  Shape s(rank);
  for (auto& d : s) d = get<std::uint64_t>(in);
  return s;
}

void put_payload(std::ostream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor get_payload(std::istream& in, Shape s) {
  Tensor t(std::move(s));
  in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!in) throw IoError("truncated network state payload");
  return t;
}

}  // namespace

void save_state(const NetworkState& state, std::ostream& out) {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kStateVersion);
  put<std::uint64_t>(out, state.rng_seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(state.weights.size()));
  for (std::size_t i = 0; i < state.weights.size(); ++i) {
    put_shape(out, state.weights[i].shape);
    put_shape(out, state.biases[i].shape);
    put_payload(out, state.weights[i]);
    put_payload(out, state.biases[i]);
  }
  if (!out) throw IoError("failed writing network state");
}

NetworkState load_state(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a network state file (bad magic)");
  const auto version = get<std::uint32_t>(in);
  if (version != kStateVersion) throw IoError("unsupported network state version " + std::to_string(version));
  NetworkState state;
  state.rng_seed = get<std::uint64_t>(in);
  const auto layers = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < layers; ++i) {
    Shape ws = get_shape(in);
    Shape bs = get_shape(in);
    state.weights.push_back(get_payload(in, std::move(ws)));
    state.biases.push_back(get_payload(in, std::move(bs)));
  }
  return state;
}

void save_state(const NetworkState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  save_state(state, out);
}

NetworkState load_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return load_state(in);
}

double NetworkTrace::posterior() const {
  const Tensor& out = tape.value(output);
  return out.size() == 1 ? out[0] : out[1];
}

NetworkTrace forward(const NetworkSpec& spec, const NetworkState& state, std::span<const Tensor> inputs,
                     const ForwardOptions& options, ParamGrads* sink) {
  if (inputs.size() != static_cast<std::size_t>(spec.streams))
    throw DimensionError("network expects " + std::to_string(spec.streams) + " input streams, got " +
                         std::to_string(inputs.size()));
  const Shape expected{static_cast<std::size_t>(spec.input_channels), static_cast<std::size_t>(spec.input_size),
                       static_cast<std::size_t>(spec.input_size)};
  for (const auto& x : inputs)
    if (x.shape != expected)
      throw DimensionError("stream input " + shape_string(x.shape) + " != " + shape_string(expected));
  check_compatible(spec, state);

  NetworkTrace tr;
  Tape& t = tr.tape;
  for (std::size_t i = 0; i < state.weights.size(); ++i) {
    tr.weight_vars.push_back(t.parameter(state.weights[i], sink ? &sink->weights[i].data : nullptr));
    tr.bias_vars.push_back(t.parameter(state.biases[i], sink ? &sink->biases[i].data : nullptr));
  }

  Tape::Var joined = 0;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    Tape::Var x = t.constant(inputs[s]);
    if (spec.input_offset != 0.0 || spec.input_scale != 1.0) x = t.affine(x, spec.input_offset, spec.input_scale);
    std::size_t p = 0;
    for (const auto& l : spec.tower) {
      switch (l.kind) {
        case LayerKind::conv:
          x = t.conv2d(x, tr.weight_vars[p], tr.bias_vars[p], l.stride);
          ++p;
          break;
        case LayerKind::maxpool: x = t.maxpool(x, l.kernel_size, l.stride); break;
        case LayerKind::elu: x = t.elu(x, l.alpha); break;
        case LayerKind::dropout:
          if (options.training) x = t.dropout(x, l.dropout_rate, derive_seed(options.dropout_seed, {s, p}));
          break;
        default: throw ConfigError("unsupported tower layer");
      }
    }
    tr.tower_outputs.push_back(x);
    Tape::Var flat = t.flatten(x);
    joined = s == 0 ? flat : t.concat(joined, flat);
  }

  std::size_t p = 0;
  for (const auto& slot : spec.parameter_layout())
    if (slot.in_tower) ++p;
  Tape::Var x = joined;
  bool seen_dense = false, fc1_set = false;
  for (std::size_t i = 0; i < spec.head.size(); ++i) {
    const auto& l = spec.head[i];
    switch (l.kind) {
      case LayerKind::dense:
        if (seen_dense && !fc1_set) {
          tr.fc1 = x;
          fc1_set = true;
        }
        x = t.dense(x, tr.weight_vars[p], tr.bias_vars[p]);
        ++p;
        seen_dense = true;
        tr.logits = x;
        break;
      case LayerKind::elu: x = t.elu(x, l.alpha); break;
      case LayerKind::dropout:
        if (!fc1_set && seen_dense) {
          tr.fc1 = x;
          fc1_set = true;
        }
        if (options.training && l.dropout_rate > 0.0)
          x = t.dropout(x, l.dropout_rate, derive_seed(options.dropout_seed, {1000 + i}));
        break;
      case LayerKind::softmax: x = t.softmax(x); break;
      case LayerKind::sigmoid: x = t.sigmoid(x); break;
      default: throw ConfigError("unsupported head layer");
    }
  }
  if (!fc1_set) tr.fc1 = tr.logits;
  tr.output = x;
  return tr;
}

double accumulate_gradients(const NetworkSpec& spec, const NetworkState& state, std::span<const Tensor> inputs,
                            std::size_t label, const ForwardOptions& options, ParamGrads& acc) {
  if (acc.weights.size() != state.weights.size()) throw DimensionError("gradient accumulator does not match state");
  NetworkTrace tr = forward(spec, state, inputs, options, &acc);
  Tape& t = tr.tape;
  const Tape::Var loss = t.cross_entropy(tr.output, label);
  t.backward(loss);
  return t.value(loss)[0];
}

}  // namespace dualroi
