#pragma once

#include "dualroi/tape.hpp"
#include "dualroi/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace dualroi {

enum class LayerKind { conv, maxpool, dense, elu, dropout, softmax, sigmoid };

std::string to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::elu;
  int kernel_count = 0;  // conv: number of kernels
  int kernel_size = 0;   // conv: side of the square kernel; maxpool: window
  int stride = 1;
  int units = 0;         // dense: output width
  double dropout_rate = 0.0;
  double alpha = 1.0;    // elu

  static LayerSpec conv(int kernels, int size, int stride = 1);
  static LayerSpec pool(int window, int stride);
  static LayerSpec dense(int units);
  static LayerSpec elu_layer(double alpha = 1.0);
  static LayerSpec dropout(double rate);
  static LayerSpec softmax_layer();

  void validate() const;
};

/// Options for the VGG-like layout: conv/ELU blocks, max pooling after every
/// conv block but the last, then fully connected ELU layers with dropout.
struct VggOptions {
  std::vector<int> conv_kernels{16, 16, 32, 32, 64};
  int kernel_size = 3;
  int conv_stride = 1;
  int final_conv_stride = 1;
  int pool_window = 2;
  int pool_stride = 2;
  int fc_units = 512;
  int fc_layers = 2;
  double dropout_rate = 0.5;
  int classes = 2;
};

/// Architecture description. Every stream runs through the same `tower`
/// (shared weights); flattened tower outputs are concatenated in stream
/// order and fed to `head`.
struct NetworkSpec {
  int input_size = 0;
  int input_channels = 1;
  int streams = 1;
  std::vector<LayerSpec> tower;
  std::vector<LayerSpec> head;
  // Fixed input normalisation scale * (x - offset).
  double input_offset = 0.0;
  double input_scale = 1.0;

  static NetworkSpec vgg_like(int input_size, int streams, const VggOptions& options = {});

  struct ParamSlot {
    Shape weight;
    Shape bias;
    std::size_t fan_in = 0;
    std::size_t layer = 0;  // index into tower or head
    bool in_tower = false;
  };
  std::vector<ParamSlot> parameter_layout() const;
  /// [C,H,W] leaving the tower for one stream.
  Shape tower_output_shape() const;
  std::size_t head_input_width() const;
  /// Width of the first dense layer (the extracted feature size).
  std::size_t fc1_width() const;
  std::size_t tower_parameter_count() const;
  void validate() const;
};

/// Learned parameters, one weight/bias pair per conv or dense layer.
struct NetworkState {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  std::uint64_t rng_seed = 0;
};

bool operator==(const NetworkState& a, const NetworkState& b);

/// He/MSRA initialisation: truncated normal with std sqrt(2/fan_in) and no
/// sample beyond 2*sqrt(2/fan_in) in magnitude.
/// `input_width` is the channel count for conv layers and the input width for dense.
Tensor msra_init(const LayerSpec& layer, std::size_t input_width, std::uint64_t seed);
/// Biases start at 0.001.
Tensor msra_bias(const LayerSpec& layer);

NetworkState init_network(const NetworkSpec& spec, std::uint64_t seed);
void check_compatible(const NetworkSpec& spec, const NetworkState& state);

struct ParamGrads {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  static ParamGrads zeros_like(const NetworkState& state);
  void add(const ParamGrads& other);
  void scale(double s);
};

/// w <- w - lr * (grad + l2 * w), applied to weights and biases alike.
NetworkState sgd_step(NetworkState state, const ParamGrads& grads, double lr, double l2);

/// Heavy-ball SGD; momentum 0 reduces to sgd_step.
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum = 0.9) : momentum_(momentum) {}
  void step(NetworkState& state, const ParamGrads& grads, double lr, double l2);

 private:
  double momentum_;
  ParamGrads velocity_;
};

/// Binary layout (little-endian): "ASYM", u32 version, u64 rng_seed,
/// u32 layer count, then per layer: u32 rank + u64 dims for weight and bias,
/// followed by the weight and bias f64 payloads.
void save_state(const NetworkState& state, std::ostream& out);
NetworkState load_state(std::istream& in);
void save_state(const NetworkState& state, const std::string& path);
NetworkState load_state(const std::string& path);

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

struct NetworkTrace {
  Tape tape;
  std::vector<Tape::Var> weight_vars;
  std::vector<Tape::Var> bias_vars;
  std::vector<Tape::Var> tower_outputs;  // per stream, [C,H,W]
  Tape::Var fc1 = 0;
  Tape::Var logits = 0;
  Tape::Var output = 0;  // softmax/sigmoid output

  double posterior() const;  // probability of the positive class
};

/// Records a forward pass; `inputs` holds one [C,H,W] tensor per stream.
/// With a `sink`, parameter gradients from a later backward are added into it.
NetworkTrace forward(const NetworkSpec& spec, const NetworkState& state, std::span<const Tensor> inputs,
                     const ForwardOptions& options = {}, ParamGrads* sink = nullptr);

/// Forward, cross-entropy loss and backward for one labelled sample; adds the
/// parameter gradients into `acc` and returns the loss.
double accumulate_gradients(const NetworkSpec& spec, const NetworkState& state, std::span<const Tensor> inputs,
                            std::size_t label, const ForwardOptions& options, ParamGrads& acc);

}  // namespace dualroi
