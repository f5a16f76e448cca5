#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maxprune/tensor.hpp"

namespace maxprune {

enum class LayerKind { conv2d, maxpool2, dense, relu, maxout, softmax };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

// One layer of a sequential architecture.
//   conv2d:  units = filters, kernel = square kernel size (stride 1, valid)
//   dense:   units = output width
//   maxout:  group = k (inputs per unit, as built)
//   softmax: units = classes; a dense layer producing the logits that the
//            softmax cross-entropy consumes
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;
  std::size_t kernel = 0;
  std::size_t group = 0;

  bool has_weights() const {
    return kind == LayerKind::conv2d || kind == LayerKind::dense || kind == LayerKind::softmax;
  }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class Variant { baseline, mfc, mc };

const char* to_string(Variant v);
Variant variant_from_string(const std::string& name);

struct NetworkSpec {
  Variant variant = Variant::baseline;
  std::size_t fc_size = 512;
  std::size_t input_channels = 1;
  std::size_t input_height = 28;
  std::size_t input_width = 28;
  std::vector<LayerSpec> layers;

  // LeNet-style reference architecture:
  //   conv(conv1, 5x5) relu pool conv(conv2, 5x5) [relu|maxout] pool
  //   dense(fc) [relu|maxout] softmax(10)
  // conv2 == 0 picks 50 filters, or 64 for the MC variant.
  static NetworkSpec reference(Variant variant, std::size_t fc_size, std::size_t k = 4,
                               std::size_t conv1 = 20, std::size_t conv2 = 0);

  // Same architecture with every maxout replaced by ReLU: the reference the
  // pruned-weight percentage is measured against.
  NetworkSpec without_maxout() const;

  // Index of the maxout layer, if any.
  std::optional<std::size_t> maxout_index() const;

  // Throws StructureError unless the layers chain with consistent shapes.
  void validate() const;

  Shape input_shape(std::size_t batch) const {
    return Shape{batch, input_channels, input_height, input_width};
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// Bookkeeping for the (single) maxout layer. Units are laid out as
// unit-major groups of k_current adjacent neurons (channels for MC), and
// survivors[u][s] is the index that neuron had in the network as built.
struct MaxoutState {
  std::size_t k_original = 0;
  std::size_t k_current = 0;
  std::size_t unit_count = 0;
  std::vector<std::vector<std::uint32_t>> survivors;
  std::vector<std::vector<std::uint64_t>> win_counts;

  static MaxoutState fresh(std::size_t width, std::size_t k);

  std::size_t width() const { return unit_count * k_current; }
  void reset_counts();
  // Throws StructureError on any invariant violation.
  void validate() const;

  friend bool operator==(const MaxoutState&, const MaxoutState&) = default;
};

// Winning slot per (sample, unit, position); positions is 1 for a dense
// maxout and H*W for a channel maxout.
struct MaxoutWinners {
  std::size_t batch = 0;
  std::size_t units = 0;
  std::size_t positions = 0;
  std::size_t k = 0;
  std::vector<std::uint8_t> slot;

  std::uint8_t at(std::size_t b, std::size_t u, std::size_t p) const {
    return slot[(b * units + u) * positions + p];
  }
};

struct MaxoutResult {
  Tensor output;
  MaxoutWinners winners;
};

// y[u] = max over the unit's k_current inputs; ties go to the lowest slot,
// which is also the lowest original index. Input is [B, W] or [B, C, H, W].
MaxoutResult maxout_forward(const Tensor& x, const MaxoutState& state);
// Same, and adds every winner to state.win_counts when `count` is set.
MaxoutResult maxout_forward(const Tensor& x, MaxoutState& state, bool count);
Tensor maxout_backward(const Tensor& grad_y, const MaxoutWinners& winners,
                       const MaxoutState& state);

struct DenseGrads {
  Tensor input;  // empty when not requested
  Tensor weight;
  Tensor bias;
};

// y = x W^T + b, with x flattened to [B, in] and W stored [out, in].
Tensor dense_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);
DenseGrads dense_backward(const Tensor& grad_y, const Tensor& x, const Tensor& weight,
                          bool need_input_grad);

// Trainable tensors of one layer. `mask` is empty or has one entry per
// weight element; nonzero marks a pruned entry that is held at exactly 0.
struct LayerParams {
  Tensor weight;
  Tensor bias;
  std::vector<std::uint8_t> mask;

  bool has_mask() const { return !mask.empty(); }
};

struct Network {
  NetworkSpec spec;
  std::vector<LayerParams> params;  // one per layer; empty for parameter-free layers
  std::optional<MaxoutState> maxout;
  // Bumped by every structural change; forward caches remember it.
  std::uint64_t structure_version = 0;

  // Current output width of a weighted layer (rows / filters).
  std::size_t layer_width(std::size_t layer) const { return params[layer].weight.shape()[0]; }

  // Throws StructureError unless parameters, masks, and maxout bookkeeping
  // agree with the network spec.
  void validate() const;

  // Zero every masked weight.
  void apply_masks();
};

Network build_network(const NetworkSpec& spec, Rng& rng);
Network build_network(const NetworkSpec& spec, std::uint64_t seed);

// Activation shape after each layer for a batch of size `batch`.
std::vector<Shape> activation_shapes(const Network& net, std::size_t batch);

struct LayerCache {
  Tensor input;
  Tensor cols;                          // conv patch matrix
  std::vector<std::uint32_t> argmax;    // pooling winners
  std::optional<MaxoutWinners> winners; // maxout winners
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  std::uint64_t structure_version = 0;
};

struct ForwardResult {
  Tensor logits;
  ForwardCache cache;
};

// Batch is [B, C, H, W] matching the network spec's input. When `count` is
// set the maxout layer adds its winners to net.maxout->win_counts.
ForwardResult forward(Network& net, const Tensor& batch, bool count);
ForwardResult forward(const Network& net, const Tensor& batch);
// Logits only; no cache is retained.
Tensor predict(const Network& net, const Tensor& batch);

struct LossResult {
  float loss = 0.0f;
  Tensor grad_logits;
};

// Mean softmax cross-entropy over the batch, and its gradient
// (softmax - onehot) / B. Labels must lie in [0, classes).
LossResult softmax_xent(const Tensor& logits, std::span<const int> labels);

struct ParamGrad {
  Tensor weight;
  Tensor bias;
};

// Gradients aligned with Network::params.
struct Gradients {
  std::vector<ParamGrad> layers;
};

// Gradient of the loss for every weight and bias; masked entries are zero.
Gradients backward(const Network& net, const ForwardCache& cache, const Tensor& grad_logits);

}  // namespace maxprune
