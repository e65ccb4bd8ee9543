#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "rbsn/mask.hpp"
#include "rbsn/tensor.hpp"

namespace rbsn {

// ----- layer descriptors ----------------------------------------------------

struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
};

/// Fully-connected layer; a 4-D input is flattened per sample.
struct Linear {
  int in_features = 0;
  int out_features = 0;
  /// Biased layers break positive homogeneity and are rejected by validate().
  bool bias = false;
};

/// Non-affine batch normalization over N,H,W per channel.
struct BatchNorm2d {
  int channels = 0;
};

/// Non-affine batch normalization over N per feature.
struct BatchNorm1d {
  int features = 0;
};

struct Relu {};

struct LeakyRelu {
  double slope = 0.01;
};

/// Non-overlapping k x k average pooling.
struct AvgPool {
  int kernel = 2;
};

/// Saves the current activation for the matching ResidualEnd.
struct ResidualBegin {};

/// Adds the saved activation back. With shortcut_channels > 0 the saved
/// activation first goes through a masked 1x1 convolution (stride
/// shortcut_stride) and a BatchNorm2d.
struct ResidualEnd {
  int shortcut_channels = 0;
  int shortcut_stride = 1;
};

using LayerDesc = std::variant<Conv2d, Linear, BatchNorm2d, BatchNorm1d, Relu, LeakyRelu, AvgPool, ResidualBegin,
                               ResidualEnd>;

struct NetworkSpec {
  /// Per-sample input shape: {C, H, W} for images or {D} for vectors.
  Shape input_shape;
  std::vector<LayerDesc> layers;
  /// Append a BatchNorm1d over the logits just before the loss.
  bool last_bn = true;
  int class_count = 10;

  /// Shape inference over the whole stack; throws ShapeError/ConfigError.
  void validate() const;
};

/// A convolution or fully-connected layer that owns frozen weights and scores.
struct PrunableLayer {
  std::string name;
  Shape weight_shape;
  /// Inputs feeding one output unit (in * k * k for convolutions).
  std::size_t fan_in = 0;
  bool is_conv = false;
  int kernel = 1;
  int in_channels = 0;
  int out_channels = 0;
  /// Output feature-map side (1 for fully-connected layers).
  std::size_t output_side = 1;
};

std::vector<PrunableLayer> prunable_layers(const NetworkSpec& spec);
LayerSizes prunable_sizes(const NetworkSpec& spec);
std::string describe(const NetworkSpec& spec);

// ----- state ----------------------------------------------------------------

enum class BnMode { Train, Eval };

struct BnState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  explicit BnState(std::size_t features = 0) : running_mean(features, 0.0), running_var(features, 1.0) {}
  bool operator==(const BnState&) const = default;
};

std::vector<BnState> fresh_bn_states(const NetworkSpec& spec);

// ----- initialization -------------------------------------------------------

/// Every weight independently +1 or -1.
template <typename T>
std::vector<Tensor<T>> binary_init(const NetworkSpec& spec, std::uint64_t seed);

/// Same signs as binary_init for the same seed, magnitude sqrt(2 / (fan_in * (1 - r))).
template <typename T>
std::vector<Tensor<T>> signed_kaiming_const_init(const NetworkSpec& spec, double r, std::uint64_t seed);

double signed_kaiming_magnitude(std::size_t fan_in, double r);

enum class ScoreInitKind { Uniform, FanScaled };

struct ScoreInit {
  ScoreInitKind kind = ScoreInitKind::Uniform;
  /// Half-width a of U[-a, a] for the uniform scheme.
  double halfwidth = 0.001;
};

/// Uniform on [-a, a], or on [-sqrt(1/fan_in), sqrt(1/fan_in)] for the fan-scaled scheme.
ScoreSet init_scores(const NetworkSpec& spec, const ScoreInit& init, std::uint64_t seed);

// ----- forward / backward ---------------------------------------------------

struct ForwardOptions {
  BnMode mode = BnMode::Train;
  /// Train mode only: fold batch statistics into the running estimates.
  bool update_running_stats = true;
};

struct BackwardOptions {
  bool weight_grads = true;
  bool input_grad = true;
  /// Record dL/d(input) of every node (debugging and probes).
  bool record_node_input_grads = false;
};

template <typename T>
struct NodeCache {
  Shape in_shape;
  Tensor<T> saved;    // conv: im2col columns; linear/relu: input; bn: normalized output
  std::vector<double> inv_std;
  BnMode bn_mode = BnMode::Train;
  std::vector<NodeCache> shortcut;  // residual projection: conv, bn
};

template <typename T>
struct ForwardPass {
  Tensor<T> logits;
  std::vector<NodeCache<T>> nodes;
  std::vector<Tensor<T>> effective_weights;
  Shape input_shape;
};

template <typename T>
struct BackwardResult {
  double loss = 0.0;
  Tensor<T> grad_logits;
  /// dL/d(w * m) for each prunable layer.
  std::vector<Tensor<T>> grad_effective;
  /// dL/ds through the straight-through mask.
  std::vector<Tensor<T>> grad_scores;
  Tensor<T> grad_input;
  std::vector<Tensor<T>> node_input_grads;
};

/// Mean softmax cross-entropy and its gradient with respect to the logits.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels, std::type_identity_t<Tensor<T>>* grad);

/// Row-wise argmax; ties go to the lowest class index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

namespace detail {

/// One executable step of a validated NetworkSpec.
struct NodePlan {
  enum class Kind { Conv, Linear, Bn, Relu, LeakyRelu, Pool, ResBegin, ResEnd } kind = Kind::Relu;
  int param = -1;  // prunable layer index
  int bn = -1;     // bn state index
  Conv2d conv{};
  double slope = 0.0;
  int pool = 1;
  // residual projection
  int shortcut_param = -1;
  int shortcut_bn = -1;
  Conv2d shortcut_conv{};
};

std::vector<NodePlan> plan_nodes(const NetworkSpec& spec);

}  // namespace detail

/// Masked network with frozen weights. Only batch-norm running statistics
/// change through forward(); weights are never written by the engine.
template <typename T>
class Network {
 public:
  Network(NetworkSpec spec, std::vector<Tensor<T>> weights);

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<PrunableLayer>& prunable() const { return prunable_; }
  std::span<const Tensor<T>> weights() const { return weights_; }
  /// Mutable access for scale probes; training code never calls this.
  Tensor<T>& mutable_weight(std::size_t layer) { return weights_.at(layer); }
  std::vector<BnState>& bn_states() { return bn_states_; }
  const std::vector<BnState>& bn_states() const { return bn_states_; }
  std::size_t node_count() const { return nodes_.size(); }
  /// Index of the node holding the final fully-connected layer.
  std::size_t last_linear_node() const;

  ForwardPass<T> forward(const MaskSet& mask, const Tensor<T>& input, const ForwardOptions& options = {});
  BackwardResult<T> backward(const ForwardPass<T>& pass, std::span<const int> labels,
                             const BackwardOptions& options = {}) const;
  /// Backward from an arbitrary logit gradient (loss left at 0).
  BackwardResult<T> backward_from_logits(const ForwardPass<T>& pass, const Tensor<T>& grad_logits,
                                         const BackwardOptions& options = {}) const;

  /// Eval-mode argmax.
  std::vector<int> predict(const MaskSet& mask, const Tensor<T>& input);


 private:
  void check_mask(const MaskSet& mask) const;

  NetworkSpec spec_;
  std::vector<PrunableLayer> prunable_;
  std::vector<Tensor<T>> weights_;
  std::vector<BnState> bn_states_;
  std::vector<detail::NodePlan> nodes_;
};

/// Recompute running statistics with train-mode passes over `input` in
/// batches (momentum is respected, as during training).
template <typename T>
void calibrate_bn(Network<T>& net, const MaskSet& mask, const Tensor<T>& input, std::size_t batch_size);

}  // namespace rbsn
