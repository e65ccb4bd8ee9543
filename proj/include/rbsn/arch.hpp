#pragma once

#include <array>
#include <string>
#include <string_view>

#include "rbsn/nn.hpp"

namespace rbsn {

enum class Activation { Relu, LeakyRelu };

/// Four conv-BN-activation blocks followed by one fully-connected layer.
/// Pooling is applied after the last blocks until the feature map reaches
/// 2 x 2 (four pools for a 32 x 32 input, two for 8 x 8).
NetworkSpec make_cnn4(const Shape& input, int classes, std::array<int, 4> widths = {32, 64, 128, 192},
                      Activation act = Activation::Relu, bool last_bn = true);

/// Stem conv, two stages of two basic residual blocks (the second stage
/// halves resolution through a projected shortcut), global pooling, fc.
NetworkSpec make_resnet_mini(const Shape& input, int classes, int base_width = 16, Activation act = Activation::Relu,
                             bool last_bn = true);

/// Two small 3x3 convolutions and a classifier; used for gradient checks.
NetworkSpec make_cnn3_small(const Shape& input, int classes, bool last_bn = true);

/// Multi-layer perceptron on vector inputs: fc-BN-activation per hidden layer.
NetworkSpec make_mlp(std::size_t input_dim, const std::vector<int>& hidden, int classes,
                     Activation act = Activation::Relu, bool last_bn = true);

/// Comma-separated layer list, e.g.
/// "conv:16:3:1:1,bn2d,relu,pool:2,fc:10". Channel and feature counts of
/// bn2d/bn1d/fc inputs are inferred from the running shape.
NetworkSpec parse_layers(std::string_view text, const Shape& input, int classes, bool last_bn);

/// Builds a named architecture: cnn4, resnet_mini, cnn3, mlp, or "custom:<layers>".
NetworkSpec make_architecture(std::string_view name, const Shape& input, int classes, Activation act, bool last_bn);

}  // namespace rbsn
