#pragma once

#include <array>

#include "stni/layers.hpp"

namespace stni {

// Interlinked CNN: four fully convolutional branches at scales 1, 1/2, 1/4,
// 1/8 that exchange up/downsampled features between convolution rounds,
// then fuse at full resolution into L output channels.
struct ICNNConfig {
  int in_channels = 3;
  int out_channels = 9;                       // L
  std::array<int, 4> branch_widths{24, 32, 40, 48};  // scales 1 -> 1/8
  int interlink_rounds = 3;
  int fusion_width = 32;
  int input_size = 128;
  bool interlink = true;  // ablation switch; true for the real model

  void validate() const;
  // Channel count entering the conv of `round` on `branch`.
  int in_channels_of(int round, int branch) const;
  // Total trainable parameter count implied by the config.
  int64_t param_count() const;
};

template <typename T>
struct ICNNModel {
  ICNNConfig config;
  std::vector<std::array<ConvBN<T>, 4>> rounds;  // [interlink_rounds][branch]
  ConvBN<T> fuse;
  Tensor<T> out_weight;  // [L, fusion_width, 3, 3], linear output layer
  Tensor<T> out_bias;

  void visit(const ParamVisitor<T>& fn);
  void visit_state(const StateVisitor<T>& fn);
};

// He-initialized model, deterministic for a given seed.
template <typename T>
ICNNModel<T> icnn_init(const ICNNConfig& config, uint64_t seed);

// Raw label scores [B, L, S, S] for an image batch [B, in_channels, S, S].
// No softmax; losses and assembly apply their own squashing.
template <typename T>
Tensor<T> icnn_forward(ICNNModel<T>& model, const Tensor<T>& image, NetMode mode);

}  // namespace stni
