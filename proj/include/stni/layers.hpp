#pragma once

#include <string>

#include "stni/nn.hpp"
#include "stni/rng.hpp"

namespace stni {

// Learning-rate group of a parameter; assigned by the trainer when models
// are composed for a phase.
enum class LrGroup { fresh, pretrained };

// Visitor over named trainable tensors.
template <typename T>
using ParamVisitor = std::function<void(const std::string& name, Tensor<T>& tensor)>;

// Visitor over named non-trainable state vectors (batchnorm running stats).
template <typename T>
using StateVisitor = std::function<void(const std::string& name, std::vector<T>& values)>;

// conv3x3 + batchnorm + relu block.
template <typename T>
struct ConvBN {
  Tensor<T> weight;  // [out,in,3,3]
  Tensor<T> bias;    // [out]
  Tensor<T> gamma;   // [out]
  Tensor<T> beta;    // [out]
  BatchNormState<T> bn;

  void init(int in_ch, int out_ch, Rng& rng) {
    const int fan_in = in_ch * 9;
    const double std = std::sqrt(2.0 / fan_in);
    std::vector<T> w(static_cast<size_t>(out_ch) * in_ch * 9);
    for (auto& v : w) v = static_cast<T>(rng.gaussian() * std);
    weight = Tensor<T>({out_ch, in_ch, 3, 3}, std::move(w));
    weight.set_requires_grad(true);
    bias = Tensor<T>({out_ch});
    bias.set_requires_grad(true);
    gamma = Tensor<T>::full({out_ch}, T(1));
    gamma.set_requires_grad(true);
    beta = Tensor<T>({out_ch});
    beta.set_requires_grad(true);
    bn = BatchNormState<T>{};
  }

  Tensor<T> forward(const Tensor<T>& x, NetMode mode) {
    return relu(batchnorm2d(conv2d(x, weight, bias), gamma, beta, bn, mode));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".conv.weight", weight);
    fn(prefix + ".conv.bias", bias);
    fn(prefix + ".bn.gamma", gamma);
    fn(prefix + ".bn.beta", beta);
  }

  void visit_state(const std::string& prefix, const StateVisitor<T>& fn) {
    fn(prefix + ".bn.running_mean", bn.running_mean);
    fn(prefix + ".bn.running_var", bn.running_var);
  }
};

}  // namespace stni
