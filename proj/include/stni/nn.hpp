#pragma once

#include "stni/tensor.hpp"

namespace stni {

// 3x3 convolution, stride 1, zero padding 1 (the only geometry the nets
// use). input [B,C,H,W], weight [F,C,3,3], bias [F] -> [B,F,H,W].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

// 2x2/stride-2 max pooling. With ceil_mode the trailing partial window is
// kept (max over in-bounds elements), so odd extents produce ceil(H/2).
// Ties route the gradient to the first maximal element in row-major order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, bool ceil_mode = false);

// 3x3/stride-2/pad-1 average pooling with a fixed divisor of 9 (padding
// counts toward the mean). Output is ceil(H/2) x ceil(W/2).
template <typename T>
Tensor<T> avgpool2d_3x3s2(const Tensor<T>& input);

// Nearest-neighbor upsampling by an integer factor >= 1.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor);

// Running statistics owned by a batchnorm layer. Updated in train mode,
// required in eval mode.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  bool initialized() const { return !running_mean.empty(); }
};

enum class NetMode { train, eval };

// Per-channel batch normalization over [B,C,H,W] with affine parameters
// gamma/beta of shape [C]. Train mode uses biased batch statistics and
// updates `state`; eval mode uses the running statistics and throws
// UsageError when none exist yet.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, NetMode mode);

// Bilinear sampling of input [B,C,H,W] at grid [B,h,w,2] of normalized
// source coordinates (grid[...,0] = x, grid[...,1] = y). Corner-aligned
// convention: -1 maps to pixel 0, +1 to pixel W-1 (resp. H-1). Out-of-bounds
// neighbors contribute zero (zero-padding border). Differentiable w.r.t.
// both input and grid.
//
// Coordinates are resolved in double precision and quantized to a 2^-32
// pixel lattice, so positions that are integers up to accumulated rounding
// (integer-centroid crop grids, identity grids) gather pixels exactly.
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& input, const Tensor<T>& grid);

}  // namespace stni
