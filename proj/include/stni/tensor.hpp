#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stni/errors.hpp"

namespace stni {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

template <typename T>
class Tensor;

// Record of the producing operation: the parent tensors and a closure that
// scatters the output gradient into them.
template <typename T>
struct GradNode {
  std::string op;
  std::vector<Tensor<T>> parents;
  std::function<void(std::span<const T> out_grad)> apply;
};

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;
};

// When false, ops do not record graph nodes (used for detached targets and
// evaluation). Thread-local so concurrent graphs stay independent.
bool grad_mode_enabled();
void set_grad_mode(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_enabled()) { set_grad_mode(false); }
  ~NoGradGuard() { set_grad_mode(prev_); }
  bool prev_;
};

// When true (default), every op verifies its output is finite and throws
// NonFiniteError otherwise. Can be disabled for speed.
bool finite_checks_enabled();
void set_finite_checks(bool on);

// Dense row-major tensor with optional reverse-mode graph node. Handles are
// value types sharing storage; ops are free functions that allocate fresh
// outputs.
template <typename T>
class Tensor {
 public:
  using scalar_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> values);

  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(d_->values.size()); }

  std::span<T> values() { return d_->values; }
  std::span<const T> values() const { return d_->values; }
  T item() const;

  T* data() { return d_->values.data(); }
  const T* data() const { return d_->values.data(); }

  Tensor& set_requires_grad(bool on = true) {
    d_->requires_grad = on;
    return *this;
  }
  bool requires_grad() const { return d_->requires_grad; }
  bool has_node() const { return d_->node != nullptr; }
  // True if backward through this tensor can reach a parameter.
  bool needs_grad() const { return d_ && (d_->requires_grad || d_->node); }

  // Gradient buffer; empty span when no gradient has been accumulated.
  std::span<T> grad() { return d_->grad; }
  std::span<const T> grad() const { return d_->grad; }
  void zero_grad() { d_->grad.assign(d_->values.size(), T(0)); }
  void accumulate_grad(std::span<const T> g);

  // Same storage, no graph node, no requires_grad.
  Tensor detach() const;
  // Deep copy of values (no graph).
  Tensor clone() const;

  std::shared_ptr<TensorStorage<T>> storage() const { return d_; }
  GradNode<T>* node() const { return d_->node.get(); }
  void set_node(std::shared_ptr<GradNode<T>> n) { d_->node = std::move(n); }

  void check_finite(const std::string& op) const;

 private:
  std::shared_ptr<TensorStorage<T>> d_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Builds the output tensor for an op: wires the graph node when grad mode is
// on and some parent needs gradients, and runs the finite check.
template <typename T>
Tensor<T> make_op_output(const std::string& op, Shape shape, std::vector<T> values,
                         std::vector<Tensor<T>> parents,
                         std::function<void(std::span<const T>)> backward);

// ---- elementwise and dense ops ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T>
Tensor<T> sum(const Tensor<T>& a);   // scalar
template <typename T>
Tensor<T> mean(const Tensor<T>& a);  // scalar

// Softmax across the channel axis of a [B,C,H,W] tensor, per pixel.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& a);

// Fully connected layer: input [B, n_in] (higher-rank inputs are treated as
// [B, rest]), weight [n_out, n_in], bias [n_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

// Concatenate [B,C_i,H,W] tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

// Concatenate flattened tensors and reinterpret as out_shape. Used to stack
// per-part patches.
template <typename T>
Tensor<T> stack_flat(const std::vector<Tensor<T>>& parts, Shape out_shape);

// Copy with a new shape (same element count).
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// Top-left spatial crop of a [B,C,H,W] tensor to out_h x out_w.
template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& a, int out_h, int out_w);

// ---- reverse-mode accumulation ----

// Accumulates gradients of `root` (a scalar) into every reachable tensor
// that requires_grad. Gradients of unreachable parameters are left
// untouched. Repeated calls accumulate until zero_grad is called.
template <typename T>
void backward(const Tensor<T>& root);

}  // namespace stni
