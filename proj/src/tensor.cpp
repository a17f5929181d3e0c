#include "stni/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace stni {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {
thread_local bool g_grad_mode = true;
bool g_finite_checks = true;
}  // namespace

bool grad_mode_enabled() { return g_grad_mode; }
void set_grad_mode(bool on) { g_grad_mode = on; }
bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool on) { g_finite_checks = on; }

template <typename T>
Tensor<T>::Tensor(Shape shape) {
  int64_t n = shape_numel(shape);
  d_ = std::make_shared<TensorStorage<T>>();
  d_->shape = std::move(shape);
  d_->values.assign(static_cast<size_t>(n), T(0));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  d_ = std::make_shared<TensorStorage<T>>();
  d_->shape = std::move(shape);
  d_->values = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.d_->values.begin(), t.d_->values.end(), value);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return d_->values[0];
}

template <typename T>
void Tensor<T>::accumulate_grad(std::span<const T> g) {
  if (g.size() != d_->values.size())
    throw ShapeError("gradient size mismatch on accumulate");
  if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
  T* dst = d_->grad.data();
  const T* src = g.data();
  for (size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor t;
  t.d_ = std::make_shared<TensorStorage<T>>();
  t.d_->shape = d_->shape;
  t.d_->values = d_->values;  // copy; detached targets are small or one-shot
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return detach();
}

template <typename T>
void Tensor<T>::check_finite(const std::string& op) const {
  for (T v : d_->values) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NonFiniteError("non-finite value in output of " + op);
  }
}

template <typename T>
Tensor<T> make_op_output(const std::string& op, Shape shape, std::vector<T> values,
                         std::vector<Tensor<T>> parents,
                         std::function<void(std::span<const T>)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (finite_checks_enabled()) out.check_finite(op);
  if (grad_mode_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.needs_grad();
    if (any) {
      auto node = std::make_shared<GradNode<T>>();
      node->op = op;
      node->parents = std::move(parents);
      node->apply = std::move(backward_fn);
      out.set_node(std::move(node));
    }
  }
  return out;
}

namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.values().begin(), a.values().end());
  const T* bp = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
  Tensor<T> pa = a, pb = b;
  return make_op_output<T>("add", a.shape(), std::move(out), {a, b},
                           [pa, pb](std::span<const T> g) mutable {
                             if (pa.needs_grad()) pa.accumulate_grad(g);
                             if (pb.needs_grad()) pb.accumulate_grad(g);
                           });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> out(a.values().begin(), a.values().end());
  const T* bp = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
  Tensor<T> pa = a, pb = b;
  return make_op_output<T>("sub", a.shape(), std::move(out), {a, b},
                           [pa, pb](std::span<const T> g) mutable {
                             if (pa.needs_grad()) pa.accumulate_grad(g);
                             if (pb.needs_grad()) {
                               std::vector<T> neg(g.begin(), g.end());
                               for (T& v : neg) v = -v;
                               pb.accumulate_grad(neg);
                             }
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.values().begin(), a.values().end());
  const T* bp = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
  Tensor<T> pa = a, pb = b;
  return make_op_output<T>("mul", a.shape(), std::move(out), {a, b},
                           [pa, pb](std::span<const T> g) mutable {
                             if (pa.needs_grad()) {
                               std::vector<T> ga(g.size());
                               for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * pb.data()[i];
                               pa.accumulate_grad(ga);
                             }
                             if (pb.needs_grad()) {
                               std::vector<T> gb(g.size());
                               for (size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * pa.data()[i];
                               pb.accumulate_grad(gb);
                             }
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v *= factor;
  Tensor<T> pa = a;
  return make_op_output<T>("scale", a.shape(), std::move(out), {a},
                           [pa, factor](std::span<const T> g) mutable {
                             if (!pa.needs_grad()) return;
                             std::vector<T> ga(g.begin(), g.end());
                             for (T& v : ga) v *= factor;
                             pa.accumulate_grad(ga);
                           });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  Tensor<T> pa = a;
  return make_op_output<T>("relu", a.shape(), std::move(out), {a},
                           [pa](std::span<const T> g) mutable {
                             if (!pa.needs_grad()) return;
                             std::vector<T> ga(g.size());
                             const T* x = pa.data();
                             for (size_t i = 0; i < g.size(); ++i)
                               ga[i] = x[i] > T(0) ? g[i] : T(0);
                             pa.accumulate_grad(ga);
                           });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(static_cast<size_t>(a.size()));
  const T* x = a.data();
  for (int64_t i = 0; i < a.size(); ++i)
    out[static_cast<size_t>(i)] = T(1) / (T(1) + std::exp(-x[i]));
  // The closure keeps its own copy of the outputs; capturing the output
  // tensor itself would create a storage->node->storage cycle.
  auto y_copy = std::make_shared<std::vector<T>>(out);
  Tensor<T> pa = a;
  return make_op_output<T>("sigmoid", a.shape(), std::move(out), {a},
                           [pa, y_copy](std::span<const T> g) mutable {
                             if (!pa.needs_grad()) return;
                             std::vector<T> ga(g.size());
                             const T* y = y_copy->data();
                             for (size_t i = 0; i < g.size(); ++i)
                               ga[i] = g[i] * y[i] * (T(1) - y[i]);
                             pa.accumulate_grad(ga);
                           });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  Tensor<T> pa = a;
  return make_op_output<T>("sum", {1}, {acc}, {a},
                           [pa](std::span<const T> g) mutable {
                             if (!pa.needs_grad()) return;
                             std::vector<T> ga(static_cast<size_t>(pa.size()), g[0]);
                             pa.accumulate_grad(ga);
                           });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  T inv = T(1) / static_cast<T>(a.size());
  Tensor<T> pa = a;
  return make_op_output<T>("mean", {1}, {acc * inv}, {a},
                           [pa, inv](std::span<const T> g) mutable {
                             if (!pa.needs_grad()) return;
                             std::vector<T> ga(static_cast<size_t>(pa.size()), g[0] * inv);
                             pa.accumulate_grad(ga);
                           });
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& a) {
  if (a.rank() != 4) throw ShapeError("softmax_channels expects [B,C,H,W], got " + shape_str(a.shape()));
  const int B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const int64_t hw = static_cast<int64_t>(H) * W;
  std::vector<T> out(static_cast<size_t>(a.size()));
  const T* x = a.data();
  for (int b = 0; b < B; ++b) {
    const T* xb = x + static_cast<int64_t>(b) * C * hw;
    T* ob = out.data() + static_cast<int64_t>(b) * C * hw;
    for (int64_t p = 0; p < hw; ++p) {
      T mx = xb[p];
      for (int c = 1; c < C; ++c) mx = std::max(mx, xb[c * hw + p]);
      T denom = 0;
      for (int c = 0; c < C; ++c) {
        T e = std::exp(xb[c * hw + p] - mx);
        ob[c * hw + p] = e;
        denom += e;
      }
      T inv = T(1) / denom;
      for (int c = 0; c < C; ++c) ob[c * hw + p] *= inv;
    }
  }
  auto y_copy = std::make_shared<std::vector<T>>(out);
  Tensor<T> pa = a;
  return make_op_output<T>(
      "softmax_channels", a.shape(), std::move(out), {a},
      [pa, y_copy, B, C, hw](std::span<const T> g) mutable {
        if (!pa.needs_grad()) return;
        std::vector<T> ga(g.size());
        const T* y = y_copy->data();
        for (int b = 0; b < B; ++b) {
          const int64_t base = static_cast<int64_t>(b) * C * hw;
          for (int64_t p = 0; p < hw; ++p) {
            T dot = 0;
            for (int c = 0; c < C; ++c) dot += g[base + c * hw + p] * y[base + c * hw + p];
            for (int c = 0; c < C; ++c) {
              const int64_t i = base + c * hw + p;
              ga[i] = y[i] * (g[i] - dot);
            }
          }
        }
        pa.accumulate_grad(ga);
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (input.rank() < 2) throw ShapeError("linear expects rank >= 2 input");
  if (weight.rank() != 2 || bias.rank() != 1)
    throw ShapeError("linear expects weight [out,in] and bias [out]");
  const int B = input.dim(0);
  const int64_t n_in = input.size() / B;
  const int n_out = weight.dim(0);
  if (weight.dim(1) != n_in)
    throw ShapeError("linear: flattened input length " + std::to_string(n_in) +
                     " does not match weight columns " + std::to_string(weight.dim(1)));
  if (bias.dim(0) != n_out) throw ShapeError("linear: bias length mismatch");

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  CMap x(input.data(), B, n_in);
  CMap w(weight.data(), n_out, n_in);
  std::vector<T> out(static_cast<size_t>(B) * n_out);
  Eigen::Map<Mat> y(out.data(), B, n_out);
  y.noalias() = x * w.transpose();
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < n_out; ++o) out[static_cast<size_t>(b) * n_out + o] += bias.data()[o];

  Tensor<T> px = input, pw = weight, pb = bias;
  return make_op_output<T>(
      "linear", {B, n_out}, std::move(out), {input, weight, bias},
      [px, pw, pb, B, n_in, n_out](std::span<const T> g) mutable {
        CMap gy(g.data(), B, n_out);
        CMap x(px.data(), B, n_in);
        CMap w(pw.data(), n_out, n_in);
        if (px.needs_grad()) {
          std::vector<T> gx(static_cast<size_t>(B) * n_in);
          Eigen::Map<Mat>(gx.data(), B, n_in).noalias() = gy * w;
          px.accumulate_grad(gx);
        }
        if (pw.needs_grad()) {
          std::vector<T> gw(static_cast<size_t>(n_out) * n_in);
          Eigen::Map<Mat>(gw.data(), n_out, n_in).noalias() = gy.transpose() * x;
          pw.accumulate_grad(gw);
        }
        if (pb.needs_grad()) {
          std::vector<T> gb(static_cast<size_t>(n_out), T(0));
          for (int b = 0; b < B; ++b)
            for (int o = 0; o < n_out; ++o) gb[static_cast<size_t>(o)] += gy(b, o);
          pb.accumulate_grad(gb);
        }
      });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty input list");
  const int B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  int C = 0;
  for (const auto& p : parts) {
    if (p.rank() != 4 || p.dim(0) != B || p.dim(2) != H || p.dim(3) != W)
      throw ShapeError("concat_channels: incompatible shape " + shape_str(p.shape()));
    C += p.dim(1);
  }
  const int64_t hw = static_cast<int64_t>(H) * W;
  std::vector<T> out(static_cast<size_t>(B) * C * hw);
  for (int b = 0; b < B; ++b) {
    int64_t off = static_cast<int64_t>(b) * C * hw;
    for (const auto& p : parts) {
      const int64_t n = static_cast<int64_t>(p.dim(1)) * hw;
      std::copy_n(p.data() + static_cast<int64_t>(b) * n, n, out.data() + off);
      off += n;
    }
  }
  std::vector<Tensor<T>> parents(parts.begin(), parts.end());
  std::vector<Tensor<T>> handles = parents;
  return make_op_output<T>(
      "concat_channels", {B, C, H, W}, std::move(out), std::move(parents),
      [handles, B, C, hw](std::span<const T> g) mutable {
        int64_t coff = 0;
        for (auto& p : handles) {
          const int64_t n = static_cast<int64_t>(p.dim(1)) * hw;
          if (p.needs_grad()) {
            std::vector<T> gp(static_cast<size_t>(n) * B);
            for (int b = 0; b < B; ++b)
              std::copy_n(g.data() + static_cast<int64_t>(b) * C * hw + coff, n,
                          gp.data() + static_cast<int64_t>(b) * n);
            p.accumulate_grad(gp);
          }
          coff += n;
        }
      });
}

template <typename T>
Tensor<T> stack_flat(const std::vector<Tensor<T>>& parts, Shape out_shape) {
  if (parts.empty()) throw ShapeError("stack_flat: empty input list");
  int64_t total = 0;
  for (const auto& p : parts) total += p.size();
  if (total != shape_numel(out_shape))
    throw ShapeError("stack_flat: element count mismatch for " + shape_str(out_shape));
  std::vector<T> out;
  out.reserve(static_cast<size_t>(total));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<Tensor<T>> parents(parts.begin(), parts.end());
  std::vector<Tensor<T>> handles = parents;
  return make_op_output<T>(
      "stack_flat", std::move(out_shape), std::move(out), std::move(parents),
      [handles](std::span<const T> g) mutable {
        int64_t off = 0;
        for (auto& p : handles) {
          if (p.needs_grad()) p.accumulate_grad(g.subspan(static_cast<size_t>(off), static_cast<size_t>(p.size())));
          off += p.size();
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.values().begin(), a.values().end());
  Tensor<T> pa = a;
  return make_op_output<T>("reshape", std::move(shape), std::move(out), {a},
                           [pa](std::span<const T> g) mutable {
                             if (pa.needs_grad()) pa.accumulate_grad(g);
                           });
}

template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& a, int out_h, int out_w) {
  if (a.rank() != 4) throw ShapeError("crop_spatial expects [B,C,H,W]");
  const int B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (out_h > H || out_w > W || out_h < 1 || out_w < 1)
    throw ShapeError("crop_spatial: invalid target size");
  if (out_h == H && out_w == W) return reshape(a, a.shape());
  std::vector<T> out(static_cast<size_t>(B) * C * out_h * out_w);
  const T* x = a.data();
  for (int bc = 0; bc < B * C; ++bc)
    for (int y = 0; y < out_h; ++y)
      std::copy_n(x + (static_cast<int64_t>(bc) * H + y) * W, out_w,
                  out.data() + (static_cast<int64_t>(bc) * out_h + y) * out_w);
  Tensor<T> pa = a;
  return make_op_output<T>(
      "crop_spatial", {B, C, out_h, out_w}, std::move(out), {a},
      [pa, B, C, H, W, out_h, out_w](std::span<const T> g) mutable {
        if (!pa.needs_grad()) return;
        std::vector<T> ga(static_cast<size_t>(pa.size()), T(0));
        for (int bc = 0; bc < B * C; ++bc)
          for (int y = 0; y < out_h; ++y)
            std::copy_n(g.data() + (static_cast<int64_t>(bc) * out_h + y) * out_w, out_w,
                        ga.data() + (static_cast<int64_t>(bc) * H + y) * W);
        pa.accumulate_grad(ga);
      });
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (!root.defined()) throw UsageError("backward on undefined tensor");
  if (root.size() != 1) throw UsageError("backward requires a scalar root");
  if (!root.has_node() && !root.requires_grad()) return;

  // Iterative post-order DFS over graph nodes; storage pointer identifies a node.
  std::vector<Tensor<T>> order;
  std::unordered_set<const void*> visited;
  std::vector<std::pair<Tensor<T>, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.storage().get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    GradNode<T>* n = t.has_node() ? t.node() : nullptr;
    if (!n || next >= n->parents.size()) {
      order.push_back(t);
      stack.pop_back();
      continue;
    }
    Tensor<T> parent = n->parents[next++];
    if (parent.has_node() && !visited.count(parent.storage().get())) {
      visited.insert(parent.storage().get());
      stack.emplace_back(parent, 0);
    }
  }

  Tensor<T> seed = root;
  std::vector<T> one{T(1)};
  seed.accumulate_grad(one);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor<T>& t = *it;
    if (!t.has_node()) continue;
    if (t.grad().empty()) continue;  // not reached by any gradient path
    t.node()->apply(t.grad());
  }
}

// Explicit instantiations.
#define STNI_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                              \
  template Tensor<T> make_op_output<T>(const std::string&, Shape, std::vector<T>,        \
                                       std::vector<Tensor<T>>,                           \
                                       std::function<void(std::span<const T>)>);         \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                      \
  template Tensor<T> relu<T>(const Tensor<T>&);                                          \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                       \
  template Tensor<T> sum<T>(const Tensor<T>&);                                           \
  template Tensor<T> mean<T>(const Tensor<T>&);                                          \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);                              \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                  \
  template Tensor<T> stack_flat<T>(const std::vector<Tensor<T>>&, Shape);                \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                \
  template Tensor<T> crop_spatial<T>(const Tensor<T>&, int, int);                        \
  template void backward<T>(const Tensor<T>&);

STNI_INSTANTIATE(float)
STNI_INSTANTIATE(double)

#undef STNI_INSTANTIATE

}  // namespace stni
