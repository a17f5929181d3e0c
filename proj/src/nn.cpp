#include "stni/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "stni/parallel.hpp"

namespace stni {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// im2col for the fixed 3x3/s1/p1 geometry: x [C,H,W] -> col [9C, HW].
template <typename T>
void im2col_3x3(const T* x, int C, int H, int W, T* col) {
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col + ((static_cast<int64_t>(c) * 9) + ky * 3 + kx) * hw;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          T* row = dst + static_cast<int64_t>(y) * W;
          if (sy < 0 || sy >= H) {
            std::fill_n(row, W, T(0));
            continue;
          }
          const T* src = x + (static_cast<int64_t>(c) * H + sy) * W;
          if (dx == 0) {
            std::copy_n(src, W, row);
          } else if (dx < 0) {
            row[0] = T(0);
            std::copy_n(src, W - 1, row + 1);
          } else {
            std::copy_n(src + 1, W - 1, row);
            row[W - 1] = T(0);
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatter-add col [9C, HW] back into x-grad [C,H,W].
template <typename T>
void col2im_3x3(const T* col, int C, int H, int W, T* gx) {
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col + ((static_cast<int64_t>(c) * 9) + ky * 3 + kx) * hw;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          T* dst = gx + (static_cast<int64_t>(c) * H + sy) * W;
          const T* row = src + static_cast<int64_t>(y) * W;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int x = x0; x < x1; ++x) dst[x + dx] += row[x];
        }
      }
    }
  }
}

thread_local std::vector<char> tl_col_buffer;

template <typename T>
T* col_scratch(int64_t n) {
  size_t bytes = static_cast<size_t>(n) * sizeof(T);
  if (tl_col_buffer.size() < bytes) tl_col_buffer.resize(bytes);
  return reinterpret_cast<T*>(tl_col_buffer.data());
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (input.rank() != 4) throw ShapeError("conv2d: input must be [B,C,H,W], got " + shape_str(input.shape()));
  if (weight.rank() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3)
    throw ShapeError("conv2d: weight must be [F,C,3,3], got " + shape_str(weight.shape()));
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int F = weight.dim(0);
  if (weight.dim(1) != C)
    throw ShapeError("conv2d: input channels " + std::to_string(C) + " vs weight channels " +
                     std::to_string(weight.dim(1)));
  if (bias.rank() != 1 || bias.dim(0) != F) throw ShapeError("conv2d: bias must be [F]");

  const int64_t hw = static_cast<int64_t>(H) * W;
  const int64_t kc = static_cast<int64_t>(9) * C;
  std::vector<T> out(static_cast<size_t>(B) * F * hw);

  parallel_for(B, [&](int64_t b0, int64_t b1) {
    T* col = col_scratch<T>(kc * hw);
    for (int64_t b = b0; b < b1; ++b) {
      im2col_3x3(input.data() + b * C * hw, C, H, W, col);
      Eigen::Map<const Mat<T>> wm(weight.data(), F, kc);
      Eigen::Map<const Mat<T>> cm(col, kc, hw);
      Eigen::Map<Mat<T>> om(out.data() + b * F * hw, F, hw);
      om.noalias() = wm * cm;
      for (int f = 0; f < F; ++f) {
        T bv = bias.data()[f];
        T* row = out.data() + (b * F + f) * hw;
        for (int64_t i = 0; i < hw; ++i) row[i] += bv;
      }
    }
  });

  Tensor<T> px = input, pw = weight, pb = bias;
  return make_op_output<T>(
      "conv2d", {B, F, H, W}, std::move(out), {input, weight, bias},
      [px, pw, pb, B, C, H, W, F, hw, kc](std::span<const T> g) mutable {
        const bool need_x = px.needs_grad(), need_w = pw.needs_grad(), need_b = pb.needs_grad();
        if (need_b) {
          std::vector<T> gb(static_cast<size_t>(F), T(0));
          for (int64_t b = 0; b < B; ++b)
            for (int f = 0; f < F; ++f) {
              const T* row = g.data() + (b * F + f) * hw;
              T acc = 0;
              for (int64_t i = 0; i < hw; ++i) acc += row[i];
              gb[static_cast<size_t>(f)] += acc;
            }
          pb.accumulate_grad(gb);
        }
        if (need_w) {
          // Per-item partials summed in batch order keeps accumulation
          // deterministic under any thread count.
          std::vector<T> partial(static_cast<size_t>(B) * F * kc);
          parallel_for(B, [&](int64_t b0, int64_t b1) {
            T* col = col_scratch<T>(kc * hw);
            for (int64_t b = b0; b < b1; ++b) {
              im2col_3x3(px.data() + b * C * hw, C, H, W, col);
              Eigen::Map<const Mat<T>> gm(g.data() + b * F * hw, F, hw);
              Eigen::Map<const Mat<T>> cm(col, kc, hw);
              Eigen::Map<Mat<T>> pm(partial.data() + b * F * kc, F, kc);
              pm.noalias() = gm * cm.transpose();
            }
          });
          std::vector<T> gw(static_cast<size_t>(F) * kc, T(0));
          for (int64_t b = 0; b < B; ++b) {
            const T* p = partial.data() + b * F * kc;
            for (int64_t i = 0; i < F * kc; ++i) gw[static_cast<size_t>(i)] += p[i];
          }
          pw.accumulate_grad(gw);
        }
        if (need_x) {
          std::vector<T> gx(static_cast<size_t>(B) * C * hw, T(0));
          parallel_for(B, [&](int64_t b0, int64_t b1) {
            T* col = col_scratch<T>(kc * hw);
            for (int64_t b = b0; b < b1; ++b) {
              Eigen::Map<const Mat<T>> wm(pw.data(), F, kc);
              Eigen::Map<const Mat<T>> gm(g.data() + b * F * hw, F, hw);
              Eigen::Map<Mat<T>> cm(col, kc, hw);
              cm.noalias() = wm.transpose() * gm;
              col2im_3x3(col, C, H, W, gx.data() + b * C * hw);
            }
          });
          px.accumulate_grad(gx);
        }
      });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, bool ceil_mode) {
  if (input.rank() != 4) throw ShapeError("maxpool2d: input must be [B,C,H,W]");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (!ceil_mode && (H % 2 != 0 || W % 2 != 0))
    throw ShapeError("maxpool2d: odd extent " + shape_str(input.shape()) + " without ceil_mode");
  const int OH = (H + 1) / 2, OW = (W + 1) / 2;
  const int64_t ihw = static_cast<int64_t>(H) * W;
  const int64_t ohw = static_cast<int64_t>(OH) * OW;
  const int64_t planes = static_cast<int64_t>(B) * C;

  std::vector<T> out(static_cast<size_t>(planes) * ohw);
  auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(planes) * ohw);

  parallel_for(planes, [&](int64_t p0, int64_t p1) {
    for (int64_t p = p0; p < p1; ++p) {
      const T* x = input.data() + p * ihw;
      T* o = out.data() + p * ohw;
      int32_t* am = argmax->data() + p * ohw;
      for (int oy = 0; oy < OH; ++oy) {
        for (int ox = 0; ox < OW; ++ox) {
          T best{};
          int32_t best_idx = -1;
          for (int dy = 0; dy < 2; ++dy) {
            const int y = oy * 2 + dy;
            if (y >= H) break;
            for (int dx = 0; dx < 2; ++dx) {
              const int x_ = ox * 2 + dx;
              if (x_ >= W) break;
              const int32_t idx = y * W + x_;
              if (best_idx < 0 || x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          o[oy * OW + ox] = best;
          am[oy * OW + ox] = best_idx;
        }
      }
    }
  });

  Tensor<T> px = input;
  return make_op_output<T>(
      "maxpool2d", {B, C, OH, OW}, std::move(out), {input},
      [px, argmax, planes, ihw, ohw](std::span<const T> g) mutable {
        if (!px.needs_grad()) return;
        std::vector<T> gx(static_cast<size_t>(planes) * ihw, T(0));
        for (int64_t p = 0; p < planes; ++p) {
          const int32_t* am = argmax->data() + p * ohw;
          T* dst = gx.data() + p * ihw;
          const T* gsrc = g.data() + p * ohw;
          for (int64_t i = 0; i < ohw; ++i) dst[am[i]] += gsrc[i];
        }
        px.accumulate_grad(gx);
      });
}

template <typename T>
Tensor<T> avgpool2d_3x3s2(const Tensor<T>& input) {
  if (input.rank() != 4) throw ShapeError("avgpool2d: input must be [B,C,H,W]");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int OH = (H + 1) / 2, OW = (W + 1) / 2;
  const int64_t ihw = static_cast<int64_t>(H) * W;
  const int64_t ohw = static_cast<int64_t>(OH) * OW;
  const int64_t planes = static_cast<int64_t>(B) * C;
  const T inv9 = T(1) / T(9);

  std::vector<T> out(static_cast<size_t>(planes) * ohw);
  parallel_for(planes, [&](int64_t p0, int64_t p1) {
    for (int64_t p = p0; p < p1; ++p) {
      const T* x = input.data() + p * ihw;
      T* o = out.data() + p * ohw;
      for (int oy = 0; oy < OH; ++oy) {
        for (int ox = 0; ox < OW; ++ox) {
          T acc = 0;
          for (int dy = -1; dy <= 1; ++dy) {
            const int y = oy * 2 + dy;
            if (y < 0 || y >= H) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const int x_ = ox * 2 + dx;
              if (x_ < 0 || x_ >= W) continue;
              acc += x[y * W + x_];
            }
          }
          o[oy * OW + ox] = acc * inv9;
        }
      }
    }
  });

  Tensor<T> px = input;
  return make_op_output<T>(
      "avgpool2d", {B, C, OH, OW}, std::move(out), {input},
      [px, planes, H, W, OH, OW, ihw, ohw, inv9](std::span<const T> g) mutable {
        if (!px.needs_grad()) return;
        std::vector<T> gx(static_cast<size_t>(planes) * ihw, T(0));
        for (int64_t p = 0; p < planes; ++p) {
          const T* gsrc = g.data() + p * ohw;
          T* dst = gx.data() + p * ihw;
          for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
              const T gv = gsrc[oy * OW + ox] * inv9;
              for (int dy = -1; dy <= 1; ++dy) {
                const int y = oy * 2 + dy;
                if (y < 0 || y >= H) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                  const int x_ = ox * 2 + dx;
                  if (x_ < 0 || x_ >= W) continue;
                  dst[y * W + x_] += gv;
                }
              }
            }
          }
        }
        px.accumulate_grad(gx);
      });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor) {
  if (input.rank() != 4) throw ShapeError("upsample_nearest: input must be [B,C,H,W]");
  if (factor < 1) throw UsageError("upsample_nearest: factor must be >= 1");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int OH = H * factor, OW = W * factor;
  const int64_t planes = static_cast<int64_t>(B) * C;
  std::vector<T> out(static_cast<size_t>(planes) * OH * OW);

  parallel_for(planes, [&](int64_t p0, int64_t p1) {
    for (int64_t p = p0; p < p1; ++p) {
      const T* x = input.data() + p * H * W;
      T* o = out.data() + p * static_cast<int64_t>(OH) * OW;
      for (int oy = 0; oy < OH; ++oy) {
        const T* srow = x + static_cast<int64_t>(oy / factor) * W;
        T* drow = o + static_cast<int64_t>(oy) * OW;
        for (int ox = 0; ox < OW; ++ox) drow[ox] = srow[ox / factor];
      }
    }
  });

  Tensor<T> px = input;
  return make_op_output<T>(
      "upsample_nearest", {B, C, OH, OW}, std::move(out), {input},
      [px, planes, H, W, OH, OW, factor](std::span<const T> g) mutable {
        if (!px.needs_grad()) return;
        std::vector<T> gx(static_cast<size_t>(planes) * H * W, T(0));
        for (int64_t p = 0; p < planes; ++p) {
          const T* gsrc = g.data() + p * static_cast<int64_t>(OH) * OW;
          T* dst = gx.data() + p * H * W;
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox)
              dst[static_cast<int64_t>(oy / factor) * W + ox / factor] +=
                  gsrc[static_cast<int64_t>(oy) * OW + ox];
        }
        px.accumulate_grad(gx);
      });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, NetMode mode) {
  if (input.rank() != 4) throw ShapeError("batchnorm2d: input must be [B,C,H,W]");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
    throw ShapeError("batchnorm2d: gamma/beta must be [C]");
  const int64_t hw = static_cast<int64_t>(H) * W;
  const int64_t m = static_cast<int64_t>(B) * hw;  // elements per channel

  if (mode == NetMode::eval && !state.initialized())
    throw UsageError("batchnorm2d: eval mode before any training statistics exist");
  if (mode == NetMode::train && m < 2)
    throw UsageError("batchnorm2d: train mode needs at least 2 elements per channel");

  auto mean_c = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  auto invstd_c = std::make_shared<std::vector<T>>(static_cast<size_t>(C));

  if (mode == NetMode::train) {
    if (!state.initialized()) {
      state.running_mean.assign(static_cast<size_t>(C), T(0));
      state.running_var.assign(static_cast<size_t>(C), T(1));
    }
    for (int c = 0; c < C; ++c) {
      T acc = 0;
      for (int b = 0; b < B; ++b) {
        const T* x = input.data() + (static_cast<int64_t>(b) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) acc += x[i];
      }
      const T mu = acc / static_cast<T>(m);
      T var_acc = 0;
      for (int b = 0; b < B; ++b) {
        const T* x = input.data() + (static_cast<int64_t>(b) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const T d = x[i] - mu;
          var_acc += d * d;
        }
      }
      const T var = var_acc / static_cast<T>(m);  // biased
      (*mean_c)[static_cast<size_t>(c)] = mu;
      (*invstd_c)[static_cast<size_t>(c)] = T(1) / std::sqrt(var + state.eps);
      state.running_mean[static_cast<size_t>(c)] =
          (T(1) - state.momentum) * state.running_mean[static_cast<size_t>(c)] + state.momentum * mu;
      state.running_var[static_cast<size_t>(c)] =
          (T(1) - state.momentum) * state.running_var[static_cast<size_t>(c)] + state.momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean_c)[static_cast<size_t>(c)] = state.running_mean[static_cast<size_t>(c)];
      (*invstd_c)[static_cast<size_t>(c)] =
          T(1) / std::sqrt(state.running_var[static_cast<size_t>(c)] + state.eps);
    }
  }

  std::vector<T> out(static_cast<size_t>(input.size()));
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(input.size()));
  parallel_for(static_cast<int64_t>(B) * C, [&](int64_t p0, int64_t p1) {
    for (int64_t p = p0; p < p1; ++p) {
      const int c = static_cast<int>(p % C);
      const T mu = (*mean_c)[static_cast<size_t>(c)];
      const T is = (*invstd_c)[static_cast<size_t>(c)];
      const T gv = gamma.data()[c], bv = beta.data()[c];
      const T* x = input.data() + p * hw;
      T* xh = xhat->data() + p * hw;
      T* o = out.data() + p * hw;
      for (int64_t i = 0; i < hw; ++i) {
        xh[i] = (x[i] - mu) * is;
        o[i] = gv * xh[i] + bv;
      }
    }
  });

  const bool train = mode == NetMode::train;
  Tensor<T> px = input, pg = gamma, pb = beta;
  return make_op_output<T>(
      "batchnorm2d", input.shape(), std::move(out), {input, gamma, beta},
      [px, pg, pb, xhat, invstd_c, B, C, hw, m, train](std::span<const T> g) mutable {
        std::vector<T> sum_g(static_cast<size_t>(C), T(0));
        std::vector<T> sum_gx(static_cast<size_t>(C), T(0));
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const int64_t base = (static_cast<int64_t>(b) * C + c) * hw;
            T a0 = 0, a1 = 0;
            for (int64_t i = 0; i < hw; ++i) {
              a0 += g[base + i];
              a1 += g[base + i] * (*xhat)[static_cast<size_t>(base + i)];
            }
            sum_g[static_cast<size_t>(c)] += a0;
            sum_gx[static_cast<size_t>(c)] += a1;
          }
        if (pb.needs_grad()) pb.accumulate_grad(sum_g);
        if (pg.needs_grad()) pg.accumulate_grad(sum_gx);
        if (px.needs_grad()) {
          std::vector<T> gx(g.size());
          const T inv_m = T(1) / static_cast<T>(m);
          for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
              const int64_t base = (static_cast<int64_t>(b) * C + c) * hw;
              const T gv = pg.data()[c];
              const T is = (*invstd_c)[static_cast<size_t>(c)];
              if (train) {
                const T mg = sum_g[static_cast<size_t>(c)] * inv_m;
                const T mgx = sum_gx[static_cast<size_t>(c)] * inv_m;
                for (int64_t i = 0; i < hw; ++i)
                  gx[static_cast<size_t>(base + i)] =
                      gv * is * (g[base + i] - mg - (*xhat)[static_cast<size_t>(base + i)] * mgx);
              } else {
                for (int64_t i = 0; i < hw; ++i)
                  gx[static_cast<size_t>(base + i)] = gv * is * g[base + i];
              }
            }
          px.accumulate_grad(gx);
        }
      });
}

namespace {

// Snaps a double-precision pixel coordinate to the 2^-32 lattice. Exact for
// |v| < 2^20, which covers every image extent the pipeline uses.
inline double snap_coord(double v) {
  return std::nearbyint(v * 4294967296.0) * (1.0 / 4294967296.0);
}

}  // namespace

template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& input, const Tensor<T>& grid) {
  if (input.rank() != 4) throw ShapeError("grid_sample: input must be [B,C,H,W]");
  if (grid.rank() != 4 || grid.dim(3) != 2)
    throw ShapeError("grid_sample: grid must be [B,h,w,2], got " + shape_str(grid.shape()));
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (grid.dim(0) != B) throw ShapeError("grid_sample: batch mismatch");
  const int OH = grid.dim(1), OW = grid.dim(2);
  const int64_t ihw = static_cast<int64_t>(H) * W;
  const int64_t ohw = static_cast<int64_t>(OH) * OW;
  const double half_w = (W - 1) * 0.5, half_h = (H - 1) * 0.5;

  std::vector<T> out(static_cast<size_t>(B) * C * ohw);
  // Resolved sample positions, reused by the backward pass.
  auto pos = std::make_shared<std::vector<double>>(static_cast<size_t>(B) * ohw * 2);

  for (int b = 0; b < B; ++b) {
    const T* gr = grid.data() + static_cast<int64_t>(b) * ohw * 2;
    double* ps = pos->data() + static_cast<int64_t>(b) * ohw * 2;
    for (int64_t i = 0; i < ohw; ++i) {
      const double u = static_cast<double>(gr[i * 2 + 0]);
      const double v = static_cast<double>(gr[i * 2 + 1]);
      ps[i * 2 + 0] = snap_coord((u + 1.0) * half_w);
      ps[i * 2 + 1] = snap_coord((v + 1.0) * half_h);
    }
    const double* psc = ps;
    const T* x = input.data() + static_cast<int64_t>(b) * C * ihw;
    T* o = out.data() + static_cast<int64_t>(b) * C * ohw;
    for (int64_t i = 0; i < ohw; ++i) {
      const double pxf = psc[i * 2 + 0], pyf = psc[i * 2 + 1];
      const int x0 = static_cast<int>(std::floor(pxf)), y0 = static_cast<int>(std::floor(pyf));
      const double wx = pxf - x0, wy = pyf - y0;
      const double w00 = (1 - wx) * (1 - wy), w01 = wx * (1 - wy);
      const double w10 = (1 - wx) * wy, w11 = wx * wy;
      const bool in_x0 = x0 >= 0 && x0 < W, in_x1 = x0 + 1 >= 0 && x0 + 1 < W;
      const bool in_y0 = y0 >= 0 && y0 < H, in_y1 = y0 + 1 >= 0 && y0 + 1 < H;
      for (int c = 0; c < C; ++c) {
        const T* xc = x + static_cast<int64_t>(c) * ihw;
        double acc = 0;
        if (in_y0 && in_x0 && w00 != 0) acc += w00 * xc[y0 * W + x0];
        if (in_y0 && in_x1 && w01 != 0) acc += w01 * xc[y0 * W + x0 + 1];
        if (in_y1 && in_x0 && w10 != 0) acc += w10 * xc[(y0 + 1) * W + x0];
        if (in_y1 && in_x1 && w11 != 0) acc += w11 * xc[(y0 + 1) * W + x0 + 1];
        o[static_cast<int64_t>(c) * ohw + i] = static_cast<T>(acc);
      }
    }
  }

  Tensor<T> px = input, pg = grid;
  return make_op_output<T>(
      "grid_sample", {B, C, OH, OW}, std::move(out), {input, grid},
      [px, pg, pos, B, C, H, W, ihw, ohw, half_w, half_h](std::span<const T> g) mutable {
        const bool need_x = px.needs_grad(), need_g = pg.needs_grad();
        std::vector<T> gx;
        std::vector<T> gg;
        if (need_x) gx.assign(static_cast<size_t>(px.size()), T(0));
        if (need_g) gg.assign(static_cast<size_t>(pg.size()), T(0));
        for (int b = 0; b < B; ++b) {
          const double* ps = pos->data() + static_cast<int64_t>(b) * ohw * 2;
          const T* x = px.data() + static_cast<int64_t>(b) * C * ihw;
          for (int64_t i = 0; i < ohw; ++i) {
            const double pxf = ps[i * 2 + 0], pyf = ps[i * 2 + 1];
            const int x0 = static_cast<int>(std::floor(pxf)), y0 = static_cast<int>(std::floor(pyf));
            const double wx = pxf - x0, wy = pyf - y0;
            const bool in_x0 = x0 >= 0 && x0 < W, in_x1 = x0 + 1 >= 0 && x0 + 1 < W;
            const bool in_y0 = y0 >= 0 && y0 < H, in_y1 = y0 + 1 >= 0 && y0 + 1 < H;
            double d_px = 0, d_py = 0;
            for (int c = 0; c < C; ++c) {
              const double go = static_cast<double>(g[(static_cast<int64_t>(b) * C + c) * ohw + i]);
              if (go == 0) continue;
              const T* xc = x + static_cast<int64_t>(c) * ihw;
              const double v00 = (in_y0 && in_x0) ? xc[y0 * W + x0] : 0.0;
              const double v01 = (in_y0 && in_x1) ? xc[y0 * W + x0 + 1] : 0.0;
              const double v10 = (in_y1 && in_x0) ? xc[(y0 + 1) * W + x0] : 0.0;
              const double v11 = (in_y1 && in_x1) ? xc[(y0 + 1) * W + x0 + 1] : 0.0;
              if (need_x) {
                T* gxc = gx.data() + (static_cast<int64_t>(b) * C + c) * ihw;
                if (in_y0 && in_x0) gxc[y0 * W + x0] += static_cast<T>(go * (1 - wx) * (1 - wy));
                if (in_y0 && in_x1) gxc[y0 * W + x0 + 1] += static_cast<T>(go * wx * (1 - wy));
                if (in_y1 && in_x0) gxc[(y0 + 1) * W + x0] += static_cast<T>(go * (1 - wx) * wy);
                if (in_y1 && in_x1) gxc[(y0 + 1) * W + x0 + 1] += static_cast<T>(go * wx * wy);
              }
              d_px += go * ((1 - wy) * (v01 - v00) + wy * (v11 - v10));
              d_py += go * ((1 - wx) * (v10 - v00) + wx * (v11 - v01));
            }
            if (need_g) {
              gg[(static_cast<int64_t>(b) * ohw + i) * 2 + 0] += static_cast<T>(d_px * half_w);
              gg[(static_cast<int64_t>(b) * ohw + i) * 2 + 1] += static_cast<T>(d_py * half_h);
            }
          }
        }
        if (need_x) px.accumulate_grad(gx);
        if (need_g) pg.accumulate_grad(gg);
      });
}

#define STNI_INSTANTIATE_NN(T)                                                            \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> maxpool2d<T>(const Tensor<T>&, bool);                               \
  template Tensor<T> avgpool2d_3x3s2<T>(const Tensor<T>&);                               \
  template Tensor<T> upsample_nearest<T>(const Tensor<T>&, int);                         \
  template struct BatchNormState<T>;                                                     \
  template Tensor<T> batchnorm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,\
                                    BatchNormState<T>&, NetMode);                        \
  template Tensor<T> grid_sample_bilinear<T>(const Tensor<T>&, const Tensor<T>&);

STNI_INSTANTIATE_NN(float)
STNI_INSTANTIATE_NN(double)

#undef STNI_INSTANTIATE_NN

}  // namespace stni
