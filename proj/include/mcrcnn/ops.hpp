#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mcrcnn/errors.hpp"
#include "mcrcnn/parallel.hpp"
#include "mcrcnn/rng.hpp"
#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

enum class Mode { kTrain, kInfer };
enum class Activation { kRelu, kSigmoid, kLinear };

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Elementwise helpers

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a.shape(), b.shape(), "add");
  Tensor<S> out(a.shape());
  out.array() = a.array() + b.array();
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a.shape(), b.shape(), "sub");
  Tensor<S> out(a.shape());
  out.array() = a.array() - b.array();
  return out;
}

template <typename S>
Tensor<S> hadamard(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a.shape(), b.shape(), "hadamard");
  Tensor<S> out(a.shape());
  out.array() = a.array() * b.array();
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S k) {
  Tensor<S> out(a.shape());
  out.array() = a.array() * k;
  return out;
}

template <typename S>
S sum_all(const Tensor<S>& a) {
  return a.array().sum();
}

// ---------------------------------------------------------------------------
// Convolution, stride 1, zero padding chosen so H and W are preserved.
//
// output[n,co,y,x] = bias[co] + sum_{ci,ky,kx} weight[co,ci,ky,kx] *
//                    input[n,ci, y + d*ky - pad_y, x + d*kx - pad_x]
// with pad = dilation*(K-1)/2 and out-of-bounds taps reading zero.

// Gathers the receptive fields of sample n into col, a row-major
// [Cin*Kh*Kw, H*W] matrix (one row per kernel tap, one column per pixel).
template <typename S>
void im2col_same(const Tensor<S>& input, int n, int kh, int kw, int dilation, S* col) {
  const Shape& s = input.shape();
  const int height = s.h, width = s.w, cin = s.c;
  const int pad_y = dilation * (kh - 1) / 2;
  const int pad_x = dilation * (kw - 1) / 2;
  const std::int64_t hw = static_cast<std::int64_t>(height) * width;
  std::fill(col, col + static_cast<std::int64_t>(cin) * kh * kw * hw, S(0));
  for (int ci = 0; ci < cin; ++ci) {
    const S* plane = input.data() + s.index(n, ci, 0, 0);
    for (int ky = 0; ky < kh; ++ky) {
      const int oy = dilation * ky - pad_y;
      const int y0 = std::max(0, -oy);
      const int y1 = std::min(height, height - oy);
      for (int kx = 0; kx < kw; ++kx) {
        const int ox = dilation * kx - pad_x;
        const int x0 = std::max(0, -ox);
        const int x1 = std::min(width, width - ox);
        if (x0 >= x1) continue;  // tap column fully outside the image
        S* row = col + (static_cast<std::int64_t>(ci * kh + ky) * kw + kx) * hw;
        for (int y = y0; y < y1; ++y) {
          const S* src = plane + static_cast<std::int64_t>(y + oy) * width + (x0 + ox);
          std::copy(src, src + (x1 - x0), row + static_cast<std::int64_t>(y) * width + x0);
        }
      }
    }
  }
}

// Scatter-add transpose of im2col_same: accumulates col back into sample n
// of out.
template <typename S>
void col2im_add_same(const S* col, int kh, int kw, int dilation, Tensor<S>& out, int n) {
  const Shape& s = out.shape();
  const int height = s.h, width = s.w, cin = s.c;
  const int pad_y = dilation * (kh - 1) / 2;
  const int pad_x = dilation * (kw - 1) / 2;
  const std::int64_t hw = static_cast<std::int64_t>(height) * width;
  for (int ci = 0; ci < cin; ++ci) {
    S* plane = out.data() + s.index(n, ci, 0, 0);
    for (int ky = 0; ky < kh; ++ky) {
      const int oy = dilation * ky - pad_y;
      const int y0 = std::max(0, -oy);
      const int y1 = std::min(height, height - oy);
      for (int kx = 0; kx < kw; ++kx) {
        const int ox = dilation * kx - pad_x;
        const int x0 = std::max(0, -ox);
        const int x1 = std::min(width, width - ox);
        if (x0 >= x1) continue;  // tap column fully outside the image
        const S* row = col + (static_cast<std::int64_t>(ci * kh + ky) * kw + kx) * hw;
        for (int y = y0; y < y1; ++y) {
          S* dst = plane + static_cast<std::int64_t>(y + oy) * width + (x0 + ox);
          const S* src = row + static_cast<std::int64_t>(y) * width + x0;
          for (int i = 0; i < x1 - x0; ++i) dst[i] += src[i];
        }
      }
    }
  }
}

template <typename S>
void conv2d_check(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                  int dilation) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (dilation < 1) {
    throw ShapeError("conv2d_same: dilation must be >= 1, got " + std::to_string(dilation));
  }
  if (ws.h % 2 == 0 || ws.w % 2 == 0) {
    throw ShapeError("conv2d_same: kernel dimensions must be odd, got " + ws.str());
  }
  if (is.c != ws.c) {
    throw ShapeError("conv2d_same: input channels do not match kernel, input " + is.str() +
                     " vs weight " + ws.str());
  }
  if (bias.size() != ws.n) {
    throw ShapeError("conv2d_same: bias size " + std::to_string(bias.size()) +
                     " does not match output channels of weight " + ws.str());
  }
}

template <typename S>
Tensor<S> conv2d_same(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                      int dilation = 1, int threads = 1) {
  conv2d_check(input, weight, bias, dilation);
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  const int cout = ws.n, kh = ws.h, kw = ws.w;
  const std::int64_t ck = static_cast<std::int64_t>(ws.c) * kh * kw;
  const std::int64_t hw = static_cast<std::int64_t>(is.h) * is.w;
  Tensor<S> out(Shape(is.n, cout, is.h, is.w));
  Eigen::Map<const RowMat<S>> wmat(weight.data(), cout, ck);
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bvec(bias.data(), cout);
  parallel_for(is.n, threads, [&](int n) {
    RowMat<S> col(ck, hw);
    im2col_same(input, n, kh, kw, dilation, col.data());
    Eigen::Map<RowMat<S>> omat(out.data() + out.shape().index(n, 0, 0, 0), cout, hw);
    omat.noalias() = wmat * col;
    omat.colwise() += bvec;
  });
  return out;
}

template <typename S>
struct Conv2dGrads {
  Tensor<S> input;
  Tensor<S> weight;
  Tensor<S> bias;
};

// Accumulation runs serially over the batch so gradients are reproducible.
template <typename S>
Conv2dGrads<S> conv2d_same_backward(const Tensor<S>& grad_out, const Tensor<S>& input,
                                    const Tensor<S>& weight, int dilation,
                                    bool need_input = true, bool need_weight = true) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  const int cout = ws.n, kh = ws.h, kw = ws.w;
  const std::int64_t ck = static_cast<std::int64_t>(ws.c) * kh * kw;
  const std::int64_t hw = static_cast<std::int64_t>(is.h) * is.w;
  check_same_shape(grad_out.shape(), Shape(is.n, cout, is.h, is.w), "conv2d_same_backward");

  Conv2dGrads<S> g;
  if (need_input) g.input = Tensor<S>(is);
  if (need_weight) {
    g.weight = Tensor<S>(ws);
    g.bias = Tensor<S>(Shape(1, cout, 1, 1));
  }
  Eigen::Map<const RowMat<S>> wmat(weight.data(), cout, ck);
  RowMat<S> col(ck, hw);
  RowMat<S> dcol(ck, hw);
  for (int n = 0; n < is.n; ++n) {
    Eigen::Map<const RowMat<S>> gmat(grad_out.data() + grad_out.shape().index(n, 0, 0, 0),
                                     cout, hw);
    if (need_weight) {
      im2col_same(input, n, kh, kw, dilation, col.data());
      Eigen::Map<RowMat<S>> dwmat(g.weight.data(), cout, ck);
      dwmat.noalias() += gmat * col.transpose();
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> dbias(g.bias.data(), cout);
      dbias.noalias() += gmat.rowwise().sum();
    }
    if (need_input) {
      dcol.noalias() = wmat.transpose() * gmat;
      col2im_add_same(dcol.data(), kh, kw, dilation, g.input, n);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activations

template <typename S>
Tensor<S> activation(const Tensor<S>& x, Activation kind) {
  Tensor<S> y(x.shape());
  switch (kind) {
    case Activation::kRelu:
      y.array() = x.array().max(S(0));
      break;
    case Activation::kSigmoid:
      y.array() = x.array().unaryExpr([](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      });
      break;
    case Activation::kLinear:
      y.array() = x.array();
      break;
  }
  return y;
}

template <typename S>
Tensor<S> activation_backward(const Tensor<S>& grad_y, const Tensor<S>& x, const Tensor<S>& y,
                              Activation kind) {
  Tensor<S> g(x.shape());
  switch (kind) {
    case Activation::kRelu:
      g.array() = grad_y.array() * (x.array() > S(0)).template cast<S>();
      break;
    case Activation::kSigmoid:
      g.array() = grad_y.array() * y.array() * (S(1) - y.array());
      break;
    case Activation::kLinear:
      g.array() = grad_y.array();
      break;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization. Statistics are per channel over N*H*W in train mode;
// infer mode uses running statistics only. gamma/beta/running live in
// [1,C,1,1] tensors.

template <typename S>
struct BatchNormFwd {
  Tensor<S> y;
  Tensor<S> xhat;
  std::vector<S> mean, var, inv_std;  // per channel, biased variance
};

template <typename S>
void norm_check_affine(const Shape& xs, const Tensor<S>& gamma, const Tensor<S>& beta,
                       const char* what) {
  if (gamma.size() != xs.c || beta.size() != xs.c) {
    throw ShapeError(std::string(what) + ": gamma/beta length must equal channel count " +
                     std::to_string(xs.c));
  }
}

template <typename S>
BatchNormFwd<S> batch_norm_train(const Tensor<S>& x, const Tensor<S>& gamma,
                                 const Tensor<S>& beta, S eps) {
  const Shape& s = x.shape();
  norm_check_affine(s, gamma, beta, "batch_norm");
  BatchNormFwd<S> f;
  f.y = Tensor<S>(s);
  f.xhat = Tensor<S>(s);
  f.mean.resize(s.c);
  f.var.resize(s.c);
  f.inv_std.resize(s.c);
  const S m = static_cast<S>(static_cast<std::int64_t>(s.n) * s.h * s.w);
  for (int c = 0; c < s.c; ++c) {
    S acc = S(0);
    for (int n = 0; n < s.n; ++n) acc += x.plane(n, c).sum();
    const S mean = acc / m;
    S vacc = S(0);
    for (int n = 0; n < s.n; ++n) vacc += (x.plane(n, c) - mean).square().sum();
    const S var = vacc / m;
    const S inv_std = S(1) / std::sqrt(var + eps);
    f.mean[c] = mean;
    f.var[c] = var;
    f.inv_std[c] = inv_std;
    for (int n = 0; n < s.n; ++n) {
      f.xhat.plane(n, c) = (x.plane(n, c) - mean) * inv_std;
      f.y.plane(n, c) = f.xhat.plane(n, c) * gamma[c] + beta[c];
    }
  }
  return f;
}

template <typename S>
Tensor<S> batch_norm_infer(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                           const Tensor<S>& running_mean, const Tensor<S>& running_var, S eps) {
  const Shape& s = x.shape();
  norm_check_affine(s, gamma, beta, "batch_norm");
  Tensor<S> y(s);
  for (int c = 0; c < s.c; ++c) {
    const S inv_std = S(1) / std::sqrt(running_var[c] + eps);
    for (int n = 0; n < s.n; ++n) {
      y.plane(n, c) = (x.plane(n, c) - running_mean[c]) * inv_std * gamma[c] + beta[c];
    }
  }
  return y;
}

template <typename S>
struct NormGrads {
  Tensor<S> x;
  Tensor<S> gamma;
  Tensor<S> beta;
};

template <typename S>
NormGrads<S> batch_norm_train_backward(const Tensor<S>& grad_y, const BatchNormFwd<S>& f,
                                       const Tensor<S>& gamma) {
  const Shape& s = grad_y.shape();
  NormGrads<S> g;
  g.x = Tensor<S>(s);
  g.gamma = Tensor<S>(gamma.shape());
  g.beta = Tensor<S>(gamma.shape());
  const S m = static_cast<S>(static_cast<std::int64_t>(s.n) * s.h * s.w);
  for (int c = 0; c < s.c; ++c) {
    S sum_dy = S(0), sum_dy_xhat = S(0);
    for (int n = 0; n < s.n; ++n) {
      sum_dy += grad_y.plane(n, c).sum();
      sum_dy_xhat += (grad_y.plane(n, c) * f.xhat.plane(n, c)).sum();
    }
    g.beta[c] = sum_dy;
    g.gamma[c] = sum_dy_xhat;
    const S k = gamma[c] * f.inv_std[c];
    for (int n = 0; n < s.n; ++n) {
      g.x.plane(n, c) =
          (grad_y.plane(n, c) - sum_dy / m - f.xhat.plane(n, c) * (sum_dy_xhat / m)) * k;
    }
  }
  return g;
}

template <typename S>
NormGrads<S> batch_norm_infer_backward(const Tensor<S>& grad_y, const Tensor<S>& x,
                                       const Tensor<S>& gamma, const Tensor<S>& running_mean,
                                       const Tensor<S>& running_var, S eps) {
  const Shape& s = grad_y.shape();
  NormGrads<S> g;
  g.x = Tensor<S>(s);
  g.gamma = Tensor<S>(gamma.shape());
  g.beta = Tensor<S>(gamma.shape());
  for (int c = 0; c < s.c; ++c) {
    const S inv_std = S(1) / std::sqrt(running_var[c] + eps);
    S sum_dy = S(0), sum_dy_xhat = S(0);
    for (int n = 0; n < s.n; ++n) {
      sum_dy += grad_y.plane(n, c).sum();
      sum_dy_xhat += (grad_y.plane(n, c) * (x.plane(n, c) - running_mean[c]) * inv_std).sum();
      g.x.plane(n, c) = grad_y.plane(n, c) * (gamma[c] * inv_std);
    }
    g.beta[c] = sum_dy;
    g.gamma[c] = sum_dy_xhat;
  }
  return g;
}

// Exponential-moving-average statistics tracked across train-mode batches.
// Starts at mean 0 / var 1 and may not be consulted before the first update.
template <typename S>
struct RunningStats {
  Tensor<S> mean, var;  // [1,C,1,1]
  bool initialized = false;

  RunningStats() = default;
  explicit RunningStats(int channels)
      : mean(Shape(1, channels, 1, 1), S(0)), var(Shape(1, channels, 1, 1), S(1)) {}
};

template <typename S>
void bn_update_running(RunningStats<S>& rs, const std::vector<S>& batch_mean,
                       const std::vector<S>& batch_var, S momentum) {
  for (std::int64_t c = 0; c < rs.mean.size(); ++c) {
    rs.mean[c] = momentum * rs.mean[c] + (S(1) - momentum) * batch_mean[c];
    rs.var[c] = momentum * rs.var[c] + (S(1) - momentum) * batch_var[c];
  }
  rs.initialized = true;
}

// Entry point combining the train/infer paths with running-stat bookkeeping.
template <typename S>
struct BatchNormState {
  Tensor<S> gamma, beta;
  RunningStats<S> stats;

  explicit BatchNormState(int channels)
      : gamma(Shape(1, channels, 1, 1), S(1)),
        beta(Shape(1, channels, 1, 1), S(0)),
        stats(channels) {}
};

template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, BatchNormState<S>& st, Mode mode, S momentum, S eps) {
  if (mode == Mode::kTrain) {
    BatchNormFwd<S> f = batch_norm_train(x, st.gamma, st.beta, eps);
    bn_update_running(st.stats, f.mean, f.var, momentum);
    return std::move(f.y);
  }
  if (!st.stats.initialized) {
    throw NumericError(
        "batch_norm: infer mode requested before any train-mode update initialized the "
        "running statistics");
  }
  return batch_norm_infer(x, st.gamma, st.beta, st.stats.mean, st.stats.var, eps);
}

// ---------------------------------------------------------------------------
// Instance normalization: statistics per sample and channel over H*W only.

template <typename S>
struct InstanceNormFwd {
  Tensor<S> y;
  Tensor<S> xhat;
  std::vector<S> inv_std;  // indexed n*C + c
};

template <typename S>
InstanceNormFwd<S> instance_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                                 const Tensor<S>& beta, S eps) {
  const Shape& s = x.shape();
  norm_check_affine(s, gamma, beta, "instance_norm");
  if (static_cast<std::int64_t>(s.h) * s.w == 1) {
    throw ShapeError("instance_norm: spatial extent H*W must be > 1");
  }
  InstanceNormFwd<S> f;
  f.y = Tensor<S>(s);
  f.xhat = Tensor<S>(s);
  f.inv_std.resize(static_cast<std::size_t>(s.n) * s.c);
  const S m = static_cast<S>(static_cast<std::int64_t>(s.h) * s.w);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const auto plane = x.plane(n, c);
      const S mean = plane.sum() / m;
      const S var = (plane - mean).square().sum() / m;
      const S inv_std = S(1) / std::sqrt(var + eps);
      f.inv_std[static_cast<std::size_t>(n) * s.c + c] = inv_std;
      f.xhat.plane(n, c) = (plane - mean) * inv_std;
      f.y.plane(n, c) = f.xhat.plane(n, c) * gamma[c] + beta[c];
    }
  }
  return f;
}

template <typename S>
NormGrads<S> instance_norm_backward(const Tensor<S>& grad_y, const InstanceNormFwd<S>& f,
                                    const Tensor<S>& gamma) {
  const Shape& s = grad_y.shape();
  NormGrads<S> g;
  g.x = Tensor<S>(s);
  g.gamma = Tensor<S>(gamma.shape());
  g.beta = Tensor<S>(gamma.shape());
  const S m = static_cast<S>(static_cast<std::int64_t>(s.h) * s.w);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const auto dy = grad_y.plane(n, c);
      const auto xhat = f.xhat.plane(n, c);
      const S sum_dy = dy.sum();
      const S sum_dy_xhat = (dy * xhat).sum();
      g.beta[c] += sum_dy;
      g.gamma[c] += sum_dy_xhat;
      const S k = gamma[c] * f.inv_std[static_cast<std::size_t>(n) * s.c + c];
      g.x.plane(n, c) = (dy - sum_dy / m - xhat * (sum_dy_xhat / m)) * k;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Spatial dropout: whole (n, c) channel planes are zeroed, survivors scaled
// by 1/(1-rate) so inference is an identity.

template <typename S>
Tensor<S> spatial_dropout(const Tensor<S>& x, double rate, Mode mode, Rng& rng,
                          Tensor<S>* mask_out = nullptr) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("spatial_dropout: rate must lie in [0,1), got " + std::to_string(rate));
  }
  const Shape& s = x.shape();
  if (mode == Mode::kInfer || rate == 0.0) {
    if (mask_out) *mask_out = Tensor<S>(Shape(s.n, s.c, 1, 1), S(1));
    Tensor<S> y(s);
    y.array() = x.array();
    return y;
  }
  Tensor<S> mask(Shape(s.n, s.c, 1, 1));
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      mask.at(n, c, 0, 0) = rng.bernoulli(rate) ? S(0) : keep_scale;
    }
  }
  Tensor<S> y(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      y.plane(n, c) = x.plane(n, c) * mask.at(n, c, 0, 0);
    }
  }
  if (mask_out) *mask_out = mask;
  return y;
}

template <typename S>
Tensor<S> spatial_dropout_backward(const Tensor<S>& grad_y, const Tensor<S>& mask) {
  const Shape& s = grad_y.shape();
  Tensor<S> g(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      g.plane(n, c) = grad_y.plane(n, c) * mask.at(n, c, 0, 0);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Average pooling, stride 1, zero padded to preserve H and W. Padding taps
// count as zeros; the divisor stays fixed at window*window. For even windows
// the taps sit at offsets [-(w-1)/2, w-1-(w-1)/2].

template <typename S>
Tensor<S> box_sum_same(const Tensor<S>& x, int window, int pad_before) {
  const Shape& s = x.shape();
  Tensor<S> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const S* in = x.data() + s.index(n, c, 0, 0);
      S* dst = out.data() + s.index(n, c, 0, 0);
      for (int y = 0; y < s.h; ++y) {
        for (int x2 = 0; x2 < s.w; ++x2) {
          S acc = S(0);
          for (int ky = 0; ky < window; ++ky) {
            const int iy = y + ky - pad_before;
            if (iy < 0 || iy >= s.h) continue;
            for (int kx = 0; kx < window; ++kx) {
              const int ix = x2 + kx - pad_before;
              if (ix < 0 || ix >= s.w) continue;
              acc += in[static_cast<std::int64_t>(iy) * s.w + ix];
            }
          }
          dst[static_cast<std::int64_t>(y) * s.w + x2] = acc;
        }
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> avg_pool_same(const Tensor<S>& x, int window = 4) {
  Tensor<S> out = box_sum_same(x, window, (window - 1) / 2);
  out.array() *= S(1) / static_cast<S>(window * window);
  return out;
}

template <typename S>
Tensor<S> avg_pool_same_backward(const Tensor<S>& grad_y, int window = 4) {
  // Transposed window: padding flips to window-1-(window-1)/2.
  Tensor<S> g = box_sum_same(grad_y, window, window - 1 - (window - 1) / 2);
  g.array() *= S(1) / static_cast<S>(window * window);
  return g;
}

// ---------------------------------------------------------------------------
// Depth-wise concatenation

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: batch/spatial mismatch " + as.str() + " vs " + bs.str());
  }
  Tensor<S> out(Shape(as.n, as.c + bs.c, as.h, as.w));
  for (int n = 0; n < as.n; ++n) {
    for (int c = 0; c < as.c; ++c) out.plane(n, c) = a.plane(n, c);
    for (int c = 0; c < bs.c; ++c) out.plane(n, as.c + c) = b.plane(n, c);
  }
  return out;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>& x, int c_first) {
  const Shape& s = x.shape();
  if (c_first < 1 || c_first >= s.c) {
    throw ShapeError("split_channels: split point " + std::to_string(c_first) +
                     " out of range for " + s.str());
  }
  Tensor<S> a(Shape(s.n, c_first, s.h, s.w));
  Tensor<S> b(Shape(s.n, s.c - c_first, s.h, s.w));
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < c_first; ++c) a.plane(n, c) = x.plane(n, c);
    for (int c = c_first; c < s.c; ++c) b.plane(n, c - c_first) = x.plane(n, c);
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Min-max normalization over the whole tensor. A constant tensor maps to all
// zeros rather than dividing by zero.

template <typename S>
struct MinMaxFwd {
  Tensor<S> y;
  S min = S(0), max = S(0);
  std::int64_t argmin = 0, argmax = 0;
  bool constant = false;
};

template <typename S>
MinMaxFwd<S> minmax_normalize_fwd(const Tensor<S>& x) {
  MinMaxFwd<S> f;
  Eigen::Index imin = 0, imax = 0;
  f.min = x.array().minCoeff(&imin);
  f.max = x.array().maxCoeff(&imax);
  f.argmin = imin;
  f.argmax = imax;
  f.y = Tensor<S>(x.shape());
  if (f.min == f.max) {
    f.constant = true;
    f.y.fill(S(0));
  } else {
    f.y.array() = (x.array() - f.min) / (f.max - f.min);
  }
  return f;
}

template <typename S>
Tensor<S> minmax_normalize(const Tensor<S>& x) {
  return minmax_normalize_fwd(x).y;
}

template <typename S>
Tensor<S> minmax_normalize_backward(const Tensor<S>& grad_y, const MinMaxFwd<S>& f) {
  Tensor<S> g(grad_y.shape());
  if (f.constant) {
    g.fill(S(0));
    return g;
  }
  const S r = f.max - f.min;
  const S s0 = grad_y.array().sum();
  const S s1 = (grad_y.array() * f.y.array()).sum();
  g.array() = grad_y.array() / r;
  g[f.argmin] += (s1 - s0) / r;
  g[f.argmax] -= s1 / r;
  return g;
}

}  // namespace mcrcnn
