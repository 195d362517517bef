#pragma once

// Naive reference implementations the optimized kernels are checked against.
// Everything here favors obviousness over speed: plain nested scalar loops,
// double accumulation, no Eigen, no shared code with the library internals.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mcrcnn/tensor.hpp"

namespace oracle {

using mcrcnn::Shape;
using mcrcnn::Tensor;

// Direct convolution: stride 1, zero padding dilation*(K-1)/2 so H and W are
// preserved, six nested loops.
template <typename S>
Tensor<S> conv2d_ref(const Tensor<S>& in, const Tensor<S>& w, const Tensor<S>& bias,
                     int dilation) {
  const Shape& is = in.shape();
  const Shape& ws = w.shape();
  const int pad_y = dilation * (ws.h - 1) / 2;
  const int pad_x = dilation * (ws.w - 1) / 2;
  Tensor<S> out(Shape(is.n, ws.n, is.h, is.w));
  for (int n = 0; n < is.n; ++n)
    for (int co = 0; co < ws.n; ++co)
      for (int y = 0; y < is.h; ++y)
        for (int x = 0; x < is.w; ++x) {
          double acc = static_cast<double>(bias[co]);
          for (int ci = 0; ci < ws.c; ++ci)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int iy = y + dilation * ky - pad_y;
                const int ix = x + dilation * kx - pad_x;
                if (iy < 0 || iy >= is.h || ix < 0 || ix >= is.w) continue;
                acc += static_cast<double>(w.at(co, ci, ky, kx)) *
                       static_cast<double>(in.at(n, ci, iy, ix));
              }
          out.at(n, co, y, x) = static_cast<S>(acc);
        }
  return out;
}

// Train-mode batch normalization: per-channel statistics over N*H*W, biased
// variance, scalar loops.
template <typename S>
Tensor<S> batch_norm_train_ref(const Tensor<S>& x, const Tensor<S>& gamma,
                               const Tensor<S>& beta, double eps) {
  const Shape& s = x.shape();
  Tensor<S> y(s);
  const double m = static_cast<double>(s.n) * s.h * s.w;
  for (int c = 0; c < s.c; ++c) {
    double sum = 0.0;
    for (int n = 0; n < s.n; ++n)
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) sum += x.at(n, c, i, j);
    const double mean = sum / m;
    double sq = 0.0;
    for (int n = 0; n < s.n; ++n)
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) {
          const double d = x.at(n, c, i, j) - mean;
          sq += d * d;
        }
    const double var = sq / m;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int n = 0; n < s.n; ++n)
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) {
          y.at(n, c, i, j) = static_cast<S>((x.at(n, c, i, j) - mean) * inv * gamma[c] + beta[c]);
        }
  }
  return y;
}

// Instance normalization: statistics per (sample, channel) over H*W only.
template <typename S>
Tensor<S> instance_norm_ref(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                            double eps) {
  const Shape& s = x.shape();
  Tensor<S> y(s);
  const double m = static_cast<double>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      double sum = 0.0;
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) sum += x.at(n, c, i, j);
      const double mean = sum / m;
      double sq = 0.0;
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) {
          const double d = x.at(n, c, i, j) - mean;
          sq += d * d;
        }
      const double inv = 1.0 / std::sqrt(sq / m + eps);
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) {
          y.at(n, c, i, j) = static_cast<S>((x.at(n, c, i, j) - mean) * inv * gamma[c] + beta[c]);
        }
    }
  return y;
}

// Windowed mean with stride 1 and zero padding that preserves H and W; for an
// even window the taps sit at offsets [-(K-1)/2, K-1-(K-1)/2]; the divisor is
// fixed at K*K regardless of how many taps fall inside the image.
template <typename S>
Tensor<S> avg_pool_ref(const Tensor<S>& x, int window) {
  const Shape& s = x.shape();
  const int pad = (window - 1) / 2;
  Tensor<S> out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int j = 0; j < s.w; ++j) {
          double acc = 0.0;
          for (int ky = 0; ky < window; ++ky)
            for (int kx = 0; kx < window; ++kx) {
              const int iy = y + ky - pad;
              const int ix = j + kx - pad;
              if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
              acc += x.at(n, c, iy, ix);
            }
          out.at(n, c, y, j) = static_cast<S>(acc / (window * window));
        }
  return out;
}

// Scalar-loop squared-Frobenius background objective: 0.5 * sum of squared
// differences over the whole batch.
template <typename S>
double background_loss_ref(const Tensor<S>& b, const Tensor<S>& s) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < b.size(); ++i) {
    const double d = static_cast<double>(b[i]) - static_cast<double>(s[i]);
    acc += d * d;
  }
  return 0.5 * acc;
}

// Scalar-loop masked binary cross-entropy with clamped predictions.
template <typename S>
double segmentation_loss_ref(const Tensor<S>& pred, const Tensor<S>& target,
                             const Tensor<S>& mask, bool mean) {
  double acc = 0.0, count = 0.0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == S(0)) continue;
    double p = static_cast<double>(pred[i]);
    p = std::min(1.0 - 1e-7, std::max(1e-7, p));
    const double t = static_cast<double>(target[i]);
    acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    count += 1.0;
  }
  if (!mean) return acc;
  return count > 0.0 ? acc / count : 0.0;
}

// Per-pixel median across frames; an even frame count averages the two
// middle order statistics. Sort-based, one pixel at a time.
template <typename S>
Tensor<S> median_ref(const std::vector<Tensor<S>>& frames) {
  const Shape& s = frames.front().shape();
  Tensor<S> out(s);
  std::vector<double> vals(frames.size());
  for (std::int64_t i = 0; i < s.size(); ++i) {
    for (std::size_t f = 0; f < frames.size(); ++f) vals[f] = frames[f][i];
    std::sort(vals.begin(), vals.end());
    const std::size_t m = frames.size() / 2;
    const double med =
        (frames.size() % 2 == 1) ? vals[m] : 0.5 * (vals[m - 1] + vals[m]);
    out[i] = static_cast<S>(med);
  }
  return out;
}

// Per-pixel confusion tally from raw prediction bits and label codes,
// written as one branchy scalar loop. Codes 85 and 170 contribute nothing.
struct ConfusionRef {
  long long tp = 0, tn = 0, fp = 0, fn = 0;
};

inline ConfusionRef confusion_ref(const std::vector<int>& pred, const std::vector<int>& code) {
  ConfusionRef c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (code[i] == 85 || code[i] == 170) continue;
    const bool truth_fg = code[i] == 255;
    const bool pred_fg = pred[i] != 0;
    if (truth_fg && pred_fg) c.tp += 1;
    if (truth_fg && !pred_fg) c.fn += 1;
    if (!truth_fg && pred_fg) c.fp += 1;
    if (!truth_fg && !pred_fg) c.tn += 1;
  }
  return c;
}

}  // namespace oracle
