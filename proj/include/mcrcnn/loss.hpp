#pragma once

#include <cmath>

#include "mcrcnn/errors.hpp"
#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

enum class Reduction { kSum, kMean };

// Squared Frobenius distance between predicted and reference backgrounds,
// halved and summed over the batch.
template <typename S>
S background_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  check_same_shape(pred.shape(), target.shape(), "background_loss");
  return S(0.5) * (pred.array() - target.array()).square().sum();
}

template <typename S>
Tensor<S> background_loss_backward(const Tensor<S>& pred, const Tensor<S>& target,
                                   S grad = S(1)) {
  check_same_shape(pred.shape(), target.shape(), "background_loss");
  Tensor<S> g(pred.shape());
  g.array() = (pred.array() - target.array()) * grad;
  return g;
}

namespace detail {
template <typename S>
constexpr S kBceClamp = S(1e-7);
}

// Masked binary cross-entropy. mask holds 1 where a pixel contributes and 0
// where it is excluded (outside the region of interest or labeled unknown).
// Predictions are clamped away from 0 and 1 before the logs.
template <typename S>
S segmentation_loss(const Tensor<S>& pred, const Tensor<S>& target, const Tensor<S>& mask,
                    Reduction reduction = Reduction::kSum) {
  check_same_shape(pred.shape(), target.shape(), "segmentation_loss");
  check_same_shape(pred.shape(), mask.shape(), "segmentation_loss mask");
  const S lo = detail::kBceClamp<S>, hi = S(1) - detail::kBceClamp<S>;
  Eigen::Array<S, Eigen::Dynamic, 1> p = pred.array().min(hi).max(lo);
  const S total = -(mask.array() *
                    (target.array() * p.log() + (S(1) - target.array()) * (S(1) - p).log()))
                       .sum();
  if (reduction == Reduction::kSum) return total;
  const S count = mask.array().sum();
  return count > S(0) ? total / count : S(0);
}

template <typename S>
Tensor<S> segmentation_loss_backward(const Tensor<S>& pred, const Tensor<S>& target,
                                     const Tensor<S>& mask,
                                     Reduction reduction = Reduction::kSum, S grad = S(1)) {
  check_same_shape(pred.shape(), target.shape(), "segmentation_loss");
  check_same_shape(pred.shape(), mask.shape(), "segmentation_loss mask");
  const S lo = detail::kBceClamp<S>, hi = S(1) - detail::kBceClamp<S>;
  Tensor<S> g(pred.shape());
  S scale = grad;
  if (reduction == Reduction::kMean) {
    const S count = mask.array().sum();
    if (count <= S(0)) {
      g.fill(S(0));
      return g;
    }
    scale /= count;
  }
  // The clamp is flat outside (lo, hi), so saturated predictions get zero
  // gradient.
  Eigen::Array<S, Eigen::Dynamic, 1> inside =
      ((pred.array() > lo) && (pred.array() < hi)).template cast<S>();
  Eigen::Array<S, Eigen::Dynamic, 1> p = pred.array().min(hi).max(lo);
  g.array() = mask.array() * inside * ((S(1) - target.array()) / (S(1) - p) - target.array() / p) *
              scale;
  return g;
}

}  // namespace mcrcnn
