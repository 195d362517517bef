#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mcrcnn/errors.hpp"
#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

// Adam optimizer state: first/second moment estimates, one pair per
// parameter, in the same order as the parameter list handed to adam_step,
// plus the step counter and hyperparameters.
template <typename S>
struct AdamState {
  std::int64_t t = 0;
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  std::vector<Tensor<S>> m, v;

  AdamState() = default;

  explicit AdamState(const std::vector<Parameter<S>*>& params, S lr_ = S(1e-3)) : lr(lr_) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Parameter<S>* p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
  }
};

// One bias-corrected Adam update over params. Non-trainable parameters are
// skipped but keep their state slot. A non-finite gradient or updated value
// aborts, naming the offending parameter. Gradients are left intact; the
// caller zeroes them between steps.
template <typename S>
void adam_step(const std::vector<Parameter<S>*>& params, AdamState<S>& st) {
  if (params.size() != st.m.size()) {
    throw ConfigError("adam_step: state was built for " + std::to_string(st.m.size()) +
                      " parameters, got " + std::to_string(params.size()));
  }
  st.t += 1;
  const S bc1 = S(1) - std::pow(st.beta1, static_cast<S>(st.t));
  const S bc2 = S(1) - std::pow(st.beta2, static_cast<S>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<S>& p = *params[i];
    if (!p.trainable) continue;
    if (!p.grad.array().isFinite().all()) {
      throw NumericError("adam_step: non-finite gradient in parameter '" + p.name + "'");
    }
    auto& m = st.m[i].array();
    auto& v = st.v[i].array();
    m = st.beta1 * m + (S(1) - st.beta1) * p.grad.array();
    v = st.beta2 * v + (S(1) - st.beta2) * p.grad.array().square();
    p.value.array() -= st.lr * (m / bc1) / ((v / bc2).sqrt() + st.eps);
    if (!p.value.array().isFinite().all()) {
      throw NumericError("adam_step: update produced non-finite values in parameter '" +
                         p.name + "'");
    }
  }
}

// Reduce-on-plateau learning-rate control. The first observation just seeds
// the best value; afterwards `patience` consecutive epochs without improving
// the best by at least min_delta multiply the rate by factor (never below
// floor_lr) and reset the counter.
template <typename S>
struct PlateauSchedule {
  S factor = S(0.1);
  int patience = 5;
  S min_delta = S(1e-4);
  S floor_lr = S(1e-6);

  S best = S(0);
  bool has_best = false;
  int bad_epochs = 0;
};

template <typename S>
S plateau_update(PlateauSchedule<S>& sch, S observed_loss, S current_lr) {
  if (!sch.has_best) {
    sch.best = observed_loss;
    sch.has_best = true;
    sch.bad_epochs = 0;
    return current_lr;
  }
  if (observed_loss < sch.best - sch.min_delta) {
    sch.best = observed_loss;
    sch.bad_epochs = 0;
    return current_lr;
  }
  sch.bad_epochs += 1;
  if (sch.bad_epochs >= sch.patience) {
    sch.bad_epochs = 0;
    return std::max(sch.floor_lr, current_lr * sch.factor);
  }
  return current_lr;
}

}  // namespace mcrcnn
