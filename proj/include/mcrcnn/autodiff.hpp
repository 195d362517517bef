#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mcrcnn/errors.hpp"
#include "mcrcnn/loss.hpp"
#include "mcrcnn/ops.hpp"
#include "mcrcnn/rng.hpp"
#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

// Reverse-mode tape. Forward calls append nodes; backward() walks them in
// reverse creation order, accumulating gradients into interior nodes and into
// the bound Parameters' grad tensors (which the caller zeroes between steps).
// Inference runs the same forward code with mode kInfer, which records no
// backward closures, so there is a single code path per op.
template <typename S>
class Tape {
 public:
  struct Ref {
    int id = -1;
  };

  explicit Tape(Mode mode = Mode::kTrain, int threads = 1) : mode_(mode), threads_(threads) {}

  Mode mode() const { return mode_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  const Tensor<S>& value(Ref r) const { return node(r).value; }
  const Tensor<S>& grad(Ref r) const { return node(r).grad; }

  // Constant input. Pass needs_grad = true to collect d(loss)/d(input) in the
  // node's grad slot.
  Ref leaf(Tensor<S> v, bool needs_grad = false) { return push(std::move(v), needs_grad); }

  // A Parameter as a first-class node; its incoming gradient is added to
  // p.grad when the node's closure runs.
  Ref param(Parameter<S>& p) {
    Ref r = push(Tensor<S>(p.value), p.trainable);
    if (recording(p.trainable)) {
      set_back(r, [pp = &p](Tape& t, int self) {
        pp->grad.array() += t.nodes_[self].grad.array();
      });
    }
    return r;
  }

  Ref conv2d(Ref x, Parameter<S>& w, Parameter<S>& b, int dilation = 1) {
    Tensor<S> y = conv2d_same(node(x).value, w.value, b.value, dilation, threads_);
    const bool ng = node(x).needs_grad || w.trainable || b.trainable;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [xid = x.id, wp = &w, bp = &b, dilation](Tape& t, int self) {
        const bool need_input = t.nodes_[xid].needs_grad;
        const bool need_weight = wp->trainable || bp->trainable;
        Conv2dGrads<S> g = conv2d_same_backward(t.nodes_[self].grad, t.nodes_[xid].value,
                                                wp->value, dilation, need_input, need_weight);
        if (need_input) t.accum(xid, g.input);
        if (need_weight) {
          if (wp->trainable) wp->grad.array() += g.weight.array();
          if (bp->trainable) bp->grad.array() += g.bias.array();
        }
      });
    }
    return r;
  }

  Ref relu(Ref x) { return unary_activation(x, Activation::kRelu); }
  Ref sigmoid(Ref x) { return unary_activation(x, Activation::kSigmoid); }

  Ref batch_norm(Ref x, Parameter<S>& gamma, Parameter<S>& beta, RunningStats<S>& rs,
                 S momentum, S eps) {
    const bool ng = node(x).needs_grad || gamma.trainable || beta.trainable;
    if (mode_ == Mode::kTrain) {
      auto ctx = std::make_shared<BatchNormFwd<S>>(
          batch_norm_train(node(x).value, gamma.value, beta.value, eps));
      bn_update_running(rs, ctx->mean, ctx->var, momentum);
      Tensor<S> y = std::move(ctx->y);
      Ref r = push(std::move(y), ng);
      if (ng) {
        set_back(r, [xid = x.id, gp = &gamma, bp = &beta, ctx](Tape& t, int self) {
          NormGrads<S> g = batch_norm_train_backward(t.nodes_[self].grad, *ctx, gp->value);
          if (t.nodes_[xid].needs_grad) t.accum(xid, g.x);
          if (gp->trainable) gp->grad.array() += g.gamma.array();
          if (bp->trainable) bp->grad.array() += g.beta.array();
        });
      }
      return r;
    }
    if (!rs.initialized) {
      throw NumericError(
          "batch_norm: infer mode requested before any train-mode update initialized the "
          "running statistics");
    }
    return push(batch_norm_infer(node(x).value, gamma.value, beta.value, rs.mean, rs.var, eps),
                false);
  }

  Ref instance_norm(Ref x, Parameter<S>& gamma, Parameter<S>& beta, S eps) {
    auto ctx = std::make_shared<InstanceNormFwd<S>>(
        mcrcnn::instance_norm(node(x).value, gamma.value, beta.value, eps));
    const bool ng = node(x).needs_grad || gamma.trainable || beta.trainable;
    Tensor<S> y = std::move(ctx->y);
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [xid = x.id, gp = &gamma, bp = &beta, ctx](Tape& t, int self) {
        NormGrads<S> g = instance_norm_backward(t.nodes_[self].grad, *ctx, gp->value);
        if (t.nodes_[xid].needs_grad) t.accum(xid, g.x);
        if (gp->trainable) gp->grad.array() += g.gamma.array();
        if (bp->trainable) bp->grad.array() += g.beta.array();
      });
    }
    return r;
  }

  Ref spatial_dropout(Ref x, double rate, Rng& rng) {
    Tensor<S> mask;
    Tensor<S> y = mcrcnn::spatial_dropout(node(x).value, rate, mode_, rng, &mask);
    const bool ng = node(x).needs_grad;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [xid = x.id, mask = std::move(mask)](Tape& t, int self) {
        t.accum(xid, spatial_dropout_backward(t.nodes_[self].grad, mask));
      });
    }
    return r;
  }

  Ref avg_pool(Ref x, int window = 4) {
    Tensor<S> y = avg_pool_same(node(x).value, window);
    const bool ng = node(x).needs_grad;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [xid = x.id, window](Tape& t, int self) {
        t.accum(xid, avg_pool_same_backward(t.nodes_[self].grad, window));
      });
    }
    return r;
  }

  Ref concat(Ref a, Ref b) {
    Tensor<S> y = concat_channels(node(a).value, node(b).value);
    const bool ng = node(a).needs_grad || node(b).needs_grad;
    const int ca = node(a).value.shape().c;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [aid = a.id, bid = b.id, ca](Tape& t, int self) {
        auto parts = split_channels(t.nodes_[self].grad, ca);
        t.accum(aid, parts.first);
        t.accum(bid, parts.second);
      });
    }
    return r;
  }

  Ref minmax(Ref x) {
    auto ctx = std::make_shared<MinMaxFwd<S>>(minmax_normalize_fwd(node(x).value));
    const bool ng = node(x).needs_grad;
    Ref r = push(Tensor<S>(ctx->y), ng);
    if (recording(ng)) {
      set_back(r, [xid = x.id, ctx](Tape& t, int self) {
        t.accum(xid, minmax_normalize_backward(t.nodes_[self].grad, *ctx));
      });
    }
    return r;
  }

  Ref sub(Ref a, Ref b) {
    Tensor<S> y = mcrcnn::sub(node(a).value, node(b).value);
    const bool ng = node(a).needs_grad || node(b).needs_grad;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [aid = a.id, bid = b.id](Tape& t, int self) {
        t.accum(aid, t.nodes_[self].grad);
        t.accum(bid, t.nodes_[self].grad, S(-1));
      });
    }
    return r;
  }

  Ref mul(Ref a, Ref b) {
    Tensor<S> y = hadamard(node(a).value, node(b).value);
    const bool ng = node(a).needs_grad || node(b).needs_grad;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [aid = a.id, bid = b.id](Tape& t, int self) {
        t.accum(aid, hadamard(t.nodes_[self].grad, t.nodes_[bid].value));
        t.accum(bid, hadamard(t.nodes_[self].grad, t.nodes_[aid].value));
      });
    }
    return r;
  }

  Ref sum(Ref x) {
    Tensor<S> y(Shape(1, 1, 1, 1));
    y[0] = sum_all(node(x).value);
    const bool ng = node(x).needs_grad;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [xid = x.id](Tape& t, int self) {
        Tensor<S> g(t.nodes_[xid].value.shape(), t.nodes_[self].grad[0]);
        t.accum(xid, g);
      });
    }
    return r;
  }

  Ref background_loss(Ref pred, Tensor<S> target) {
    Tensor<S> y(Shape(1, 1, 1, 1));
    y[0] = mcrcnn::background_loss(node(pred).value, target);
    const bool ng = node(pred).needs_grad;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [pid = pred.id, target = std::move(target)](Tape& t, int self) {
        t.accum(pid, background_loss_backward(t.nodes_[pid].value, target,
                                              t.nodes_[self].grad[0]));
      });
    }
    return r;
  }

  Ref segmentation_loss(Ref pred, Tensor<S> target, Tensor<S> mask,
                        Reduction reduction = Reduction::kSum) {
    Tensor<S> y(Shape(1, 1, 1, 1));
    y[0] = mcrcnn::segmentation_loss(node(pred).value, target, mask, reduction);
    const bool ng = node(pred).needs_grad;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [pid = pred.id, target = std::move(target), mask = std::move(mask),
                   reduction](Tape& t, int self) {
        t.accum(pid, segmentation_loss_backward(t.nodes_[pid].value, target, mask, reduction,
                                                t.nodes_[self].grad[0]));
      });
    }
    return r;
  }

  // Seeds the scalar loss node with gradient 1 and runs every recorded
  // closure in reverse creation order.
  void backward(Ref loss) {
    if (mode_ != Mode::kTrain) {
      throw ConfigError("backward: tape was recorded in infer mode");
    }
    Node& nd = node(loss);
    if (nd.value.size() != 1) {
      throw ShapeError("backward: loss node must be scalar, got shape " + nd.value.shape().str());
    }
    if (nd.grad.size() == 0) nd.grad = Tensor<S>(nd.value.shape());
    nd.grad.fill(S(1));
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.back || n.grad.size() == 0) continue;
      n.back(*this, id);
    }
  }

  // Adds scale * g into the grad slot of node id (no-op for nodes that do not
  // need gradients). Called from backward closures.
  void accum(int id, const Tensor<S>& g, S scale = S(1)) {
    Node& nd = nodes_[id];
    if (!nd.needs_grad) return;
    if (nd.grad.size() == 0) {
      nd.grad = Tensor<S>(g.shape());
      nd.grad.array() = g.array() * scale;
    } else {
      check_same_shape(nd.grad.shape(), g.shape(), "tape accum");
      nd.grad.array() += g.array() * scale;
    }
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::function<void(Tape&, int)> back;
    bool needs_grad = false;
  };

  // Closures only ever record in train mode; in infer mode needs_grad is
  // forced off so no gradient buffers accumulate either.
  bool recording(bool needs_grad) const { return mode_ == Mode::kTrain && needs_grad; }

  Ref push(Tensor<S> v, bool needs_grad) {
    Node nd;
    nd.value = std::move(v);
    nd.needs_grad = needs_grad && mode_ == Mode::kTrain;
    nodes_.push_back(std::move(nd));
    return Ref{static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(Ref r) {
    if (r.id < 0 || r.id >= static_cast<int>(nodes_.size())) {
      throw ConfigError("tape: invalid node reference");
    }
    return nodes_[r.id];
  }
  const Node& node(Ref r) const {
    if (r.id < 0 || r.id >= static_cast<int>(nodes_.size())) {
      throw ConfigError("tape: invalid node reference");
    }
    return nodes_[r.id];
  }

  void set_back(Ref r, std::function<void(Tape&, int)> f) { nodes_[r.id].back = std::move(f); }

  Ref unary_activation(Ref x, Activation kind) {
    Tensor<S> y = activation(node(x).value, kind);
    const bool ng = node(x).needs_grad;
    Ref r = push(std::move(y), ng);
    if (recording(ng)) {
      set_back(r, [xid = x.id, kind](Tape& t, int self) {
        t.accum(xid, activation_backward(t.nodes_[self].grad, t.nodes_[xid].value,
                                         t.nodes_[self].value, kind));
      });
    }
    return r;
  }

  Mode mode_;
  int threads_;
  std::vector<Node> nodes_;
};

}  // namespace mcrcnn
