#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mcrcnn/autodiff.hpp"
#include "mcrcnn/errors.hpp"
#include "mcrcnn/ops.hpp"
#include "mcrcnn/rng.hpp"
#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

// Widths and depths of the three stages. Defaults give the full-size network;
// every field can be shrunk for desk-scale runs.
struct ModelConfig {
  int input_channels = 3;
  int backbone_width = 64;
  int bcnn_deep_layers = 15;
  int scnn_deep_layers = 14;
  int norm_interval = 3;  // normalize after every norm_interval-th deep layer
  int kernel_size = 3;
  std::vector<int> rpm_dilations = {4, 8, 16, 32};
  int rpm_width = 8;  // feature maps per dilated branch
  double rpm_dropout_rate = 0.25;
  double bn_momentum = 0.9;
  double norm_eps = 1e-5;

  void validate() const {
    if (input_channels < 1 || backbone_width < 1 || rpm_width < 1) {
      throw ConfigError("model config: channel/width fields must be >= 1");
    }
    if (bcnn_deep_layers < 1 || scnn_deep_layers < 1) {
      throw ConfigError("model config: deep layer counts must be >= 1");
    }
    if (norm_interval < 1) {
      throw ConfigError("model config: norm interval must be >= 1");
    }
    if (kernel_size < 1 || kernel_size % 2 == 0) {
      throw ConfigError("model config: kernel size must be odd, got " +
                        std::to_string(kernel_size));
    }
    if (rpm_dilations.empty()) {
      throw ConfigError("model config: at least one dilation branch required");
    }
    for (int d : rpm_dilations) {
      if (d < 1) throw ConfigError("model config: dilations must be >= 1");
    }
    if (rpm_dropout_rate < 0.0 || rpm_dropout_rate >= 1.0) {
      throw ConfigError("model config: dropout rate must lie in [0,1)");
    }
    if (bn_momentum < 0.0 || bn_momentum >= 1.0 || norm_eps <= 0.0) {
      throw ConfigError("model config: invalid normalization constants");
    }
  }
};

template <typename S>
struct ConvLayer {
  Parameter<S> weight, bias;
  int dilation = 1;
};

template <typename S>
struct BcnnDeepLayer {
  ConvLayer<S> conv;
  bool has_norm = false;
  Parameter<S> gamma, beta;  // batch-norm affine, present when has_norm
  RunningStats<S> stats;
};

template <typename S>
struct ScnnDeepLayer {
  ConvLayer<S> conv;
  bool has_norm = false;
  Parameter<S> gamma, beta;  // instance-norm affine, present when has_norm
};

struct ParamCountRow {
  std::string layer;
  std::int64_t count = 0;
};

struct ParamCountTable {
  std::vector<ParamCountRow> rows;
  std::int64_t bcnn = 0, rpm = 0, scnn = 0, grand = 0;
};

// The three-stage network. The first stage predicts a residual whose
// subtraction from the frame approximates the background; the multiscale
// stage refines that residual into a single guidance map; the segmentation
// stage turns frame plus guidance into a foreground probability map.
template <typename S>
class McrcnnModel {
 public:
  using Ref = typename Tape<S>::Ref;

  McrcnnModel(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int w = cfg_.backbone_width;
    const int cin = cfg_.input_channels;
    const int k = cfg_.kernel_size;

    bcnn_head_ = make_conv("bcnn.head", w, cin, k, 1, rng);
    bcnn_deep_.resize(cfg_.bcnn_deep_layers);
    for (int i = 0; i < cfg_.bcnn_deep_layers; ++i) {
      auto& d = bcnn_deep_[i];
      const std::string name = "bcnn.deep" + two_digits(i + 1);
      d.conv = make_conv(name, w, w, k, 1, rng);
      if ((i + 1) % cfg_.norm_interval == 0) {
        d.has_norm = true;
        d.gamma = Parameter<S>(name + ".bn.gamma", Tensor<S>(Shape(1, w, 1, 1), S(1)));
        d.beta = Parameter<S>(name + ".bn.beta", Tensor<S>(Shape(1, w, 1, 1), S(0)));
        d.stats = RunningStats<S>(w);
      }
    }
    bcnn_tail_ = make_conv("bcnn.tail", cin, w, k, 1, rng);

    rpm_branches_.reserve(cfg_.rpm_dilations.size());
    for (std::size_t i = 0; i < cfg_.rpm_dilations.size(); ++i) {
      rpm_branches_.push_back(make_conv("rpm.branch" + std::to_string(i), cfg_.rpm_width, cin,
                                        3, cfg_.rpm_dilations[i], rng));
    }
    rpm_fuse_ = make_conv("rpm.fuse", 1, static_cast<int>(cfg_.rpm_dilations.size()) *
                          cfg_.rpm_width, 1, 1, rng);

    scnn_head_ = make_conv("scnn.head", w, cin, k, 1, rng);
    scnn_deep_.resize(cfg_.scnn_deep_layers);
    for (int i = 0; i < cfg_.scnn_deep_layers; ++i) {
      auto& d = scnn_deep_[i];
      const std::string name = "scnn.deep" + two_digits(i + 1);
      d.conv = make_conv(name, w, w, k, 1, rng);
      if ((i + 1) % cfg_.norm_interval == 0) {
        d.has_norm = true;
        d.gamma = Parameter<S>(name + ".in.gamma", Tensor<S>(Shape(1, w, 1, 1), S(1)));
        d.beta = Parameter<S>(name + ".in.beta", Tensor<S>(Shape(1, w, 1, 1), S(0)));
      }
    }
    scnn_fuse_ = make_conv("scnn.fuse", 1, w + 1, k, 1, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  // First stage on a tape: frame -> residual map (linear output).
  Ref bcnn(Tape<S>& t, Ref f) {
    auto h = t.relu(t.conv2d(f, bcnn_head_.weight, bcnn_head_.bias));
    for (auto& d : bcnn_deep_) {
      auto c = t.conv2d(h, d.conv.weight, d.conv.bias);
      if (d.has_norm) {
        c = t.batch_norm(c, d.gamma, d.beta, d.stats, static_cast<S>(cfg_.bn_momentum),
                         static_cast<S>(cfg_.norm_eps));
      }
      h = t.relu(c);
    }
    return t.conv2d(h, bcnn_tail_.weight, bcnn_tail_.bias);
  }

  // Multiscale stage on a tape: residual -> guidance map in [0,1].
  Ref rpm(Tape<S>& t, Ref residual, Rng& rng) {
    auto d = t.spatial_dropout(residual, cfg_.rpm_dropout_rate, rng);
    Ref cat;
    bool first = true;
    for (auto& br : rpm_branches_) {
      auto f = t.relu(t.conv2d(d, br.weight, br.bias, br.dilation));
      cat = first ? f : t.concat(cat, f);
      first = false;
    }
    auto p = t.conv2d(cat, rpm_fuse_.weight, rpm_fuse_.bias);
    return t.minmax(t.avg_pool(p, 4));
  }

  // Segmentation stage on a tape: (frame, guidance) -> probability map.
  Ref scnn(Tape<S>& t, Ref f, Ref rprime) {
    auto h = t.relu(t.conv2d(f, scnn_head_.weight, scnn_head_.bias));
    for (auto& d : scnn_deep_) {
      auto c = t.conv2d(h, d.conv.weight, d.conv.bias);
      if (d.has_norm) {
        c = t.instance_norm(c, d.gamma, d.beta, static_cast<S>(cfg_.norm_eps));
      }
      h = t.relu(c);
    }
    auto cat = t.concat(h, rprime);
    return t.sigmoid(t.conv2d(cat, scnn_fuse_.weight, scnn_fuse_.bias));
  }

  // Plain-tensor entry points, each recording a throwaway tape in the
  // requested mode.
  Tensor<S> bcnn_forward(const Tensor<S>& f, Mode mode, int threads = 1) {
    Tape<S> t(mode, threads);
    return t.value(bcnn(t, t.leaf(f)));
  }

  Tensor<S> rpm_forward(const Tensor<S>& residual, Mode mode, Rng& rng, int threads = 1) {
    Tape<S> t(mode, threads);
    return t.value(rpm(t, t.leaf(residual), rng));
  }

  Tensor<S> scnn_forward(const Tensor<S>& f, const Tensor<S>& rprime, Mode mode,
                         int threads = 1) {
    Tape<S> t(mode, threads);
    return t.value(scnn(t, t.leaf(f), t.leaf(rprime)));
  }

  // Full inference path: frame -> probability map, everything in infer mode.
  Tensor<S> infer_prob(const Tensor<S>& f, int threads = 1) {
    Tape<S> t(Mode::kInfer, threads);
    auto fn = t.leaf(f);
    auto residual = bcnn(t, fn);
    Rng inert(0);  // dropout is an identity in infer mode
    auto guidance = rpm(t, residual, inert);
    return t.value(scnn(t, fn, guidance));
  }

  std::vector<Parameter<S>*> parameters() {
    std::vector<Parameter<S>*> out = bcnn_parameters();
    for (Parameter<S>* p : theta2_parameters()) out.push_back(p);
    return out;
  }

  std::vector<Parameter<S>*> bcnn_parameters() {
    std::vector<Parameter<S>*> out;
    add_conv(out, bcnn_head_);
    for (auto& d : bcnn_deep_) {
      add_conv(out, d.conv);
      if (d.has_norm) {
        out.push_back(&d.gamma);
        out.push_back(&d.beta);
      }
    }
    add_conv(out, bcnn_tail_);
    return out;
  }

  std::vector<Parameter<S>*> theta2_parameters() {
    std::vector<Parameter<S>*> out;
    for (auto& br : rpm_branches_) add_conv(out, br);
    add_conv(out, rpm_fuse_);
    add_conv(out, scnn_head_);
    for (auto& d : scnn_deep_) {
      add_conv(out, d.conv);
      if (d.has_norm) {
        out.push_back(&d.gamma);
        out.push_back(&d.beta);
      }
    }
    add_conv(out, scnn_fuse_);
    return out;
  }

  std::vector<RunningStats<S>*> running_stats() {
    std::vector<RunningStats<S>*> out;
    for (auto& d : bcnn_deep_) {
      if (d.has_norm) out.push_back(&d.stats);
    }
    return out;
  }

  void set_bcnn_trainable(bool v) {
    for (Parameter<S>* p : bcnn_parameters()) p->trainable = v;
  }

  void zero_grad() {
    for (Parameter<S>* p : parameters()) p->zero_grad();
  }

 private:
  static std::string two_digits(int i) {
    return (i < 10 ? "0" : "") + std::to_string(i);
  }

  static void add_conv(std::vector<Parameter<S>*>& out, ConvLayer<S>& c) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }

  // Zero-mean Gaussian weights with std sqrt(2 / fan-in); zero biases.
  ConvLayer<S> make_conv(const std::string& name, int cout, int cin, int k, int dilation,
                         Rng& rng) {
    ConvLayer<S> l;
    l.dilation = dilation;
    Tensor<S> w(Shape(cout, cin, k, k));
    const double sd = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = static_cast<S>(rng.normal() * sd);
    l.weight = Parameter<S>(name + ".weight", std::move(w));
    l.bias = Parameter<S>(name + ".bias", Tensor<S>(Shape(1, cout, 1, 1), S(0)));
    return l;
  }

  ModelConfig cfg_;
  ConvLayer<S> bcnn_head_, bcnn_tail_;
  std::vector<BcnnDeepLayer<S>> bcnn_deep_;
  std::vector<ConvLayer<S>> rpm_branches_;
  ConvLayer<S> rpm_fuse_;
  ConvLayer<S> scnn_head_, scnn_fuse_;
  std::vector<ScnnDeepLayer<S>> scnn_deep_;
};

// Background approximation: the frame minus the learned residual.
template <typename S>
Tensor<S> approx_background(const Tensor<S>& f, const Tensor<S>& residual) {
  check_same_shape(f.shape(), residual.shape(), "approx_background");
  return sub(f, residual);
}

// One row per layer (convolution or normalization), stage subtotals, and the
// grand total of trainable parameter counts. Running statistics are buffers,
// not parameters, and are excluded.
template <typename S>
ParamCountTable count_parameters(McrcnnModel<S>& model) {
  ParamCountTable t;
  auto strip = [](const std::string& name) {
    const auto pos = name.rfind('.');
    return name.substr(0, pos);
  };
  for (Parameter<S>* p : model.parameters()) {
    const std::string layer = strip(p->name);
    if (t.rows.empty() || t.rows.back().layer != layer) {
      t.rows.push_back({layer, 0});
    }
    t.rows.back().count += p->value.size();
    if (layer.rfind("bcnn.", 0) == 0) {
      t.bcnn += p->value.size();
    } else if (layer.rfind("rpm.", 0) == 0) {
      t.rpm += p->value.size();
    } else {
      t.scnn += p->value.size();
    }
    t.grand += p->value.size();
  }
  return t;
}

}  // namespace mcrcnn
