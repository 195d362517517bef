#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <cstring>
#include <sstream>
#include <string>
#include <utility>

#include "mcrcnn/errors.hpp"

namespace mcrcnn {

// Dimensions of a dense [N, C, H, W] tensor. W varies fastest in memory.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  Shape() = default;
  Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {}

  std::int64_t size() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }

  std::int64_t index(int in, int ic, int iy, int ix) const {
    return ((static_cast<std::int64_t>(in) * c + ic) * h + iy) * w + ix;
  }

  bool operator==(const Shape& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "[" << n << "," << c << "," << h << "," << w << "]";
    return os.str();
  }
};

// Dense row-major 4-D tensor over scalar S. Copies are deep; operations on
// tensors never alias their inputs into outputs.
template <typename S>
class Tensor {
 public:
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0)) : shape_(shape) {
    if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
      throw ShapeError("tensor dimensions must all be >= 1, got " + shape.str());
    }
    data_ = Array::Constant(shape.size(), fill);
  }

  Tensor(int n, int c, int h, int w, S fill = S(0)) : Tensor(Shape(n, c, h, w), fill) {}

  static Tensor zeros(Shape shape) { return Tensor(shape, S(0)); }
  static Tensor ones(Shape shape) { return Tensor(shape, S(1)); }

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  Array& array() { return data_; }
  const Array& array() const { return data_; }

  S& at(int n, int c, int h, int w) { return data_[shape_.index(n, c, h, w)]; }
  S at(int n, int c, int h, int w) const { return data_[shape_.index(n, c, h, w)]; }

  S& operator[](std::int64_t i) { return data_[i]; }
  S operator[](std::int64_t i) const { return data_[i]; }

  // Contiguous H*W view of one (sample, channel) plane.
  Eigen::Map<Array> plane(int n, int c) {
    return Eigen::Map<Array>(data_.data() + shape_.index(n, c, 0, 0),
                             static_cast<std::int64_t>(shape_.h) * shape_.w);
  }
  Eigen::Map<const Array> plane(int n, int c) const {
    return Eigen::Map<const Array>(data_.data() + shape_.index(n, c, 0, 0),
                                   static_cast<std::int64_t>(shape_.h) * shape_.w);
  }

  void fill(S v) { data_.setConstant(v); }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape_ = shape_;
    out.data_ = data_.template cast<T>();
    return out;
  }

  bool same_bits(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    return std::memcmp(data_.data(), o.data_.data(), sizeof(S) * data_.size()) == 0;
  }

 private:
  template <typename T>
  friend class Tensor;

  Shape shape_;
  Array data_;
};

inline void check_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

// A named tensor with a gradient accumulator. Non-trainable parameters are
// never touched by optimizer steps.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name_, Tensor<S> value_, bool trainable_ = true)
      : name(std::move(name_)),
        value(std::move(value_)),
        grad(value.shape(), S(0)),
        trainable(trainable_) {}

  void zero_grad() { grad.fill(S(0)); }
};

}  // namespace mcrcnn
