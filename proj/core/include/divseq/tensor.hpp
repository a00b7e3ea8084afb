#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "divseq/error.hpp"

namespace divseq {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense n-dimensional array, row-major. Optionally carries a gradient buffer
// of the same size; `requires_grad` marks tensors that participate in
// differentiation (parameters, and anything computed from them while a tape
// is active).
template <typename Real>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    for (auto d : shape_) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), Real(0));
  }

  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  static Tensor full(Shape shape, Real v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(Real v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::vector<Real>& vec() { return data_; }
  const std::vector<Real>& vec() const { return data_; }

  Real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  Real& at(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  Real at(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  Real& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  Real at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  bool requires_grad = false;

  bool has_grad() const { return !grad_.empty(); }
  Real* grad() { return grad_.data(); }
  const Real* grad() const { return grad_.data(); }
  std::vector<Real>& grad_vec() { return grad_; }
  const std::vector<Real>& grad_vec() const { return grad_; }

  void ensure_grad() {
    if (grad_.empty()) grad_.assign(data_.size(), Real(0));
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), Real(0)); }
  void drop_grad() { grad_.clear(); }

  bool all_finite() const {
    for (Real v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  bool grad_all_finite() const {
    for (Real v : grad_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
  std::vector<Real> grad_;
};

template <typename Real>
using TensorPtr = std::shared_ptr<Tensor<Real>>;

template <typename Real>
TensorPtr<Real> make_tensor(Shape shape) {
  return std::make_shared<Tensor<Real>>(std::move(shape));
}

template <typename Real>
TensorPtr<Real> make_tensor(Shape shape, std::vector<Real> data) {
  return std::make_shared<Tensor<Real>>(std::move(shape), std::move(data));
}

template <typename Real>
TensorPtr<Real> make_scalar(Real v) {
  return std::make_shared<Tensor<Real>>(Tensor<Real>::scalar(v));
}

// Parameter helper: zero-initialized, gradient-bearing.
template <typename Real>
TensorPtr<Real> make_param(Shape shape) {
  auto t = make_tensor<Real>(std::move(shape));
  t->requires_grad = true;
  t->ensure_grad();
  return t;
}

// Integer token matrix (batch x length). Kept outside the autodiff world.
struct TokenMatrix {
  TokenMatrix() = default;
  TokenMatrix(std::int64_t rows, std::int64_t cols, std::int32_t fill = 0)
      : rows(rows), cols(cols), ids(static_cast<std::size_t>(rows * cols), fill) {}

  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::int32_t> ids;

  std::int32_t& at(std::int64_t r, std::int64_t c) { return ids[static_cast<std::size_t>(r * cols + c)]; }
  std::int32_t at(std::int64_t r, std::int64_t c) const { return ids[static_cast<std::size_t>(r * cols + c)]; }
};

// Boolean mask matrix; true marks a real (non-pad) position.
struct MaskMatrix {
  MaskMatrix() = default;
  MaskMatrix(std::int64_t rows, std::int64_t cols, bool fill = false)
      : rows(rows), cols(cols), on(static_cast<std::size_t>(rows * cols), fill ? 1 : 0) {}

  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::uint8_t> on;

  void set(std::int64_t r, std::int64_t c, bool v) { on[static_cast<std::size_t>(r * cols + c)] = v ? 1 : 0; }
  bool at(std::int64_t r, std::int64_t c) const { return on[static_cast<std::size_t>(r * cols + c)] != 0; }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto v : on) n += v;
    return n;
  }
};

}  // namespace divseq
