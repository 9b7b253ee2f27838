// tensor.hpp - dense row-major tensors (rank 0..2, 64-bit floats)
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fairwell/common.hpp"

namespace fairwell {

inline std::string shape_to_string(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << "]";
  return os.str();
}

// Values are validated as finite at construction; ops re-validate their
// outputs, so a NaN/Inf is caught at the node that produced it.
class Tensor {
 public:
  Tensor() : shape_{}, data_{0.0} {}  // rank-0 zero

  Tensor(std::vector<size_t> shape, std::vector<double> values, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::move(values)), requires_grad_(requires_grad) {
    validate();
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({}, {v}, requires_grad);
  }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    size_t n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }

  static Tensor matrix(size_t rows, size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  static Tensor zeros(const std::vector<size_t>& shape) {
    return Tensor(shape, std::vector<double>(numel_of(shape), 0.0));
  }

  static Tensor full(const std::vector<size_t>& shape, double v) {
    return Tensor(shape, std::vector<double>(numel_of(shape), v));
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t numel() const { return data_.size(); }
  size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? shape_[0] : 1); }
  size_t cols() const { return rank() == 2 ? shape_[1] : 1; }
  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool b) { requires_grad_ = b; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double operator[](size_t i) const { return data_[i]; }
  double& operator[](size_t i) { return data_[i]; }

  double at(size_t r, size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(size_t r, size_t c) { return data_[r * shape_[1] + c]; }

  // Scalar access; throws unless the tensor holds exactly one value.
  double item() const {
    if (data_.size() != 1)
      throw ShapeError("item() requires a single-element tensor, shape " +
                       shape_to_string(shape_));
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Index (or npos) of the first non-finite value.
  size_t first_nonfinite() const {
    for (size_t i = 0; i < data_.size(); ++i)
      if (!is_finite(data_[i])) return i;
    return static_cast<size_t>(-1);
  }

  static size_t numel_of(const std::vector<size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), size_t{1}, std::multiplies<>());
  }

 private:
  void validate() const {
    if (shape_.size() > 2)
      throw ShapeError("tensor rank > 2 not supported: " + shape_to_string(shape_));
    for (size_t d : shape_)
      if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_to_string(shape_));
    if (numel_of(shape_) != data_.size())
      throw ShapeError("shape " + shape_to_string(shape_) + " expects " +
                       std::to_string(numel_of(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    size_t bad = first_nonfinite();
    if (bad != static_cast<size_t>(-1))
      throw NumericError("non-finite value at flat index " + std::to_string(bad) +
                         " in tensor of shape " + shape_to_string(shape_));
  }

  std::vector<size_t> shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

}  // namespace fairwell
