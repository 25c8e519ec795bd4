#ifndef FNDECOMP_TENSOR_HPP_
#define FNDECOMP_TENSOR_HPP_

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "fndecomp/errors.hpp"

namespace fndecomp {

// Dense n-dimensional array of doubles, contiguous, last axis fastest
// (row-major). All factorization-path math runs in 64-bit.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor identity(int64_t n);
  // Row-major 2-D literal, e.g. Tensor::matrix({{1,2},{3,4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  // 2-D accessors (checked rank, unchecked bounds).
  double& at(int64_t r, int64_t c);
  double at(int64_t r, int64_t c) const;

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

enum class ReduceKind { kSum, kMean, kMax, kArgmax };

// Standard matrix product with fixed loop nesting; inner extents must match.
Tensor matmul(const Tensor& a, const Tensor& b);

// 2-D transpose.
Tensor transpose(const Tensor& a);

// Inverse of (a + ridge * mean(diag(a)) * I) by pivoted LU. ridge = 0 and a
// well-conditioned gives the true inverse. Throws SingularMatrixError with
// the failing pivot index if elimination breaks down.
Tensor inverse(const Tensor& a, double ridge);

// Sum of squared entries.
double frobenius_sq(const Tensor& a);

// Reduction along one axis; the axis is removed from the shape. Argmax ties
// resolve to the lowest index; the result holds indices as doubles.
Tensor reduce(const Tensor& a, int axis, ReduceKind kind);

// Elementwise arithmetic; shapes must match exactly (no broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor abs(const Tensor& a);
Tensor sqrt(const Tensor& a);

// True iff no entry is NaN or Inf.
bool all_finite(const Tensor& a);
// Throws NumericError naming `label` if a contains NaN/Inf.
void require_finite(const Tensor& a, const std::string& label);

}  // namespace fndecomp

#endif  // FNDECOMP_TENSOR_HPP_
