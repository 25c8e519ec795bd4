#include "fndecomp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace fndecomp {

namespace {

int64_t shape_product(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_product(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != static_cast<int64_t>(data_.size())) {
    throw ShapeError("tensor data length does not match shape product");
  }
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(int64_t n) {
  Tensor t({n, n});
  for (int64_t i = 0; i < n; ++i) t.data_[static_cast<size_t>(i * n + i)] = 1.0;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const int64_t r = static_cast<int64_t>(rows.size());
  if (r == 0) throw ShapeError("matrix literal needs at least one row");
  const int64_t c = static_cast<int64_t>(rows.begin()->size());
  std::vector<double> data;
  data.reserve(static_cast<size_t>(r * c));
  for (const auto& row : rows) {
    if (static_cast<int64_t>(row.size()) != c) {
      throw ShapeError("ragged matrix literal");
    }
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

double& Tensor::at(int64_t r, int64_t c) {
  if (ndim() != 2) throw ShapeError("at(r,c) requires a 2-D tensor, got " + shape_str());
  return data_[static_cast<size_t>(r * shape_[1] + c)];
}

double Tensor::at(int64_t r, int64_t c) const {
  if (ndim() != 2) throw ShapeError("at(r,c) requires a 2-D tensor, got " + shape_str());
  return data_[static_cast<size_t>(r * shape_[1] + c)];
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw ShapeError("matmul requires 2-D tensors, got " + a.shape_str() + " and " +
                     b.shape_str());
  }
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul inner extents differ: " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  // i-k-j nesting: for each output element the k-sum runs in increasing k.
  for (int64_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose requires a 2-D tensor, got " + a.shape_str());
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  return out;
}

Tensor inverse(const Tensor& a, double ridge) {
  if (a.ndim() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError("inverse requires a square matrix, got " + a.shape_str());
  }
  if (ridge < 0.0) throw ShapeError("ridge must be nonnegative");
  const int64_t n = a.dim(0);

  // Ridge scaled by the mean diagonal so the perturbation is unit-free.
  double mean_diag = 0.0;
  for (int64_t i = 0; i < n; ++i) mean_diag += a.at(i, i);
  mean_diag /= static_cast<double>(n);
  const double shift = ridge * mean_diag;

  std::vector<double> lu(a.data(), a.data() + n * n);
  for (int64_t i = 0; i < n; ++i) lu[static_cast<size_t>(i * n + i)] += shift;

  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);

  // Pivoted LU, Doolittle with partial pivoting, in place.
  for (int64_t col = 0; col < n; ++col) {
    int64_t piv = col;
    double best = std::fabs(lu[static_cast<size_t>(col * n + col)]);
    for (int64_t r = col + 1; r < n; ++r) {
      const double v = std::fabs(lu[static_cast<size_t>(r * n + col)]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (!(best > 0.0) || !std::isfinite(best)) {
      throw SingularMatrixError(
          "matrix singular after ridging at pivot " + std::to_string(col),
          static_cast<int>(col));
    }
    if (piv != col) {
      for (int64_t j = 0; j < n; ++j)
        std::swap(lu[static_cast<size_t>(col * n + j)], lu[static_cast<size_t>(piv * n + j)]);
      std::swap(perm[static_cast<size_t>(col)], perm[static_cast<size_t>(piv)]);
    }
    const double pivval = lu[static_cast<size_t>(col * n + col)];
    for (int64_t r = col + 1; r < n; ++r) {
      const double f = lu[static_cast<size_t>(r * n + col)] / pivval;
      lu[static_cast<size_t>(r * n + col)] = f;
      for (int64_t j = col + 1; j < n; ++j) {
        lu[static_cast<size_t>(r * n + j)] -= f * lu[static_cast<size_t>(col * n + j)];
      }
    }
  }

  // Solve (LU) x = P e_j for each identity column.
  Tensor out({n, n});
  std::vector<double> y(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) {
    for (int64_t i = 0; i < n; ++i) {
      double s = (perm[static_cast<size_t>(i)] == j) ? 1.0 : 0.0;
      for (int64_t k = 0; k < i; ++k) s -= lu[static_cast<size_t>(i * n + k)] * y[static_cast<size_t>(k)];
      y[static_cast<size_t>(i)] = s;
    }
    for (int64_t i = n - 1; i >= 0; --i) {
      double s = y[static_cast<size_t>(i)];
      for (int64_t k = i + 1; k < n; ++k) s -= lu[static_cast<size_t>(i * n + k)] * out.at(k, j);
      out.at(i, j) = s / lu[static_cast<size_t>(i * n + i)];
    }
  }
  return out;
}

double frobenius_sq(const Tensor& a) {
  const double* p = a.data();
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += p[i] * p[i];
  return s;
}

Tensor reduce(const Tensor& a, int axis, ReduceKind kind) {
  if (axis < 0 || axis >= a.ndim()) {
    throw ShapeError("reduce axis " + std::to_string(axis) + " out of range for " +
                     a.shape_str());
  }
  const auto& shape = a.shape();
  std::vector<int64_t> out_shape;
  for (int i = 0; i < a.ndim(); ++i)
    if (i != axis) out_shape.push_back(shape[static_cast<size_t>(i)]);
  if (out_shape.empty()) out_shape.push_back(1);

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= shape[static_cast<size_t>(i)];
  const int64_t extent = shape[static_cast<size_t>(axis)];

  Tensor out(out_shape);
  const double* p = a.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const double* base = p + o * extent * inner + in;
      double acc;
      int64_t arg = 0;
      switch (kind) {
        case ReduceKind::kSum:
        case ReduceKind::kMean: {
          acc = 0.0;
          for (int64_t e = 0; e < extent; ++e) acc += base[e * inner];
          if (kind == ReduceKind::kMean) acc /= static_cast<double>(extent);
          break;
        }
        case ReduceKind::kMax:
        case ReduceKind::kArgmax: {
          acc = base[0];
          for (int64_t e = 1; e < extent; ++e) {
            const double v = base[e * inner];
            if (v > acc) {
              acc = v;
              arg = e;
            }
          }
          if (kind == ReduceKind::kArgmax) acc = static_cast<double>(arg);
          break;
        }
      }
      po[o * inner + in] = acc;
    }
  }
  return out;
}

namespace {

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f, const char* name) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(name) + " shape mismatch: " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x + y; }, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x - y; }, "sub");
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x * y; }, "mul");
}
Tensor div(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x / y; }, "div");
}
Tensor scale(const Tensor& a, double s) {
  return map(a, [s](double x) { return x * s; });
}
Tensor abs(const Tensor& a) {
  return map(a, [](double x) { return std::fabs(x); });
}
Tensor sqrt(const Tensor& a) {
  return map(a, [](double x) { return std::sqrt(x); });
}

bool all_finite(const Tensor& a) {
  const double* p = a.data();
  for (int64_t i = 0; i < a.numel(); ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

void require_finite(const Tensor& a, const std::string& label) {
  if (!all_finite(a)) throw NumericError("non-finite values in " + label);
}

}  // namespace fndecomp
