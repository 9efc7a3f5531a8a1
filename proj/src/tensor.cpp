// SPDX-License-Identifier: Apache-2.0
#include "bsr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bsr/errors.hpp"

namespace bsr {

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) {
    return 0;
  }
  std::size_t n = 1;
  for (std::size_t extent : shape) {
    n *= extent;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) {
      os << 'x';
    }
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void require_positive_extents(const Shape& shape) {
  for (std::size_t extent : shape) {
    if (extent == 0) {
      throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  require_positive_extents(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  require_positive_extents(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                         " elements");
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) {
      throw DimensionError("ragged matrix literal");
    }
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape_));
  }
  return shape_[axis];
}

double& Tensor::at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
double& Tensor::at(std::size_t h, std::size_t i, std::size_t j) {
  return data_[(h * shape_[1] + i) * shape_[2] + j];
}
double Tensor::at(std::size_t h, std::size_t i, std::size_t j) const {
  return data_[(h * shape_[1] + i) * shape_[2] + j];
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t n = shape_.back();
  return std::span<double>(data_).subspan(i * n, n);
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t n = shape_.back();
  return std::span<const double>(data_).subspan(i * n, n);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw DimensionError("cannot add " + shape_to_string(other.shape_) + " into " + shape_to_string(shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    data_[i] += other.data_[i];
  }
  return *this;
}

Tensor& Tensor::operator*=(double scale) noexcept {
  for (double& v : data_) {
    v *= scale;
  }
  return *this;
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + what);
  }
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got " + shape_to_string(t.shape()));
  }
}

namespace dense {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
  if (!accumulate) {
    std::fill(c, c + m * n, 0.0);
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        ci[j] += av * bp[j];
      }
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
  if (!accumulate) {
    std::fill(c, c + m * n, 0.0);
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        ci[j] += av * bp[j];
      }
    }
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        s += ai[p] * bj[p];
      }
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner extents differ: " + shape_to_string(a.shape()) + " * " +
                         shape_to_string(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  gemm_nn(a.dim(0), a.dim(1), b.dim(1), a.raw(), b.raw(), c.raw(), false);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("matmul_tn leading extents differ: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  Tensor c({a.dim(1), b.dim(1)});
  gemm_tn(a.dim(1), a.dim(0), b.dim(1), a.raw(), b.raw(), c.raw(), false);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt trailing extents differ: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(0)});
  gemm_nt(a.dim(0), a.dim(1), b.dim(0), a.raw(), b.raw(), c.raw(), false);
  return c;
}

Tensor column_sum(const Tensor& a) {
  require_matrix(a, "column_sum");
  Tensor s({a.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    const auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      s[j] += r[j];
    }
  }
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

double l2_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) {
    s += v * v;
  }
  return std::sqrt(s);
}

}  // namespace dense

}  // namespace bsr
