// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bsr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles. A default-constructed tensor is empty
/// (rank 0, no elements); any other tensor has only positive extents.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// Rank-2 tensor from nested rows; all rows must have the same length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;
  double& at(std::size_t h, std::size_t i, std::size_t j);
  double at(std::size_t h, std::size_t i, std::size_t j) const;

  /// Row `i` of a rank-2 tensor.
  std::span<double> row(std::size_t i);
  std::span<const double> row(std::size_t i) const;

  /// Same data, different shape with equal element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;

  /// Storage cost at an accounting width (bytes per element).
  std::size_t bytes(std::size_t element_width) const noexcept { return data_.size() * element_width; }

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double scale) noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Raises NumericError naming `what` if any element is NaN or Inf.
void require_finite(const Tensor& t, const char* what);

/// Raises DimensionError if `t` is not rank-2.
void require_matrix(const Tensor& t, const char* what);

namespace dense {

/// y = a * b for a [m x k], b [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// y = a^T * b for a [k x m], b [k x n].
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// y = a * b^T for a [m x k], b [n x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// Raw-span kernels; `c` is accumulated into when `accumulate` is set.
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate);
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate);

/// Sum over rows of a [m x n] matrix.
Tensor column_sum(const Tensor& a);

double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);

}  // namespace dense

}  // namespace bsr
