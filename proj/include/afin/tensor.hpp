#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace afin {

// Dense row-major matrix of doubles. Vectors are (n x 1); coordinate-pair
// tensors of shape d x d x C are stored as (d*d) x C with pair (i,j) living
// in row i*d + j.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols) : rows_(rows), cols_(cols), data_(size_t(rows) * cols, 0.0) {
    if (rows < 0 || cols < 0) throw std::invalid_argument("Tensor: negative shape");
  }
  Tensor(int rows, int cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != size_t(rows) * cols) throw std::invalid_argument("Tensor: data size mismatch");
  }

  static Tensor column(std::vector<double> v) {
    int n = int(v.size());
    return Tensor(n, 1, std::move(v));
  }
  static Tensor scalar(double x) { return Tensor(1, 1, {x}); }
  static Tensor identity(int d) {
    Tensor t(d, d);
    for (int i = 0; i < d; ++i) t(i, i) = 1.0;
    return t;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(int r, int c) { return data_[size_t(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[size_t(r) * cols_ + c]; }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  void fill(double x) {
    for (auto& v : data_) v = x;
  }
  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
  }
  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::string shape_str() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

inline double rel_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::fabs(a[i] - b[i]));
    den = std::max(den, std::max(std::fabs(a[i]), std::fabs(b[i])));
  }
  return num / (den + 1e-300);
}

namespace linalg {

// Cholesky factor L (lower) of a symmetric positive definite matrix stored
// as a d*d x 1 column or d x d matrix. Throws if the matrix is not PD.
inline std::vector<double> cholesky(const double* a, int d) {
  std::vector<double> L(size_t(d) * d, 0.0);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[size_t(i) * d + j];
      for (int k = 0; k < j; ++k) s -= L[size_t(i) * d + k] * L[size_t(j) * d + k];
      if (i == j) {
        if (s <= 0.0 || !std::isfinite(s)) throw std::runtime_error("cholesky: matrix not positive definite");
        L[size_t(i) * d + i] = std::sqrt(s);
      } else {
        L[size_t(i) * d + j] = s / L[size_t(j) * d + j];
      }
    }
  }
  return L;
}

inline std::vector<double> cholesky(const Tensor& a) {
  int d = (a.cols() == 1) ? int(std::lround(std::sqrt(double(a.rows())))) : a.rows();
  if (a.cols() != 1 && a.rows() != a.cols()) throw std::invalid_argument("cholesky: not square");
  return cholesky(a.data(), d);
}

// Solve L y = b (forward substitution), L lower triangular d x d.
inline void solve_lower(const std::vector<double>& L, int d, double* b) {
  for (int i = 0; i < d; ++i) {
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= L[size_t(i) * d + k] * b[k];
    b[i] = s / L[size_t(i) * d + i];
  }
}

// Solve L^T y = b (back substitution).
inline void solve_lower_transpose(const std::vector<double>& L, int d, double* b) {
  for (int i = d - 1; i >= 0; --i) {
    double s = b[i];
    for (int k = i + 1; k < d; ++k) s -= L[size_t(k) * d + i] * b[k];
    b[i] = s / L[size_t(i) * d + i];
  }
}

// x := A^{-1} b given the Cholesky factor of A.
inline void chol_solve(const std::vector<double>& L, int d, double* b) {
  solve_lower(L, d, b);
  solve_lower_transpose(L, d, b);
}

inline double chol_logdet(const std::vector<double>& L, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += std::log(L[size_t(i) * d + i]);
  return 2.0 * s;
}

// Inverse of an SPD matrix via its Cholesky factor.
inline std::vector<double> chol_inverse(const std::vector<double>& L, int d) {
  std::vector<double> inv(size_t(d) * d, 0.0);
  std::vector<double> e(d, 0.0);
  for (int j = 0; j < d; ++j) {
    for (int i = 0; i < d; ++i) e[i] = (i == j) ? 1.0 : 0.0;
    chol_solve(L, d, e.data());
    for (int i = 0; i < d; ++i) inv[size_t(i) * d + j] = e[i];
  }
  return inv;
}

}  // namespace linalg
}  // namespace afin
