#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace treetrain {

// Row-major dense matrix. All math in this project runs through plain
// fixed-order scalar loops so that results are deterministic and independent
// of how a token span is split into segments (bitwise KV-cache consistency
// depends on this; no BLAS, no reassociating reductions).
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  void add(const Matrix& o) {
    if (!same_shape(o)) throw std::invalid_argument("Matrix::add: shape mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
  }
};

// out[i][j] = sum_k a[i][k] * b[k][j], inner loop in ascending k.
template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* ar = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.cols; ++j) {
      T acc = T(0);
      for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * b.data[k * b.cols + j];
      out.data[i * out.cols + j] = acc;
    }
  }
}

// out[i][j] = sum_k a[i][k] * b[j][k]  (i.e. a * b^T).
template <typename T>
void matmul_transposed(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* ar = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const T* br = b.data.data() + j * b.cols;
      T acc = T(0);
      for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
      out.data[i * out.cols + j] = acc;
    }
  }
}

// grad[i][j] += sum_t a[t][i] * b[t][j]  (i.e. grad += a^T * b), t ascending so
// that accumulation order matches across chunk splits.
template <typename T>
void accumulate_outer(Matrix<T>& grad, const Matrix<T>& a, const Matrix<T>& b) {
  for (std::size_t t = 0; t < a.rows; ++t) {
    const T* ar = a.data.data() + t * a.cols;
    const T* br = b.data.data() + t * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      T* gr = grad.data.data() + i * grad.cols;
      const T av = ar[i];
      for (std::size_t j = 0; j < b.cols; ++j) gr[j] += av * br[j];
    }
  }
}

}  // namespace treetrain
