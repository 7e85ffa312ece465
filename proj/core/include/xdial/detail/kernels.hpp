#pragma once

#include <cmath>
#include <cstdint>

#include "xdial/common.hpp"

// Raw numeric kernels on plain pointers. No shape logic here beyond what the
// loop structure needs; callers validate shapes.

namespace xdial::detail {

// c[p,r] = a[p,q] * b[q,r]
template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t p, std::int64_t q, std::int64_t r) {
  for (std::int64_t i = 0; i < p; ++i) {
    T* crow = c + i * r;
    for (std::int64_t j = 0; j < r; ++j) crow[j] = T(0);
    const T* arow = a + i * q;
    for (std::int64_t k = 0; k < q; ++k) {
      const T aik = arow[k];
      if (aik == T(0)) continue;
      const T* brow = b + k * r;
      for (std::int64_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
}

// da[p,q] += dc[p,r] * b[q,r]^T
template <typename T>
void gemm_acc_nt(const T* dc, const T* b, T* da, std::int64_t p, std::int64_t q,
                 std::int64_t r) {
  for (std::int64_t i = 0; i < p; ++i) {
    const T* dcrow = dc + i * r;
    T* darow = da + i * q;
    for (std::int64_t k = 0; k < q; ++k) {
      const T* brow = b + k * r;
      T acc = T(0);
      for (std::int64_t j = 0; j < r; ++j) acc += dcrow[j] * brow[j];
      darow[k] += acc;
    }
  }
}

// db[q,r] += a[p,q]^T * dc[p,r]
template <typename T>
void gemm_acc_tn(const T* a, const T* dc, T* db, std::int64_t p, std::int64_t q,
                 std::int64_t r) {
  for (std::int64_t i = 0; i < p; ++i) {
    const T* arow = a + i * q;
    const T* dcrow = dc + i * r;
    for (std::int64_t k = 0; k < q; ++k) {
      const T aik = arow[k];
      if (aik == T(0)) continue;
      T* dbrow = db + k * r;
      for (std::int64_t j = 0; j < r; ++j) dbrow[j] += aik * dcrow[j];
    }
  }
}

template <typename T>
T sigmoid_scalar(T x) {
  // Split on sign so exp never overflows.
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Row-wise overflow-safe softmax over the last (contiguous) dimension.
template <typename T>
void softmax_rows(const T* in, T* out, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t i = 0; i < rows; ++i) {
    const T* x = in + i * cols;
    T* y = out + i * cols;
    T mx = x[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (std::int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const T inv = T(1) / sum;
    for (std::int64_t j = 0; j < cols; ++j) y[j] *= inv;
  }
}

// log(sum(exp(x))) over one contiguous row.
template <typename T>
T logsumexp_row(const T* x, std::int64_t n) {
  T mx = x[0];
  for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = T(0);
  for (std::int64_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
  return mx + std::log(sum);
}

// Broadcast iteration support: strides of `shape` left-padded to `rank`,
// with stride 0 on broadcast (size-1) dimensions of the padded shape.
inline std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out,
                                                   int out_rank) {
  std::vector<std::int64_t> strides(static_cast<std::size_t>(out_rank), 0);
  const int pad = out_rank - static_cast<int>(shape.size());
  std::int64_t stride = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    const std::int64_t dim = shape[static_cast<std::size_t>(i)];
    strides[static_cast<std::size_t>(i + pad)] = (dim == 1 && out[static_cast<std::size_t>(i + pad)] != 1) ? 0 : stride;
    stride *= dim;
  }
  return strides;
}

}  // namespace xdial::detail
