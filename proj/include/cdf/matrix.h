// Copyright (c) 2026 The cdf-speech Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CDF_MATRIX_H_
#define CDF_MATRIX_H_

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "cdf/common.h"

namespace cdf {

// Dense row-major matrix. float is used on the training path, double in
// DSP code and in the gradient checker.
template <typename Real>
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols)
      : rows_(rows), cols_(cols),
        data_(static_cast<size_t>(rows) * static_cast<size_t>(cols), Real(0)) {
    CDF_CHECK(rows >= 0 && cols >= 0, "matrix dims must be nonnegative");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real* row(int r) { return data_.data() + static_cast<size_t>(r) * cols_; }
  const Real* row(int r) const {
    return data_.data() + static_cast<size_t>(r) * cols_;
  }

  Real& operator()(int r, int c) {
    return data_[static_cast<size_t>(r) * cols_ + c];
  }
  Real operator()(int r, int c) const {
    return data_[static_cast<size_t>(r) * cols_ + c];
  }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  void fill(Real v) {
    for (auto& x : data_) x = v;
  }

  bool all_finite() const;

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<Real> data_;
};

template <typename Real>
bool Matrix<Real>::all_finite() const {
  for (Real v : data_) {
    if (!(v == v) || v > Real(1e300) || v < Real(-1e300)) return false;
  }
  return true;
}

template <typename To, typename From>
Matrix<To> convert_matrix(const Matrix<From>& m) {
  Matrix<To> out(m.rows(), m.cols());
  for (size_t i = 0; i < m.size(); ++i)
    out.data()[i] = static_cast<To>(m.data()[i]);
  return out;
}

namespace detail {

// c (m x n) += a (m x k) * b (k x n), all row-major. Four-row register
// blocking keeps four accumulator chains per b load.
template <typename Real>
void gemm_rows4(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const Real* a0 = a + static_cast<size_t>(i + 0) * k;
    const Real* a1 = a + static_cast<size_t>(i + 1) * k;
    const Real* a2 = a + static_cast<size_t>(i + 2) * k;
    const Real* a3 = a + static_cast<size_t>(i + 3) * k;
    Real* c0 = c + static_cast<size_t>(i + 0) * n;
    Real* c1 = c + static_cast<size_t>(i + 1) * n;
    Real* c2 = c + static_cast<size_t>(i + 2) * n;
    Real* c3 = c + static_cast<size_t>(i + 3) * n;
    for (int p = 0; p < k; ++p) {
      const Real v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const Real* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        const Real bj = bp[j];
        c0[j] += v0 * bj;
        c1[j] += v1 * bj;
        c2[j] += v2 * bj;
        c3[j] += v3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    const Real* ai = a + static_cast<size_t>(i) * k;
    Real* ci = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const Real v = ai[p];
      const Real* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += v * bp[j];
    }
  }
}

template <typename Real>
Matrix<Real> transpose(const Matrix<Real>& m) {
  Matrix<Real> out(m.cols(), m.rows());
  for (int r = 0; r < m.rows(); ++r) {
    const Real* src = m.row(r);
    for (int c = 0; c < m.cols(); ++c) out(c, r) = src[c];
  }
  return out;
}

}  // namespace detail

// c = a * b. All three row-major; c is overwritten.
template <typename Real>
void matmul(const Matrix<Real>& a, const Matrix<Real>& b, Matrix<Real>* c) {
  CDF_CHECK(a.cols() == b.rows(), "matmul inner dims");
  if (c->rows() != a.rows() || c->cols() != b.cols())
    *c = Matrix<Real>(a.rows(), b.cols());
  else
    c->fill(Real(0));
  detail::gemm_rows4(a.data(), b.data(), c->data(), a.rows(), a.cols(),
                     b.cols());
}

// c = a * b^T. b is transposed up front (an O(k*n) copy next to the
// O(m*k*n) multiply) so the hot loop has no reduction and vectorizes.
template <typename Real>
void matmul_nt(const Matrix<Real>& a, const Matrix<Real>& b, Matrix<Real>* c) {
  CDF_CHECK(a.cols() == b.cols(), "matmul_nt inner dims");
  const Matrix<Real> bt = detail::transpose(b);
  if (c->rows() != a.rows() || c->cols() != b.rows())
    *c = Matrix<Real>(a.rows(), b.rows());
  else
    c->fill(Real(0));
  detail::gemm_rows4(a.data(), bt.data(), c->data(), a.rows(), a.cols(),
                     bt.cols());
}

// Writes [x[clamp(frame-left)], .., x[clamp(frame+right)]] into dst;
// boundary frames are replicated, matching time-delay edge clamping.
template <typename Real>
void gather_context_row(const Matrix<Real>& x, int frame, int left, int right,
                        Real* dst) {
  const int t_max = x.rows() - 1;
  for (int c = -left; c <= right; ++c) {
    const int src = std::min(std::max(frame + c, 0), t_max);
    const Real* s = x.row(src);
    Real* d = dst + static_cast<size_t>(c + left) * x.cols();
    for (int j = 0; j < x.cols(); ++j) d[j] = s[j];
  }
}

// Spliced view of every row: T x (D * (left + right + 1)).
template <typename Real>
Matrix<Real> gather_context(const Matrix<Real>& x, int left, int right) {
  Matrix<Real> out(x.rows(), x.cols() * (left + right + 1));
  for (int t = 0; t < x.rows(); ++t)
    gather_context_row(x, t, left, right, out.row(t));
  return out;
}

// c += a^T * b (accumulating; gradient accumulation wants +=).
template <typename Real>
void matmul_tn_acc(const Matrix<Real>& a, const Matrix<Real>& b,
                   Matrix<Real>* c) {
  CDF_CHECK(a.rows() == b.rows(), "matmul_tn inner dims");
  CDF_CHECK(c->rows() == a.cols() && c->cols() == b.cols(),
            "matmul_tn output dims");
  const Matrix<Real> at = detail::transpose(a);
  detail::gemm_rows4(at.data(), b.data(), c->data(), at.rows(), at.cols(),
                     b.cols());
}

}  // namespace cdf

#endif  // CDF_MATRIX_H_
