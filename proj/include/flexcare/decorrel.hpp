// SPDX-License-Identifier: Apache-2.0
//
// Token-level covariance of combination embeddings and the decorrelation
// penalty built on it. Covariance is taken between token rows, treating the
// d feature columns as observations.
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>

#include "flexcare/autodiff.hpp"
#include "flexcare/tensor.hpp"

namespace flexcare {

/// How the per-token center is formed before the outer products. `mean`
/// divides the column sum by d; `literal_sum` uses the bare column sum.
enum class CovarianceCentering { mean, literal_sum };

template <typename T>
using CovMatrix = Matrix<T>;

/// Cov(Z) = 1/(d-1) * sum_j (z_:,j - zbar)(z_:,j - zbar)^T for Z of shape n_tok x d.
template <typename T>
CovMatrix<T> token_covariance(const Matrix<T>& z, CovarianceCentering centering = CovarianceCentering::mean) {
  const std::size_t n = z.rows(), d = z.cols();
  if (d < 2) throw std::invalid_argument("token_covariance: need at least 2 feature columns");
  if (n == 0) throw std::invalid_argument("token_covariance: no tokens");
  Matrix<T> centered = z;
  for (std::size_t r = 0; r < n; ++r) {
    T s{};
    for (std::size_t c = 0; c < d; ++c) s += z(r, c);
    const T center = centering == CovarianceCentering::mean ? s / T(d) : s;
    for (std::size_t c = 0; c < d; ++c) centered(r, c) -= center;
  }
  CovMatrix<T> cov(n, n);
  gemm_nt_acc(centered, centered, cov);
  const T inv = T(1) / T(d - 1);
  for (std::size_t i = 0; i < cov.size(); ++i) cov[i] *= inv;
  return cov;
}

/// C = 1/(n_comb-1)^2 * sum_{i != j} Cov_ij^2; zero when n_comb < 2.
template <typename T>
T comb_regularizer(const CovMatrix<T>& cov, std::size_t n_comb) {
  if (cov.rows() != cov.cols()) throw std::invalid_argument("comb_regularizer: covariance must be square");
  if (n_comb < 2) return T{};
  T s{};
  for (std::size_t i = 0; i < cov.rows(); ++i)
    for (std::size_t j = 0; j < cov.cols(); ++j)
      if (i != j) s += cov(i, j) * cov(i, j);
  const T denom = T(n_comb - 1) * T(n_comb - 1);
  return s / denom;
}

/// Mini-batch mean of per-sample regularizer values.
template <typename T>
T cov_loss(std::span<const T> values) {
  if (values.empty()) throw std::invalid_argument("cov_loss: empty batch");
  T s{};
  for (T v : values) s += v;
  return s / T(values.size());
}

/// Differentiable Cov(Z).
template <typename T>
ad::Var token_covariance(ad::Tape<T>& t, ad::Var z, CovarianceCentering centering = CovarianceCentering::mean) {
  const std::size_t d = t.value(z).cols();
  if (d < 2) throw std::invalid_argument("token_covariance: need at least 2 feature columns");
  const T factor = centering == CovarianceCentering::mean ? T(1) : T(d);
  ad::Var centered = ad::center_rows(t, z, factor);
  return ad::scale(t, ad::matmul_nt(t, centered, centered), T(1) / T(d - 1));
}

/// Differentiable C for one sample's combination embeddings. Returns a
/// constant zero node when fewer than two combinations are present.
template <typename T>
ad::Var comb_regularizer(ad::Tape<T>& t, ad::Var z_comb, CovarianceCentering centering = CovarianceCentering::mean) {
  const std::size_t n = t.value(z_comb).rows();
  if (n < 2) return t.constant(Matrix<T>(1, 1));
  ad::Var cov = token_covariance(t, z_comb, centering);
  return ad::scale(t, ad::offdiag_sq_sum(t, cov), T(1) / (T(n - 1) * T(n - 1)));
}

}  // namespace flexcare
