#pragma once

// Dense kernels shared by the global and local alignment losses.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "fmfa/matrix.hpp"

namespace fmfa {

namespace detail {

inline std::vector<double> row_norms(const Matrix& m, const char* which) {
  std::vector<double> norms(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    norms[i] = norm(m.row(i));
    if (!(norms[i] > 0.0)) throw Error(concat("cosine similarity: row ", i, " of ", which, " has zero norm"));
  }
  return norms;
}

}  // namespace detail

/// Cosine similarity between every row of `a` and every row of `c`.
inline Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& c) {
  if (a.cols() == 0 || a.cols() != c.cols()) {
    throw Error(detail::concat("cosine_similarity_matrix: incompatible widths ", a.cols(), " and ",
                               c.cols()));
  }
  const auto na = detail::row_norms(a, "the first operand");
  const auto nc = detail::row_norms(c, "the second operand");
  Matrix out(a.rows(), c.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < c.rows(); ++j) out(i, j) = dot(a.row(i), c.row(j)) / (na[i] * nc[j]);
  return out;
}

/// Pulls an upstream gradient on cos(a, c) back onto a and c.
/// d cos_ij / d a_i = (c_j/|c_j| - cos_ij a_i/|a_i|) / |a_i|, symmetrically for c_j.
inline std::pair<Matrix, Matrix> cosine_similarity_backward(const Matrix& a, const Matrix& c,
                                                            const Matrix& cos,
                                                            const Matrix& upstream) {
  const auto na = detail::row_norms(a, "the first operand");
  const auto nc = detail::row_norms(c, "the second operand");
  const std::size_t d = a.cols();
  Matrix da(a.rows(), d);
  Matrix dc(c.rows(), d);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < c.rows(); ++j) {
      const double g = upstream(i, j);
      if (g == 0.0) continue;
      const double cij = cos(i, j);
      const double sa = g / na[i];
      const double sc = g / nc[j];
      for (std::size_t k = 0; k < d; ++k) {
        const double ahat = a(i, k) / na[i];
        const double chat = c(j, k) / nc[j];
        da(i, k) += sa * (chat - cij * ahat);
        dc(j, k) += sc * (ahat - cij * chat);
      }
    }
  }
  return {std::move(da), std::move(dc)};
}

/// Row-wise softmax of s / tau, stabilised by subtracting each row maximum.
inline Matrix row_softmax(const Matrix& s, double tau) {
  if (!(tau > 0.0)) throw Error(detail::concat("row_softmax: temperature must be positive, got ", tau));
  Matrix out(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const auto row = s.row(i);
    if (row.empty()) continue;
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      out(i, j) = std::exp((row[j] - mx) / tau);
      total += out(i, j);
    }
    for (std::size_t j = 0; j < row.size(); ++j) out(i, j) /= total;
  }
  return out;
}

/// Per-row min-max scaling to [0, 1]. A constant row maps to all ones so
/// that every column stays eligible for retention.
inline Matrix minmax_normalize_rows(const Matrix& s) {
  Matrix out(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const auto row = s.row(i);
    if (row.empty()) continue;
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double range = *hi - *lo;
    for (std::size_t j = 0; j < row.size(); ++j)
      out(i, j) = range > 0.0 ? (row[j] - *lo) / range : 1.0;
  }
  return out;
}

/// (1/lambda) * log(sum_i exp(lambda * m_i)), computed around max(m).
inline double lse_pool(std::span<const double> maxima, double lambda) {
  if (maxima.empty()) throw Error("lse_pool: empty input");
  if (!(lambda > 0.0)) throw Error(detail::concat("lse_pool: lambda must be positive, got ", lambda));
  const double mx = *std::max_element(maxima.begin(), maxima.end());
  double total = 0.0;
  for (double m : maxima) total += std::exp(lambda * (m - mx));
  return mx + std::log(total) / lambda;
}

/// Gradient of lse_pool with respect to its inputs: softmax(lambda * m).
inline std::vector<double> lse_pool_weights(std::span<const double> maxima, double lambda) {
  if (maxima.empty()) throw Error("lse_pool_weights: empty input");
  const double mx = *std::max_element(maxima.begin(), maxima.end());
  std::vector<double> w(maxima.size());
  double total = 0.0;
  for (std::size_t i = 0; i < maxima.size(); ++i) {
    w[i] = std::exp(lambda * (maxima[i] - mx));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace fmfa
