#pragma once

// Text-to-image retrieval metrics: Rank-K accuracy and mean average precision.
// Gallery items are ranked by descending similarity, ties by ascending index.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "fmfa/hyperparams.hpp"
#include "fmfa/matrix.hpp"

namespace fmfa {

struct RetrievalReport {
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  std::size_t num_queries = 0;
};

namespace detail {

inline void check_retrieval_inputs(const Matrix& similarity, std::span<const IdentityId> query_ids,
                                   std::span<const IdentityId> gallery_ids) {
  if (similarity.rows() != query_ids.size() || similarity.cols() != gallery_ids.size())
    throw Error(concat("retrieval: ", similarity.rows(), "x", similarity.cols(), " similarity for ",
                       query_ids.size(), " queries and ", gallery_ids.size(), " gallery items"));
  if (query_ids.empty()) throw Error("retrieval: no queries");
}

// Gallery indices of one query in ranked order.
inline std::vector<std::size_t> ranking(const Matrix& similarity, std::size_t q) {
  std::vector<std::size_t> order(similarity.cols());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto row = similarity.row(q);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  return order;
}

inline std::size_t count_matches(std::span<const IdentityId> gallery_ids, IdentityId id, std::size_t q) {
  const auto n = static_cast<std::size_t>(std::count(gallery_ids.begin(), gallery_ids.end(), id));
  if (n == 0) throw Error(concat("retrieval: query ", q, " (identity ", id, ") has no match in the gallery"));
  return n;
}

}  // namespace detail

/// Fraction of queries with a same-identity gallery item in their top k.
inline double rank_k(const Matrix& similarity, std::span<const IdentityId> query_ids,
                     std::span<const IdentityId> gallery_ids, std::size_t k) {
  detail::check_retrieval_inputs(similarity, query_ids, gallery_ids);
  if (k < 1) throw Error("rank_k: k must be at least 1");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    detail::count_matches(gallery_ids, query_ids[q], q);
    const auto order = detail::ranking(similarity, q);
    const std::size_t top = std::min(k, order.size());
    for (std::size_t r = 0; r < top; ++r)
      if (gallery_ids[order[r]] == query_ids[q]) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(query_ids.size());
}

/// Mean over queries of (1/R) * sum over matched ranks r of (matches up to r) / r.
inline double mean_average_precision(const Matrix& similarity, std::span<const IdentityId> query_ids,
                                     std::span<const IdentityId> gallery_ids) {
  detail::check_retrieval_inputs(similarity, query_ids, gallery_ids);
  double total = 0.0;
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    const std::size_t relevant = detail::count_matches(gallery_ids, query_ids[q], q);
    const auto order = detail::ranking(similarity, q);
    double ap = 0.0;
    std::size_t found = 0;
    for (std::size_t r = 0; r < order.size() && found < relevant; ++r) {
      if (gallery_ids[order[r]] != query_ids[q]) continue;
      ++found;
      ap += static_cast<double>(found) / static_cast<double>(r + 1);
    }
    total += ap / static_cast<double>(relevant);
  }
  return total / static_cast<double>(query_ids.size());
}

inline RetrievalReport evaluate_retrieval(const Matrix& similarity, std::span<const IdentityId> query_ids,
                                          std::span<const IdentityId> gallery_ids) {
  RetrievalReport r;
  r.rank1 = rank_k(similarity, query_ids, gallery_ids, 1);
  r.rank5 = rank_k(similarity, query_ids, gallery_ids, 5);
  r.rank10 = rank_k(similarity, query_ids, gallery_ids, 10);
  r.map = mean_average_precision(similarity, query_ids, gallery_ids);
  r.num_queries = query_ids.size();
  return r;
}

}  // namespace fmfa
