#pragma once

// Explicit fine-grained alignment: sparse token/patch similarity aggregation
// into language-grouped vision embeddings ("joints"), hard-coded similarity
// with LSE pooling, and the four-way triplet loss over a batch.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmfa/hyperparams.hpp"
#include "fmfa/loss_report.hpp"
#include "fmfa/matrix.hpp"
#include "fmfa/numeric.hpp"
#include "fmfa/parallel.hpp"

namespace fmfa {

inline constexpr std::size_t kDefaultMaxTokens = 77;

/// Token and patch features of one matched text/image pair. `tokens` holds
/// only real tokens; padding is never materialised.
struct LocalSample {
  Matrix tokens;   // L_i x d
  Matrix patches;  // N x d
  IdentityId identity = 0;
};

struct LocalFeatureBatch {
  std::vector<LocalSample> samples;

  std::size_t size() const noexcept { return samples.size(); }

  std::vector<IdentityId> identities() const {
    std::vector<IdentityId> ids;
    ids.reserve(samples.size());
    for (const auto& s : samples) ids.push_back(s.identity);
    return ids;
  }

  void validate(std::size_t max_tokens = kDefaultMaxTokens) const {
    if (samples.empty()) return;
    const std::size_t d = samples.front().tokens.cols();
    const std::size_t n = samples.front().patches.rows();
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const auto& s = samples[k];
      if (s.tokens.rows() < 1 || s.tokens.rows() > max_tokens)
        throw Error(detail::concat("LocalFeatureBatch: sample ", k, " has ", s.tokens.rows(),
                                   " tokens, expected 1..", max_tokens));
      if (s.patches.rows() < 1 || s.patches.rows() != n)
        throw Error(detail::concat("LocalFeatureBatch: sample ", k, " has ", s.patches.rows(),
                                   " patches, expected ", n));
      if (s.tokens.cols() != d || s.patches.cols() != d)
        throw Error(detail::concat("LocalFeatureBatch: sample ", k, " feature width differs from ", d));
    }
  }
};

inline std::string token_grad_name(std::size_t k) { return "tokens/" + std::to_string(k); }
inline std::string patch_grad_name(std::size_t k) { return "patches/" + std::to_string(k); }

/// Boolean L x N mask of retained token/patch entries.
class RetainedMask {
 public:
  RetainedMask() = default;
  RetainedMask(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool operator()(std::size_t r, std::size_t c) const noexcept { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) noexcept { bits_[r * cols_ + c] = v ? 1 : 0; }

  std::size_t row_count(std::size_t r) const noexcept {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols_; ++c) n += bits_[r * cols_ + c];
    return n;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct SparsifyResult {
  RetainedMask retained_mask;
  Matrix sparse;
};

/// All intermediate stages of the aggregation for one text/image pair.
struct SparseAggregation {
  Matrix raw;         // inner products, L x N
  Matrix normalized;  // row min-max scaled
  RetainedMask retained_mask;
  Matrix sparse;      // normalized entries below sigma zeroed
  Matrix weights;     // row-normalised sparse entries
  Matrix joint;       // L x d language-grouped vision embeddings
  double sigma = 0.0;
};

/// Inner products between every token and every patch.
inline Matrix raw_similarity(const Matrix& tokens, const Matrix& patches) {
  if (tokens.cols() != patches.cols())
    throw Error(detail::concat("raw_similarity: token width ", tokens.cols(), " != patch width ",
                               patches.cols()));
  return matmul_transposed(tokens, patches);
}

inline SparsifyResult sparsify(const Matrix& normalized, double sigma) {
  if (!(sigma > 0.0)) throw Error(detail::concat("sparsify: sigma must be positive, got ", sigma));
  SparsifyResult out{RetainedMask(normalized.rows(), normalized.cols()),
                     Matrix(normalized.rows(), normalized.cols())};
  for (std::size_t i = 0; i < normalized.rows(); ++i)
    for (std::size_t j = 0; j < normalized.cols(); ++j) {
      const double v = normalized(i, j);
      if (v < 0.0 || v > 1.0)
        throw Error(detail::concat("sparsify: entry (", i, ",", j, ") = ", v, " outside [0,1]"));
      if (v >= sigma) {
        out.retained_mask.set(i, j, true);
        out.sparse(i, j) = v;
      }
    }
  return out;
}

inline Matrix aggregation_weights(const Matrix& sparse) {
  Matrix w(sparse.rows(), sparse.cols());
  for (std::size_t i = 0; i < sparse.rows(); ++i) {
    double total = 0.0;
    for (double v : sparse.row(i)) total += v;
    if (!(total > 0.0))
      throw Error(detail::concat("aggregation_weights: row ", i, " retains no patch"));
    for (std::size_t j = 0; j < sparse.cols(); ++j) w(i, j) = sparse(i, j) / total;
  }
  return w;
}

/// e_i = sum_j weights_ij * patch_j.
inline Matrix group_vision_embeddings(const Matrix& weights, const Matrix& patches) {
  if (weights.cols() != patches.rows())
    throw Error(detail::concat("group_vision_embeddings: ", weights.cols(), " weights per row but ",
                               patches.rows(), " patches"));
  return matmul(weights, patches);
}

/// Raw similarity, min-max normalisation, sparsification, aggregation and
/// grouping for one pair. `sigma` unset means 1/N.
inline SparseAggregation build_joint(const Matrix& tokens, const Matrix& patches,
                                     std::optional<double> sigma = std::nullopt) {
  if (patches.rows() == 0) throw Error("build_joint: no patches");
  SparseAggregation agg;
  agg.sigma = sigma ? *sigma : 1.0 / static_cast<double>(patches.rows());
  agg.raw = raw_similarity(tokens, patches);
  agg.normalized = minmax_normalize_rows(agg.raw);
  auto sparse = sparsify(agg.normalized, agg.sigma);
  agg.retained_mask = std::move(sparse.retained_mask);
  agg.sparse = std::move(sparse.sparse);
  agg.weights = aggregation_weights(agg.sparse);
  agg.joint = group_vision_embeddings(agg.weights, patches);
  return agg;
}

/// Pulls d(loss)/d(joint) back onto tokens and patches. The threshold acts as
/// a fixed gate; min and max of each row are differentiated at their
/// selected positions.
inline std::pair<Matrix, Matrix> build_joint_backward(const Matrix& tokens, const Matrix& patches,
                                                      const SparseAggregation& agg,
                                                      const Matrix& djoint) {
  const std::size_t L = agg.raw.rows();
  const std::size_t N = agg.raw.cols();
  const Matrix dweights = matmul_transposed(djoint, patches);
  Matrix dpatches = transposed_matmul(agg.weights, djoint);

  Matrix draw(L, N);
  for (std::size_t i = 0; i < L; ++i) {
    double total = 0.0;
    double proj = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      total += agg.sparse(i, j);
      proj += dweights(i, j) * agg.weights(i, j);
    }
    const auto row = agg.raw.row(i);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) continue;  // constant row: output does not depend on inputs
    const auto lo_idx = static_cast<std::size_t>(lo - row.begin());
    const auto hi_idx = static_cast<std::size_t>(hi - row.begin());
    double dlo = 0.0;
    double dhi = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      if (!agg.retained_mask(i, j)) continue;
      const double dnorm = (dweights(i, j) - proj) / total;
      const double s = agg.normalized(i, j);
      draw(i, j) += dnorm / range;
      dlo += dnorm * (s - 1.0) / range;
      dhi -= dnorm * s / range;
    }
    draw(i, lo_idx) += dlo;
    draw(i, hi_idx) += dhi;
  }
  Matrix dtokens = matmul(draw, patches);
  dpatches += transposed_matmul(draw, tokens);
  return {std::move(dtokens), std::move(dpatches)};
}

struct OpCounts {
  std::uint64_t similarity_entries_computed = 0;
  std::uint64_t post_entries_touched = 0;
  friend bool operator==(const OpCounts&, const OpCounts&) = default;
};

/// Work counters for the similarity pass and the post-processing pass.
/// Safe to share between threads.
struct OpCounter {
  std::atomic<std::uint64_t> similarity_entries_computed{0};
  std::atomic<std::uint64_t> post_entries_touched{0};

  OpCounts snapshot() const noexcept {
    return {similarity_entries_computed.load(), post_entries_touched.load()};
  }
};

namespace detail {

struct RowMaxima {
  std::vector<double> values;
  std::vector<std::size_t> argmax;
  std::vector<double> query_norms;
  std::vector<double> candidate_norms;
};

inline void check_local_operands(const Matrix& queries, const Matrix& candidates, const char* where) {
  if (queries.rows() == 0 || candidates.rows() == 0)
    throw Error(detail::concat(where, ": empty operand"));
  if (queries.cols() != candidates.cols())
    throw Error(detail::concat(where, ": width mismatch ", queries.cols(), " vs ", candidates.cols()));
}

// Cosine row maxima tracked during the similarity pass; ties keep the
// lowest column.
inline RowMaxima cosine_row_maxima(const Matrix& queries, const Matrix& candidates, OpCounter* counter) {
  RowMaxima out;
  out.query_norms = row_norms(queries, "the queries");
  out.candidate_norms = row_norms(candidates, "the candidates");
  out.values.resize(queries.rows());
  out.argmax.resize(queries.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < candidates.rows(); ++j) {
      const double o = dot(queries.row(i), candidates.row(j)) / (out.query_norms[i] * out.candidate_norms[j]);
      if (o > best) {
        best = o;
        best_j = j;
      }
    }
    out.values[i] = best;
    out.argmax[i] = best_j;
  }
  if (counter) counter->similarity_entries_computed += queries.rows() * candidates.rows();
  return out;
}

}  // namespace detail

/// LSE pooling over the per-row maximum cosine similarity of `queries`
/// (M x d) against `candidates` (L x d). Post-processing touches M entries.
inline double hard_similarity(const Matrix& queries, const Matrix& candidates, double lambda,
                              OpCounter* counter = nullptr) {
  detail::check_local_operands(queries, candidates, "hard_similarity");
  const auto maxima = detail::cosine_row_maxima(queries, candidates, counter);
  const double value = lse_pool(maxima.values, lambda);
  if (counter) counter->post_entries_touched += maxima.values.size();
  return value;
}

struct HardSimilarityGrad {
  double value = 0.0;
  Matrix d_queries;
  Matrix d_candidates;
};

/// hard_similarity plus its gradient; the argmax selection is held fixed.
inline HardSimilarityGrad hard_similarity_with_grad(const Matrix& queries, const Matrix& candidates,
                                                    double lambda) {
  detail::check_local_operands(queries, candidates, "hard_similarity");
  const auto maxima = detail::cosine_row_maxima(queries, candidates, nullptr);
  HardSimilarityGrad out;
  out.value = lse_pool(maxima.values, lambda);
  const auto pool = lse_pool_weights(maxima.values, lambda);
  const std::size_t d = queries.cols();
  out.d_queries = Matrix(queries.rows(), d);
  out.d_candidates = Matrix(candidates.rows(), d);
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    const std::size_t j = maxima.argmax[i];
    const double nq = maxima.query_norms[i];
    const double nc = maxima.candidate_norms[j];
    const double cij = maxima.values[i];
    for (std::size_t k = 0; k < d; ++k) {
      const double qhat = queries(i, k) / nq;
      const double chat = candidates(j, k) / nc;
      out.d_queries(i, k) += pool[i] * (chat - cij * qhat) / nq;
      out.d_candidates(j, k) += pool[i] * (qhat - cij * chat) / nc;
    }
  }
  return out;
}

/// Softmax-weighted average of a row: sum_j softmax(row)_j * row_j.
inline double soft_row_value(std::span<const double> row) {
  if (row.empty()) throw Error("soft_row_value: empty row");
  const double mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  double weighted = 0.0;
  for (double v : row) {
    const double e = std::exp(v - mx);
    total += e;
    weighted += e * v;
  }
  return weighted / total;
}

/// Soft-coding baseline: LSE pooling over softmax-weighted row averages.
/// Post-processing touches all M * L similarity entries.
inline double soft_similarity(const Matrix& queries, const Matrix& candidates, double lambda,
                              OpCounter* counter = nullptr) {
  detail::check_local_operands(queries, candidates, "soft_similarity");
  const Matrix o = cosine_similarity_matrix(queries, candidates);
  if (counter) counter->similarity_entries_computed += o.size();
  std::vector<double> rows(o.rows());
  for (std::size_t i = 0; i < o.rows(); ++i) rows[i] = soft_row_value(o.row(i));
  if (counter) counter->post_entries_touched += o.size();
  return lse_pool(rows, lambda);
}

/// Entry (i, j) = hard_similarity(queries[i], candidates[j], lambda).
inline Matrix hard_similarity_matrix(std::span<const Matrix> queries, std::span<const Matrix> candidates,
                                     double lambda) {
  Matrix out(queries.size(), candidates.size());
  const std::size_t cols = candidates.size();
  parallel_for(queries.size() * cols, [&](std::size_t idx) {
    out(idx / cols, idx % cols) = hard_similarity(queries[idx / cols], candidates[idx % cols], lambda);
  });
  return out;
}

namespace detail {

inline double triplet_loss_impl(const Matrix& hard, std::span<const IdentityId> identities, double margin,
                                double tau2, Matrix* dhard) {
  const std::size_t n = hard.rows();
  if (hard.cols() != n || identities.size() != n)
    throw Error(detail::concat("efa_triplet_loss: ", n, "x", hard.cols(), " matrix with ",
                               identities.size(), " identities"));
  if (!(tau2 > 0.0)) throw Error("efa_triplet_loss: tau2 must be positive");
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  std::vector<double> z;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < n; ++i) {
    z.clear();
    neg.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (identities[j] == identities[i]) continue;
      neg.push_back(j);
      z.push_back((hard(i, j) - hard(i, i) + margin) / tau2);
    }
    if (neg.empty()) continue;
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double& v : z) {
      v = std::exp(v - mx);
      total += v;
    }
    loss += mx + std::log(total);
    if (dhard) {
      for (std::size_t k = 0; k < neg.size(); ++k) {
        const double g = inv_n * z[k] / total / tau2;
        (*dhard)(i, neg[k]) += g;
        (*dhard)(i, i) -= g;
      }
    }
  }
  return loss * inv_n;
}

inline void add_scaled(Matrix& dst, const Matrix& src, double scale) {
  auto d = dst.data();
  const auto s = src.data();
  for (std::size_t k = 0; k < d.size(); ++k) d[k] += scale * s[k];
}

}  // namespace detail

/// (1/B) sum_i log sum_{j: id_j != id_i} exp((H_ij - H_ii + margin) / tau2).
/// Anchors without negatives contribute nothing.
inline double efa_triplet_loss(const Matrix& hard, std::span<const IdentityId> identities, double margin,
                               double tau2) {
  return detail::triplet_loss_impl(hard, identities, margin, tau2, nullptr);
}

/// Gradient of efa_triplet_loss with respect to the similarity matrix.
inline Matrix efa_triplet_loss_grad(const Matrix& hard, std::span<const IdentityId> identities,
                                    double margin, double tau2) {
  Matrix d(hard.rows(), hard.cols());
  detail::triplet_loss_impl(hard, identities, margin, tau2, &d);
  return d;
}

/// Full EFA loss (text->joint, joint->text, image->joint, joint->image) with
/// gradients for every "tokens/k" and "patches/k".
inline LossReport efa_loss(const LocalFeatureBatch& batch, const HyperParams& hp) {
  batch.validate();
  hp.validate();
  const std::size_t B = batch.size();
  if (B < 2) throw Error("efa_loss: need at least 2 samples");
  const auto ids = batch.identities();
  const std::size_t N = batch.samples.front().patches.rows();
  const double sigma = hp.sigma_for(N);

  std::vector<SparseAggregation> aggs(B);
  parallel_for(B, [&](std::size_t k) {
    aggs[k] = build_joint(batch.samples[k].tokens, batch.samples[k].patches, sigma);
  });

  std::vector<Matrix> dtokens, dpatches, djoints;
  for (const auto& s : batch.samples) {
    dtokens.emplace_back(s.tokens.rows(), s.tokens.cols());
    dpatches.emplace_back(s.patches.rows(), s.patches.cols());
    djoints.emplace_back(s.tokens.rows(), s.tokens.cols());
  }

  auto tokens_of = [&](std::size_t k) -> const Matrix& { return batch.samples[k].tokens; };
  auto patches_of = [&](std::size_t k) -> const Matrix& { return batch.samples[k].patches; };
  auto joint_of = [&](std::size_t k) -> const Matrix& { return aggs[k].joint; };

  auto direction = [&](auto&& query_of, auto&& candidate_of, double margin, std::vector<Matrix>& dquery,
                       std::vector<Matrix>& dcandidate) {
    std::vector<HardSimilarityGrad> cells(B * B);
    parallel_for(B * B, [&](std::size_t idx) {
      cells[idx] = hard_similarity_with_grad(query_of(idx / B), candidate_of(idx % B), hp.lambda);
    });
    Matrix hard(B, B);
    for (std::size_t idx = 0; idx < B * B; ++idx) hard(idx / B, idx % B) = cells[idx].value;
    Matrix dhard(B, B);
    const double value = detail::triplet_loss_impl(hard, ids, margin, hp.tau2, &dhard);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < B; ++j) {
        const double g = dhard(i, j);
        if (g == 0.0) continue;
        detail::add_scaled(dquery[i], cells[i * B + j].d_queries, g);
        detail::add_scaled(dcandidate[j], cells[i * B + j].d_candidates, g);
      }
    return value;
  };

  LossReport report;
  const double t2e = direction(tokens_of, joint_of, hp.margin_text_joint, dtokens, djoints);
  const double e2t = direction(joint_of, tokens_of, hp.margin_text_joint, djoints, dtokens);
  const double i2e = direction(patches_of, joint_of, hp.margin_image_joint, dpatches, djoints);
  const double e2i = direction(joint_of, patches_of, hp.margin_image_joint, djoints, dpatches);
  report.value = t2e + e2t + i2e + e2i;
  report.components = {{"t2e", t2e}, {"e2t", e2t}, {"i2e", i2e}, {"e2i", e2i}};

  for (std::size_t k = 0; k < B; ++k) {
    auto [dt, dp] = build_joint_backward(tokens_of(k), patches_of(k), aggs[k], djoints[k]);
    dtokens[k] += dt;
    dpatches[k] += dp;
    report.gradients.emplace(token_grad_name(k), std::move(dtokens[k]));
    report.gradients.emplace(patch_grad_name(k), std::move(dpatches[k]));
  }
  return report;
}

struct ProbeRow {
  std::string method;  // "hard" or "soft"
  std::size_t queries = 0;
  std::size_t candidates = 0;
  OpCounts counts;
};

/// Runs hard and soft similarity on random M x d and L x d inputs for every
/// (M, L) pair and records the work counters of each.
inline std::vector<ProbeRow> complexity_probe(std::span<const std::size_t> query_sizes,
                                              std::span<const std::size_t> candidate_sizes,
                                              std::size_t dim = 16, std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_matrix = [&](std::size_t rows) {
    Matrix m(rows, dim);
    for (double& v : m.data()) v = normal(rng);
    return m;
  };
  std::vector<ProbeRow> rows;
  for (std::size_t m : query_sizes) {
    for (std::size_t l : candidate_sizes) {
      if (m == 0 || l == 0) throw Error("complexity_probe: sizes must be positive");
      const Matrix x = random_matrix(m);
      const Matrix e = random_matrix(l);
      OpCounter hard_counter;
      OpCounter soft_counter;
      hard_similarity(x, e, 1.0, &hard_counter);
      soft_similarity(x, e, 1.0, &soft_counter);
      rows.push_back({"hard", m, l, hard_counter.snapshot()});
      rows.push_back({"soft", m, l, soft_counter.snapshot()});
    }
  }
  return rows;
}

}  // namespace fmfa
