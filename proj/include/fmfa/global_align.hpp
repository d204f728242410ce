#pragma once

// Similarity distribution matching over global embeddings, plain (SDM) and
// with adaptive per-query weights (A-SDM).

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "fmfa/hyperparams.hpp"
#include "fmfa/loss_report.hpp"
#include "fmfa/matrix.hpp"
#include "fmfa/numeric.hpp"

namespace fmfa {

/// A batch of matched text/image global embeddings. Row i of each matrix
/// belongs to pair i.
struct EmbeddingSet {
  Matrix text_globals;
  Matrix image_globals;
  std::vector<IdentityId> identities;

  std::size_t size() const noexcept { return identities.size(); }

  void validate() const {
    text_globals.require_same_shape(image_globals, "EmbeddingSet");
    if (identities.size() != text_globals.rows()) {
      throw Error(detail::concat("EmbeddingSet: ", identities.size(), " identities for ",
                                 text_globals.rows(), " pairs"));
    }
  }
};

/// p_ij = softmax_j(cos(text_i, image_j) / tau1). Rows index texts.
inline Matrix matching_probabilities(const EmbeddingSet& set, double tau1) {
  set.validate();
  if (set.size() < 2) throw Error("matching_probabilities: need at least 2 pairs");
  return row_softmax(cosine_similarity_matrix(set.text_globals, set.image_globals), tau1);
}

/// q_ij = y_ij / sum_k y_ik with y_ij = [identity_i == identity_j].
inline Matrix true_matching_distribution(std::span<const IdentityId> identities) {
  const std::size_t n = identities.size();
  Matrix q(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto positives = static_cast<double>(std::count(identities.begin(), identities.end(), identities[i]));
    for (std::size_t j = 0; j < n; ++j)
      if (identities[j] == identities[i]) q(i, j) = 1.0 / positives;
  }
  return q;
}

/// w_i = alpha * (max_k p_ik - p_ii) + 1. Equals 1 exactly when the matched
/// pair holds the row maximum.
inline Vector adaptive_weights(const Matrix& p, double alpha) {
  if (p.rows() != p.cols()) throw Error("adaptive_weights: probability matrix must be square");
  Vector w(p.rows());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const auto row = p.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    w[i] = alpha * (mx - p(i, i)) + 1.0;
  }
  return w;
}

/// Adaptive weights of both retrieval directions, rows indexing queries.
struct AdaptiveWeights {
  Vector t2i;
  Vector i2t;
};

namespace detail {

enum class RowWeighting { uniform, adaptive };

// Weighted KL(p_i || q_i + eps) summed over rows of `sim` (queries along rows),
// divided by the row count. Adds d(loss)/d(sim) into `dsim`. Weights are
// constants for differentiation; non-empty `frozen` replaces the adaptive ones.
inline double weighted_kl_rows(const Matrix& sim, const Matrix& q, const HyperParams& hp,
                               RowWeighting weighting, std::span<const double> frozen, Matrix& dsim) {
  const std::size_t n = sim.rows();
  const std::size_t m = sim.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  std::vector<double> p(m), logp(m), h(m);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = sim.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      p[j] = std::exp((row[j] - mx) / hp.tau1);
      total += p[j];
    }
    const double log_total = std::log(total);
    double pmax = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      p[j] /= total;
      logp[j] = (row[j] - mx) / hp.tau1 - log_total;
      pmax = std::max(pmax, p[j]);
    }
    double w = 1.0;
    if (weighting == RowWeighting::adaptive) w = frozen.empty() ? hp.alpha * (pmax - p[i]) + 1.0 : frozen[i];

    double kl = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      h[j] = logp[j] - std::log(q(i, j) + hp.epsilon);
      kl += p[j] * h[j];
    }
    loss += w * kl;
    const double scale = w * inv_n / hp.tau1;
    for (std::size_t j = 0; j < m; ++j) dsim(i, j) += scale * p[j] * (h[j] - kl);
  }
  return loss * inv_n;
}

inline LossReport distribution_matching_loss(const EmbeddingSet& set, const HyperParams& hp,
                                             RowWeighting weighting, const AdaptiveWeights* frozen = nullptr) {
  set.validate();
  hp.validate();
  if (set.size() < 2) throw Error("distribution matching loss: need at least 2 pairs");
  const std::size_t n = set.size();
  if (frozen && (frozen->t2i.size() != n || frozen->i2t.size() != n))
    throw Error(detail::concat("asdm_loss: expected ", n, " frozen weights per direction"));
  const Matrix sim = cosine_similarity_matrix(set.text_globals, set.image_globals);
  const Matrix q = true_matching_distribution(set.identities);

  Matrix dsim(n, n);
  const double t2i = weighted_kl_rows(sim, q, hp, weighting, frozen ? frozen->t2i.span() : std::span<const double>{}, dsim);

  // Image-to-text runs over the transposed similarities; q is symmetric.
  const Matrix sim_t = sim.transposed();
  Matrix dsim_t(n, n);
  const double i2t =
      weighted_kl_rows(sim_t, q, hp, weighting, frozen ? frozen->i2t.span() : std::span<const double>{}, dsim_t);
  dsim += dsim_t.transposed();

  auto [dtext, dimage] = cosine_similarity_backward(set.text_globals, set.image_globals, sim, dsim);
  LossReport report;
  report.value = t2i + i2t;
  report.components["t2i"] = t2i;
  report.components["i2t"] = i2t;
  report.gradients.emplace("text_globals", std::move(dtext));
  report.gradients.emplace("image_globals", std::move(dimage));
  return report;
}

}  // namespace detail

/// Adaptive weights at the current embeddings, for both directions.
inline AdaptiveWeights asdm_weights(const EmbeddingSet& set, const HyperParams& hp) {
  const Matrix p = matching_probabilities(set, hp.tau1);
  return {adaptive_weights(p, hp.alpha),
          adaptive_weights(row_softmax(cosine_similarity_matrix(set.image_globals, set.text_globals), hp.tau1),
                           hp.alpha)};
}

/// Bidirectional A-SDM loss with gradients for "text_globals" and "image_globals".
inline LossReport asdm_loss(const EmbeddingSet& set, const HyperParams& hp) {
  return detail::distribution_matching_loss(set, hp, detail::RowWeighting::adaptive);
}

/// A-SDM with the row weights held at `weights`. At the embeddings the weights
/// were computed from, value and gradient equal those of asdm_loss; away from
/// them this is the function whose derivative asdm_loss reports.
inline LossReport asdm_loss(const EmbeddingSet& set, const HyperParams& hp, const AdaptiveWeights& weights) {
  return detail::distribution_matching_loss(set, hp, detail::RowWeighting::adaptive, &weights);
}

/// Bidirectional SDM loss: A-SDM with every row weight fixed at 1.
inline LossReport sdm_loss(const EmbeddingSet& set, const HyperParams& hp) {
  return detail::distribution_matching_loss(set, hp, detail::RowWeighting::uniform);
}

}  // namespace fmfa
