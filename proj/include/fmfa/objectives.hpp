#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "fmfa/global_align.hpp"
#include "fmfa/hyperparams.hpp"
#include "fmfa/local_align.hpp"
#include "fmfa/loss_report.hpp"
#include "fmfa/matrix.hpp"

namespace fmfa {

/// Linear identity classifier shared by both modalities.
struct ClassifierHead {
  Matrix weights;  // num_identities x d
  Vector bias;     // num_identities

  std::size_t num_identities() const noexcept { return weights.rows(); }
};

inline constexpr const char* kHeadWeights = "head.weights";
inline constexpr const char* kHeadBias = "head.bias";

/// Mean cross-entropy of the shared head over all 2B global embeddings.
/// Gradients: "text_globals", "image_globals", "head.weights", "head.bias"
/// (the bias gradient is a 1 x C matrix).
inline LossReport id_loss(const Matrix& text_globals, const Matrix& image_globals, const ClassifierHead& head,
                          std::span<const IdentityId> identities) {
  text_globals.require_same_shape(image_globals, "id_loss");
  const std::size_t B = text_globals.rows();
  const std::size_t C = head.num_identities();
  if (identities.size() != B) throw Error("id_loss: identity count does not match batch size");
  if (head.weights.cols() != text_globals.cols() || head.bias.size() != C)
    throw Error("id_loss: classifier head shape does not match embeddings");
  for (std::size_t i = 0; i < B; ++i)
    if (identities[i] >= C)
      throw Error(detail::concat("id_loss: identity ", identities[i], " of sample ", i, " outside [0, ", C, ")"));

  LossReport report;
  Matrix dweights(C, head.weights.cols());
  Matrix dbias(1, C);
  const double inv = 1.0 / static_cast<double>(2 * B);
  std::vector<double> logits(C);

  auto classify = [&](const Matrix& globals, Matrix& dglobals) {
    for (std::size_t i = 0; i < B; ++i) {
      const auto g = globals.row(i);
      for (std::size_t c = 0; c < C; ++c) logits[c] = dot(head.weights.row(c), g) + head.bias[c];
      const double mx = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (double& v : logits) {
        v = std::exp(v - mx);
        total += v;
      }
      const IdentityId y = identities[i];
      report.value -= std::log(logits[y] / total);
      for (std::size_t c = 0; c < C; ++c) {
        const double dlogit = inv * (logits[c] / total - (c == y ? 1.0 : 0.0));
        dbias(0, c) += dlogit;
        for (std::size_t k = 0; k < g.size(); ++k) {
          dweights(c, k) += dlogit * g[k];
          dglobals(i, k) += dlogit * head.weights(c, k);
        }
      }
    }
  };

  Matrix dtext(B, text_globals.cols());
  Matrix dimage(B, image_globals.cols());
  classify(text_globals, dtext);
  classify(image_globals, dimage);
  report.value *= inv;
  report.gradients.emplace("text_globals", std::move(dtext));
  report.gradients.emplace("image_globals", std::move(dimage));
  report.gradients.emplace(kHeadWeights, std::move(dweights));
  report.gradients.emplace(kHeadBias, std::move(dbias));
  return report;
}

enum class GlobalLoss { none, sdm, asdm };

inline const char* to_string(GlobalLoss g) {
  switch (g) {
    case GlobalLoss::none: return "none";
    case GlobalLoss::sdm: return "sdm";
    case GlobalLoss::asdm: return "asdm";
  }
  return "?";
}

/// Which terms of the training objective are active. The implicit relation
/// reasoning (masked language modelling) term is not available.
struct LossSwitches {
  GlobalLoss global = GlobalLoss::asdm;
  bool efa = true;
  bool id = true;
  double global_weight = 1.0;
  double efa_weight = 1.0;
  double id_weight = 1.0;
};

/// Weighted sum of the enabled components. `batch` is required when EFA is on.
/// Components are reported under "sdm"/"asdm", "efa" and "id". Non-null
/// `frozen` holds the A-SDM row weights fixed.
inline LossReport total_loss(const EmbeddingSet& set, const LocalFeatureBatch* batch, const ClassifierHead* head,
                             const HyperParams& hp, const LossSwitches& switches,
                             const AdaptiveWeights* frozen = nullptr) {
  set.validate();
  LossReport total;
  if (switches.global != GlobalLoss::none) {
    LossReport g;
    if (switches.global == GlobalLoss::sdm) {
      g = sdm_loss(set, hp);
    } else {
      g = frozen ? asdm_loss(set, hp, *frozen) : asdm_loss(set, hp);
    }
    total.accumulate(g, switches.global_weight);
    total.components[to_string(switches.global)] = g.value;
  }
  if (switches.efa) {
    if (!batch) throw Error("total_loss: EFA enabled without local features");
    if (batch->size() != set.size())
      throw Error(detail::concat("total_loss: ", batch->size(), " local samples for ", set.size(), " pairs"));
    const LossReport e = efa_loss(*batch, hp);
    total.accumulate(e, switches.efa_weight);
    total.components["efa"] = e.value;
  }
  if (switches.id) {
    if (!head) throw Error("total_loss: ID loss enabled without a classifier head");
    const LossReport i = id_loss(set.text_globals, set.image_globals, *head, set.identities);
    total.accumulate(i, switches.id_weight);
    total.components["id"] = i.value;
  }
  return total;
}

}  // namespace fmfa
