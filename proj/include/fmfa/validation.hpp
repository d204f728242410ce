#pragma once

// Random fixtures and the finite-difference suite behind `fmfa gradcheck`.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fmfa/global_align.hpp"
#include "fmfa/gradcheck.hpp"
#include "fmfa/local_align.hpp"
#include "fmfa/objectives.hpp"

namespace fmfa {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> unit(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = scale * unit(rng);
  return m;
}

struct GradCheckShape {
  std::size_t batch = 4;
  std::size_t dim = 8;
  std::size_t tokens = 3;
  std::size_t patches = 4;
  std::size_t classes = 3;
  // Global embeddings are a shared random direction plus Gaussian spread of
  // this size, which keeps cosine logits at tau1 = 0.02 away from saturation.
  double global_spread = 0.25;
};

/// Everything the full objective consumes, stored as one parameter map so
/// that every input can be perturbed.
struct ObjectiveFixture {
  ParamMap params;
  std::vector<IdentityId> identities;
  GradCheckShape shape;

  EmbeddingSet embedding_set(const ParamMap& p) const {
    return {p.at("text_globals"), p.at("image_globals"), identities};
  }

  LocalFeatureBatch local_batch(const ParamMap& p) const {
    LocalFeatureBatch b;
    for (std::size_t k = 0; k < identities.size(); ++k)
      b.samples.push_back({p.at(token_grad_name(k)), p.at(patch_grad_name(k)), identities[k]});
    return b;
  }

  ClassifierHead head(const ParamMap& p) const {
    const Matrix& bias = p.at(kHeadBias);
    return {p.at(kHeadWeights), Vector(std::vector<double>(bias.data().begin(), bias.data().end()))};
  }

  /// Restricts `params` to the names a given loss differentiates.
  ParamMap subset(std::initializer_list<std::string> prefixes) const {
    ParamMap out;
    for (const auto& [name, m] : params)
      for (const auto& prefix : prefixes)
        if (name.rfind(prefix, 0) == 0) out.emplace(name, m);
    return out;
  }
};

/// Identities {0, 1, 2, seed mod 3, ...}: never all equal, duplicated for most seeds.
inline ObjectiveFixture make_objective_fixture(std::uint64_t seed, const GradCheckShape& shape = {}) {
  std::mt19937_64 rng(seed);
  ObjectiveFixture f;
  f.shape = shape;
  for (std::size_t i = 0; i < shape.batch; ++i)
    f.identities.push_back(static_cast<IdentityId>(i < 3 ? i % shape.classes : (seed + i) % shape.classes));
  const Matrix anchor = random_matrix(1, shape.dim, rng);
  for (const char* name : {"text_globals", "image_globals"}) {
    Matrix g = random_matrix(shape.batch, shape.dim, rng, shape.global_spread);
    for (std::size_t i = 0; i < shape.batch; ++i)
      for (std::size_t k = 0; k < shape.dim; ++k) g(i, k) += anchor(0, k);
    f.params.emplace(name, std::move(g));
  }
  for (std::size_t k = 0; k < shape.batch; ++k) {
    f.params.emplace(token_grad_name(k), random_matrix(shape.tokens, shape.dim, rng));
    f.params.emplace(patch_grad_name(k), random_matrix(shape.patches, shape.dim, rng));
  }
  f.params.emplace(kHeadWeights, random_matrix(shape.classes, shape.dim, rng, 0.5));
  f.params.emplace(kHeadBias, random_matrix(1, shape.classes, rng, 0.1));
  return f;
}

/// Max relative finite-difference error of each analytic gradient
/// ("sdm", "asdm", "efa", "id", "total") on one random fixture. A-SDM row
/// weights are held at their values at the fixture.
inline std::map<std::string, GradCheckResult> run_gradcheck_suite(std::uint64_t seed, double h = 1e-5,
                                                                  const GradCheckShape& shape = {},
                                                                  const HyperParams& hp = {}) {
  const ObjectiveFixture f = make_objective_fixture(seed, shape);
  std::map<std::string, GradCheckResult> out;

  const auto globals = f.subset({"text_globals", "image_globals"});
  out["sdm"] = finite_diff_check([&](const ParamMap& p) { return sdm_loss(f.embedding_set(p), hp); }, globals, h, seed);
  const AdaptiveWeights weights = asdm_weights(f.embedding_set(f.params), hp);
  out["asdm"] = finite_diff_check([&](const ParamMap& p) { return asdm_loss(f.embedding_set(p), hp, weights); },
                                  globals, h, seed);
  out["efa"] = finite_diff_check([&](const ParamMap& p) { return efa_loss(f.local_batch(p), hp); },
                                 f.subset({"tokens/", "patches/"}), h, seed);
  out["id"] = finite_diff_check(
      [&](const ParamMap& p) {
        return id_loss(p.at("text_globals"), p.at("image_globals"), f.head(p), f.identities);
      },
      f.subset({"text_globals", "image_globals", "head."}), h, seed);
  out["total"] = finite_diff_check(
      [&](const ParamMap& p) {
        const auto batch = f.local_batch(p);
        const auto head = f.head(p);
        return total_loss(f.embedding_set(p), &batch, &head, hp, LossSwitches{}, &weights);
      },
      f.params, h, seed);
  return out;
}

}  // namespace fmfa
