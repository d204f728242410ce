#pragma once

// Desk-scale trainer: linear projections stand in for the image and text
// encoders and are trained together with the identity head on synthetic data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fmfa/config.hpp"
#include "fmfa/io.hpp"
#include "fmfa/objectives.hpp"
#include "fmfa/optim.hpp"
#include "fmfa/retrieval.hpp"
#include "fmfa/synth.hpp"

namespace fmfa {

inline constexpr const char* kTextProj = "text_proj";
inline constexpr const char* kImageProj = "image_proj";

/// Raw (pre-projection) features of a set of pairs.
struct RawBatch {
  Matrix text_globals;
  Matrix image_globals;
  std::vector<Matrix> tokens;
  std::vector<Matrix> patches;
  std::vector<IdentityId> identities;

  std::size_t size() const noexcept { return identities.size(); }

  static RawBatch from_dataset(const io::Dataset& ds) {
    RawBatch b;
    b.text_globals = ds.set.text_globals;
    b.image_globals = ds.set.image_globals;
    b.identities = ds.set.identities;
    if (ds.locals) {
      for (const auto& s : ds.locals->samples) {
        b.tokens.push_back(s.tokens);
        b.patches.push_back(s.patches);
      }
    }
    return b;
  }

  RawBatch subset(std::span<const std::size_t> rows) const {
    RawBatch b;
    b.text_globals = Matrix(rows.size(), text_globals.cols());
    b.image_globals = Matrix(rows.size(), image_globals.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::ranges::copy(text_globals.row(rows[r]), b.text_globals.row(r).begin());
      std::ranges::copy(image_globals.row(rows[r]), b.image_globals.row(r).begin());
      b.identities.push_back(identities[rows[r]]);
      if (!tokens.empty()) {
        b.tokens.push_back(tokens[rows[r]]);
        b.patches.push_back(patches[rows[r]]);
      }
    }
    return b;
  }
};

/// Projected embeddings of a raw batch.
struct EncodedBatch {
  EmbeddingSet set;
  LocalFeatureBatch locals;
};

inline EncodedBatch encode(const RawBatch& raw, const Matrix& text_proj, const Matrix& image_proj) {
  EncodedBatch out;
  out.set.text_globals = matmul(raw.text_globals, text_proj);
  out.set.image_globals = matmul(raw.image_globals, image_proj);
  out.set.identities = raw.identities;
  for (std::size_t k = 0; k < raw.tokens.size(); ++k)
    out.locals.samples.push_back({matmul(raw.tokens[k], text_proj), matmul(raw.patches[k], image_proj),
                                  raw.identities[k]});
  return out;
}

inline ClassifierHead head_from(const ParamMap& params) {
  const Matrix& bias = params.at(kHeadBias);
  return {params.at(kHeadWeights), Vector(std::vector<double>(bias.data().begin(), bias.data().end()))};
}

/// Training objective as a function of the trainable parameters
/// ("text_proj", "image_proj", "head.weights", "head.bias").
inline LossReport toy_objective(const ParamMap& params, const RawBatch& raw, const HyperParams& hp,
                                const LossSwitches& switches) {
  const Matrix& text_proj = params.at(kTextProj);
  const Matrix& image_proj = params.at(kImageProj);
  const EncodedBatch enc = encode(raw, text_proj, image_proj);
  const ClassifierHead head = head_from(params);
  const bool efa = switches.efa && !raw.tokens.empty();
  LossSwitches active = switches;
  active.efa = efa;
  const LossReport inner = total_loss(enc.set, efa ? &enc.locals : nullptr, &head, hp, active);

  LossReport out;
  out.value = inner.value;
  out.components = inner.components;
  Matrix dtext(text_proj.rows(), text_proj.cols());
  Matrix dimage(image_proj.rows(), image_proj.cols());
  auto chain = [&](const char* name, const Matrix& input, Matrix& dproj) {
    auto it = inner.gradients.find(name);
    if (it != inner.gradients.end()) dproj += transposed_matmul(input, it->second);
  };
  chain("text_globals", raw.text_globals, dtext);
  chain("image_globals", raw.image_globals, dimage);
  if (efa) {
    for (std::size_t k = 0; k < raw.size(); ++k) {
      dtext += transposed_matmul(raw.tokens[k], inner.gradient(token_grad_name(k)));
      dimage += transposed_matmul(raw.patches[k], inner.gradient(patch_grad_name(k)));
    }
  }
  out.gradients.emplace(kTextProj, std::move(dtext));
  out.gradients.emplace(kImageProj, std::move(dimage));
  if (switches.id) {
    out.gradients.emplace(kHeadWeights, inner.gradient(kHeadWeights));
    out.gradients.emplace(kHeadBias, inner.gradient(kHeadBias));
  } else {
    out.gradients.emplace(kHeadWeights, Matrix(params.at(kHeadWeights).rows(), params.at(kHeadWeights).cols()));
    out.gradients.emplace(kHeadBias, Matrix(1, params.at(kHeadBias).cols()));
  }
  return out;
}

/// Text-to-image retrieval with projected global embeddings.
inline RetrievalReport evaluate_encoder(const ParamMap& params, const RawBatch& raw) {
  const Matrix text = matmul(raw.text_globals, params.at(kTextProj));
  const Matrix image = matmul(raw.image_globals, params.at(kImageProj));
  return evaluate_retrieval(cosine_similarity_matrix(text, image), raw.identities, raw.identities);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;  // learning rate at the last step of the epoch
  double total = 0.0;
  std::map<std::string, double> components;
  RetrievalReport retrieval;
};

struct TrainReport {
  double initial_total = 0.0;
  std::map<std::string, double> initial_components;
  RetrievalReport initial_retrieval;
  std::vector<EpochRecord> epochs;
  ParamMap parameters;

  const EpochRecord& final_epoch() const { return epochs.back(); }
};

/// Deterministic initial parameters: Gaussian projections scaled by
/// 1/sqrt(dim), a small Gaussian head and a zero bias.
inline ParamMap init_parameters(std::size_t raw_dim, std::size_t embed_dim, std::size_t num_identities,
                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  ParamMap params;
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(raw_dim));
  for (const char* name : {kTextProj, kImageProj}) {
    Matrix p(raw_dim, embed_dim);
    for (double& v : p.data()) v = proj_scale * unit(rng);
    params.emplace(name, std::move(p));
  }
  Matrix w(num_identities, embed_dim);
  for (double& v : w.data()) v = 0.01 * unit(rng);
  params.emplace(kHeadWeights, std::move(w));
  params.emplace(kHeadBias, Matrix(1, num_identities));
  return params;
}

inline TrainReport train_toy(const RunConfig& cfg) {
  cfg.validate();
  const auto& t = cfg.trainer;
  const SyntheticDataset data = synthesize_dataset(t.data);
  const RawBatch train = RawBatch::from_dataset(io::assemble_dataset(data.train.file, data.train.manifest));
  const RawBatch test = RawBatch::from_dataset(io::assemble_dataset(data.test.file, data.test.manifest));
  const std::size_t embed_dim = t.embed_dim == 0 ? t.data.dim : t.embed_dim;

  ParamMap params = init_parameters(t.data.dim, embed_dim, t.data.num_identities, t.seed);
  std::mt19937_64 rng(t.seed ^ 0x9e3779b97f4a7c15ull);

  const std::size_t n = train.size();
  const std::size_t batch = std::min(t.batch_size, n);
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const std::size_t total_steps = steps_per_epoch * t.epochs;

  TrainReport report;
  {
    const LossReport init = toy_objective(params, train, cfg.hp, t.switches);
    report.initial_total = init.value;
    report.initial_components = init.components;
    report.initial_retrieval = evaluate_encoder(params, test);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < t.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double lr = t.lr;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      const std::size_t this_step = step++;
      if (stop - start < 2) continue;
      const RawBatch mb = train.subset(std::span(order).subspan(start, stop - start));
      const LossReport loss = toy_objective(params, mb, cfg.hp, t.switches);
      if (!std::isfinite(loss.value)) throw Error(detail::concat("train: loss diverged at epoch ", epoch));
      lr = t.cosine_decay ? cosine_decay(t.lr, this_step, total_steps) : t.lr;
      sgd_step(params, loss.gradients, lr);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    const LossReport full = toy_objective(params, train, cfg.hp, t.switches);
    if (!std::isfinite(full.value)) throw Error(detail::concat("train: loss diverged at epoch ", epoch));
    rec.total = full.value;
    rec.components = full.components;
    rec.retrieval = evaluate_encoder(params, test);
    report.epochs.push_back(std::move(rec));
  }
  report.parameters = std::move(params);
  return report;
}

inline nlohmann::ordered_json to_json(const RetrievalReport& r) {
  return {{"rank1", r.rank1}, {"rank5", r.rank5}, {"rank10", r.rank10}, {"map", r.map}, {"num_queries", r.num_queries}};
}

inline nlohmann::ordered_json to_json(const Matrix& m) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

inline nlohmann::ordered_json to_json(const TrainReport& report) {
  nlohmann::ordered_json j;
  j["initial"] = {{"total", report.initial_total},
                  {"components", report.initial_components},
                  {"retrieval", to_json(report.initial_retrieval)}};
  auto& epochs = j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : report.epochs) {
    nlohmann::ordered_json rec;
    rec["epoch"] = e.epoch;
    rec["lr"] = e.lr;
    rec["total"] = e.total;
    rec["components"] = e.components;
    auto r = to_json(e.retrieval);
    for (auto it = r.begin(); it != r.end(); ++it) rec[it.key()] = it.value();
    epochs.push_back(std::move(rec));
  }
  auto& params = j["parameters"] = nlohmann::ordered_json::object();
  for (const auto& [name, m] : report.parameters) params[name] = to_json(m);
  return j;
}

}  // namespace fmfa
