#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include <gtest/gtest.h>

#include "fmfa/fmfa.hpp"

using namespace fmfa;

namespace {

RunConfig short_run(std::size_t epochs) {
  RunConfig cfg;
  cfg.trainer.epochs = epochs;
  return cfg;
}

bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

}  // namespace

TEST(TrainToy, SameSeedIsBitIdentical) {
  const RunConfig cfg = short_run(5);
  const TrainReport a = train_toy(cfg), b = train_toy(cfg);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  ASSERT_EQ(a.epochs.size(), b.epochs.size());
  for (std::size_t e = 0; e < a.epochs.size(); ++e) EXPECT_TRUE(same_bits(a.epochs[e].total, b.epochs[e].total));
  for (const auto& [name, m] : a.parameters) {
    const auto x = m.data(), y = b.parameters.at(name).data();
    for (std::size_t k = 0; k < x.size(); ++k) ASSERT_TRUE(same_bits(x[k], y[k])) << name;
  }
}

TEST(TrainToy, DifferentSeedsDiffer) {
  RunConfig a = short_run(2), b = short_run(2);
  b.trainer.seed = 1;
  EXPECT_NE(train_toy(a).final_epoch().total, train_toy(b).final_epoch().total);
}

TEST(TrainToy, SeparableDataReachesPerfectRankOne) {
  const TrainReport r = train_toy(short_run(40));
  ASSERT_EQ(r.epochs.size(), 40u);
  EXPECT_EQ(r.final_epoch().retrieval.rank1, 1.0);
  EXPECT_LT(r.final_epoch().total, r.initial_total);
  EXPECT_LT(r.final_epoch().total, r.epochs.front().total);
}

TEST(TrainToy, RecordsEveryEpochWithBoundedMetrics) {
  const TrainReport r = train_toy(short_run(6));
  for (std::size_t e = 0; e < r.epochs.size(); ++e) {
    const auto& rec = r.epochs[e];
    EXPECT_EQ(rec.epoch, e);
    EXPECT_TRUE(rec.components.count("asdm") && rec.components.count("efa") && rec.components.count("id"));
    EXPECT_LE(rec.retrieval.rank1, rec.retrieval.rank5);
    EXPECT_LE(rec.retrieval.rank5, rec.retrieval.rank10);
    EXPECT_GE(rec.retrieval.map, 0.0);
    EXPECT_LE(rec.retrieval.map, 1.0);
    if (e > 0) EXPECT_LE(rec.lr, r.epochs[e - 1].lr);
  }
}

TEST(TrainToy, DivergenceNamesTheEpoch) {
  RunConfig cfg = short_run(20);
  cfg.trainer.lr = 1e6;
  cfg.trainer.cosine_decay = false;
  try {
    train_toy(cfg);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
  }
}

TEST(ToyObjective, GradientsMatchFiniteDifferences) {
  RunConfig cfg;
  cfg.trainer.data.num_identities = 3;
  cfg.trainer.data.samples_per_id = 1;
  cfg.trainer.data.dim = 5;
  cfg.trainer.data.tokens = 2;
  cfg.trainer.data.patches = 3;
  cfg.trainer.data.noise_sigma = 0.3;
  const auto data = synthesize_dataset(cfg.trainer.data);
  const RawBatch raw = RawBatch::from_dataset(io::assemble_dataset(data.train.file, data.train.manifest));
  const ParamMap params = init_parameters(5, 5, 3, 0);
  // A-SDM row weights move with the probe, so the check runs on SDM.
  LossSwitches s;
  s.global = GlobalLoss::sdm;
  const auto res = finite_diff_check([&](const ParamMap& p) { return toy_objective(p, raw, cfg.hp, s); }, params, 1e-5);
  EXPECT_LT(res.max_relative_error, 1e-4) << res.worst_param;
}

TEST(RunConfigText, RoundTripsEveryKey) {
  RunConfig cfg;
  cfg.hp.tau1 = 0.03;
  cfg.hp.sigma = 0.2;
  cfg.hp.margin_image_joint = 0.25;
  cfg.trainer.epochs = 7;
  cfg.trainer.lr = 0.0123456789;
  cfg.trainer.switches.global = GlobalLoss::sdm;
  cfg.trainer.switches.efa = false;
  cfg.trainer.data.noise_sigma = 0.3;
  cfg.trainer.data.seed = 42;
  const RunConfig back = parse_run_config(to_text(cfg));
  EXPECT_EQ(to_text(back), to_text(cfg));
  EXPECT_EQ(back.hp.sigma, 0.2);
  EXPECT_EQ(back.trainer.lr, 0.0123456789);
  EXPECT_EQ(back.trainer.switches.global, GlobalLoss::sdm);
  EXPECT_EQ(parse_run_config(to_text(RunConfig{})).hp.sigma, std::nullopt);
}

TEST(RunConfigText, IgnoresCommentsAndBlankLines) {
  const RunConfig cfg = parse_run_config("# comment\n\n  epochs = 3  \nnoise=0.2\n");
  EXPECT_EQ(cfg.trainer.epochs, 3u);
  EXPECT_EQ(cfg.trainer.data.noise_sigma, 0.2);
}

TEST(RunConfigText, RejectsUnknownKeysWithLineNumber) {
  try {
    parse_run_config("epochs = 3\nwarmup = 5\n");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("warmup"), std::string::npos) << msg;
  }
}

TEST(RunConfigText, RejectsMalformedValues) {
  EXPECT_THROW(parse_run_config("epochs = three"), Error);
  EXPECT_THROW(parse_run_config("lr"), Error);
  EXPECT_THROW(parse_run_config("lr = -1"), Error);
  EXPECT_THROW(parse_run_config("global_loss = triplet"), Error);
  EXPECT_THROW(parse_run_config("efa = maybe"), Error);
}

TEST(Synthesize, ZeroNoiseRepeatsPrototypes) {
  SynthConfig cfg;
  cfg.noise_sigma = 0.0;
  const auto ds = synthesize_dataset(cfg);
  const auto set = io::assemble_dataset(ds.train.file, ds.train.manifest).set;
  for (std::size_t i = 0; i < set.size(); ++i)
    for (std::size_t j = 0; j < set.size(); ++j)
      if (set.identities[i] == set.identities[j]) {
        for (std::size_t k = 0; k < cfg.dim; ++k) {
          ASSERT_EQ(set.text_globals(i, k), set.text_globals(j, k));
          ASSERT_EQ(set.text_globals(i, k), set.image_globals(j, k));
        }
      }
}

TEST(Synthesize, SameSeedIsIdentical) {
  SynthConfig cfg;
  cfg.seed = 9;
  const auto a = synthesize_dataset(cfg), b = synthesize_dataset(cfg);
  EXPECT_EQ(io::encode_embeddings(a.train.file), io::encode_embeddings(b.train.file));
  EXPECT_EQ(io::encode_embeddings(a.test.file), io::encode_embeddings(b.test.file));
  cfg.seed = 10;
  EXPECT_NE(io::encode_embeddings(synthesize_dataset(cfg).train.file), io::encode_embeddings(a.train.file));
}

TEST(Synthesize, ShapesFollowConfig) {
  SynthConfig cfg;
  cfg.num_identities = 3;
  cfg.samples_per_id = 2;
  cfg.dim = 5;
  cfg.tokens = 4;
  cfg.patches = 7;
  const auto ds = synthesize_dataset(cfg);
  const auto d = io::assemble_dataset(ds.test.file, ds.test.manifest);
  EXPECT_EQ(d.set.size(), 6u);
  ASSERT_TRUE(d.locals.has_value());
  for (const auto& s : d.locals->samples) {
    EXPECT_EQ(s.tokens.rows(), 4u);
    EXPECT_EQ(s.patches.rows(), 7u);
    EXPECT_EQ(s.tokens.cols(), 5u);
  }
}

TEST(Synthesize, DefaultDataIsSeparableByNearestCentroid) {
  const auto ds = synthesize_dataset(SynthConfig{});
  const auto train = io::assemble_dataset(ds.train.file, ds.train.manifest).set;
  const auto test = io::assemble_dataset(ds.test.file, ds.test.manifest).set;
  const std::size_t C = 8, d = train.text_globals.cols();
  Matrix centroid(C, d);
  std::vector<double> count(C, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    for (std::size_t k = 0; k < d; ++k) centroid(train.identities[i], k) += train.image_globals(i, k);
    count[train.identities[i]] += 1.0;
  }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < d; ++k) centroid(c, k) /= count[c];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t best = 0;
    double best_dist = INFINITY;
    for (std::size_t c = 0; c < C; ++c) {
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) dist += std::pow(test.text_globals(i, k) - centroid(c, k), 2);
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    correct += best == test.identities[i];
  }
  EXPECT_EQ(correct, test.size());
}

TEST(Synthesize, RejectsInvalidConfigs) {
  SynthConfig cfg;
  cfg.num_identities = 0;
  EXPECT_THROW(synthesize_dataset(cfg), Error);
  cfg = {};
  cfg.tokens = 78;
  EXPECT_THROW(synthesize_dataset(cfg), Error);
  cfg = {};
  cfg.noise_sigma = -0.1;
  EXPECT_THROW(synthesize_dataset(cfg), Error);
}
