#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "fmfa/fmfa.hpp"
#include "oracles.hpp"

using namespace fmfa;

namespace {

ClassifierHead random_head(std::size_t C, std::size_t d, std::mt19937_64& rng) {
  const Matrix bias = random_matrix(1, C, rng, 0.1);
  return {random_matrix(C, d, rng, 0.5), Vector(std::vector<double>(bias.data().begin(), bias.data().end()))};
}

std::vector<double> as_vector(const Vector& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(IdLoss, UniformLogitsGiveLogC) {
  std::mt19937_64 rng(1);
  const ClassifierHead head{Matrix(5, 4), Vector(std::vector<double>(5, 0.3))};
  const std::vector<IdentityId> ids{0, 4, 2};
  const LossReport r = id_loss(random_matrix(3, 4, rng), random_matrix(3, 4, rng), head, ids);
  EXPECT_NEAR(r.value, std::log(5.0), 1e-15);
}

TEST(IdLoss, SaturatedCorrectLogitsApproachZero) {
  const Matrix e{{1, 0}, {0, 1}};
  const ClassifierHead head{Matrix{{100, 0}, {0, 100}}, Vector(std::vector<double>{0, 0})};
  const std::vector<IdentityId> ids{0, 1};
  const double v = id_loss(e, e, head, ids).value;
  EXPECT_GE(v, 0.0);
  EXPECT_LT(v, 1e-40);
}

TEST(IdLoss, MatchesScalarOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix t = random_matrix(3, 4, rng), i = random_matrix(3, 4, rng);
    const ClassifierHead head = random_head(2, 4, rng);
    const std::vector<IdentityId> ids{0, 1, static_cast<IdentityId>(trial % 2)};
    const auto bias = as_vector(head.bias);
    EXPECT_NEAR(id_loss(t, i, head, ids).value, fmfa_test::id_loss_oracle(t, i, head.weights, bias, ids), 1e-14);
  }
}

TEST(IdLoss, OutOfRangeIdentityIsNamed) {
  std::mt19937_64 rng(3);
  const ClassifierHead head = random_head(2, 3, rng);
  const std::vector<IdentityId> ids{0, 2};
  try {
    id_loss(random_matrix(2, 3, rng), random_matrix(2, 3, rng), head, ids);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("identity 2"), std::string::npos) << e.what();
  }
}

TEST(IdLoss, RejectsHeadShapeMismatch) {
  std::mt19937_64 rng(4);
  const ClassifierHead head = random_head(2, 5, rng);
  const std::vector<IdentityId> ids{0, 1};
  EXPECT_THROW(id_loss(random_matrix(2, 3, rng), random_matrix(2, 3, rng), head, ids), Error);
}

TEST(TotalLoss, IdOnlyEqualsIdLoss) {
  const auto f = make_objective_fixture(5);
  const auto set = f.embedding_set(f.params);
  const auto head = f.head(f.params);
  LossSwitches s;
  s.global = GlobalLoss::none;
  s.efa = false;
  const LossReport total = total_loss(set, nullptr, &head, {}, s);
  const LossReport id = id_loss(set.text_globals, set.image_globals, head, set.identities);
  EXPECT_EQ(total.value, id.value);
  for (const auto& [name, g] : id.gradients) EXPECT_TRUE(fmfa_test::bitwise_equal(total.gradient(name), g)) << name;
}

TEST(TotalLoss, IsTheSumOfItsComponents) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto f = make_objective_fixture(seed);
    const auto set = f.embedding_set(f.params);
    const auto batch = f.local_batch(f.params);
    const auto head = f.head(f.params);
    const HyperParams hp;
    const LossReport total = total_loss(set, &batch, &head, hp, LossSwitches{});
    const LossReport a = asdm_loss(set, hp), e = efa_loss(batch, hp);
    const LossReport i = id_loss(set.text_globals, set.image_globals, head, set.identities);
    EXPECT_NEAR(total.value, a.value + e.value + i.value, 1e-12 * std::max(1.0, total.value));
    EXPECT_EQ(total.components.at("asdm"), a.value);
    EXPECT_EQ(total.components.at("efa"), e.value);
    EXPECT_EQ(total.components.at("id"), i.value);
    for (const auto& [name, g] : total.gradients) {
      Matrix sum(g.rows(), g.cols());
      for (const LossReport* part : {&a, &e, &i})
        if (part->gradients.count(name)) sum += part->gradient(name);
      EXPECT_LE(fmfa_test::max_abs_diff(g, sum), 1e-12) << name;
    }
  }
}

TEST(TotalLoss, ComponentWeightsScaleTerms) {
  const auto f = make_objective_fixture(1);
  const auto set = f.embedding_set(f.params);
  const auto batch = f.local_batch(f.params);
  const auto head = f.head(f.params);
  LossSwitches s;
  s.global_weight = 0.5;
  s.efa_weight = 2.0;
  s.id_weight = 0.1;
  const LossReport r = total_loss(set, &batch, &head, {}, s);
  EXPECT_NEAR(r.value, 0.5 * r.components.at("asdm") + 2.0 * r.components.at("efa") + 0.1 * r.components.at("id"),
              1e-12 * r.value);
}

TEST(TotalLoss, AblationConfigurationsDiffer) {
  const auto f = make_objective_fixture(2);
  const auto set = f.embedding_set(f.params);
  const auto batch = f.local_batch(f.params);
  const auto head = f.head(f.params);
  LossSwitches baseline;
  baseline.global = GlobalLoss::sdm;
  baseline.efa = false;
  const LossReport row0 = total_loss(set, &batch, &head, {}, baseline);
  const LossReport row3 = total_loss(set, &batch, &head, {}, LossSwitches{});
  EXPECT_TRUE(std::isfinite(row0.value));
  EXPECT_NE(row0.value, row3.value);
  EXPECT_TRUE(row0.components.count("sdm"));
  EXPECT_FALSE(row0.components.count("efa"));
}

TEST(TotalLoss, MissingInputsAreErrors) {
  const auto f = make_objective_fixture(3);
  const auto set = f.embedding_set(f.params);
  const auto head = f.head(f.params);
  EXPECT_THROW(total_loss(set, nullptr, &head, {}, LossSwitches{}), Error);
  LossSwitches no_efa;
  no_efa.efa = false;
  EXPECT_THROW(total_loss(set, nullptr, nullptr, {}, no_efa), Error);
  LocalFeatureBatch short_batch = f.local_batch(f.params);
  short_batch.samples.pop_back();
  EXPECT_THROW(total_loss(set, &short_batch, &head, {}, LossSwitches{}), Error);
}

TEST(FiniteDiffCheck, ExactForQuadratic) {
  std::mt19937_64 rng(6);
  const ParamMap params{{"x", random_matrix(4, 5, rng)}};
  auto quadratic = [](const ParamMap& p) {
    LossReport r;
    Matrix g = p.at("x");
    for (double v : g.data()) r.value += v * v;
    g *= 2.0;
    r.gradients.emplace("x", std::move(g));
    return r;
  };
  const auto res = finite_diff_check(quadratic, params, 1e-4);
  EXPECT_LT(res.max_relative_error, 1e-9);
  EXPECT_EQ(res.coordinates_checked, 20u);
}

TEST(FiniteDiffCheck, DetectsWrongGradient) {
  const ParamMap params{{"x", Matrix{{1.0, 2.0}}}};
  auto wrong = [](const ParamMap& p) {
    LossReport r;
    for (double v : p.at("x").data()) r.value += v * v;
    r.gradients.emplace("x", p.at("x"));
    return r;
  };
  const auto res = finite_diff_check(wrong, params, 1e-5);
  EXPECT_NEAR(res.max_relative_error, 0.5, 1e-6);
  EXPECT_EQ(res.worst_param, "x");
}

TEST(FiniteDiffCheck, SubsamplesLargeParameterSets) {
  const ParamMap params{{"x", Matrix(30, 30)}};
  auto zero = [](const ParamMap& p) {
    LossReport r;
    r.gradients.emplace("x", Matrix(p.at("x").rows(), p.at("x").cols()));
    return r;
  };
  EXPECT_EQ(finite_diff_check(zero, params, 1e-5).coordinates_checked, 200u);
}

TEST(FiniteDiffCheck, NonFiniteProbeIsAnError) {
  const ParamMap params{{"x", Matrix{{0.0}}}};
  auto log_loss = [](const ParamMap& p) {
    LossReport r;
    const double x = p.at("x")(0, 0);
    r.value = x > 0.0 ? 0.0 : (x < 0.0 ? std::nan("") : 1.0);
    r.gradients.emplace("x", Matrix{{0.0}});
    return r;
  };
  EXPECT_THROW(finite_diff_check(log_loss, params, 1e-5), Error);
  EXPECT_THROW(finite_diff_check(log_loss, params, 0.0), Error);
}

TEST(FiniteDiffCheck, FullSuitePassesOnFirstSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (const auto& [name, res] : run_gradcheck_suite(seed))
      EXPECT_LT(res.max_relative_error, 1e-4) << name << " seed " << seed;
}

TEST(FiniteDiffCheck, IdGradientOnSmallBatch) {
  std::mt19937_64 rng(7);
  const std::vector<IdentityId> ids{0, 1, 1};
  ParamMap params{{"text_globals", random_matrix(3, 4, rng)},
                  {"image_globals", random_matrix(3, 4, rng)},
                  {kHeadWeights, random_matrix(2, 4, rng)},
                  {kHeadBias, random_matrix(1, 2, rng)}};
  auto loss = [&](const ParamMap& p) {
    const Matrix& b = p.at(kHeadBias);
    const ClassifierHead head{p.at(kHeadWeights), Vector(std::vector<double>(b.data().begin(), b.data().end()))};
    return id_loss(p.at("text_globals"), p.at("image_globals"), head, ids);
  };
  EXPECT_LT(finite_diff_check(loss, params, 1e-5).max_relative_error, 1e-6);
}

TEST(SgdStep, ZeroGradientLeavesParameters) {
  ParamMap p{{"w", Matrix{{1, 2}, {3, 4}}}};
  sgd_step(p, {{"w", Matrix(2, 2)}}, 0.3);
  EXPECT_EQ(p.at("w"), (Matrix{{1, 2}, {3, 4}}));
}

TEST(SgdStep, Arithmetic) {
  ParamMap p{{"w", Matrix{{1}}}};
  sgd_step(p, {{"w", Matrix{{2}}}}, 0.5);
  EXPECT_EQ(p.at("w")(0, 0), 0.0);
}

TEST(SgdStep, QuadraticDecreasesMonotonically) {
  ParamMap p{{"w", Matrix{{3, -2, 1}}}};
  auto value = [&] {
    double s = 0.0;
    for (double v : p.at("w").data()) s += v * v;
    return s;
  };
  double previous = value();
  for (int step = 0; step < 2; ++step) {
    Matrix g = p.at("w");
    g *= 2.0;
    sgd_step(p, {{"w", g}}, 0.1);
    EXPECT_LT(value(), previous);
    previous = value();
  }
}

TEST(SgdStep, RejectsBadInputs) {
  ParamMap p{{"w", Matrix{{1, 2}}}};
  EXPECT_THROW(sgd_step(p, {{"w", Matrix{{1}}}}, 0.1), Error);
  EXPECT_THROW(sgd_step(p, {{"v", Matrix{{1, 2}}}}, 0.1), Error);
  EXPECT_THROW(sgd_step(p, {{"w", Matrix{{1, 2}}}}, 0.0), Error);
}

TEST(CosineDecay, EndpointsAndMidpoint) {
  EXPECT_EQ(cosine_decay(0.2, 0, 10), 0.2);
  EXPECT_NEAR(cosine_decay(0.2, 5, 10), 0.1, 1e-16);
  EXPECT_NEAR(cosine_decay(0.2, 10, 10), 0.0, 1e-16);
  EXPECT_EQ(cosine_decay(0.2, 3, 0), 0.2);
}

TEST(CosineDecay, NonIncreasing) {
  double previous = cosine_decay(1.0, 0, 50);
  for (std::size_t s = 1; s <= 50; ++s) {
    const double lr = cosine_decay(1.0, s, 50);
    EXPECT_LE(lr, previous);
    previous = lr;
  }
}
