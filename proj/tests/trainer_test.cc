// Copyright 2026 The privmarket Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "privmarket/trainer.h"

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "privmarket/classical.h"

namespace privmarket {
namespace {

ArchConfig TinyArch() {
  ArchConfig a;
  a.header_hidden = {12, 12};
  a.head_hidden = {8};
  a.critic_hidden = {8, 8};
  return a;
}

TrainConfig TinyConfig() {
  TrainConfig c;
  c.outer_iters = 4;
  c.inner_steps = 2;
  c.batch_size = 4;
  c.pga_steps = 5;
  c.n_clients = 3;
  c.header_width = 12;
  c.header_layers = 2;
  c.head_width = 8;
  c.critic_width = 8;
  c.mc_opponents = 4;
  c.mf_target_profiles = 2;
  c.lambda_mfg_end = 0.05;
  return c;
}

void PinHead(Mlp& head, double bias) {
  auto& last = head.mutable_layer(head.num_layers() - 1);
  last.weight.setZero();
  last.bias.setConstant(bias);
}

TEST(MisreportMeanFieldTest, Examples) {
  const Eigen::VectorXd mf = Eigen::VectorXd::Constant(1, 0.5);
  const Eigen::VectorXd b = Eigen::VectorXd::Constant(1, 0.4);
  const Eigen::VectorXd b2 = Eigen::VectorXd::Constant(1, 0.6);
  EXPECT_NEAR(MisreportMeanField(mf, b, b2, 10)(0), 0.52, 1e-15);
  EXPECT_EQ(MisreportMeanField(mf, b, b, 10)(0), 0.5);
  EXPECT_EQ(MisreportMeanField(b, b, b2, 1)(0), 0.6);
  EXPECT_THROW(MisreportMeanField(mf, b, b2, 0), std::invalid_argument);
}

TEST(PgaRegretTest, BidIndependentMechanismHasZeroRegret) {
  std::mt19937_64 rng(1);
  MechanismParams p = MakeMechanism(4, 1, TinyArch(), rng);
  PinHead(p.alloc_head, 0.0);
  PinHead(p.pay_head, -800.0);
  const auto prof = BidProfile::FromTypes(SampleTypes(Scenario::kUniform, 4, 3));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(PgaRegret(p, prof, 50.0, i, PgaOptions{}, rng).regret, 0.0);
  }
}

// Dense grid over the same misreport box, with the mean field moving.
double GridRegret(const MechanismParams& p, const std::vector<ClientType>& types,
                  double budget, int i, double bid_max, int points) {
  const double v = types[i].valuation;
  const double u0 = ClientUtilityUnderMechanism(
      p, BidProfile::FromTypes(types), budget, i, v);
  double best = 0.0;
  auto work = types;
  for (int g = 0; g < points; ++g) {
    work[i].valuation = bid_max * g / (points - 1);
    best = std::max(best, ClientUtilityUnderMechanism(
                              p, BidProfile::FromTypes(work), budget, i, v) -
                              u0);
  }
  return best;
}

TEST(PgaRegretTest, NeverExceedsDenseGridSearch) {
  std::mt19937_64 rng(2);
  PgaOptions opt;
  opt.reduced_precision = false;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + trial % 4;
    const MechanismParams p = MakeMechanism(n, 1, TinyArch(), rng);
    const auto types = SampleTypes(Scenario::kUniform, n, rng());
    const int i = trial % n;
    const double pga =
        PgaRegret(p, BidProfile::FromTypes(types), 5.0, i, opt, rng).regret;
    EXPECT_LE(pga, GridRegret(p, types, 5.0, i, opt.bid_max, 2001) + 0.01);
  }
}

TEST(PgaRegretTest, UntrainedMechanismIsManipulable) {
  int positive = 0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(100 + s);
    const MechanismParams p = MakeMechanism(5, 1, ArchConfig{}, rng);
    const auto batch = SampleProfileBatch(Scenario::kUniform, 5, 1, 8, rng);
    const auto r = PgaRegretBatch(p, batch, 50.0, {}, PgaOptions{}, rng);
    if (r.regret.mean() > 0.0) ++positive;
  }
  EXPECT_GE(positive, 18);
}

TEST(PgaRegretTest, RejectsBadInputs) {
  std::mt19937_64 rng(3);
  const MechanismParams p = MakeMechanism(3, 1, TinyArch(), rng);
  const auto batch = SampleProfileBatch(Scenario::kUniform, 3, 1, 2, rng);
  PgaOptions opt;
  opt.steps = 0;
  EXPECT_THROW(PgaRegretBatch(p, batch, 50.0, {}, opt, rng), std::invalid_argument);
  EXPECT_THROW(PgaRegretBatch(p, batch, 50.0, {3}, PgaOptions{}, rng),
               std::out_of_range);
  const auto wrong = SampleProfileBatch(Scenario::kUniform, 4, 1, 2, rng);
  EXPECT_THROW(PgaRegretBatch(p, wrong, 50.0, {}, PgaOptions{}, rng),
               std::invalid_argument);
}

TEST(ValueBaselinedRegretTest, ZeroCriticRecoversPlainRegret) {
  std::mt19937_64 init(4);
  const MechanismParams p = MakeMechanism(4, 1, TinyArch(), init);
  const Mlp zero({2, 8, 1}, Activation::kIdentity);
  for (uint64_t s = 0; s < 10; ++s) {
    const auto prof = BidProfile::FromTypes(SampleTypes(Scenario::kUniform, 4, s));
    for (bool reduced : {false, true}) {
      PgaOptions opt;
      opt.reduced_precision = reduced;
      std::mt19937_64 a(s), b(s);
      const double plain = PgaRegret(p, prof, 50.0, 1, opt, a).regret;
      const double vf = ValueBaselinedRegret(p, &zero, prof, 50.0, 1, opt, b);
      EXPECT_EQ(plain, vf);
    }
  }
}

TEST(ValueBaselinedRegretTest, ConstantCriticCancels) {
  std::mt19937_64 init(5);
  const MechanismParams p = MakeMechanism(4, 1, TinyArch(), init);
  Mlp constant({2, 8, 1}, Activation::kIdentity);
  constant.mutable_layer(1).bias(0) = 2.5;
  PgaOptions opt;
  opt.reduced_precision = false;
  for (uint64_t s = 0; s < 10; ++s) {
    const auto prof = BidProfile::FromTypes(SampleTypes(Scenario::kUniform, 4, s));
    std::mt19937_64 a(s), b(s);
    EXPECT_NEAR(PgaRegret(p, prof, 50.0, 2, opt, a).regret,
                ValueBaselinedRegret(p, &constant, prof, 50.0, 2, opt, b), 1e-12);
  }
  std::mt19937_64 rng(0);
  EXPECT_THROW(ValueBaselinedRegret(p, nullptr, BidProfile::FromTypes(
                                                    SampleTypes(Scenario::kUniform, 4, 0)),
                                    50.0, 0, opt, rng),
               std::invalid_argument);
}

TEST(CriticLossTest, FixedPointHasZeroLossAndLossIsNonNegative) {
  Mlp critic({2, 4, 1}, Activation::kIdentity);
  critic.mutable_layer(1).bias(0) = 1.7;
  const Eigen::MatrixXd states = Eigen::MatrixXd::Random(6, 2);
  EXPECT_EQ(CriticResidualLoss(critic, states, Eigen::VectorXd::Constant(6, 1.7)).value,
            0.0);
  std::mt19937_64 rng(6);
  const MechanismParams p = MakeMechanism(3, 1, TinyArch(), rng, true);
  for (int k = 0; k < 5; ++k) {
    const auto batch = SampleProfileBatch(Scenario::kUniform, 3, 1, 4, rng);
    EXPECT_GE(CriticLoss(*p.critic, p, batch, 50.0, PgaOptions{}, 0.1, rng).value,
              0.0);
  }
}

// Two states (own bid 0.2 or 0.8, same mean field), rewards 0.3 and 0.1 for
// moving to them. Tabular value iteration gives V = 0.3 / (1 - gamma) for
// both states; fitted iteration through the residual loss must agree.
TEST(CriticLossTest, FittedIterationMatchesValueIteration) {
  const double gamma = std::exp(-0.1);
  const double r[2] = {0.3, 0.1};
  double v[2] = {0.0, 0.0};
  for (int it = 0; it < 2000; ++it) {
    const double best = std::max(r[0] + gamma * v[0], r[1] + gamma * v[1]);
    v[0] = v[1] = best;
  }
  std::mt19937_64 rng(7);
  Mlp critic = Mlp::Glorot({2, 16, 1}, Activation::kIdentity, rng);
  Eigen::MatrixXd states(2, 2);
  states << 0.2, 0.5, 0.8, 0.5;
  // Coarse then fine step size; fitting noise is amplified by 1/(1-gamma).
  for (double lr : {1e-2, 1e-3}) {
    AdamState adam(AdamConfig{lr});
    for (int outer = 0; outer < 300; ++outer) {
      const Eigen::VectorXd phi = CriticValues(critic, states.leftCols(1),
                                               states.rightCols(1));
      const double best = std::max(r[0] + gamma * phi(0), r[1] + gamma * phi(1));
      const Eigen::VectorXd target = Eigen::VectorXd::Constant(2, best);
      for (int inner = 0; inner < 50; ++inner) {
        AdamStep(adam, critic, CriticResidualLoss(critic, states, target).grads);
      }
    }
  }
  const Eigen::VectorXd phi =
      CriticValues(critic, states.leftCols(1), states.rightCols(1));
  EXPECT_NEAR(phi(0), v[0], 1e-3);
  EXPECT_NEAR(phi(1), v[1], 1e-3);
}

TEST(MeanFieldPaymentTest, IdenticalPoolGivesCommonPayment) {
  std::mt19937_64 rng(8);
  const MechanismParams p = MakeMechanism(4, 1, TinyArch(), rng);
  const BidProfile pool(Eigen::MatrixXd::Constant(6, 1, 0.4));
  const BidProfile everyone(Eigen::MatrixXd::Constant(4, 1, 0.4));
  const double expected = MechanismForward(p, everyone, 50.0).projected_payments(0);
  const Eigen::VectorXd bid = Eigen::VectorXd::Constant(1, 0.4);
  EXPECT_NEAR(MeanFieldPayment(p, bid, pool, 16, 50.0, rng), expected, 1e-12);
}

TEST(MeanFieldPaymentTest, SingleRowPoolEqualsSingleEvaluation) {
  std::mt19937_64 rng(9);
  const MechanismParams p = MakeMechanism(3, 1, TinyArch(), rng);
  const BidProfile pool(Eigen::MatrixXd::Constant(1, 1, 0.7));
  const Eigen::VectorXd bid = Eigen::VectorXd::Constant(1, 0.2);
  Eigen::MatrixXd b(3, 1);
  b << 0.2, 0.7, 0.7;
  const double single = MechanismForward(p, BidProfile(b), 50.0).projected_payments(0);
  EXPECT_NEAR(MeanFieldPayment(p, bid, pool, 1, 50.0, rng), single, 1e-12);
  EXPECT_NEAR(MeanFieldPayment(p, bid, pool, 32, 50.0, rng), single, 1e-12);
}

TEST(MeanFieldPaymentTest, StandardErrorShrinksAsRootK) {
  std::mt19937_64 rng(10);
  const MechanismParams p = MakeMechanism(5, 1, TinyArch(), rng);
  const auto batch = SampleProfileBatch(Scenario::kUniform, 5, 1, 40, rng);
  Eigen::MatrixXd pool_bids(200, 1);
  for (int r = 0; r < 200; ++r) pool_bids(r, 0) = batch.bids(r / 5, r % 5);
  const BidProfile pool(pool_bids);
  const Eigen::VectorXd bid = Eigen::VectorXd::Constant(1, 0.5);
  auto spread = [&](int k) {
    std::vector<double> xs;
    for (int rep = 0; rep < 400; ++rep) {
      xs.push_back(MeanFieldPayment(p, bid, pool, k, 50.0, rng));
    }
    double mean = 0.0, var = 0.0;
    for (double x : xs) mean += x / xs.size();
    for (double x : xs) var += (x - mean) * (x - mean) / (xs.size() - 1);
    return std::sqrt(var);
  };
  const double ratio = spread(4) / spread(64);
  EXPECT_GT(ratio, 4.0 * 0.75);
  EXPECT_LT(ratio, 4.0 * 1.33);
  EXPECT_THROW(MeanFieldPayment(p, bid, pool, 0, 50.0, rng), std::invalid_argument);
}

TEST(AlignmentLossTest, ZeroAtTargets) {
  const Eigen::MatrixXd proj = Eigen::MatrixXd::Random(3, 4).cwiseAbs();
  const auto r = AlignmentLoss(proj, proj, Eigen::MatrixXd::Ones(3, 4),
                               Eigen::VectorXd::Ones(4), AlignmentConfig{});
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.d_projected.cwiseAbs().maxCoeff(), 0.0);
}

TEST(AlignmentLossTest, QuadraticInsideKnee) {
  Eigen::MatrixXd proj(1, 2), target(1, 2), w(1, 2);
  proj << 1.2, 0.7;
  target << 1.0, 0.9;  // residuals cancel, so the moment term is zero
  w << 0.5, 1.5;
  const Eigen::VectorXd scale = Eigen::VectorXd::Ones(2);
  AlignmentConfig cfg;
  const auto r = AlignmentLoss(proj, target, w, scale, cfg);
  const double d = 1.0 + cfg.scale_floor;
  const double expected =
      (0.5 * 0.5 * std::pow(0.2 / d, 2) + 1.5 * 0.5 * std::pow(0.2 / d, 2)) / 2;
  EXPECT_NEAR(r.pointwise, expected, 1e-15);
  EXPECT_NEAR(r.moment, 0.0, 1e-30);
}

TEST(AlignmentLossTest, DoublingWeightsDoublesPointwiseOnly) {
  std::mt19937_64 rng(11);
  const Eigen::MatrixXd proj = Eigen::MatrixXd::Random(5, 3).cwiseAbs() * 10;
  const Eigen::MatrixXd target = Eigen::MatrixXd::Random(5, 3).cwiseAbs() * 10;
  const Eigen::MatrixXd w = Eigen::MatrixXd::Random(5, 3).cwiseAbs();
  const Eigen::VectorXd s = Eigen::VectorXd::Constant(3, 0.7);
  const auto a = AlignmentLoss(proj, target, w, s, AlignmentConfig{});
  const auto b = AlignmentLoss(proj, target, 2.0 * w, s, AlignmentConfig{});
  EXPECT_NEAR(b.pointwise, 2.0 * a.pointwise, 1e-12);
  EXPECT_EQ(b.moment, a.moment);
}

TEST(AlignmentLossTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  Eigen::MatrixXd proj(4, 3), target(4, 3), w(4, 3);
  for (Eigen::Index k = 0; k < proj.size(); ++k) {
    proj.data()[k] = u(rng);
    target.data()[k] = u(rng);
    w.data()[k] = u(rng) / 5;
  }
  const Eigen::VectorXd s = Eigen::VectorXd::Constant(3, 1.3);
  AlignmentConfig cfg;
  cfg.budget = 4.0;
  const auto r = AlignmentLoss(proj, target, w, s, cfg);
  const double h = 1e-6;
  for (Eigen::Index k = 0; k < proj.size(); ++k) {
    Eigen::MatrixXd pp = proj, pm = proj;
    pp.data()[k] += h;
    pm.data()[k] -= h;
    const double fd = (AlignmentLoss(pp, target, w, s, cfg).value -
                       AlignmentLoss(pm, target, w, s, cfg).value) / (2 * h);
    EXPECT_NEAR(fd, r.d_projected.data()[k], 1e-6);
  }
}

TEST(AlignmentLossTest, TargetsCarryNoGradientButChangeValue) {
  Eigen::MatrixXd proj(1, 2), target(1, 2);
  proj << 1.0, 2.0;
  target << 1.5, 1.0;
  const Eigen::MatrixXd w = Eigen::MatrixXd::Ones(1, 2);
  const Eigen::VectorXd s = Eigen::VectorXd::Ones(2);
  const auto a = AlignmentLoss(proj, target, w, s, AlignmentConfig{});
  Eigen::MatrixXd moved = target;
  moved(0, 0) += 0.1;
  const auto b = AlignmentLoss(proj, moved, w, s, AlignmentConfig{});
  EXPECT_NE(a.value, b.value);
  // Only the projected payments receive a gradient slot.
  EXPECT_EQ(a.d_projected.rows(), proj.rows());
  EXPECT_EQ(a.d_projected.cols(), proj.cols());
}

TEST(IrHingeTest, MatchesDirectComputation) {
  std::mt19937_64 rng(13);
  const MechanismParams p = MakeMechanism(4, 1, TinyArch(), rng);
  const auto batch = SampleProfileBatch(Scenario::kUniform, 4, 1, 16, rng);
  const auto f = ForwardBatch(p, batch.Input(), 0.5);
  double direct = 0.0;
  for (int l = 0; l < 16; ++l) {
    for (int i = 0; i < 4; ++i) {
      direct += std::max(0.0, batch.valuations(l, i) * f.epsilon_out(l, i) -
                                  f.projected(l, i));
    }
  }
  EXPECT_NEAR(IrHinge(f.projected, f.epsilon_out, batch.valuations), direct / 16,
              1e-15);
}

TEST(LagrangianStateTest, MultipliersStayNonNegativeAndGrowWithRegret) {
  LagrangianState s(3, 1.0);
  Eigen::VectorXd regret(3);
  regret << 0.5, 0.0, 0.2;
  for (int k = 0; k < 5; ++k) {
    const Eigen::VectorXd before = s.multipliers;
    s.DualAscent(regret);
    EXPECT_GE(s.multipliers(0), before(0));
    EXPECT_GE(s.multipliers(2), before(2));
  }
  s.DualAscent(Eigen::VectorXd::Constant(3, -100.0));
  EXPECT_TRUE((s.multipliers.array() >= 0.0).all());
  for (int k = 0; k < 50; ++k) s.GrowPenalty(1.5, 100.0);
  EXPECT_EQ(s.rho, 100.0);
}

TEST(TrainerTest, LambdaScheduleEndpoints) {
  TrainConfig c = TinyConfig();
  c.outer_iters = 200;
  c.lambda_mfg_start = 0.0;
  c.lambda_mfg_end = 0.05;
  const Trainer t(c);
  EXPECT_EQ(t.LambdaMfgAt(0), 0.0);
  EXPECT_NEAR(t.LambdaMfgAt(199), 0.05, 1e-15);
  EXPECT_LT(t.LambdaMfgAt(100), 0.05);
}

TEST(TrainerTest, PenaltyTrajectory) {
  TrainConfig c = TinyConfig();
  c.outer_iters = 30;
  c.inner_steps = 1;
  c.rho_growth_every = 2;
  const TrainResult r = Train(c);
  ASSERT_EQ(r.log.size(), 30u);
  EXPECT_EQ(r.log[0].rho, 1.0);
  for (size_t t = 1; t < r.log.size(); ++t) {
    const double expected = std::min(std::pow(1.5, static_cast<double>(t / 2)), 100.0);
    EXPECT_NEAR(r.log[t].rho, expected, 1e-12) << "iteration " << t;
    EXPECT_LE(r.log[t].rho, 100.0);
  }
}

TEST(TrainerTest, SameSeedGivesIdenticalRun) {
  const TrainConfig c = TinyConfig();
  const TrainResult a = Train(c);
  const TrainResult b = Train(c);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (size_t t = 0; t < a.log.size(); ++t) {
    EXPECT_EQ(a.log[t].loss_total, b.log[t].loss_total);
    EXPECT_EQ(a.log[t].mean_regret, b.log[t].mean_regret);
  }
  std::stringstream sa, sb;
  WriteMechanism(sa, a.params, ManifestFor(c));
  WriteMechanism(sb, b.params, ManifestFor(c));
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(TrainerTest, CriticPathRunsWhenZetaPositive) {
  TrainConfig c = TinyConfig();
  c.zeta = 0.5;
  const TrainResult r = Train(c);
  ASSERT_TRUE(r.params.critic.has_value());
  EXPECT_GT(r.log.back().loss_hjb, 0.0);
  for (const auto& row : r.log) EXPECT_TRUE(std::isfinite(row.loss_total));
}

TEST(TrainerTest, VanillaAblationIgnoresMeanField) {
  TrainConfig c = TinyConfig();
  c.use_mean_field = false;
  c.lambda_mfg_start = c.lambda_mfg_end = 0.0;
  c.lambda_hjb = 0.0;
  const TrainResult r = Train(c);
  EXPECT_FALSE(r.params.use_mean_field);
  for (const auto& row : r.log) EXPECT_EQ(row.loss_mfg, 0.0);
  std::mt19937_64 rng(14);
  const auto batch = SampleProfileBatch(Scenario::kUniform, 3, 1, 4, rng);
  MechanismBatchInput in = batch.Input();
  const auto a = ForwardBatch(r.params, in, 50.0);
  in.mean_field.setConstant(9.0);
  EXPECT_EQ(ForwardBatch(r.params, in, 50.0).projected, a.projected);
}

TEST(TrainerTest, DivergenceAbortsWithSnapshot) {
  TrainConfig c = TinyConfig();
  c.learning_rate = 1e300;
  c.budget = 1e300;
  const int64_t before = GlobalFeasibilityStats().nonfinite_evaluations.load();
  try {
    Train(c);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(e.snapshot().find("outer="), std::string::npos);
  }
  EXPECT_GT(GlobalFeasibilityStats().nonfinite_evaluations.load(), before);
}

TEST(TrainConfigTest, ValidationAndRoundTrip) {
  TrainConfig c;
  EXPECT_NO_THROW(c.Validate());
  c.zeta = 1.5;
  EXPECT_THROW(c.Validate(), std::invalid_argument);
  c = TrainConfig{};
  c.moment_weight = 0.05;
  EXPECT_THROW(c.Validate(), std::invalid_argument);
  c = TrainConfig{};
  c.regret_clients = 11;
  EXPECT_THROW(c.Validate(), std::invalid_argument);

  TrainConfig a;
  a.outer_iters = 7;
  a.scenario = Scenario::kBimodal;
  a.zeta = 0.25;
  std::istringstream text(FormatTrainConfig(a));
  TrainConfig b;
  ParseConfig(text, TrainConfigFields(b));
  EXPECT_EQ(TrainConfigHash(a), TrainConfigHash(b));
  EXPECT_EQ(b.scenario, Scenario::kBimodal);
}

}  // namespace
}  // namespace privmarket
