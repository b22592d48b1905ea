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

#include "privmarket/eval.h"

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "privmarket/classical.h"

namespace privmarket {
namespace {

TEST(QuantileTest, LinearInterpolation) {
  EXPECT_EQ(Quantile({3, 1, 2, 4}, 0.5), 2.5);
  EXPECT_EQ(Quantile({3, 1, 2, 4}, 0.0), 1.0);
  EXPECT_EQ(Quantile({3, 1, 2, 4}, 1.0), 4.0);
  EXPECT_EQ(Quantile({1, 2, 3, 4, 5}, 0.25), 2.0);
  EXPECT_EQ(Quantile({}, 0.5), 0.0);
}

TEST(NormalizeRegretTest, GuardsTinyDenominators) {
  EXPECT_EQ(NormalizeRegret(0.2, 4.0), 0.05);
  EXPECT_EQ(NormalizeRegret(1e-12, 0.0), 1e-12 / kNormalizationGuard);
}

TEST(LogLogSlopeTest, RecoversPowerLaws) {
  const std::vector<double> x = {10, 50, 100, 200, 500};
  std::vector<double> lin, quad, inv;
  for (double v : x) {
    lin.push_back(3.0 * v);
    quad.push_back(0.1 * v * v);
    inv.push_back(2.0 / std::sqrt(v));
  }
  EXPECT_NEAR(LogLogSlope(x, lin), 1.0, 1e-12);
  EXPECT_NEAR(LogLogSlope(x, quad), 2.0, 1e-12);
  EXPECT_NEAR(LogLogSlope(x, inv), -0.5, 1e-12);
  const std::vector<double> bad = {1, -1, 1, 1, 1};
  EXPECT_THROW(LogLogSlope(x, bad), std::invalid_argument);
  EXPECT_THROW(LogLogSlope(std::vector<double>{1}, std::vector<double>{1}),
               std::invalid_argument);
}

TEST(SpearmanTest, RankCorrelation) {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> up = {2, 4, 8, 16, 32};
  const std::vector<double> down = {5, 4, 3, 2, 1};
  EXPECT_NEAR(SpearmanCorrelation(x, up), 1.0, 1e-15);
  EXPECT_NEAR(SpearmanCorrelation(x, down), -1.0, 1e-15);
  // Textbook value 1 - 6 sum d^2 / (n (n^2 - 1)) with d = (0,0,1,-1,0).
  const std::vector<double> swap = {1, 2, 4, 3, 5};
  EXPECT_NEAR(SpearmanCorrelation(x, swap), 1.0 - 6.0 * 2 / (5 * 24.0), 1e-12);
  EXPECT_EQ(Ranks(std::vector<double>{2, 1, 2}), (std::vector<double>{2.5, 1, 2.5}));
}

AllocateFn OverBudget() {
  return [](std::span<const ClientType> types, double budget) {
    const auto n = static_cast<Eigen::Index>(types.size());
    AuctionOutcome o;
    o.allocation = Eigen::MatrixXd::Constant(n, 1, 1.0 / n);
    o.payments = Eigen::VectorXd::Constant(n, budget);
    o.epsilon_out = Eigen::VectorXd::Ones(n);
    o.winners = WinnersOf(o.allocation);
    return o;
  };
}

TEST(EfficiencyTest, DerivedColumnsComeFromRawLogs) {
  std::vector<EfficiencyLog> logs(2);
  logs[0].name = "a";
  logs[0].revenue = {10, 30};
  logs[0].budget_ratio = {0.2, 0.6};
  logs[0].welfare = {5, 15};
  logs[1].name = "b";
  logs[1].revenue = {5, 5};
  logs[1].budget_ratio = {0.1, 0.1};
  logs[1].welfare = {50, 50};
  const auto rows = SummarizeEfficiency(logs, 50.0);
  EXPECT_EQ(rows[0].revenue_mean, 20.0);
  EXPECT_EQ(rows[0].n_rev, 1.0);
  EXPECT_EQ(rows[1].n_rev, 0.25);
  EXPECT_EQ(rows[0].bf_max, 0.6);
  EXPECT_EQ(rows[0].w_prime, 0.2);
  EXPECT_EQ(rows[1].w_prime, 1.0);
  EXPECT_NEAR(rows[0].revenue_std, std::sqrt(200.0), 1e-12);
}

TEST(EfficiencyTest, BudgetViolationThrows) {
  const std::vector<uint64_t> seeds = {1};
  EXPECT_THROW(EfficiencyTable({{"bad", OverBudget()}}, Scenario::kUniform, 5,
                               50.0, 2, seeds),
               std::logic_error);
}

TEST(EfficiencyTest, PacRowAndArtifacts) {
  const std::vector<uint64_t> seeds = {1, 2};
  const auto rows = EfficiencyTable({{"pac", PacMechanism()}, {"vcg", VcgMechanism()}},
                                    Scenario::kUniform, 20, 50.0, 10, seeds);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].instances, 20);
  EXPECT_LE(rows[0].bf_max, 1.0 + 1e-12);
  EXPECT_NEAR(rows[0].revenue_mean, rows[1].revenue_mean, 1e-9);
  std::ostringstream csv, md;
  WriteEfficiencyCsv(csv, rows);
  WriteEfficiencyMarkdown(md, rows);
  const std::string header = csv.str().substr(0, csv.str().find('\n'));
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 9);
  EXPECT_NE(md.str().find("| pac |"), std::string::npos);
}

TEST(RegretEvaluationTest, PacIsTruthfulAndIndividuallyRational) {
  const auto r = EvaluateClassicalRegret(PacMechanism(), Scenario::kUniform, 6, 8,
                                         50.0, DeviationGrid{}, 3);
  EXPECT_LE(r.mean, 1e-9);
  EXPECT_LE(r.per_client_regret.maxCoeff(), 1e-9);
  EXPECT_EQ(r.ir_violation_rate, 0.0);
  EXPECT_EQ(r.samples, 8);
}

TEST(RegretEvaluationTest, UntrainedLearnedMechanismHasRegret) {
  std::mt19937_64 rng(4);
  const MechanismParams p = MakeMechanism(4, 1, ArchConfig{{16}, {8}, {8}}, rng);
  const auto r =
      EvaluateLearnedRegret(p, Scenario::kUniform, 16, 50.0, PgaOptions{}, 4);
  EXPECT_GT(r.mean, 0.0);
  EXPECT_LE(r.q25, r.median);
  EXPECT_LE(r.median, r.q75);
  EXPECT_EQ(r.per_client_regret.size(), 4);
  EXPECT_NEAR(r.normalized_mean,
              NormalizeRegret(r.mean, r.mean_abs_truthful_utility), 1e-15);
}

TEST(ScalingBenchmarkTest, RejectsNonIncreasingSizes) {
  auto noop = [](int) { return [] {}; };
  EXPECT_THROW(ScalingBenchmark("x", {10, 10}, 1, noop), std::invalid_argument);
  EXPECT_THROW(ScalingBenchmark("x", {50, 10}, 1, noop), std::invalid_argument);
}

TEST(ScalingBenchmarkTest, LinearWorkloadHasUnitSlope) {
  volatile double sink = 0.0;
  auto work = [&sink](int n) {
    return [&sink, n] {
      double s = 0.0;
      for (int k = 0; k < n * 2000; ++k) s += std::sqrt(static_cast<double>(k));
      sink = s;
    };
  };
  const auto r = ScalingBenchmark("linear", {10, 40, 160}, 3, work, 0.02);
  EXPECT_NEAR(r.slope, 1.0, 0.25);
  EXPECT_GT(r.peak_rss_mb, 0.0);
}

TEST(ApproxSeriesTest, FitsSlopeAndRankCorrelation) {
  const std::vector<int> sizes = {10, 20, 40, 80};
  std::vector<std::vector<double>> per_seed;
  for (int n : sizes) per_seed.push_back({1.0 / n, 1.0 / n});
  const auto s = FitApproxSeries(sizes, per_seed);
  EXPECT_NEAR(s.slope, -1.0, 1e-12);
  EXPECT_NEAR(s.spearman, -1.0, 1e-15);
  std::ostringstream os;
  WriteApproxSeriesCsv(os, s);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "n,eps_hat,seed0,seed1");
  EXPECT_THROW(FitApproxSeries({10}, {{1.0}}), std::invalid_argument);
}

TEST(WorkloadPoolSizeTest, Bounds) {
  EXPECT_EQ(WorkloadPoolSize(10), 64);
  EXPECT_EQ(WorkloadPoolSize(1000000), 4);
  EXPECT_EQ(WorkloadPoolSize(0), 64);
}

}  // namespace
}  // namespace privmarket
