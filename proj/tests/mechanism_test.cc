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

#include "privmarket/mechanism.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

namespace privmarket {
namespace {

ArchConfig SmallArch() {
  ArchConfig a;
  a.header_hidden = {16, 16};
  a.head_hidden = {8};
  a.critic_hidden = {8, 8};
  return a;
}

// Replaces a head's output layer with constant logits.
void PinHead(Mlp& head, const Eigen::RowVectorXd& logits) {
  auto& last = head.mutable_layer(head.num_layers() - 1);
  last.weight.setZero();
  last.bias = logits;
}

BidProfile Profile(std::vector<double> bids, std::vector<double> eps) {
  const auto n = static_cast<Eigen::Index>(bids.size());
  return BidProfile(Eigen::Map<Eigen::MatrixXd>(bids.data(), n, 1),
                    Eigen::Map<Eigen::MatrixXd>(eps.data(), n, 1));
}

TEST(AugmentedInputTest, Examples) {
  Eigen::MatrixXd expected(4, 1);
  expected << 1, 2, 3, 2;
  EXPECT_EQ(BuildAugmentedInput(Profile({1, 2, 3}, {1, 1, 1})), expected);
  const auto single = BuildAugmentedInput(Profile({0.7}, {1}));
  EXPECT_EQ(single(0, 0), 0.7);
  EXPECT_EQ(single(1, 0), 0.7);
  const auto same = BuildAugmentedInput(
      Profile(std::vector<double>(10, 0.25), std::vector<double>(10, 1.0)));
  EXPECT_EQ(same(10, 0), 0.25);
}

TEST(MechanismForwardTest, ProjectionScalesDownToBudget) {
  std::mt19937_64 rng(1);
  MechanismParams p = MakeMechanism(2, 1, SmallArch(), rng);
  PinHead(p.pay_head, Eigen::RowVectorXd::Constant(2, 40.0));  // fraction 1
  const auto r = MechanismForward(p, Profile({30, 40}, {1, 1}), 50.0);
  EXPECT_EQ(r.raw_payments(0), 30.0);
  EXPECT_EQ(r.raw_payments(1), 40.0);
  EXPECT_NEAR(r.projected_payments(0), 150.0 / 7.0, 1e-12);
  EXPECT_NEAR(r.projected_payments(1), 200.0 / 7.0, 1e-12);
  EXPECT_NEAR(r.projected_payments.sum(), 50.0, 1e-12);

  const auto under = MechanismForward(p, Profile({10, 20}, {1, 1}), 50.0);
  EXPECT_EQ(under.projected_payments, under.raw_payments);
}

TEST(MechanismForwardTest, EffectiveEpsilonIsAllocationTimesBudget) {
  std::mt19937_64 rng(2);
  MechanismParams p = MakeMechanism(2, 1, SmallArch(), rng);
  Eigen::RowVectorXd logits(2);
  logits << std::log(1.0), std::log(3.0);
  PinHead(p.alloc_head, logits);
  const auto r = MechanismForward(p, Profile({0.3, 0.6}, {2, 4}), 50.0);
  EXPECT_NEAR(r.allocation(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(r.epsilon_out(0), 0.5, 1e-15);
  EXPECT_NEAR(r.epsilon_out(1), 3.0, 1e-15);
}

TEST(MechanismForwardTest, StructuralInvariantsOnRandomInputs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 9;
    const int m = 1 + trial % 3;
    MechanismParams p = MakeMechanism(n, m, SmallArch(), rng);
    std::uniform_real_distribution<double> u(0.0, trial % 2 ? 100.0 : 1.0);
    Eigen::MatrixXd bids(n, m), eps(n, m);
    for (Eigen::Index k = 0; k < bids.size(); ++k) {
      bids.data()[k] = u(rng);
      eps.data()[k] = 0.1 + 4.9 * std::abs(u(rng)) / (trial % 2 ? 100.0 : 1.0);
    }
    const double budget = 0.5 + (trial % 5) * 10.0;
    const auto r = MechanismForward(p, BidProfile(bids, eps), budget);
    for (int j = 0; j < m; ++j) {
      EXPECT_NEAR(r.allocation.col(j).sum(), 1.0, 1e-12);
    }
    EXPECT_TRUE((r.allocation.array() > 0.0).all());
    EXPECT_TRUE((r.pay_fractions.array() >= 0.0).all());
    EXPECT_TRUE((r.pay_fractions.array() <= 1.0).all());
    for (int i = 0; i < n; ++i) {
      EXPECT_GE(r.raw_payments(i), 0.0);
      EXPECT_LE(r.raw_payments(i), bids.row(i).sum() + 1e-12);
      EXPECT_NEAR(r.raw_payments(i),
                  (r.pay_fractions.row(i).array() * bids.row(i).array()).sum(),
                  1e-12);
      EXPECT_NEAR(r.epsilon_out(i),
                  (r.allocation.row(i).array() * eps.row(i).array()).sum(),
                  1e-12);
    }
    EXPECT_LE(r.projected_payments.sum(), budget + 1e-9);
    // Projection is a uniform rescale.
    const double s = r.raw_payments.sum() / std::max(r.projected_payments.sum(), 1e-300);
    for (int i = 0; i < n; ++i) {
      EXPECT_NEAR(r.raw_payments(i), s * r.projected_payments(i),
                  1e-9 * std::max(1.0, r.raw_payments(i)));
    }
  }
}

TEST(MechanismForwardTest, DeterministicAndShapeChecked) {
  std::mt19937_64 rng(4);
  const MechanismParams p = MakeMechanism(3, 1, SmallArch(), rng);
  const auto prof = Profile({0.1, 0.5, 0.9}, {1, 2, 3});
  const auto a = MechanismForward(p, prof, 50.0);
  const auto b = MechanismForward(p, prof, 50.0);
  EXPECT_EQ(a.projected_payments, b.projected_payments);
  EXPECT_EQ(a.allocation, b.allocation);
  EXPECT_THROW(MechanismForward(p, Profile({0.1, 0.2}, {1, 1}), 50.0),
               std::invalid_argument);
  EXPECT_THROW(MechanismForward(p, prof, 0.0), std::invalid_argument);
}

TEST(MechanismForwardTest, HeaderWidthFollowsAugmentedInput) {
  std::mt19937_64 rng(5);
  const MechanismParams p = MakeMechanism(7, 2, SmallArch(), rng, true);
  EXPECT_EQ(p.header.input_dim(), 8 * 2);
  EXPECT_EQ(p.alloc_head.output_dim(), 14);
  EXPECT_EQ(p.pay_head.output_dim(), 14);
  ASSERT_TRUE(p.critic.has_value());
  EXPECT_EQ(p.critic->input_dim(), 4);
  EXPECT_EQ(p.critic->output_dim(), 1);
}

TEST(MechanismForwardTest, MeanFieldIgnoredWhenDisabled) {
  std::mt19937_64 rng(6);
  MechanismParams p = MakeMechanism(3, 1, SmallArch(), rng);
  p.use_mean_field = false;
  MechanismBatchInput in = SingleProfileInput(Profile({0.1, 0.5, 0.9}, {1, 1, 1}));
  const auto a = ForwardBatch(p, in, 50.0);
  in.mean_field(0, 0) = 123.0;
  const auto b = ForwardBatch(p, in, 50.0);
  EXPECT_EQ(a.projected, b.projected);
}

TEST(ClientUtilityTest, ZeroPaymentsGiveNonPositiveUtility) {
  std::mt19937_64 rng(7);
  MechanismParams p = MakeMechanism(3, 1, SmallArch(), rng);
  PinHead(p.pay_head, Eigen::RowVectorXd::Constant(3, -800.0));
  const auto prof = Profile({0.2, 0.4, 0.8}, {1, 2, 3});
  const auto r = MechanismForward(p, prof, 50.0);
  for (int i = 0; i < 3; ++i) {
    const double u = ClientUtilityUnderMechanism(p, prof, 50.0, i, 0.5);
    EXPECT_DOUBLE_EQ(u, -0.5 * r.epsilon_out(i));
    EXPECT_LE(u, 0.0);
  }
}

TEST(ClientUtilityTest, ZeroValuationGivesPayment) {
  std::mt19937_64 rng(8);
  const MechanismParams p = MakeMechanism(3, 1, SmallArch(), rng);
  const auto prof = Profile({0.2, 0.4, 0.8}, {1, 2, 3});
  const auto r = MechanismForward(p, prof, 50.0);
  EXPECT_EQ(ClientUtilityUnderMechanism(p, prof, 50.0, 1, 0.0),
            r.projected_payments(1));
  EXPECT_GE(r.projected_payments(1), 0.0);
  EXPECT_THROW(ClientUtilityUnderMechanism(p, prof, 50.0, 3, 0.0),
               std::out_of_range);
}

// The profile recomputes its mean-field row, so central differences here
// move b_MFG together with b_i.
TEST(ClientUtilityTest, BidGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  const double h = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + trial % 6;
    const MechanismParams p = MakeMechanism(n, 1, SmallArch(), rng);
    const auto types = SampleTypes(Scenario::kUniform, n, rng());
    const double budget = trial % 2 ? 0.3 : 50.0;  // binding and slack
    const BidProfile prof = BidProfile::FromTypes(types);
    const int i = trial % n;
    const double v = types[i].valuation;
    const double g = ClientUtilityBidGradient(p, prof, budget, i, v)(0);
    auto at = [&](double bid) {
      Eigen::MatrixXd b = prof.bids();
      b(i, 0) = bid;
      return ClientUtilityUnderMechanism(p, BidProfile(b, prof.epsilons()),
                                         budget, i, v);
    };
    const double b0 = prof.bids()(i, 0);
    if (b0 < 2 * h) continue;
    const double fd = (at(b0 + h) - at(b0 - h)) / (2 * h);
    const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6});
    // ReLU kinks inside the probe width are rare but possible.
    if (rel > 1e-4) {
      const double fd2 = (at(b0 + h / 10) - at(b0 - h / 10)) / (h / 5);
      EXPECT_LE(std::abs(fd2 - g) / std::max({std::abs(fd2), std::abs(g), 1e-6}),
                1e-3)
          << "trial " << trial;
    }
    ++checked;
  }
  EXPECT_GT(checked, 50);
}

TEST(CheckpointTest, RoundTripIsExact) {
  std::mt19937_64 rng(10);
  const MechanismParams p = MakeMechanism(4, 1, SmallArch(), rng, true);
  MechanismManifest man;
  man.n_clients = 4;
  man.scenario = "bimodal";
  man.config_hash = "abc123";
  man.version = "test";
  std::stringstream ss;
  WriteMechanism(ss, p, man);
  const LoadedMechanism back = ReadMechanism(ss);
  EXPECT_EQ(back.manifest.n_clients, 4);
  EXPECT_EQ(back.manifest.scenario, "bimodal");
  EXPECT_EQ(back.manifest.config_hash, "abc123");
  const auto prof = Profile({0.2, 0.4, 0.8, 0.1}, {1, 2, 3, 4});
  EXPECT_EQ(MechanismForward(p, prof, 5.0).projected_payments,
            MechanismForward(back.params, prof, 5.0).projected_payments);
  ASSERT_TRUE(back.params.critic.has_value());
}

TEST(CheckpointTest, CommentHeaderIsSkipped) {
  std::mt19937_64 rng(11);
  const MechanismParams p = MakeMechanism(3, 1, SmallArch(), rng);
  const auto path =
      (std::filesystem::temp_directory_path() / "privmarket_ckpt_test.ckpt").string();
  MechanismManifest man;
  man.n_clients = 3;
  SaveMechanism(path, p, man, "first line\nseed=4");
  std::ifstream is(path);
  std::string first;
  std::getline(is, first);
  EXPECT_EQ(first, "# first line");
  EXPECT_EQ(LoadMechanism(path).manifest.n_clients, 3);
  std::filesystem::remove(path);
}

TEST(CheckpointTest, CorruptInputFailsLoudly) {
  std::stringstream bad("privmarket-mechanism v1\nn_clients seven\n");
  EXPECT_THROW(ReadMechanism(bad), std::exception);
  EXPECT_THROW(LoadMechanism("/nonexistent/mechanism.ckpt"), std::runtime_error);

  std::mt19937_64 rng(12);
  const MechanismParams p = MakeMechanism(3, 1, SmallArch(), rng);
  std::stringstream ss;
  WriteMechanism(ss, p, MechanismManifest{});
  std::string text = ss.str();
  text.replace(text.find("n_clients 3"), 11, "n_clients 5");
  std::stringstream mismatched(text);
  EXPECT_THROW(ReadMechanism(mismatched), std::runtime_error);
  std::stringstream truncated(ss.str().substr(0, ss.str().size() / 2));
  EXPECT_THROW(ReadMechanism(truncated), std::exception);
}

}  // namespace
}  // namespace privmarket
