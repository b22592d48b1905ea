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

#include "privmarket/diffnet.h"

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

namespace privmarket {
namespace {

// Re-evaluates the network with plain loops.
Eigen::MatrixXd NaiveForward(const Mlp& net, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd a = x;
  for (int l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    Eigen::MatrixXd z(a.rows(), layer.weight.cols());
    for (int r = 0; r < a.rows(); ++r) {
      for (int c = 0; c < layer.weight.cols(); ++c) {
        double s = layer.bias(c);
        for (int k = 0; k < a.cols(); ++k) s += a(r, k) * layer.weight(k, c);
        z(r, c) = s;
      }
    }
    const bool last = l + 1 == net.num_layers();
    const Activation act = last ? net.output_activation() : Activation::kRelu;
    for (int r = 0; r < z.rows(); ++r) {
      if (act == Activation::kSoftmax) {
        double mx = z.row(r).maxCoeff(), total = 0.0;
        for (int c = 0; c < z.cols(); ++c) total += std::exp(z(r, c) - mx);
        for (int c = 0; c < z.cols(); ++c) z(r, c) = std::exp(z(r, c) - mx) / total;
        continue;
      }
      for (int c = 0; c < z.cols(); ++c) {
        if (act == Activation::kRelu) z(r, c) = std::max(0.0, z(r, c));
        if (act == Activation::kSigmoid) z(r, c) = 1.0 / (1.0 + std::exp(-z(r, c)));
      }
    }
    a = z;
  }
  return a;
}

Eigen::MatrixXd RandomMatrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = g(rng);
  return m;
}

// Scalar objective sum(W .* f(x)) for a fixed random weighting W.
double Objective(const Mlp& net, const Eigen::MatrixXd& x,
                 const Eigen::MatrixXd& w) {
  return (Forward(net, x).output.array() * w.array()).sum();
}

double RelErr(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

TEST(MlpTest, ZeroWeightsGiveBiasImage) {
  Mlp net({3, 2}, Activation::kSigmoid);
  net.mutable_layer(0).bias << 0.0, std::log(3.0);
  const auto out = Forward(net, Eigen::MatrixXd(Eigen::MatrixXd::Random(4, 3))).output;
  for (int r = 0; r < 4; ++r) {
    EXPECT_DOUBLE_EQ(out(r, 0), 0.5);
    EXPECT_NEAR(out(r, 1), 0.75, 1e-15);
  }
}

TEST(MlpTest, IdentityNetworkCopiesInput) {
  Mlp net({4, 4}, Activation::kIdentity);
  net.mutable_layer(0).weight.setIdentity();
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(5, 4);
  EXPECT_EQ(Forward(net, x).output, x);
}

TEST(MlpTest, MatchesIndependentReEvaluation) {
  std::mt19937_64 rng(1);
  for (Activation act : {Activation::kIdentity, Activation::kSigmoid,
                         Activation::kSoftmax, Activation::kRelu}) {
    const Mlp net = Mlp::Glorot({6, 16, 9, 5}, act, rng);
    const Eigen::MatrixXd x = RandomMatrix(7, 6, rng);
    const Eigen::MatrixXd fast = Forward(net, x).output;
    const Eigen::MatrixXd slow = NaiveForward(net, x);
    EXPECT_LE((fast - slow).cwiseAbs().maxCoeff(), 1e-12) << ActivationName(act);
  }
}

TEST(MlpTest, RejectsWrongInputWidth) {
  Mlp net({3, 2}, Activation::kIdentity);
  EXPECT_THROW(Forward(net, Eigen::MatrixXd(Eigen::MatrixXd::Zero(1, 4))), std::invalid_argument);
  EXPECT_THROW(Mlp({3}, Activation::kIdentity), std::invalid_argument);
}

TEST(BackwardTest, LinearWeightGradientIsInput) {
  Mlp net({3, 1}, Activation::kIdentity);
  Eigen::MatrixXd x(1, 3);
  x << 0.5, -2.0, 4.0;
  const auto f = Forward(net, x);
  const auto g = Backward(net, f.tape, Eigen::MatrixXd(Eigen::MatrixXd::Ones(1, 1)));
  EXPECT_EQ(g.layers[0].weight, x.transpose());
  EXPECT_DOUBLE_EQ(g.layers[0].bias(0), 1.0);
}

TEST(BackwardTest, DeadReluUnitsPassNoGradient) {
  Mlp net({2, 3, 1}, Activation::kIdentity);
  net.mutable_layer(0).bias.setConstant(-10.0);
  net.mutable_layer(1).weight.setOnes();
  const auto f = Forward(net, Eigen::MatrixXd(Eigen::MatrixXd::Constant(2, 2, 0.1)));
  const auto g = Backward(net, f.tape, Eigen::MatrixXd(Eigen::MatrixXd::Ones(2, 1)));
  EXPECT_EQ(g.layers[0].weight.cwiseAbs().sum(), 0.0);
  EXPECT_EQ(g.layers[0].bias.cwiseAbs().sum(), 0.0);
  EXPECT_EQ(g.input.cwiseAbs().sum(), 0.0);
}

TEST(BackwardTest, StaleTapeIsRejected) {
  std::mt19937_64 rng(2);
  Mlp net = Mlp::Glorot({2, 2}, Activation::kIdentity, rng);
  const auto f = Forward(net, Eigen::MatrixXd(Eigen::MatrixXd::Ones(1, 2)));
  net.mutable_layer(0).bias(0) = 1.0;
  EXPECT_THROW(Backward(net, f.tape, Eigen::MatrixXd(Eigen::MatrixXd::Ones(1, 2))),
               std::logic_error);
}

// Central differences, h = 1e-5, over every parameter and input entry.
TEST(BackwardTest, MatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const double h = 1e-5;
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Activation act = std::vector<Activation>{
        Activation::kIdentity, Activation::kSigmoid, Activation::kSoftmax}[trial % 3];
    Mlp net = Mlp::Glorot({4, 6, 3}, act, rng);
    for (int l = 0; l < net.num_layers(); ++l) {
      net.mutable_layer(l).bias = RandomMatrix(1, net.layer(l).bias.size(), rng) * 0.1;
    }
    const Eigen::MatrixXd x = RandomMatrix(3, 4, rng);
    const Eigen::MatrixXd w = RandomMatrix(3, 3, rng);
    const auto f = Forward(net, x);
    // Skip instances with a hidden pre-activation inside the probe width.
    bool near_kink = false;
    const Eigen::MatrixXd pre =
        (x * net.layer(0).weight).rowwise() + net.layer(0).bias;
    near_kink = (pre.cwiseAbs().array() < 1e-3).any();
    if (near_kink) continue;
    const auto g = Backward(net, f.tape, w);
    for (int l = 0; l < net.num_layers(); ++l) {
      for (Eigen::Index k = 0; k < net.layer(l).weight.size(); ++k) {
        Mlp plus = net, minus = net;
        plus.mutable_layer(l).weight.data()[k] += h;
        minus.mutable_layer(l).weight.data()[k] -= h;
        const double fd = (Objective(plus, x, w) - Objective(minus, x, w)) / (2 * h);
        EXPECT_LE(RelErr(fd, g.layers[l].weight.data()[k]), 1e-4);
        ++checked;
      }
      for (Eigen::Index k = 0; k < net.layer(l).bias.size(); ++k) {
        Mlp plus = net, minus = net;
        plus.mutable_layer(l).bias(k) += h;
        minus.mutable_layer(l).bias(k) -= h;
        const double fd = (Objective(plus, x, w) - Objective(minus, x, w)) / (2 * h);
        EXPECT_LE(RelErr(fd, g.layers[l].bias(k)), 1e-4);
      }
    }
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      Eigen::MatrixXd xp = x, xm = x;
      xp.data()[k] += h;
      xm.data()[k] -= h;
      const double fd = (Objective(net, xp, w) - Objective(net, xm, w)) / (2 * h);
      EXPECT_LE(RelErr(fd, g.input.data()[k]), 1e-4);
    }
  }
  EXPECT_GT(checked, 1000);
}

TEST(AdamTest, ZeroGradientLeavesParametersUnchanged) {
  std::mt19937_64 rng(3);
  Mlp net = Mlp::Glorot({3, 4, 2}, Activation::kIdentity, rng);
  const Mlp before = net;
  AdamState state;
  for (int s = 0; s < 5; ++s) AdamStep(state, net, Gradients::ZerosLike(net));
  for (int l = 0; l < net.num_layers(); ++l) {
    EXPECT_EQ(net.layer(l).weight, before.layer(l).weight);
    EXPECT_EQ(net.layer(l).bias, before.layer(l).bias);
  }
  EXPECT_EQ(state.step(), 5);
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  AdamState state;
  std::vector<double> p = {0.0};
  const std::vector<double> g = {1.0};
  std::vector<std::span<double>> params = {std::span<double>(p)};
  std::vector<std::span<const double>> grads = {std::span<const double>(g)};
  state.Step(params, grads);
  EXPECT_NEAR(p[0], -1e-3, 1e-10);
}

TEST(AdamTest, ConstantGradientStepApproachesLearningRate) {
  AdamState state(AdamConfig{0.01});
  std::vector<double> p = {0.0, 0.0};
  const std::vector<double> g = {2.5, -0.3};
  std::vector<std::span<double>> params = {std::span<double>(p)};
  std::vector<std::span<const double>> grads = {std::span<const double>(g)};
  std::vector<double> prev = p;
  for (int s = 0; s < 2000; ++s) {
    prev = p;
    state.Step(params, grads);
  }
  EXPECT_NEAR(p[0] - prev[0], -0.01, 1e-6);
  EXPECT_NEAR(p[1] - prev[1], 0.01, 1e-6);
}

TEST(SoftmaxColumnsTest, Examples) {
  const Eigen::MatrixXd equal = SoftmaxColumns(Eigen::MatrixXd::Constant(2, 1, 4.2));
  EXPECT_DOUBLE_EQ(equal(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(equal(1, 0), 0.5);
  Eigen::MatrixXd logits(2, 1);
  logits << std::log(1.0), std::log(3.0);
  const Eigen::MatrixXd z = SoftmaxColumns(logits);
  EXPECT_NEAR(z(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(z(1, 0), 0.75, 1e-15);
  Eigen::MatrixXd big(3, 1);
  big << 1000.0, 0.0, -2.0;
  const Eigen::MatrixXd s = SoftmaxColumns(big);
  EXPECT_TRUE(s.allFinite());
  EXPECT_NEAR(s(0, 0), 1.0, 1e-9);
}

TEST(SoftmaxColumnsTest, ColumnsSumToOneAtAnyScale) {
  std::mt19937_64 rng(4);
  for (double scale : {1e-3, 1.0, 1e2, 1e4, 1e6}) {
    const Eigen::MatrixXd z = SoftmaxColumns(RandomMatrix(50, 4, rng) * scale);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(z.col(j).sum(), 1.0, 1e-12);
  }
}

TEST(SigmoidTest, Examples) {
  EXPECT_DOUBLE_EQ(Sigmoid(0.0), 0.5);
  EXPECT_NEAR(Sigmoid(1e3), 1.0, 1e-9);
  EXPECT_NEAR(Sigmoid(std::log(3.0)), 0.75, 1e-15);
  EXPECT_TRUE(std::isfinite(Sigmoid(-1e3)));
}

TEST(MlpSerializationTest, RoundTripIsExact) {
  std::mt19937_64 rng(8);
  const Mlp net = Mlp::Glorot({5, 7, 3}, Activation::kSigmoid, rng);
  std::stringstream ss;
  WriteMlp(ss, net);
  const Mlp back = ReadMlp(ss);
  ASSERT_EQ(back.dims(), net.dims());
  EXPECT_EQ(back.output_activation(), net.output_activation());
  for (int l = 0; l < net.num_layers(); ++l) {
    EXPECT_EQ(back.layer(l).weight, net.layer(l).weight);
    EXPECT_EQ(back.layer(l).bias, net.layer(l).bias);
  }
}

TEST(MlpSerializationTest, RejectsGarbage) {
  std::stringstream ss("not a network");
  EXPECT_THROW(ReadMlp(ss), std::exception);
}

}  // namespace
}  // namespace privmarket
