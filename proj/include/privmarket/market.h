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

// Economic primitives of the privacy market: client types, linear privacy
// cost, utilities, welfare accounting and scenario sampling.

#ifndef PRIVMARKET_MARKET_H_
#define PRIVMARKET_MARKET_H_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace privmarket {

// A client's private type. `valuation` is currency per unit of privacy
// budget; `epsilon_declared` is the DP budget the client is willing to sell.
struct ClientType {
  double valuation = 0.0;
  double epsilon_declared = 1.0;
  double model_size = 1.0;
  double local_accuracy = 0.0;
  double delta = 0.0;
};

inline void ValidateClientType(const ClientType& t) {
  if (!(t.valuation >= 0.0) || !std::isfinite(t.valuation)) {
    throw std::invalid_argument("ClientType: valuation must be finite and >= 0");
  }
  if (!(t.epsilon_declared > 0.0) || !std::isfinite(t.epsilon_declared)) {
    throw std::invalid_argument("ClientType: epsilon_declared must be > 0");
  }
  if (!(t.local_accuracy >= 0.0 && t.local_accuracy <= 1.0)) {
    throw std::invalid_argument("ClientType: local_accuracy must lie in [0,1]");
  }
  if (!(t.delta >= 0.0 && t.delta < 1.0)) {
    throw std::invalid_argument("ClientType: delta must lie in [0,1)");
  }
}

// N x m reported bids plus the column means (the mean-field bid). The
// per-entry privacy budgets travel alongside as metadata; they never enter
// the mechanism's input, only the effective-epsilon computation.
class BidProfile {
 public:
  BidProfile() = default;

  explicit BidProfile(Eigen::MatrixXd bids)
      : BidProfile(bids, Eigen::MatrixXd::Ones(bids.rows(), bids.cols())) {}

  BidProfile(Eigen::MatrixXd bids, Eigen::MatrixXd epsilons)
      : bids_(std::move(bids)), epsilons_(std::move(epsilons)) {
    if (bids_.rows() < 1 || bids_.cols() < 1) {
      throw std::invalid_argument("BidProfile: need N >= 1 and m >= 1");
    }
    if (epsilons_.rows() != bids_.rows() || epsilons_.cols() != bids_.cols()) {
      throw std::invalid_argument("BidProfile: epsilon shape must match bids");
    }
    if (!bids_.allFinite() || (bids_.array() < 0.0).any()) {
      throw std::invalid_argument("BidProfile: bids must be finite and >= 0");
    }
    mean_field_bid_ = bids_.colwise().mean().transpose();
  }

  // m = 1 profile: b_i1 = v_i, eps_i1 = declared epsilon.
  static BidProfile FromTypes(std::span<const ClientType> types) {
    Eigen::MatrixXd bids(types.size(), 1);
    Eigen::MatrixXd eps(types.size(), 1);
    for (size_t i = 0; i < types.size(); ++i) {
      bids(i, 0) = types[i].valuation;
      eps(i, 0) = types[i].epsilon_declared;
    }
    return BidProfile(std::move(bids), std::move(eps));
  }

  const Eigen::MatrixXd& bids() const { return bids_; }
  const Eigen::MatrixXd& epsilons() const { return epsilons_; }
  const Eigen::VectorXd& mean_field_bid() const { return mean_field_bid_; }
  int n_clients() const { return static_cast<int>(bids_.rows()); }
  int n_items() const { return static_cast<int>(bids_.cols()); }

 private:
  Eigen::MatrixXd bids_;
  Eigen::MatrixXd epsilons_;
  Eigen::VectorXd mean_field_bid_;
};

struct AuctionOutcome {
  Eigen::MatrixXd allocation;   // N x m, entries in [0,1]
  Eigen::VectorXd payments;     // post-projection
  Eigen::VectorXd epsilon_out;  // effective privacy budget sold
  std::vector<int> winners;     // clients with positive allocation

  int n_clients() const { return static_cast<int>(payments.size()); }
};

inline std::vector<int> WinnersOf(const Eigen::MatrixXd& allocation) {
  std::vector<int> winners;
  for (int i = 0; i < allocation.rows(); ++i) {
    if (allocation.row(i).sum() > 0.0) winners.push_back(i);
  }
  return winners;
}

struct WelfareReport {
  double revenue = 0.0;
  double budget_ratio = 0.0;
  double social_welfare = 0.0;
  Eigen::VectorXd per_client_utility;
};

// c(v, eps) = v * eps.
inline double PrivacyCost(double valuation, double eps_out) {
  return valuation * eps_out;
}

inline double ClientUtility(double payment, double valuation, double eps_out) {
  return payment - PrivacyCost(valuation, eps_out);
}

// Welfare is always evaluated with the clients' true valuations.
inline WelfareReport SocialWelfare(const AuctionOutcome& outcome,
                                   std::span<const double> true_valuations,
                                   double budget) {
  const auto n = static_cast<size_t>(outcome.payments.size());
  if (true_valuations.size() != n ||
      static_cast<size_t>(outcome.epsilon_out.size()) != n) {
    throw std::invalid_argument("SocialWelfare: vector lengths differ");
  }
  if (!(budget > 0.0)) {
    throw std::invalid_argument("SocialWelfare: budget must be positive");
  }
  WelfareReport r;
  r.per_client_utility.resize(static_cast<Eigen::Index>(n));
  for (size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    r.per_client_utility(ii) = ClientUtility(
        outcome.payments(ii), true_valuations[i], outcome.epsilon_out(ii));
  }
  r.revenue = outcome.payments.sum();
  r.social_welfare = r.per_client_utility.sum();
  r.budget_ratio = r.revenue / budget;
  return r;
}

inline std::vector<double> Valuations(std::span<const ClientType> types) {
  std::vector<double> v(types.size());
  for (size_t i = 0; i < types.size(); ++i) v[i] = types[i].valuation;
  return v;
}

struct ValuationWeights {
  double alpha = 1.0;
  double beta = 0.0;
  double gamma = 0.0;
};

// v = alpha * u / eps + beta * |D| + gamma * noniid.
inline double ValuationFromProfile(double local_accuracy, double eps,
                                   double data_size, double noniid,
                                   const ValuationWeights& w) {
  if (!(eps > 0.0)) {
    throw std::invalid_argument("ValuationFromProfile: eps must be > 0");
  }
  if (w.alpha < 0.0 || w.beta < 0.0 || w.gamma < 0.0) {
    throw std::invalid_argument("ValuationFromProfile: weights must be >= 0");
  }
  return w.alpha * local_accuracy / eps + w.beta * data_size +
         w.gamma * noniid;
}

enum class Scenario { kUniform, kBimodal, kRealistic };

inline std::string_view ScenarioName(Scenario s) {
  switch (s) {
    case Scenario::kUniform:
      return "uniform";
    case Scenario::kBimodal:
      return "bimodal";
    case Scenario::kRealistic:
      return "realistic";
  }
  return "uniform";
}

inline Scenario ParseScenario(std::string_view name) {
  if (name == "uniform") return Scenario::kUniform;
  if (name == "bimodal") return Scenario::kBimodal;
  if (name == "realistic") return Scenario::kRealistic;
  throw std::invalid_argument("unknown scenario '" + std::string(name) +
                              "' (expected uniform|bimodal|realistic)");
}

inline constexpr double kEpsilonLow = 0.1;
inline constexpr double kEpsilonHigh = 5.0;
inline constexpr double kSensitiveEpsilonHigh = 0.5;
inline constexpr double kRelaxedEpsilonLow = 2.0;

// Upper end of the valuation support, used as the misreport box bound.
// LogNormal(0, 0.5) is unbounded; its 3-sigma quantile e^1.5 is used.
inline double ValuationUpperBound(Scenario s) {
  return s == Scenario::kRealistic ? std::exp(1.5) : 1.0;
}

// Deterministic for a fixed seed on a fixed standard library.
inline std::vector<ClientType> SampleTypes(Scenario scenario, int n,
                                           uint64_t seed) {
  if (n < 1) throw std::invalid_argument("SampleTypes: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> eps_uniform(kEpsilonLow,
                                                     kEpsilonHigh);
  std::vector<ClientType> types(static_cast<size_t>(n));
  const double delta = 1.0 / n;

  std::vector<bool> sensitive(static_cast<size_t>(n), false);
  if (scenario == Scenario::kBimodal) {
    // ceil(n/2) privacy-sensitive clients at shuffled positions.
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int k = 0; k < (n + 1) / 2; ++k) sensitive[order[k]] = true;
  }
  std::lognormal_distribution<double> lognormal(0.0, 0.5);
  std::uniform_real_distribution<double> eps_sensitive(kEpsilonLow,
                                                       kSensitiveEpsilonHigh);
  std::uniform_real_distribution<double> eps_relaxed(kRelaxedEpsilonLow,
                                                     kEpsilonHigh);
  for (int i = 0; i < n; ++i) {
    ClientType& t = types[static_cast<size_t>(i)];
    switch (scenario) {
      case Scenario::kUniform:
        t.valuation = unit(rng);
        t.epsilon_declared = eps_uniform(rng);
        break;
      case Scenario::kBimodal:
        t.valuation = unit(rng);
        t.epsilon_declared =
            sensitive[i] ? eps_sensitive(rng) : eps_relaxed(rng);
        break;
      case Scenario::kRealistic:
        t.valuation = lognormal(rng);
        t.epsilon_declared = eps_uniform(rng);
        break;
    }
    t.local_accuracy = unit(rng);
    t.model_size = 1.0;
    t.delta = delta;
  }
  return types;
}

}  // namespace privmarket

#endif  // PRIVMARKET_MARKET_H_
