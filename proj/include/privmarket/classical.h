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

// Threshold procurement auctions with analytically known incentive
// properties (PAC and reverse-procurement VCG), plus an exhaustive-deviation
// regret oracle usable against any allocate function.

#ifndef PRIVMARKET_CLASSICAL_H_
#define PRIVMARKET_CLASSICAL_H_

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "privmarket/market.h"

namespace privmarket {

struct ClassicalOutcome {
  int k_winners = 0;
  double uniform_epsilon = 0.0;
  AuctionOutcome outcome;
};

// Any mechanism that maps reported types and a budget to an outcome.
using AllocateFn =
    std::function<AuctionOutcome(std::span<const ClientType>, double)>;

namespace internal {

inline void CheckClassicalInput(std::span<const ClientType> types,
                                double budget) {
  if (types.size() < 2) {
    throw std::invalid_argument(
        "classical mechanisms need n >= 2 (the rule references v_{k+1})");
  }
  if (!(budget > 0.0)) {
    throw std::invalid_argument("budget must be positive");
  }
}

// Client indices ordered by valuation, ties broken by index.
inline std::vector<int> SortedByValuation(std::span<const ClientType> types) {
  // Sorting contiguous (valuation, index) keys is stable by construction
  // and avoids an indirect comparison per step.
  std::vector<std::pair<double, int>> keys(types.size());
  for (size_t i = 0; i < types.size(); ++i) {
    keys[i] = {types[i].valuation, static_cast<int>(i)};
  }
  std::sort(keys.begin(), keys.end());
  std::vector<int> order(types.size());
  for (size_t r = 0; r < keys.size(); ++r) order[r] = keys[r].second;
  return order;
}

// Largest k in [1, n-1] with c(v_(k), 1/(n-k)) <= B/k, or 0 if none.
inline int SelectWinnerCount(std::span<const ClientType> types,
                             std::span<const int> order, double budget) {
  const int n = static_cast<int>(types.size());
  for (int k = n - 1; k >= 1; --k) {
    const double eps = 1.0 / (n - k);
    if (PrivacyCost(types[order[k - 1]].valuation, eps) <= budget / k) {
      return k;
    }
  }
  return 0;
}

inline ClassicalOutcome EmptyOutcome(int n) {
  ClassicalOutcome r;
  r.outcome.allocation = Eigen::MatrixXd::Zero(n, 1);
  r.outcome.payments = Eigen::VectorXd::Zero(n);
  r.outcome.epsilon_out = Eigen::VectorXd::Zero(n);
  return r;
}

}  // namespace internal

// k lowest-valuation clients win; each sells eps = 1/(n-k) and receives the
// threshold payment min(B/k, c(v_(k+1), eps)). The single item is shared
// equally among winners (allocation 1/k each) so that columns stay
// stochastic.
inline ClassicalOutcome PacAllocate(std::span<const ClientType> types,
                                    double budget) {
  internal::CheckClassicalInput(types, budget);
  const int n = static_cast<int>(types.size());
  const std::vector<int> order = internal::SortedByValuation(types);
  const int k = internal::SelectWinnerCount(types, order, budget);
  ClassicalOutcome r = internal::EmptyOutcome(n);
  r.k_winners = k;
  if (k == 0) return r;

  const double eps = 1.0 / (n - k);
  const double pay = std::min(
      budget / k, PrivacyCost(types[order[k]].valuation, eps));
  r.uniform_epsilon = eps;
  for (int rank = 0; rank < k; ++rank) {
    const int i = order[rank];
    r.outcome.allocation(i, 0) = 1.0 / k;
    r.outcome.payments(i) = pay;
    r.outcome.epsilon_out(i) = eps;
  }
  r.outcome.winners = WinnersOf(r.outcome.allocation);
  return r;
}

// Reverse-procurement VCG: same selection, each winner is paid the cost the
// cheapest excluded client would have incurred at the uniform budget,
// capped at B/k.
inline ClassicalOutcome VcgProcure(std::span<const ClientType> types,
                                   double budget) {
  internal::CheckClassicalInput(types, budget);
  const int n = static_cast<int>(types.size());
  const std::vector<int> order = internal::SortedByValuation(types);
  const int k = internal::SelectWinnerCount(types, order, budget);
  ClassicalOutcome r = internal::EmptyOutcome(n);
  r.k_winners = k;
  if (k == 0) return r;

  const double eps = 1.0 / (n - k);
  std::vector<bool> selected(static_cast<size_t>(n), false);
  for (int rank = 0; rank < k; ++rank) selected[order[rank]] = true;
  double cheapest_excluded = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    if (!selected[i]) {
      cheapest_excluded = std::min(cheapest_excluded, types[i].valuation);
    }
  }
  const double externality = PrivacyCost(cheapest_excluded, eps);
  r.uniform_epsilon = eps;
  for (int i = 0; i < n; ++i) {
    if (!selected[i]) continue;
    r.outcome.allocation(i, 0) = 1.0 / k;
    r.outcome.payments(i) = std::min(budget / k, externality);
    r.outcome.epsilon_out(i) = eps;
    r.outcome.winners.push_back(i);
  }
  return r;
}

inline AllocateFn PacMechanism() {
  return [](std::span<const ClientType> t, double b) {
    return PacAllocate(t, b).outcome;
  };
}

inline AllocateFn VcgMechanism() {
  return [](std::span<const ClientType> t, double b) {
    return VcgProcure(t, b).outcome;
  };
}

struct DeviationGrid {
  int grid_size = 200;
  // Also search misreported privacy budgets (joint grid) for DT checks.
  bool include_epsilon = false;
  double epsilon_low = kEpsilonLow;
  double epsilon_high = kEpsilonHigh;
};

// Ex-post regret by exhaustive unilateral deviation. Valuation misreports
// span a uniform grid on [0, 2 * max true valuation]; utilities are always
// evaluated at the true valuation. Entries are floored at 0.
inline std::vector<double> BruteForceRegret(const AllocateFn& mechanism,
                                            std::span<const ClientType> types,
                                            double budget,
                                            const DeviationGrid& grid) {
  if (grid.grid_size < 2) {
    throw std::invalid_argument("BruteForceRegret: grid_size must be >= 2");
  }
  const size_t n = types.size();
  double v_max = 0.0;
  for (const auto& t : types) v_max = std::max(v_max, t.valuation);
  const double hi = v_max > 0.0 ? 2.0 * v_max : 1.0;

  const AuctionOutcome truthful = mechanism(types, budget);
  std::vector<ClientType> work(types.begin(), types.end());
  std::vector<double> regret(n, 0.0);
  const int eps_points = grid.include_epsilon ? grid.grid_size : 1;
  for (size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double v = types[i].valuation;
    const double u_true =
        ClientUtility(truthful.payments(ii), v, truthful.epsilon_out(ii));
    double best = 0.0;
    for (int e = 0; e < eps_points; ++e) {
      if (grid.include_epsilon) {
        work[i].epsilon_declared =
            grid.epsilon_low + (grid.epsilon_high - grid.epsilon_low) * e /
                                   (grid.grid_size - 1);
      }
      for (int g = 0; g < grid.grid_size; ++g) {
        work[i].valuation = hi * g / (grid.grid_size - 1);
        const AuctionOutcome dev = mechanism(work, budget);
        const double u =
            ClientUtility(dev.payments(ii), v, dev.epsilon_out(ii));
        best = std::max(best, u - u_true);
      }
    }
    regret[i] = best;
    work[i] = types[i];
  }
  return regret;
}

inline std::vector<double> BruteForceRegret(const AllocateFn& mechanism,
                                            std::span<const ClientType> types,
                                            double budget, int grid_size) {
  DeviationGrid grid;
  grid.grid_size = grid_size;
  return BruteForceRegret(mechanism, types, budget, grid);
}

}  // namespace privmarket

#endif  // PRIVMARKET_CLASSICAL_H_
