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

// Training of the learned mechanism. The objective is
//
//   J = L_AL + lambda_mfg * L_MFG + lambda_hjb * L_HJB
//
// where L_AL is negative revenue plus an IR hinge plus augmented-Lagrangian
// regret penalties, L_MFG aligns payments with their mean-field
// counterparts, and L_HJB fits the optional value critic.
//
// Regret is measured by projected gradient ascent over one client's bid,
// with the mean-field row moving along with the misreport. The ascent
// itself runs on a single-precision copy of the networks; every reported
// regret and every loss term is re-evaluated in double precision at the
// iterate the search selected.

#ifndef PRIVMARKET_TRAINER_H_
#define PRIVMARKET_TRAINER_H_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "privmarket/config.h"
#include "privmarket/diffnet.h"
#include "privmarket/market.h"
#include "privmarket/mechanism.h"
#include "privmarket/runtime.h"

namespace privmarket {

struct TrainConfig {
  int outer_iters = 200;
  int inner_steps = 25;
  int batch_size = 64;
  int pga_steps = 25;
  double pga_step_size = 0.01;
  double learning_rate = 1e-3;
  double ir_penalty = 10.0;
  double rho0 = 1.0;
  double rho_growth = 1.5;
  double rho_max = 100.0;
  int rho_growth_every = 10;
  double zeta = 0.0;
  double lambda_mfg_start = 0.0;
  double lambda_mfg_end = 0.05;
  double lambda_hjb = 1.0;
  int mc_opponents = 32;
  double huber_delta = 1.0;
  double moment_weight = 0.5;
  double weight_exponent = 1.0;
  double discount = 0.1;
  double budget = 50.0;
  uint64_t seed = 1;
  int n_clients = 10;
  int n_items = 1;
  Scenario scenario = Scenario::kUniform;
  // Misreport box upper bound; 0 selects the scenario's valuation bound.
  double bid_max = 0.0;
  // Clients whose regret is estimated per step (0 = all).
  int regret_clients = 0;
  // Profiles and clients per step that receive mean-field targets.
  int mf_target_profiles = 8;
  int mf_target_clients = 0;
  int scale_window = 50;
  bool use_mean_field = true;
  bool couple_mean_field = true;
  bool reduced_precision_search = true;
  int header_width = 128;
  int header_layers = 3;
  int head_width = 128;
  int critic_width = 64;

  double ResolvedBidMax() const {
    return bid_max > 0.0 ? bid_max : ValuationUpperBound(scenario);
  }

  ArchConfig Arch() const {
    ArchConfig a;
    a.header_hidden.assign(static_cast<size_t>(header_layers), header_width);
    a.head_hidden = {head_width};
    a.critic_hidden = {critic_width, critic_width};
    return a;
  }

  void Validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("TrainConfig: ") + what);
    };
    require(outer_iters >= 0, "outer_iters must be >= 0");
    require(inner_steps >= 1, "inner_steps must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(pga_steps >= 1, "pga_steps must be >= 1");
    require(pga_step_size > 0.0, "pga_step_size must be > 0");
    require(learning_rate > 0.0, "learning_rate must be > 0");
    require(ir_penalty >= 0.0, "ir_penalty must be >= 0");
    require(rho0 > 0.0 && rho_max >= rho0, "need 0 < rho0 <= rho_max");
    require(rho_growth >= 1.0, "rho_growth must be >= 1");
    require(rho_growth_every >= 1, "rho_growth_every must be >= 1");
    require(zeta >= 0.0 && zeta <= 1.0, "zeta must lie in [0,1]");
    require(lambda_mfg_start >= 0.0 && lambda_mfg_end >= 0.0,
            "lambda_mfg schedule must be >= 0");
    require(lambda_hjb >= 0.0, "lambda_hjb must be >= 0");
    require(mc_opponents >= 1, "mc_opponents must be >= 1");
    require(huber_delta > 0.0, "huber_delta must be > 0");
    require(moment_weight >= 0.1 && moment_weight <= 1.0,
            "moment_weight must lie in [0.1,1]");
    require(weight_exponent >= 0.0, "weight_exponent must be >= 0");
    require(discount > 0.0, "discount must be > 0");
    require(budget > 0.0, "budget must be > 0");
    require(n_clients >= 1 && n_items >= 1, "need n_clients, n_items >= 1");
    require(bid_max >= 0.0, "bid_max must be >= 0");
    require(regret_clients >= 0 && regret_clients <= n_clients,
            "regret_clients must lie in [0, n_clients]");
    require(mf_target_profiles >= 0, "mf_target_profiles must be >= 0");
    require(mf_target_clients >= 0 && mf_target_clients <= n_clients,
            "mf_target_clients must lie in [0, n_clients]");
    require(scale_window >= 1, "scale_window must be >= 1");
    require(header_width >= 1 && header_layers >= 1 && head_width >= 1 &&
                critic_width >= 1,
            "layer widths must be >= 1");
  }
};

inline std::vector<ConfigField> TrainConfigFields(TrainConfig& c) {
  std::vector<ConfigField> f = {
      IntField("outer_iters", &c.outer_iters, "outer iterations"),
      IntField("inner_steps", &c.inner_steps, "primal steps per outer iteration"),
      IntField("batch_size", &c.batch_size, "profiles per batch (L)"),
      IntField("pga_steps", &c.pga_steps, "misreport ascent steps (R)"),
      DoubleField("pga_step_size", &c.pga_step_size, "ascent step size"),
      DoubleField("learning_rate", &c.learning_rate, "Adam learning rate"),
      DoubleField("ir_penalty", &c.ir_penalty, "IR hinge weight"),
      DoubleField("rho0", &c.rho0, "initial penalty weight"),
      DoubleField("rho_growth", &c.rho_growth, "penalty growth factor"),
      DoubleField("rho_max", &c.rho_max, "penalty cap"),
      IntField("rho_growth_every", &c.rho_growth_every,
               "outer iterations between penalty growths"),
      DoubleField("zeta", &c.zeta, "value-baselined regret blend"),
      DoubleField("lambda_mfg_start", &c.lambda_mfg_start,
                  "alignment weight at the first outer iteration"),
      DoubleField("lambda_mfg_end", &c.lambda_mfg_end,
                  "alignment weight at the last outer iteration"),
      DoubleField("lambda_hjb", &c.lambda_hjb, "critic residual weight"),
      IntField("mc_opponents", &c.mc_opponents,
               "opponent resamples per mean-field payment (K)"),
      DoubleField("huber_delta", &c.huber_delta, "Huber knee"),
      DoubleField("moment_weight", &c.moment_weight, "budget-moment weight"),
      DoubleField("weight_exponent", &c.weight_exponent,
                  "alignment weight exponent on valuations"),
      DoubleField("discount", &c.discount, "critic discount rate"),
      DoubleField("budget", &c.budget, "buyer budget B"),
      U64Field("seed", &c.seed, "random seed"),
      IntField("n_clients", &c.n_clients, "clients per auction (N)"),
      IntField("n_items", &c.n_items, "items per client (m)"),
      {"scenario", "uniform|bimodal|realistic",
       [&c] { return std::string(ScenarioName(c.scenario)); },
       [&c](const std::string& s) { c.scenario = ParseScenario(s); }},
      DoubleField("bid_max", &c.bid_max,
                  "misreport upper bound (0 = scenario bound)"),
      IntField("regret_clients", &c.regret_clients,
               "clients per step with regret estimates (0 = all)"),
      IntField("mf_target_profiles", &c.mf_target_profiles,
               "profiles per step receiving mean-field targets"),
      IntField("mf_target_clients", &c.mf_target_clients,
               "clients per profile receiving mean-field targets (0 = all)"),
      IntField("scale_window", &c.scale_window,
               "batches in the payment-scale window"),
      BoolField("use_mean_field", &c.use_mean_field,
                "feed the mean-field row to the header"),
      BoolField("couple_mean_field", &c.couple_mean_field,
                "move the mean-field row with misreports"),
      BoolField("reduced_precision_search", &c.reduced_precision_search,
                "run misreport ascent in single precision"),
      IntField("header_width", &c.header_width, "header hidden width"),
      IntField("header_layers", &c.header_layers, "header hidden layers"),
      IntField("head_width", &c.head_width, "head hidden width"),
      IntField("critic_width", &c.critic_width, "critic hidden width"),
  };
  return f;
}

inline std::string FormatTrainConfig(const TrainConfig& c,
                                     const std::string& prefix = "") {
  TrainConfig copy = c;
  return FormatConfig(TrainConfigFields(copy), prefix);
}

inline std::string TrainConfigHash(const TrainConfig& c) {
  return HashText(FormatTrainConfig(c));
}

// Multipliers and penalty weight of the augmented Lagrangian.
struct LagrangianState {
  Eigen::VectorXd multipliers;
  double rho = 1.0;

  LagrangianState() = default;
  LagrangianState(int n_clients, double rho0)
      : multipliers(Eigen::VectorXd::Zero(n_clients)), rho(rho0) {}

  void DualAscent(const Eigen::VectorXd& regret) {
    multipliers = (multipliers + rho * regret).cwiseMax(0.0);
  }
  void GrowPenalty(double factor, double cap) {
    rho = std::min(rho * factor, cap);
  }
};

// b'_MFG = b_MFG + (b'_i - b_i) / N.
inline Eigen::VectorXd MisreportMeanField(const Eigen::VectorXd& mean_field,
                                          const Eigen::VectorXd& bid,
                                          const Eigen::VectorXd& new_bid,
                                          int n_clients) {
  if (n_clients < 1) {
    throw std::invalid_argument("MisreportMeanField: N must be >= 1");
  }
  return mean_field + (new_bid - bid) / static_cast<double>(n_clients);
}

// L sampled profiles with their true valuations. For m > 1 every item of a
// client carries that client's valuation and declared epsilon.
struct ProfileBatch {
  Eigen::MatrixXd bids;        // L x N m
  Eigen::MatrixXd epsilons;    // L x N m
  Eigen::MatrixXd valuations;  // L x N
  int n_clients = 0;
  int n_items = 1;

  int size() const { return static_cast<int>(bids.rows()); }

  Eigen::MatrixXd MeanField() const {
    Eigen::MatrixXd mf = Eigen::MatrixXd::Zero(bids.rows(), n_items);
    for (int i = 0; i < n_clients; ++i) mf += bids.middleCols(i * n_items, n_items);
    return mf / n_clients;
  }

  MechanismBatchInput Input() const {
    return {bids, MeanField(), epsilons};
  }
};

inline ProfileBatch SampleProfileBatch(Scenario scenario, int n_clients,
                                       int n_items, int size,
                                       std::mt19937_64& rng) {
  ProfileBatch b;
  b.n_clients = n_clients;
  b.n_items = n_items;
  b.bids.resize(size, n_clients * n_items);
  b.epsilons.resize(size, n_clients * n_items);
  b.valuations.resize(size, n_clients);
  for (int l = 0; l < size; ++l) {
    const auto types = SampleTypes(scenario, n_clients, rng());
    for (int i = 0; i < n_clients; ++i) {
      b.valuations(l, i) = types[i].valuation;
      for (int j = 0; j < n_items; ++j) {
        b.bids(l, i * n_items + j) = types[i].valuation;
        b.epsilons(l, i * n_items + j) = types[i].epsilon_declared;
      }
    }
  }
  return b;
}

// Single truthful profile; a client's true valuation is the mean of its bid
// row (its only bid when m = 1).
inline ProfileBatch BatchFromProfile(const BidProfile& profile) {
  ProfileBatch b;
  b.n_clients = profile.n_clients();
  b.n_items = profile.n_items();
  const MechanismBatchInput in = SingleProfileInput(profile);
  b.bids = in.bids;
  b.epsilons = in.epsilons;
  b.valuations = profile.bids().rowwise().mean().transpose();
  return b;
}

struct PgaOptions {
  int steps = 25;
  double step_size = 0.01;
  double bid_max = 1.0;
  bool couple_mean_field = true;
  bool reduced_precision = true;

  static PgaOptions FromConfig(const TrainConfig& c) {
    PgaOptions o;
    o.steps = c.pga_steps;
    o.step_size = c.pga_step_size;
    o.bid_max = c.ResolvedBidMax();
    o.couple_mean_field = c.couple_mean_field;
    o.reduced_precision = c.reduced_precision_search;
    return o;
  }
};

// Per (profile, client) row results; row l * |clients| + k is profile l
// with clients[k] deviating.
struct PgaBatchResult {
  std::vector<int> clients;
  Eigen::MatrixXd best_misreport;     // rows x m
  Eigen::VectorXd gain;               // u(best) - u(truthful), unfloored
  Eigen::VectorXd regret;             // gain floored at 0
  Eigen::MatrixXd best_misreport_vf;  // rows x m, critic present only
  Eigen::VectorXd gain_vf;
  Eigen::VectorXd regret_vf;
  Eigen::VectorXd truthful_utility;   // rows
  Eigen::VectorXd bellman_target;     // rows, when requested
  int rows() const { return static_cast<int>(regret.size()); }
};

// Extra inputs for the critic: its network and, for Bellman targets, the
// frozen next-state mean field per row and the discount rate.
struct CriticInputs {
  const Mlp* critic = nullptr;
  const Eigen::MatrixXd* next_mean_field = nullptr;  // rows x m
  double discount = 0.1;
};

namespace internal {

struct SearchTrace {
  Eigen::MatrixXd best;
  Eigen::MatrixXd best_vf;
  Eigen::VectorXd bellman;
};

// Rows of the search batch: one per (profile, client) pair.
template <typename T>
struct DeviationRows {
  BasicMechanismBatchInput<T> in;
  MatrixT<T> truth_mean_field;  // rows x m
  MatrixT<T> truth_bid;         // rows x m
  VectorT<T> valuation;         // rows
  std::vector<int> client;      // rows
};

template <typename T>
DeviationRows<T> BuildDeviationRows(const ProfileBatch& batch,
                                    std::span<const int> clients) {
  const int n = batch.n_clients;
  const int m = batch.n_items;
  const int s = static_cast<int>(clients.size());
  const int rows = batch.size() * s;
  const Eigen::MatrixXd mf = batch.MeanField();
  DeviationRows<T> d;
  d.in.bids.resize(rows, n * m);
  d.in.epsilons.resize(rows, n * m);
  d.in.mean_field.resize(rows, m);
  d.truth_bid.resize(rows, m);
  d.valuation.resize(rows);
  d.client.resize(static_cast<size_t>(rows));
  for (int l = 0; l < batch.size(); ++l) {
    for (int k = 0; k < s; ++k) {
      const int r = l * s + k;
      const int i = clients[k];
      d.in.bids.row(r) = batch.bids.row(l).template cast<T>();
      d.in.epsilons.row(r) = batch.epsilons.row(l).template cast<T>();
      d.in.mean_field.row(r) = mf.row(l).template cast<T>();
      d.truth_bid.row(r) = batch.bids.row(l).segment(i * m, m).template cast<T>();
      d.valuation(r) = static_cast<T>(batch.valuations(l, i));
      d.client[r] = i;
    }
  }
  d.truth_mean_field = d.in.mean_field;
  return d;
}

template <typename T>
void PlaceMisreport(DeviationRows<T>& d, const MatrixT<T>& misreport, int n,
                    int m, bool couple) {
  for (Eigen::Index r = 0; r < misreport.rows(); ++r) {
    const int i = d.client[r];
    d.in.bids.row(r).segment(i * m, m) = misreport.row(r);
    if (couple) {
      d.in.mean_field.row(r) =
          d.truth_mean_field.row(r) +
          (misreport.row(r) - d.truth_bid.row(r)) / static_cast<T>(n);
    }
  }
}

template <typename T>
VectorT<T> RowUtilities(const BasicMechanismBatchForward<T>& f,
                        const DeviationRows<T>& d) {
  VectorT<T> u(f.projected.rows());
  for (Eigen::Index r = 0; r < u.size(); ++r) {
    const int i = d.client[r];
    u(r) = f.projected(r, i) - d.valuation(r) * f.epsilon_out(r, i);
  }
  return u;
}

template <typename T>
VectorT<T> CriticAt(const BasicMlp<T>& critic, const MatrixT<T>& own,
                    const MatrixT<T>& mean_field) {
  MatrixT<T> x(own.rows(), own.cols() + mean_field.cols());
  x << own, mean_field;
  return Forward(critic, x).output.col(0);
}

// Projected gradient ascent on u_i over the misreport box. Tracks the best
// iterate for the raw gain and for the advantage gain, and the Bellman
// maximum when a next-state mean field is given.
template <typename T>
SearchTrace RunPgaSearch(const BasicMechanismParams<T>& p,
                         const BasicMlp<T>* critic,
                         const MatrixT<T>* next_mean_field,
                         double discount, const ProfileBatch& batch,
                         std::span<const int> clients, double budget,
                         const Eigen::MatrixXd& init, const PgaOptions& opt) {
  const int n = batch.n_clients;
  const int m = batch.n_items;
  DeviationRows<T> d = BuildDeviationRows<T>(batch, clients);
  const Eigen::Index rows = d.valuation.size();

  const auto truthful = ForwardBatch(p, d.in, budget);
  const VectorT<T> u0 = RowUtilities(truthful, d);
  VectorT<T> phi0;
  if (critic) phi0 = CriticAt(*critic, d.truth_bid, d.truth_mean_field);
  const T gamma = static_cast<T>(std::exp(-discount));

  SearchTrace trace;
  trace.best.resize(rows, m);
  trace.best_vf.resize(rows, m);
  VectorT<T> best_gain =
      VectorT<T>::Constant(rows, -std::numeric_limits<T>::infinity());
  VectorT<T> best_gain_vf = best_gain;
  VectorT<T> bellman;
  if (critic && next_mean_field) {
    bellman = u0 + gamma * CriticAt(*critic, d.truth_bid, *next_mean_field);
  }

  MatrixT<T> cur = init.template cast<T>();
  const T hi = static_cast<T>(opt.bid_max);
  const T step = static_cast<T>(opt.step_size);
  for (int r = 0; r <= opt.steps; ++r) {
    PlaceMisreport(d, cur, n, m, opt.couple_mean_field);
    const auto f = ForwardBatch(p, d.in, budget);
    const VectorT<T> u = RowUtilities(f, d);
    if (r >= 1) {
      VectorT<T> phi;
      if (critic) phi = CriticAt(*critic, cur, d.in.mean_field);
      for (Eigen::Index k = 0; k < rows; ++k) {
        const T g = u(k) - u0(k);
        if (g > best_gain(k)) {
          best_gain(k) = g;
          trace.best.row(k) = cur.row(k).template cast<double>();
        }
        if (critic) {
          const T gv = g - phi(k) + phi0(k);
          if (gv > best_gain_vf(k)) {
            best_gain_vf(k) = gv;
            trace.best_vf.row(k) = cur.row(k).template cast<double>();
          }
        }
      }
      if (bellman.size()) {
        bellman = bellman.cwiseMax(
            u + gamma * CriticAt(*critic, cur, *next_mean_field));
      }
    }
    if (r == opt.steps) break;

    MatrixT<T> dp = MatrixT<T>::Zero(rows, n);
    MatrixT<T> de = MatrixT<T>::Zero(rows, n);
    for (Eigen::Index k = 0; k < rows; ++k) {
      dp(k, d.client[k]) = T(1);
      de(k, d.client[k]) = -d.valuation(k);
    }
    const auto g = BackwardBatch(p, d.in, f, dp, de, false);
    for (Eigen::Index k = 0; k < rows; ++k) {
      const int i = d.client[k];
      for (int j = 0; j < m; ++j) {
        T grad = g.bids(k, i * m + j);
        if (opt.couple_mean_field) grad += g.mean_field(k, j) / static_cast<T>(n);
        cur(k, j) = std::clamp(cur(k, j) + step * grad, T(0), hi);
      }
    }
  }
  if (bellman.size()) trace.bellman = bellman.template cast<double>();
  return trace;
}

inline std::vector<int> AllClients(int n) {
  std::vector<int> c(static_cast<size_t>(n));
  std::iota(c.begin(), c.end(), 0);
  return c;
}

}  // namespace internal

// Batched MFG-aware regret: for every profile and every listed client,
// ascend u_i from a uniform draw in the misreport box and keep the best of
// the R iterates.
inline PgaBatchResult PgaRegretBatch(const MechanismParams& p,
                                     const ProfileBatch& batch, double budget,
                                     std::vector<int> clients,
                                     const PgaOptions& opt,
                                     std::mt19937_64& rng,
                                     const CriticInputs& critic = {}) {
  if (opt.steps < 1) throw std::invalid_argument("PGA: steps must be >= 1");
  if (!(opt.bid_max > 0.0)) throw std::invalid_argument("PGA: bid_max <= 0");
  if (batch.n_clients != p.n_clients_trained || batch.n_items != p.n_items) {
    throw std::invalid_argument("PGA: batch shape does not match mechanism");
  }
  if (clients.empty()) clients = internal::AllClients(batch.n_clients);
  for (int c : clients) {
    if (c < 0 || c >= batch.n_clients) {
      throw std::out_of_range("PGA: client index out of range");
    }
  }
  const int m = batch.n_items;
  const int n = batch.n_clients;
  const int rows = batch.size() * static_cast<int>(clients.size());

  Eigen::MatrixXd init(rows, m);
  std::uniform_real_distribution<double> box(0.0, opt.bid_max);
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < m; ++j) init(r, j) = box(rng);
  }

  internal::SearchTrace trace;
  if (opt.reduced_precision) {
    const auto pf = p.Cast<float>();
    std::optional<BasicMlp<float>> cf;
    if (critic.critic) cf = critic.critic->Cast<float>();
    std::optional<MatrixT<float>> nf;
    if (critic.next_mean_field) nf = critic.next_mean_field->cast<float>();
    trace = internal::RunPgaSearch<float>(
        pf, cf ? &*cf : nullptr, nf ? &*nf : nullptr, critic.discount, batch,
        clients, budget, init, opt);
  } else {
    trace = internal::RunPgaSearch<double>(p, critic.critic,
                                           critic.next_mean_field,
                                           critic.discount, batch, clients,
                                           budget, init, opt);
  }

  // Exact re-evaluation at the selected iterates.
  PgaBatchResult res;
  res.clients = clients;
  auto d = internal::BuildDeviationRows<double>(batch, clients);
  const auto truthful = ForwardBatch(p, d.in, budget);
  res.truthful_utility = internal::RowUtilities(truthful, d);
  res.best_misreport = trace.best;
  internal::PlaceMisreport(d, trace.best, n, m, opt.couple_mean_field);
  res.gain =
      internal::RowUtilities(ForwardBatch(p, d.in, budget), d) -
      res.truthful_utility;
  res.regret = res.gain.cwiseMax(0.0);
  if (critic.critic) {
    const Eigen::VectorXd phi0 = internal::CriticAt(
        *critic.critic, d.truth_bid, d.truth_mean_field);
    res.best_misreport_vf = trace.best_vf;
    internal::PlaceMisreport(d, trace.best_vf, n, m, opt.couple_mean_field);
    const Eigen::VectorXd u =
        internal::RowUtilities(ForwardBatch(p, d.in, budget), d);
    const Eigen::VectorXd phi =
        internal::CriticAt(*critic.critic, trace.best_vf, d.in.mean_field);
    res.gain_vf = u - res.truthful_utility - phi + phi0;
    res.regret_vf = res.gain_vf.cwiseMax(0.0);
  }
  res.bellman_target = trace.bellman;
  return res;
}

struct PgaRegretResult {
  double regret = 0.0;
  Eigen::VectorXd best_misreport;
};

inline PgaRegretResult PgaRegret(const MechanismParams& p,
                                 const BidProfile& profile, double budget,
                                 int i, const PgaOptions& opt,
                                 std::mt19937_64& rng) {
  const PgaBatchResult r =
      PgaRegretBatch(p, BatchFromProfile(profile), budget, {i}, opt, rng);
  return {r.regret(0), r.best_misreport.row(0).transpose()};
}

// Same trajectory as PgaRegret, scored with advantage differences
// A = u - critic(bid, mean field).
inline double ValueBaselinedRegret(const MechanismParams& p, const Mlp* critic,
                                   const BidProfile& profile, double budget,
                                   int i, const PgaOptions& opt,
                                   std::mt19937_64& rng) {
  if (critic == nullptr) {
    throw std::invalid_argument("ValueBaselinedRegret: no critic");
  }
  CriticInputs ci;
  ci.critic = critic;
  const PgaBatchResult r = PgaRegretBatch(p, BatchFromProfile(profile), budget,
                                          {i}, opt, rng, ci);
  return r.regret_vf(0);
}

struct CriticLossResult {
  double value = 0.0;
  Gradients grads;
};

// Semi-gradient squared residual mean((critic(x) - y)^2); targets are held
// fixed.
inline CriticLossResult CriticResidualLoss(const Mlp& critic,
                                           const Eigen::MatrixXd& states,
                                           const Eigen::VectorXd& targets) {
  if (states.rows() != targets.size() || states.rows() == 0) {
    throw std::invalid_argument("CriticResidualLoss: shape mismatch");
  }
  const auto out = Forward(critic, states);
  const Eigen::VectorXd resid = out.output.col(0) - targets;
  CriticLossResult r;
  r.value = resid.squaredNorm() / static_cast<double>(resid.size());
  const Eigen::MatrixXd g = 2.0 * resid / static_cast<double>(resid.size());
  r.grads = Backward(critic, out.tape, g);
  return r;
}

// Next-state mean field per deviation row: the mean field of another,
// independently drawn profile of the batch.
inline Eigen::MatrixXd NextStateMeanField(const ProfileBatch& batch, int s,
                                          std::mt19937_64& rng) {
  const Eigen::MatrixXd mf = batch.MeanField();
  std::uniform_int_distribution<int> pick(0, batch.size() - 1);
  Eigen::MatrixXd next(batch.size() * s, batch.n_items);
  for (int l = 0; l < batch.size(); ++l) {
    int other = pick(rng);
    if (batch.size() > 1) {
      while (other == l) other = pick(rng);
    }
    for (int k = 0; k < s; ++k) next.row(l * s + k) = mf.row(other);
  }
  return next;
}

inline Eigen::MatrixXd CriticStates(const ProfileBatch& batch,
                                    std::span<const int> clients) {
  const int m = batch.n_items;
  const int s = static_cast<int>(clients.size());
  const Eigen::MatrixXd mf = batch.MeanField();
  Eigen::MatrixXd x(batch.size() * s, 2 * m);
  for (int l = 0; l < batch.size(); ++l) {
    for (int k = 0; k < s; ++k) {
      x.row(l * s + k) << batch.bids.row(l).segment(clients[k] * m, m),
          mf.row(l);
    }
  }
  return x;
}

// Mean squared residual against one-step Bellman targets
// max_b' [u(b') + exp(-discount) critic(b', nu')], the max taken over the
// PGA iterates (and the truthful bid).
inline CriticLossResult CriticLoss(const Mlp& critic, const MechanismParams& p,
                                   const ProfileBatch& batch, double budget,
                                   const PgaOptions& opt, double discount,
                                   std::mt19937_64& rng) {
  const std::vector<int> clients = internal::AllClients(batch.n_clients);
  const Eigen::MatrixXd next =
      NextStateMeanField(batch, static_cast<int>(clients.size()), rng);
  CriticInputs ci{&critic, &next, discount};
  const PgaBatchResult r =
      PgaRegretBatch(p, batch, budget, clients, opt, rng, ci);
  return CriticResidualLoss(critic, CriticStates(batch, clients),
                            r.bellman_target);
}

namespace internal {

// Projected payment of `position` under K opponent sets drawn with
// replacement from `pool_bids` (rows of m bids), one row per draw.
template <typename T>
MatrixT<T> ResampledProfiles(const MatrixT<T>& agent_bids,
                             std::span<const int> positions,
                             const Eigen::MatrixXd& pool_bids, int n, int m,
                             int k, std::mt19937_64& rng) {
  std::uniform_int_distribution<Eigen::Index> pick(0, pool_bids.rows() - 1);
  const Eigen::Index agents = agent_bids.rows();
  MatrixT<T> rows(agents * k, n * m);
  for (Eigen::Index a = 0; a < agents; ++a) {
    for (int draw = 0; draw < k; ++draw) {
      const Eigen::Index r = a * k + draw;
      for (int i = 0; i < n; ++i) {
        if (i == positions[a]) {
          rows.row(r).segment(i * m, m) = agent_bids.row(a);
        } else {
          rows.row(r).segment(i * m, m) =
              pool_bids.row(pick(rng)).template cast<T>();
        }
      }
    }
  }
  return rows;
}

template <typename T>
Eigen::VectorXd MeanFieldPaymentsImpl(const BasicMechanismParams<T>& p,
                                      const Eigen::MatrixXd& agent_bids,
                                      std::span<const int> positions,
                                      const Eigen::MatrixXd& pool_bids, int k,
                                      double budget, std::mt19937_64& rng) {
  const int n = p.n_clients_trained;
  const int m = p.n_items;
  BasicMechanismBatchInput<T> in;
  in.bids = ResampledProfiles<T>(agent_bids.template cast<T>(), positions,
                                 pool_bids, n, m, k, rng);
  in.epsilons = MatrixT<T>::Ones(in.bids.rows(), n * m);
  in.mean_field = MatrixT<T>::Zero(in.bids.rows(), m);
  for (int i = 0; i < n; ++i) in.mean_field += in.bids.middleCols(i * m, m);
  in.mean_field /= static_cast<T>(n);
  const auto f = ForwardBatch(p, in, budget);
  Eigen::VectorXd out(agent_bids.rows());
  for (Eigen::Index a = 0; a < agent_bids.rows(); ++a) {
    double total = 0.0;
    for (int draw = 0; draw < k; ++draw) {
      total += static_cast<double>(f.projected(a * k + draw, positions[a]));
    }
    out(a) = total / k;
  }
  return out;
}

// Every client's bid row of every profile, as a pool of opponents.
inline Eigen::MatrixXd PoolFromBatch(const ProfileBatch& batch) {
  const int m = batch.n_items;
  Eigen::MatrixXd pool(batch.size() * batch.n_clients, m);
  for (int l = 0; l < batch.size(); ++l) {
    for (int i = 0; i < batch.n_clients; ++i) {
      pool.row(l * batch.n_clients + i) = batch.bids.row(l).segment(i * m, m);
    }
  }
  return pool;
}

}  // namespace internal

// Expected projected payment to an agent bidding `bid` at `position` when
// its N-1 opponents are resampled K times from the pool's bid rows.
// Payments do not depend on declared epsilons, so none are needed.
inline double MeanFieldPayment(const MechanismParams& p,
                               const Eigen::VectorXd& bid,
                               const BidProfile& pool, int k, double budget,
                               std::mt19937_64& rng, int position = 0) {
  if (k < 1) throw std::invalid_argument("MeanFieldPayment: K must be >= 1");
  if (bid.size() != p.n_items || pool.n_items() != p.n_items) {
    throw std::invalid_argument("MeanFieldPayment: item count mismatch");
  }
  if (position < 0 || position >= p.n_clients_trained) {
    throw std::out_of_range("MeanFieldPayment: position out of range");
  }
  const int pos[1] = {position};
  return internal::MeanFieldPaymentsImpl<double>(p, bid.transpose(), pos,
                                                 pool.bids(), k, budget, rng)(0);
}

inline double Huber(double x, double delta) {
  const double a = std::abs(x);
  return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

inline double HuberDerivative(double x, double delta) {
  return std::clamp(x, -delta, delta);
}

// omega proportional to v^gamma, normalised to mean 1 over all entries.
inline Eigen::MatrixXd AlignmentWeights(const Eigen::MatrixXd& valuations,
                                        double exponent) {
  Eigen::MatrixXd w =
      valuations.unaryExpr([exponent](double v) { return std::pow(v, exponent); });
  const double mean = w.mean();
  if (!(mean > 0.0)) return Eigen::MatrixXd::Ones(w.rows(), w.cols());
  return w / mean;
}

struct AlignmentConfig {
  double huber_delta = 1.0;
  double moment_weight = 0.5;
  double scale_floor = 1e-6;
  double budget = 50.0;
};

struct AlignmentResult {
  double value = 0.0;
  double pointwise = 0.0;
  double moment = 0.0;
  Eigen::MatrixXd d_projected;  // gradient w.r.t. projected payments
};

// Weighted Huber on scaled residuals plus a squared budget-moment term.
// Targets are constants: no gradient is returned for them.
inline AlignmentResult AlignmentLoss(const Eigen::MatrixXd& projected,
                                     const Eigen::MatrixXd& targets,
                                     const Eigen::MatrixXd& weights,
                                     const Eigen::VectorXd& scales,
                                     const AlignmentConfig& cfg) {
  const Eigen::Index rows = projected.rows();
  const Eigen::Index n = projected.cols();
  if (targets.rows() != rows || targets.cols() != n ||
      weights.rows() != rows || weights.cols() != n || scales.size() != n) {
    throw std::invalid_argument("AlignmentLoss: shape mismatch");
  }
  if (rows == 0) throw std::invalid_argument("AlignmentLoss: empty batch");
  AlignmentResult r;
  r.d_projected.resize(rows, n);
  const double count = static_cast<double>(rows * n);
  for (Eigen::Index l = 0; l < rows; ++l) {
    double excess = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double denom = scales(i) + cfg.scale_floor;
      const double resid = projected(l, i) - targets(l, i);
      const double x = resid / denom;
      r.pointwise += weights(l, i) * Huber(x, cfg.huber_delta) / count;
      r.d_projected(l, i) =
          weights(l, i) * HuberDerivative(x, cfg.huber_delta) / denom / count;
      excess += resid;
    }
    const double z = excess / cfg.budget;
    r.moment += cfg.moment_weight * z * z / rows;
    r.d_projected.row(l).array() +=
        2.0 * cfg.moment_weight * z / cfg.budget / rows;
  }
  r.value = r.pointwise + r.moment;
  return r;
}

// Running per-client standard deviation of projected payments over the
// most recent `window` batches.
class PaymentScaleTracker {
 public:
  PaymentScaleTracker(int n_clients, int window)
      : n_(n_clients), window_(window) {}

  void Add(const Eigen::MatrixXd& projected) {
    Moments mo{static_cast<double>(projected.rows()),
               projected.colwise().sum().transpose(),
               projected.array().square().colwise().sum().transpose()};
    history_.push_back(std::move(mo));
    while (static_cast<int>(history_.size()) > window_) history_.pop_front();
  }

  Eigen::VectorXd Std() const {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(n_);
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(n_);
    double count = 0.0;
    for (const auto& h : history_) {
      count += h.count;
      sum += h.sum;
      sq += h.sumsq;
    }
    if (count < 2.0) return Eigen::VectorXd::Zero(n_);
    const Eigen::VectorXd mean = sum / count;
    return ((sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0) * count /
            (count - 1.0))
        .cwiseSqrt();
  }

  int batches() const { return static_cast<int>(history_.size()); }

 private:
  struct Moments {
    double count;
    Eigen::VectorXd sum;
    Eigen::VectorXd sumsq;
  };
  int n_;
  int window_;
  std::deque<Moments> history_;
};

// Batch mean of sum_i max(0, v_i * eps_out_i - p_bar_i).
inline double IrHinge(const Eigen::MatrixXd& projected,
                      const Eigen::MatrixXd& epsilon_out,
                      const Eigen::MatrixXd& valuations) {
  if (projected.rows() == 0) return 0.0;
  return (valuations.cwiseProduct(epsilon_out) - projected)
             .cwiseMax(0.0)
             .sum() /
         static_cast<double>(projected.rows());
}

struct TrainLogRow {
  int iteration = 0;
  double revenue = 0.0;
  double mean_regret = 0.0;
  double normalized_regret = 0.0;
  double ir_hinge = 0.0;
  double loss_total = 0.0;
  double loss_al = 0.0;
  double loss_mfg = 0.0;
  double loss_hjb = 0.0;
  double lambda_mean = 0.0;
  double rho = 0.0;
  double lambda_mfg = 0.0;
  double seconds = 0.0;
};

inline const char* TrainLogHeader() {
  return "iteration,revenue,mean_regret,normalized_regret,ir_hinge,"
         "loss_total,loss_al,loss_mfg,loss_hjb,lambda_mean,rho,lambda_mfg,"
         "seconds";
}

inline void WriteTrainLogRow(std::ostream& os, const TrainLogRow& r) {
  os << r.iteration << ',' << r.revenue << ',' << r.mean_regret << ','
     << r.normalized_regret << ',' << r.ir_hinge << ',' << r.loss_total << ','
     << r.loss_al << ',' << r.loss_mfg << ',' << r.loss_hjb << ','
     << r.lambda_mean << ',' << r.rho << ',' << r.lambda_mfg << ','
     << r.seconds << '\n';
}

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::string snapshot)
      : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
  const std::string& snapshot() const { return snapshot_; }

 private:
  std::string snapshot_;
};

struct StepStats {
  double revenue = 0.0;
  double mean_regret = 0.0;
  double truthful_abs_utility = 0.0;
  double ir_hinge = 0.0;
  double loss_al = 0.0;
  double loss_mfg = 0.0;
  double loss_hjb = 0.0;
  double loss_total = 0.0;
  Eigen::VectorXd client_regret;  // blended, per client; 0 if not sampled
  Eigen::VectorXd client_sampled; // 1 where estimated this step
};

struct TrainResult {
  MechanismParams params;
  LagrangianState lagrangian;
  std::vector<TrainLogRow> log;
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& config)
      : cfg_(config),
        rng_(DeriveSeed(config.seed, {0x747261696eULL})),
        scales_(config.n_clients, config.scale_window) {
    cfg_.Validate();
    TuneAllocator();
    std::mt19937_64 init(DeriveSeed(cfg_.seed, {0x696e6974ULL}));
    params_ = MakeMechanism(cfg_.n_clients, cfg_.n_items, cfg_.Arch(), init,
                            cfg_.zeta > 0.0);
    params_.use_mean_field = cfg_.use_mean_field;
    lagrangian_ = LagrangianState(cfg_.n_clients, cfg_.rho0);
    adam_ = AdamState(AdamConfig{cfg_.learning_rate});
    critic_adam_ = AdamState(AdamConfig{cfg_.learning_rate});
  }

  const TrainConfig& config() const { return cfg_; }
  const MechanismParams& params() const { return params_; }
  MechanismParams& mutable_params() { return params_; }
  const LagrangianState& lagrangian() const { return lagrangian_; }

  // Linear anneal from start (first iteration) to end (last iteration).
  double LambdaMfgAt(int outer) const {
    if (cfg_.outer_iters <= 1) return cfg_.lambda_mfg_end;
    const double t = static_cast<double>(outer) / (cfg_.outer_iters - 1);
    return cfg_.lambda_mfg_start + (cfg_.lambda_mfg_end - cfg_.lambda_mfg_start) * t;
  }

  StepStats InnerStep(int outer) {
    const int n = cfg_.n_clients;
    const int m = cfg_.n_items;
    const double budget = cfg_.budget;
    const double zeta = cfg_.zeta;
    const ProfileBatch batch =
        SampleProfileBatch(cfg_.scenario, n, m, cfg_.batch_size, rng_);
    const int L = batch.size();
    const std::vector<int> clients = SampleClients(cfg_.regret_clients);
    const int s = static_cast<int>(clients.size());

    const bool use_critic = params_.critic.has_value() && zeta > 0.0;
    Eigen::MatrixXd next_mf;
    CriticInputs ci;
    if (use_critic) {
      next_mf = NextStateMeanField(batch, s, rng_);
      ci = CriticInputs{&*params_.critic, &next_mf, cfg_.discount};
    }
    const PgaBatchResult pga = PgaRegretBatch(
        params_, batch, budget, clients, PgaOptions::FromConfig(cfg_), rng_, ci);

    // Rows: L truthful, then raw-gain argmax rows, then advantage rows.
    std::vector<int> raw_rows, vf_rows;
    for (int r = 0; r < pga.rows(); ++r) {
      if (zeta < 1.0 && pga.regret(r) > 0.0) raw_rows.push_back(r);
      if (use_critic && pga.regret_vf(r) > 0.0) vf_rows.push_back(r);
    }
    const int total_rows =
        L + static_cast<int>(raw_rows.size() + vf_rows.size());
    MechanismBatchInput in;
    in.bids.resize(total_rows, n * m);
    in.epsilons.resize(total_rows, n * m);
    in.mean_field.resize(total_rows, m);
    Eigen::VectorXd row_value(total_rows);
    std::vector<int> row_client(static_cast<size_t>(total_rows), -1);
    std::vector<int> row_profile(static_cast<size_t>(total_rows));
    const Eigen::MatrixXd mf = batch.MeanField();
    for (int l = 0; l < L; ++l) {
      in.bids.row(l) = batch.bids.row(l);
      in.epsilons.row(l) = batch.epsilons.row(l);
      in.mean_field.row(l) = mf.row(l);
      row_profile[l] = l;
    }
    auto place = [&](int dst, int src, const Eigen::MatrixXd& misreports) {
      const int l = src / s;
      const int i = clients[src % s];
      in.bids.row(dst) = batch.bids.row(l);
      in.epsilons.row(dst) = batch.epsilons.row(l);
      in.bids.row(dst).segment(i * m, m) = misreports.row(src);
      in.mean_field.row(dst) = mf.row(l);
      if (cfg_.couple_mean_field) {
        in.mean_field.row(dst) +=
            (misreports.row(src) - batch.bids.row(l).segment(i * m, m)) / n;
      }
      row_client[dst] = i;
      row_profile[dst] = l;
    };
    int next_row = L;
    for (int r : raw_rows) place(next_row++, r, pga.best_misreport);
    for (int r : vf_rows) place(next_row++, r, pga.best_misreport_vf);

    const MechanismBatchForward f = ForwardBatch(params_, in, budget);
    Eigen::MatrixXd d_proj = Eigen::MatrixXd::Zero(total_rows, n);
    Eigen::MatrixXd d_eps = Eigen::MatrixXd::Zero(total_rows, n);
    StepStats st;

    // Revenue and IR hinge on the truthful rows.
    st.ir_hinge = IrHinge(f.projected.topRows(L), f.epsilon_out.topRows(L),
                          batch.valuations);
    for (int l = 0; l < L; ++l) {
      for (int i = 0; i < n; ++i) {
        const double v = batch.valuations(l, i);
        st.revenue += f.projected(l, i) / L;
        d_proj(l, i) -= 1.0 / L;
        const double shortfall = v * f.epsilon_out(l, i) - f.projected(l, i);
        if (shortfall > 0.0) {
          d_proj(l, i) -= cfg_.ir_penalty / L;
          d_eps(l, i) += cfg_.ir_penalty * v / L;
        }
      }
    }

    // Augmented-Lagrangian regret terms over the sampled clients.
    st.client_regret = Eigen::VectorXd::Zero(n);
    st.client_sampled = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd blended = (1.0 - zeta) * pga.regret;
    if (use_critic) blended += zeta * pga.regret_vf;
    const double client_scale = static_cast<double>(n) / s;
    double regret_penalty = 0.0;
    Eigen::VectorXd coeff = Eigen::VectorXd::Zero(n);
    for (int k = 0; k < s; ++k) {
      const int i = clients[k];
      double mean = 0.0;
      for (int l = 0; l < L; ++l) mean += blended(l * s + k) / L;
      st.client_regret(i) = mean;
      st.client_sampled(i) = 1.0;
      regret_penalty += client_scale * (lagrangian_.multipliers(i) * mean +
                                        0.5 * lagrangian_.rho * mean * mean);
      coeff(i) = client_scale *
                 (lagrangian_.multipliers(i) + lagrangian_.rho * mean) / L;
    }
    auto add_utility_grad = [&](int row, int i, double w) {
      const double v = batch.valuations(row_profile[row], i);
      d_proj(row, i) += w;
      d_eps(row, i) -= v * w;
    };
    next_row = L;
    for (int r : raw_rows) {
      const int i = clients[r % s];
      const double w = (1.0 - zeta) * coeff(i);
      add_utility_grad(next_row++, i, w);
      add_utility_grad(r / s, i, -w);
    }
    for (int r : vf_rows) {
      const int i = clients[r % s];
      const double w = zeta * coeff(i);
      add_utility_grad(next_row++, i, w);
      add_utility_grad(r / s, i, -w);
    }
    st.loss_al = -st.revenue + cfg_.ir_penalty * st.ir_hinge + regret_penalty;
    st.mean_regret = pga.regret.mean();
    st.truthful_abs_utility = pga.truthful_utility.cwiseAbs().mean();

    // Mean-field payment alignment on a subset of truthful rows.
    const Eigen::MatrixXd truthful_proj = f.projected.topRows(L);
    scales_.Add(truthful_proj);
    const double lambda_mfg = LambdaMfgAt(outer);
    if (lambda_mfg > 0.0 && cfg_.mf_target_profiles > 0) {
      st.loss_mfg = AddAlignment(batch, truthful_proj, lambda_mfg, d_proj);
    }

    MechanismGradients g = BackwardBatch(params_, in, f, d_proj, d_eps, true);

    // Critic: semi-gradient fit to the Bellman targets from the same search.
    Gradients critic_grads;
    if (use_critic) {
      const CriticLossResult cl = CriticResidualLoss(
          *params_.critic, CriticStates(batch, clients), pga.bellman_target);
      st.loss_hjb = cl.value;
      critic_grads = cl.grads;
      critic_grads *= cfg_.lambda_hjb;
    }

    st.loss_total = st.loss_al + lambda_mfg * st.loss_mfg +
                    cfg_.lambda_hjb * st.loss_hjb;
    if (!std::isfinite(st.loss_total) || !g.AllFinite() ||
        (use_critic && !critic_grads.AllFinite())) {
      throw TrainingDiverged(
          "training diverged at outer iteration " + std::to_string(outer) +
              " (non-finite loss or gradient)",
          Snapshot(outer, st));
    }

    auto params = AllParameterSpans();
    std::vector<std::span<const double>> grads;
    for (const auto* gr : {&g.header, &g.alloc, &g.pay}) {
      for (auto sp : gr->Spans()) grads.push_back(sp);
    }
    adam_.Step(params, grads);
    if (use_critic) AdamStep(critic_adam_, *params_.critic, critic_grads);
    return st;
  }

  TrainLogRow OuterIteration(int outer) {
    Stopwatch clock;
    const int n = cfg_.n_clients;
    Eigen::VectorXd regret_sum = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd regret_count = Eigen::VectorXd::Zero(n);
    TrainLogRow row;
    row.iteration = outer;
    row.rho = lagrangian_.rho;
    row.lambda_mfg = LambdaMfgAt(outer);
    double abs_utility = 0.0;
    for (int k = 0; k < cfg_.inner_steps; ++k) {
      const StepStats st = InnerStep(outer);
      regret_sum += st.client_regret;
      regret_count += st.client_sampled;
      row.revenue += st.revenue / cfg_.inner_steps;
      row.mean_regret += st.mean_regret / cfg_.inner_steps;
      abs_utility += st.truthful_abs_utility / cfg_.inner_steps;
      row.ir_hinge += st.ir_hinge / cfg_.inner_steps;
      row.loss_al += st.loss_al / cfg_.inner_steps;
      row.loss_mfg += st.loss_mfg / cfg_.inner_steps;
      row.loss_hjb += st.loss_hjb / cfg_.inner_steps;
      row.loss_total += st.loss_total / cfg_.inner_steps;
    }
    row.normalized_regret = row.mean_regret / std::max(abs_utility, 1e-9);
    Eigen::VectorXd mean_regret = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) {
      if (regret_count(i) > 0) mean_regret(i) = regret_sum(i) / regret_count(i);
    }
    lagrangian_.DualAscent(mean_regret);
    if ((outer + 1) % cfg_.rho_growth_every == 0) {
      lagrangian_.GrowPenalty(cfg_.rho_growth, cfg_.rho_max);
    }
    row.lambda_mean = lagrangian_.multipliers.mean();
    row.seconds = clock.Seconds();
    return row;
  }

  TrainResult Run(const std::function<void(const TrainLogRow&)>& on_row = {}) {
    TrainResult result;
    for (int t = 0; t < cfg_.outer_iters; ++t) {
      result.log.push_back(OuterIteration(t));
      if (on_row) on_row(result.log.back());
    }
    result.params = params_;
    result.lagrangian = lagrangian_;
    return result;
  }

 private:
  std::vector<int> SampleClients(int count) {
    std::vector<int> all = internal::AllClients(cfg_.n_clients);
    if (count <= 0 || count >= cfg_.n_clients) return all;
    std::shuffle(all.begin(), all.end(), rng_);
    all.resize(static_cast<size_t>(count));
    std::sort(all.begin(), all.end());
    return all;
  }

  std::vector<std::span<double>> AllParameterSpans() {
    std::vector<std::span<double>> spans;
    for (Mlp* net : {&params_.header, &params_.alloc_head, &params_.pay_head}) {
      for (auto sp : net->ParameterSpans()) spans.push_back(sp);
    }
    return spans;
  }

  double AddAlignment(const ProfileBatch& batch,
                      const Eigen::MatrixXd& truthful_proj, double lambda_mfg,
                      Eigen::MatrixXd& d_proj) {
    const int n = cfg_.n_clients;
    const int m = cfg_.n_items;
    const int P = std::min(cfg_.mf_target_profiles, batch.size());
    const std::vector<int> targeted = SampleClients(cfg_.mf_target_clients);
    const int c = static_cast<int>(targeted.size());
    Eigen::MatrixXd agents(P * c, m);
    std::vector<int> positions(static_cast<size_t>(P * c));
    for (int l = 0; l < P; ++l) {
      for (int k = 0; k < c; ++k) {
        agents.row(l * c + k) = batch.bids.row(l).segment(targeted[k] * m, m);
        positions[l * c + k] = targeted[k];
      }
    }
    const Eigen::MatrixXd pool = internal::PoolFromBatch(batch);
    Eigen::VectorXd flat_targets;
    if (cfg_.reduced_precision_search) {
      flat_targets = internal::MeanFieldPaymentsImpl<float>(
          params_.Cast<float>(), agents, positions, pool, cfg_.mc_opponents,
          cfg_.budget, rng_);
    } else {
      flat_targets = internal::MeanFieldPaymentsImpl<double>(
          params_, agents, positions, pool, cfg_.mc_opponents, cfg_.budget,
          rng_);
    }
    Eigen::MatrixXd proj(P, c), targets(P, c), vals(P, c);
    Eigen::VectorXd scales(c);
    const Eigen::VectorXd all_scales = scales_.Std();
    for (int k = 0; k < c; ++k) scales(k) = all_scales(targeted[k]);
    for (int l = 0; l < P; ++l) {
      for (int k = 0; k < c; ++k) {
        proj(l, k) = truthful_proj(l, targeted[k]);
        targets(l, k) = flat_targets(l * c + k);
        vals(l, k) = batch.valuations(l, targeted[k]);
      }
    }
    AlignmentConfig ac;
    ac.huber_delta = cfg_.huber_delta;
    ac.moment_weight = cfg_.moment_weight;
    ac.budget = cfg_.budget;
    const AlignmentResult ar = AlignmentLoss(
        proj, targets, AlignmentWeights(vals, cfg_.weight_exponent), scales, ac);
    for (int l = 0; l < P; ++l) {
      for (int k = 0; k < c; ++k) {
        d_proj(l, targeted[k]) += lambda_mfg * ar.d_projected(l, k);
      }
    }
    (void)n;
    return ar.value;
  }

  std::string Snapshot(int outer, const StepStats& st) const {
    std::ostringstream os;
    os << "outer=" << outer << " revenue=" << st.revenue
       << " mean_regret=" << st.mean_regret << " ir_hinge=" << st.ir_hinge
       << " loss_al=" << st.loss_al << " loss_mfg=" << st.loss_mfg
       << " loss_hjb=" << st.loss_hjb << " rho=" << lagrangian_.rho
       << " lambda_mean=" << lagrangian_.multipliers.mean()
       << " params_finite=" << (params_.header.AllFinite() &&
                                params_.alloc_head.AllFinite() &&
                                params_.pay_head.AllFinite());
    return os.str();
  }

  TrainConfig cfg_;
  std::mt19937_64 rng_;
  MechanismParams params_;
  LagrangianState lagrangian_;
  AdamState adam_;
  AdamState critic_adam_;
  PaymentScaleTracker scales_;
};

inline TrainResult Train(
    const TrainConfig& config,
    const std::function<void(const TrainLogRow&)>& on_row = {}) {
  Trainer trainer(config);
  return trainer.Run(on_row);
}

inline MechanismManifest ManifestFor(const TrainConfig& config) {
  MechanismManifest m;
  m.n_clients = config.n_clients;
  m.n_items = config.n_items;
  m.scenario = std::string(ScenarioName(config.scenario));
  m.config_hash = TrainConfigHash(config);
  m.version = VersionString();
  m.use_mean_field = config.use_mean_field;
  return m;
}

}  // namespace privmarket

#endif  // PRIVMARKET_TRAINER_H_
