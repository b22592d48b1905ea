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

// Online federated learning with a privacy market in the loop. Each round
// the server runs an auction over the clients' reported types, winners
// train locally, clip their model delta to the sensitivity bound, add
// Gaussian noise calibrated to the privacy budget they sold, and the server
// averages the noisy deltas with weights proportional to that budget.
//
// The learning task is synthetic: a Gaussian mixture over class centroids,
// split across clients by Dirichlet-drawn label proportions, fitted by a
// linear softmax classifier.

#ifndef PRIVMARKET_FL_SIM_H_
#define PRIVMARKET_FL_SIM_H_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "privmarket/classical.h"
#include "privmarket/config.h"
#include "privmarket/market.h"
#include "privmarket/runtime.h"

namespace privmarket {

struct Dataset {
  Eigen::MatrixXd features;  // samples x feature_dim
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
};

struct TaskConfig {
  int feature_dim = 20;
  int n_classes = 4;
  int samples_per_client = 200;
  int test_samples = 2000;
  double dirichlet_alpha = 0.5;
  // Centroid coordinates are N(0, centroid_scale^2); features add N(0, 1).
  double centroid_scale = 1.0;
};

struct SyntheticTask {
  TaskConfig config;
  Eigen::MatrixXd centroids;  // n_classes x feature_dim
  std::vector<Dataset> clients;
  Dataset test;

  int feature_dim() const { return config.feature_dim; }
  int n_classes() const { return config.n_classes; }
  // Linear softmax classifier: weight (dim x classes) then bias.
  int num_parameters() const { return (feature_dim() + 1) * n_classes(); }
};

namespace internal {

inline std::vector<double> SampleDirichlet(int k, double alpha,
                                           std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(static_cast<size_t>(k));
  double total = 0.0;
  for (auto& x : p) {
    x = gamma(rng);
    total += x;
  }
  if (!(total > 0.0)) {
    std::fill(p.begin(), p.end(), 1.0 / k);
    return p;
  }
  for (auto& x : p) x /= total;
  return p;
}

inline Dataset SampleFromClasses(const Eigen::MatrixXd& centroids,
                                 std::span<const double> class_probs, int n,
                                 std::mt19937_64& rng) {
  std::discrete_distribution<int> pick(class_probs.begin(), class_probs.end());
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset d;
  d.features.resize(n, centroids.cols());
  d.labels.resize(static_cast<size_t>(n));
  for (int s = 0; s < n; ++s) {
    const int c = pick(rng);
    d.labels[s] = c;
    for (Eigen::Index f = 0; f < centroids.cols(); ++f) {
      d.features(s, f) = centroids(c, f) + noise(rng);
    }
  }
  return d;
}

}  // namespace internal

// Test data is drawn from the balanced mixture, independently of every
// client's training data.
inline SyntheticTask MakeSyntheticTask(int n_clients, const TaskConfig& cfg,
                                       uint64_t seed) {
  if (n_clients < 1 || cfg.feature_dim < 1 || cfg.n_classes < 2 ||
      cfg.samples_per_client < 0 || cfg.test_samples < 1 ||
      !(cfg.dirichlet_alpha > 0.0)) {
    throw std::invalid_argument("MakeSyntheticTask: invalid configuration");
  }
  std::mt19937_64 rng(DeriveSeed(seed, {0x7461736bULL}));
  SyntheticTask task;
  task.config = cfg;
  std::normal_distribution<double> centre(0.0, cfg.centroid_scale);
  task.centroids.resize(cfg.n_classes, cfg.feature_dim);
  for (Eigen::Index c = 0; c < task.centroids.rows(); ++c) {
    for (Eigen::Index f = 0; f < task.centroids.cols(); ++f) {
      task.centroids(c, f) = centre(rng);
    }
  }
  for (int i = 0; i < n_clients; ++i) {
    const auto probs =
        internal::SampleDirichlet(cfg.n_classes, cfg.dirichlet_alpha, rng);
    task.clients.push_back(internal::SampleFromClasses(
        task.centroids, probs, cfg.samples_per_client, rng));
  }
  const std::vector<double> uniform(static_cast<size_t>(cfg.n_classes),
                                    1.0 / cfg.n_classes);
  task.test = internal::SampleFromClasses(task.centroids, uniform,
                                          cfg.test_samples, rng);
  return task;
}

struct GlobalModel {
  Eigen::VectorXd params;
  int round = 0;
};

inline GlobalModel InitialModel(const SyntheticTask& task) {
  return {Eigen::VectorXd::Zero(task.num_parameters()), 0};
}

namespace internal {

inline Eigen::MatrixXd Logits(const SyntheticTask& task,
                              const Eigen::VectorXd& params,
                              const Eigen::MatrixXd& x) {
  const int d = task.feature_dim();
  const int k = task.n_classes();
  const Eigen::Map<const Eigen::MatrixXd> w(params.data(), d, k);
  const Eigen::Map<const Eigen::RowVectorXd> b(params.data() + d * k, k);
  Eigen::MatrixXd z = x * w;
  z.rowwise() += b;
  return z;
}

// Mean cross-entropy and its gradient on rows `idx` of `data`.
inline double CrossEntropyGrad(const SyntheticTask& task,
                               const Eigen::VectorXd& params,
                               const Dataset& data, std::span<const int> idx,
                               Eigen::VectorXd* grad) {
  const int d = task.feature_dim();
  const int k = task.n_classes();
  Eigen::MatrixXd x(idx.size(), d);
  for (size_t r = 0; r < idx.size(); ++r) x.row(r) = data.features.row(idx[r]);
  Eigen::MatrixXd z = Logits(task, params, x);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double mx = z.row(r).maxCoeff();
    z.row(r) = (z.row(r).array() - mx).exp();
    const double total = z.row(r).sum();
    z.row(r) /= total;
    loss -= std::log(std::max(z(r, data.labels[idx[r]]), 1e-300));
    z(r, data.labels[idx[r]]) -= 1.0;
  }
  const double n = static_cast<double>(idx.size());
  if (grad) {
    grad->resize(task.num_parameters());
    Eigen::Map<Eigen::MatrixXd> gw(grad->data(), d, k);
    Eigen::Map<Eigen::RowVectorXd> gb(grad->data() + d * k, k);
    gw = x.transpose() * z / n;
    gb = z.colwise().sum() / n;
  }
  return loss / n;
}

}  // namespace internal

inline double Accuracy(const SyntheticTask& task, const Eigen::VectorXd& params,
                       const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const Eigen::MatrixXd z = internal::Logits(task, params, data.features);
  int correct = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    Eigen::Index arg;
    z.row(r).maxCoeff(&arg);
    if (arg == data.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / data.size();
}

inline double DatasetLoss(const SyntheticTask& task,
                          const Eigen::VectorXd& params, const Dataset& data) {
  std::vector<int> idx(static_cast<size_t>(data.size()));
  std::iota(idx.begin(), idx.end(), 0);
  return internal::CrossEntropyGrad(task, params, data, idx, nullptr);
}

struct DpConfig {
  double sensitivity = 1.0;
  // 0 selects 1/N at run time.
  double delta = 0.0;
  double epsilon_floor = 0.05;
  bool disable_noise = false;

  double ResolvedDelta(int n_clients) const {
    return delta > 0.0 ? delta : 1.0 / n_clients;
  }
  void Validate() const {
    if (!(sensitivity > 0.0)) throw std::invalid_argument("DpConfig: sensitivity must be > 0");
    if (!(delta >= 0.0 && delta < 1.0)) throw std::invalid_argument("DpConfig: delta must lie in [0,1)");
    if (!(epsilon_floor > 0.0)) throw std::invalid_argument("DpConfig: epsilon_floor must be > 0");
  }
};

// sigma = sqrt(2 ln(1.25 / delta)) * sensitivity / max(eps, eps_min).
inline double GaussianSigma(double eps_out, double delta, double sensitivity,
                            double epsilon_floor) {
  if (!(delta > 0.0 && delta < 1.0)) {
    throw std::invalid_argument("GaussianSigma: delta must lie in (0,1)");
  }
  return std::sqrt(2.0 * std::log(1.25 / delta)) * sensitivity /
         std::max(eps_out, epsilon_floor);
}

inline double GaussianSigma(double eps_out, const DpConfig& dp, int n_clients) {
  dp.Validate();
  return GaussianSigma(eps_out, dp.ResolvedDelta(n_clients), dp.sensitivity,
                       dp.epsilon_floor);
}

struct LocalTrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double learning_rate = 0.1;
  double clip_norm = 1.0;
};

struct LocalUpdate {
  Eigen::VectorXd delta;  // clipped to clip_norm
  double raw_norm = 0.0;
  std::vector<double> epoch_loss;
};

inline Eigen::VectorXd ClipToNorm(const Eigen::VectorXd& v, double bound) {
  const double norm = v.norm();
  if (norm > bound && norm > 0.0) return v * (bound / norm);
  return v;
}

// Minibatch SGD from the global model; returns the clipped model delta.
inline LocalUpdate LocalTrain(const SyntheticTask& task,
                              const GlobalModel& model, const Dataset& data,
                              const LocalTrainConfig& cfg,
                              std::mt19937_64& rng) {
  if (data.size() == 0) {
    throw std::invalid_argument("LocalTrain: empty dataset");
  }
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.clip_norm > 0.0)) {
    throw std::invalid_argument("LocalTrain: invalid configuration");
  }
  Eigen::VectorXd w = model.params;
  std::vector<int> order(static_cast<size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  LocalUpdate out;
  Eigen::VectorXd grad;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch_size)) {
      const size_t len =
          std::min(order.size() - start, static_cast<size_t>(cfg.batch_size));
      internal::CrossEntropyGrad(
          task, w, data, std::span<const int>(order.data() + start, len), &grad);
      w -= cfg.learning_rate * grad;
    }
    out.epoch_loss.push_back(DatasetLoss(task, w, data));
  }
  const Eigen::VectorXd delta = w - model.params;
  out.raw_norm = delta.norm();
  out.delta = ClipToNorm(delta, cfg.clip_norm);
  return out;
}

inline Eigen::VectorXd PerturbUpdate(const Eigen::VectorXd& update,
                                     double sigma, std::mt19937_64& rng) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("PerturbUpdate: sigma < 0");
  if (sigma == 0.0) return update;
  std::normal_distribution<double> noise(0.0, sigma);
  Eigen::VectorXd out = update;
  for (Eigen::Index k = 0; k < out.size(); ++k) out(k) += noise(rng);
  return out;
}

// Convex combination with weights eps_out / sum(eps_out).
inline Eigen::VectorXd Aggregate(std::span<const Eigen::VectorXd> updates,
                                 std::span<const double> eps_out) {
  if (updates.empty() || updates.size() != eps_out.size()) {
    throw std::invalid_argument("Aggregate: need matching, non-empty inputs");
  }
  double total = 0.0;
  for (double e : eps_out) {
    if (e < 0.0) throw std::invalid_argument("Aggregate: negative weight");
    total += e;
  }
  if (!(total > 0.0)) throw std::invalid_argument("Aggregate: zero total weight");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(updates[0].size());
  for (size_t k = 0; k < updates.size(); ++k) {
    out += (eps_out[k] / total) * updates[k];
  }
  return out;
}

inline std::vector<double> AggregationWeights(std::span<const double> eps_out) {
  const double total = std::accumulate(eps_out.begin(), eps_out.end(), 0.0);
  std::vector<double> w(eps_out.size());
  for (size_t k = 0; k < w.size(); ++k) w[k] = eps_out[k] / total;
  return w;
}

// Every client wins every round at the same budget `eps`, paid nothing.
inline AllocateFn FixedEpsilonMechanism(double eps) {
  return [eps](std::span<const ClientType> types, double) {
    const auto n = static_cast<Eigen::Index>(types.size());
    AuctionOutcome o;
    o.allocation = Eigen::MatrixXd::Constant(n, 1, 1.0 / n);
    o.payments = Eigen::VectorXd::Zero(n);
    o.epsilon_out = Eigen::VectorXd::Constant(n, eps);
    o.winners = WinnersOf(o.allocation);
    return o;
  };
}

struct RoundRecord {
  int round = 0;
  double revenue = 0.0;
  double budget_ratio = 0.0;
  double social_welfare = 0.0;
  double mean_regret = std::numeric_limits<double>::quiet_NaN();
  double accuracy = 0.0;
  double mean_eps_out = 0.0;
  double cum_eps_max = 0.0;
  int winners = 0;
};

struct FlConfig {
  int rounds = 200;
  double budget = 50.0;
  Scenario scenario = Scenario::kUniform;
  int final_k = 5;
  DpConfig dp;
  LocalTrainConfig local;
};

struct FlResult {
  std::vector<RoundRecord> records;
  double final_accuracy = 0.0;  // mean over the last final_k rounds
  Eigen::VectorXd cumulative_epsilon;
  int skipped_rounds = 0;
};

inline double FinalAccuracy(std::span<const RoundRecord> records, int k) {
  if (records.empty() || k < 1) return 0.0;
  const size_t take = std::min(records.size(), static_cast<size_t>(k));
  double total = 0.0;
  for (size_t r = records.size() - take; r < records.size(); ++r) {
    total += records[r].accuracy;
  }
  return total / take;
}

// Optional per-round regret probe; receives the round's reported types.
using RegretProbe = std::function<double(std::span<const ClientType>, double)>;

inline FlResult RunFl(const AllocateFn& mechanism, const SyntheticTask& task,
                      const FlConfig& cfg, uint64_t seed,
                      const RegretProbe& probe = {},
                      std::ostream* log = nullptr) {
  if (cfg.rounds < 0) throw std::invalid_argument("RunFl: rounds must be >= 0");
  cfg.dp.Validate();
  const int n = static_cast<int>(task.clients.size());
  GlobalModel model = InitialModel(task);
  FlResult res;
  res.cumulative_epsilon = Eigen::VectorXd::Zero(n);
  LocalTrainConfig local = cfg.local;
  local.clip_norm = cfg.dp.sensitivity;
  const double delta = cfg.dp.ResolvedDelta(n);

  for (int t = 0; t < cfg.rounds; ++t) {
    const auto types =
        SampleTypes(cfg.scenario, n, DeriveSeed(seed, {0x626964ULL, uint64_t(t)}));
    const AuctionOutcome outcome = mechanism(types, cfg.budget);
    if (outcome.n_clients() != n) {
      throw std::invalid_argument("RunFl: mechanism returned wrong client count");
    }
    const WelfareReport welfare =
        SocialWelfare(outcome, Valuations(types), cfg.budget);

    std::vector<Eigen::VectorXd> updates;
    std::vector<double> weights;
    for (int i = 0; i < n; ++i) {
      const double eps = outcome.epsilon_out(i);
      if (!(eps > 0.0) || outcome.allocation.row(i).sum() <= 0.0) continue;
      if (task.clients[i].size() == 0) {
        if (log) *log << "round " << t << ": client " << i
                      << " has no data, skipped\n";
        continue;
      }
      std::mt19937_64 rng(DeriveSeed(seed, {0x636c69ULL, uint64_t(t), uint64_t(i)}));
      const LocalUpdate up = LocalTrain(task, model, task.clients[i], local, rng);
      const double sigma =
          cfg.dp.disable_noise
              ? 0.0
              : GaussianSigma(eps, delta, cfg.dp.sensitivity,
                              cfg.dp.epsilon_floor);
      updates.push_back(PerturbUpdate(up.delta, sigma, rng));
      weights.push_back(eps);
      res.cumulative_epsilon(i) += eps;
    }
    if (updates.empty()) {
      ++res.skipped_rounds;
      if (log) *log << "round " << t << ": empty winner set, model unchanged\n";
    } else {
      model.params += Aggregate(updates, weights);
    }
    model.round = t + 1;

    RoundRecord rec;
    rec.round = t;
    rec.revenue = welfare.revenue;
    rec.budget_ratio = welfare.budget_ratio;
    rec.social_welfare = welfare.social_welfare;
    if (probe) rec.mean_regret = probe(types, cfg.budget);
    rec.accuracy = Accuracy(task, model.params, task.test);
    rec.mean_eps_out = outcome.epsilon_out.mean();
    rec.cum_eps_max = res.cumulative_epsilon.maxCoeff();
    rec.winners = static_cast<int>(updates.size());
    res.records.push_back(rec);
  }
  res.final_accuracy = FinalAccuracy(res.records, cfg.final_k);
  return res;
}

inline const char* RoundRecordHeader() {
  return "round,revenue,BF,SW,mean_regret,accuracy,mean_eps_out,cum_eps_max";
}

inline void WriteRoundRecord(std::ostream& os, const RoundRecord& r) {
  os << r.round << ',' << r.revenue << ',' << r.budget_ratio << ','
     << r.social_welfare << ',';
  if (std::isnan(r.mean_regret)) {
    os << "nan";
  } else {
    os << r.mean_regret;
  }
  os << ',' << r.accuracy << ',' << r.mean_eps_out << ',' << r.cum_eps_max
     << '\n';
}

}  // namespace privmarket

#endif  // PRIVMARKET_FL_SIM_H_
