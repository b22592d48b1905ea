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

// Experiment metrics: regret distributions, efficiency tables, runtime
// scaling and the empirical mean-field approximation error.

#ifndef PRIVMARKET_EVAL_H_
#define PRIVMARKET_EVAL_H_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "privmarket/classical.h"
#include "privmarket/market.h"
#include "privmarket/mechanism.h"
#include "privmarket/runtime.h"
#include "privmarket/trainer.h"

namespace privmarket {

inline constexpr double kNormalizationGuard = 1e-9;

struct RegretReport {
  Eigen::VectorXd per_client_regret;  // mean over samples, per client
  double mean = 0.0;
  double std = 0.0;
  double q25 = 0.0;
  double median = 0.0;
  double q75 = 0.0;
  double mean_abs_truthful_utility = 0.0;
  double normalized_mean = 0.0;
  double ir_violation_rate = 0.0;
  int samples = 0;
};

// Linear-interpolation quantile of an unsorted sample.
inline double Quantile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = q * (values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - lo) * (values[hi] - values[lo]);
}

inline double NormalizeRegret(double mean_regret, double mean_abs_utility) {
  return mean_regret / std::max(mean_abs_utility, kNormalizationGuard);
}

namespace internal {

// regrets and utilities are (sample, client) matrices.
inline RegretReport Summarize(const Eigen::MatrixXd& regret,
                              const Eigen::MatrixXd& truthful_utility,
                              int ir_violations) {
  RegretReport r;
  r.samples = static_cast<int>(regret.rows());
  r.per_client_regret = regret.colwise().mean().transpose();
  std::vector<double> all(regret.data(), regret.data() + regret.size());
  r.mean = regret.mean();
  double var = 0.0;
  for (double x : all) var += (x - r.mean) * (x - r.mean);
  r.std = all.size() > 1 ? std::sqrt(var / (all.size() - 1)) : 0.0;
  r.q25 = Quantile(all, 0.25);
  r.median = Quantile(all, 0.5);
  r.q75 = Quantile(all, 0.75);
  r.mean_abs_truthful_utility = truthful_utility.cwiseAbs().mean();
  r.normalized_mean = NormalizeRegret(r.mean, r.mean_abs_truthful_utility);
  r.ir_violation_rate =
      static_cast<double>(ir_violations) / static_cast<double>(regret.size());
  return r;
}

}  // namespace internal

// PGA regret of a learned mechanism on `n_samples` fresh profiles, with the
// same ascent configuration as training.
inline RegretReport EvaluateLearnedRegret(const MechanismParams& p,
                                          Scenario scenario, int n_samples,
                                          double budget, const PgaOptions& opt,
                                          uint64_t seed, int chunk = 64) {
  if (n_samples < 1) throw std::invalid_argument("need n_samples >= 1");
  TuneAllocator();
  const int n = p.n_clients_trained;
  std::mt19937_64 rng(DeriveSeed(seed, {0x6576616cULL}));
  Eigen::MatrixXd regret(n_samples, n), utility(n_samples, n);
  int ir = 0;
  for (int start = 0; start < n_samples; start += chunk) {
    const int len = std::min(chunk, n_samples - start);
    const ProfileBatch batch =
        SampleProfileBatch(scenario, n, p.n_items, len, rng);
    const PgaBatchResult r = PgaRegretBatch(p, batch, budget, {}, opt, rng);
    const MechanismBatchForward f = ForwardBatch(p, batch.Input(), budget);
    for (int l = 0; l < len; ++l) {
      for (int i = 0; i < n; ++i) {
        regret(start + l, i) = r.regret(l * n + i);
        utility(start + l, i) = r.truthful_utility(l * n + i);
        if (f.projected(l, i) < batch.valuations(l, i) * f.epsilon_out(l, i)) {
          ++ir;
        }
      }
    }
  }
  return internal::Summarize(regret, utility, ir);
}

// Exhaustive-deviation regret of any allocate function.
inline RegretReport EvaluateClassicalRegret(const AllocateFn& mechanism,
                                            Scenario scenario, int n_clients,
                                            int n_samples, double budget,
                                            const DeviationGrid& grid,
                                            uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("need n_samples >= 1");
  Eigen::MatrixXd regret(n_samples, n_clients), utility(n_samples, n_clients);
  int ir = 0;
  for (int s = 0; s < n_samples; ++s) {
    const auto types =
        SampleTypes(scenario, n_clients, DeriveSeed(seed, {uint64_t(s)}));
    const auto reg = BruteForceRegret(mechanism, types, budget, grid);
    const AuctionOutcome o = mechanism(types, budget);
    for (int i = 0; i < n_clients; ++i) {
      regret(s, i) = reg[i];
      utility(s, i) =
          ClientUtility(o.payments(i), types[i].valuation, o.epsilon_out(i));
      if (o.payments(i) < PrivacyCost(types[i].valuation, o.epsilon_out(i))) {
        ++ir;
      }
    }
  }
  return internal::Summarize(regret, utility, ir);
}

struct NamedMechanism {
  std::string name;
  AllocateFn allocate;
};

// Raw per-instance measurements of one mechanism.
struct EfficiencyLog {
  std::string name;
  std::vector<double> revenue;
  std::vector<double> budget_ratio;
  std::vector<double> welfare;
};

struct EfficiencyRow {
  std::string name;
  double revenue_mean = 0.0;
  double revenue_std = 0.0;
  double bf_mean = 0.0;
  double bf_max = 0.0;
  double n_rev = 0.0;
  double welfare_mean = 0.0;
  double welfare_std = 0.0;
  double w_prime = 0.0;
  int instances = 0;
};

inline double Mean(std::span<const double> x) {
  if (x.empty()) return 0.0;
  return std::accumulate(x.begin(), x.end(), 0.0) / x.size();
}

inline double SampleStd(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = Mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / (x.size() - 1));
}

// Runs every mechanism on the same instances. Budget feasibility is
// enforced, not just reported: any instance with BF > 1 throws.
inline std::vector<EfficiencyLog> CollectEfficiency(
    const std::vector<NamedMechanism>& mechanisms, Scenario scenario,
    int n_clients, double budget, int rounds, std::span<const uint64_t> seeds) {
  std::vector<EfficiencyLog> logs;
  for (const auto& mech : mechanisms) {
    EfficiencyLog log;
    log.name = mech.name;
    for (uint64_t seed : seeds) {
      for (int t = 0; t < rounds; ++t) {
        const auto types = SampleTypes(
            scenario, n_clients, DeriveSeed(seed, {0x726f756eULL, uint64_t(t)}));
        const AuctionOutcome o = mech.allocate(types, budget);
        const WelfareReport w = SocialWelfare(o, Valuations(types), budget);
        if (!(w.budget_ratio <= 1.0 + kBudgetTolerance)) {
          throw std::logic_error(mech.name + ": budget feasibility violated (BF=" +
                                 std::to_string(w.budget_ratio) + ")");
        }
        log.revenue.push_back(w.revenue);
        log.budget_ratio.push_back(w.budget_ratio);
        log.welfare.push_back(w.social_welfare);
      }
    }
    logs.push_back(std::move(log));
  }
  return logs;
}

// Derived columns come from the raw logs every time: n_rev divides by the
// largest mean revenue in the comparison, W' = SW / B.
inline std::vector<EfficiencyRow> SummarizeEfficiency(
    const std::vector<EfficiencyLog>& logs, double budget) {
  std::vector<EfficiencyRow> rows;
  double r_max = 0.0;
  for (const auto& log : logs) {
    EfficiencyRow row;
    row.name = log.name;
    row.instances = static_cast<int>(log.revenue.size());
    row.revenue_mean = Mean(log.revenue);
    row.revenue_std = SampleStd(log.revenue);
    row.bf_mean = Mean(log.budget_ratio);
    row.bf_max = log.budget_ratio.empty()
                     ? 0.0
                     : *std::max_element(log.budget_ratio.begin(),
                                         log.budget_ratio.end());
    row.welfare_mean = Mean(log.welfare);
    row.welfare_std = SampleStd(log.welfare);
    row.w_prime = row.welfare_mean / budget;
    r_max = std::max(r_max, row.revenue_mean);
    rows.push_back(row);
  }
  for (auto& row : rows) row.n_rev = r_max > 0.0 ? row.revenue_mean / r_max : 0.0;
  return rows;
}

inline std::vector<EfficiencyRow> EfficiencyTable(
    const std::vector<NamedMechanism>& mechanisms, Scenario scenario,
    int n_clients, double budget, int rounds, std::span<const uint64_t> seeds) {
  return SummarizeEfficiency(
      CollectEfficiency(mechanisms, scenario, n_clients, budget, rounds, seeds),
      budget);
}

inline void WriteEfficiencyCsv(std::ostream& os,
                               const std::vector<EfficiencyRow>& rows) {
  os << "mechanism,revenue_mean,revenue_std,bf_mean,bf_max,n_rev,sw_mean,"
        "sw_std,w_prime,instances\n";
  for (const auto& r : rows) {
    os << r.name << ',' << r.revenue_mean << ',' << r.revenue_std << ','
       << r.bf_mean << ',' << r.bf_max << ',' << r.n_rev << ','
       << r.welfare_mean << ',' << r.welfare_std << ',' << r.w_prime << ','
       << r.instances << '\n';
  }
}

inline void WriteEfficiencyMarkdown(std::ostream& os,
                                    const std::vector<EfficiencyRow>& rows) {
  os << "| Mechanism | R (mean ± std) | BF | n_rev | W' |\n";
  os << "|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "| %s | %.4f ± %.4f | %.4f | %.4f | %.4f |\n",
                  r.name.c_str(), r.revenue_mean, r.revenue_std, r.bf_mean,
                  r.n_rev, r.w_prime);
    os << buf;
  }
}

// Least-squares slope of log(y) on log(x).
inline double LogLogSlope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("LogLogSlope: need >= 2 matching points");
  }
  std::vector<double> lx(x.size()), ly(y.size());
  for (size_t k = 0; k < x.size(); ++k) {
    if (!(x[k] > 0.0) || !(y[k] > 0.0)) {
      throw std::invalid_argument("LogLogSlope: values must be positive");
    }
    lx[k] = std::log(x[k]);
    ly[k] = std::log(y[k]);
  }
  const double mx = Mean(lx), my = Mean(ly);
  double sxy = 0.0, sxx = 0.0;
  for (size_t k = 0; k < lx.size(); ++k) {
    sxy += (lx[k] - mx) * (ly[k] - my);
    sxx += (lx[k] - mx) * (lx[k] - mx);
  }
  return sxy / sxx;
}

inline std::vector<double> Ranks(std::span<const double> v) {
  std::vector<size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (size_t k = 0; k < order.size();) {
    size_t j = k;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[k]]) ++j;
    const double avg = 0.5 * (k + j) + 1.0;
    for (size_t t = k; t <= j; ++t) rank[order[t]] = avg;
    k = j + 1;
  }
  return rank;
}

// Pearson correlation of average ranks.
inline double SpearmanCorrelation(std::span<const double> x,
                                  std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("Spearman: need >= 2 matching points");
  }
  const auto rx = Ranks(x), ry = Ranks(y);
  const double mx = Mean(rx), my = Mean(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t k = 0; k < rx.size(); ++k) {
    sxy += (rx[k] - mx) * (ry[k] - my);
    sxx += (rx[k] - mx) * (rx[k] - mx);
    syy += (ry[k] - my) * (ry[k] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// Median wall time of `reps` measurements. Each measurement repeats `fn`
// until at least `min_seconds` elapse and reports the per-call time.
inline double MedianSeconds(const std::function<void()>& fn, int reps,
                            double min_seconds = 0.01) {
  if (reps < 1) throw std::invalid_argument("MedianSeconds: reps must be >= 1");
  fn();  // warm-up
  std::vector<double> times;
  for (int r = 0; r < reps; ++r) {
    Stopwatch clock;
    int64_t calls = 0;
    do {
      fn();
      ++calls;
    } while (clock.Seconds() < min_seconds);
    times.push_back(clock.Seconds() / calls);
  }
  return Quantile(times, 0.5);
}

struct ScalingReport {
  std::string name;
  std::vector<int> sizes;
  std::vector<double> wall_times;
  double slope = 0.0;
  double peak_rss_mb = 0.0;
};

// `make_workload(N)` builds whatever state one size needs and returns the
// callable to time.
inline ScalingReport ScalingBenchmark(
    const std::string& name, const std::vector<int>& sizes, int reps,
    const std::function<std::function<void()>(int)>& make_workload,
    double min_seconds = 0.01) {
  for (size_t k = 1; k < sizes.size(); ++k) {
    if (sizes[k] <= sizes[k - 1]) {
      throw std::invalid_argument("ScalingBenchmark: sizes must increase");
    }
  }
  TuneAllocator();
  ScalingReport r;
  r.name = name;
  r.sizes = sizes;
  for (int n : sizes) {
    const auto work = make_workload(n);
    r.wall_times.push_back(MedianSeconds(work, reps, min_seconds));
  }
  std::vector<double> xs(sizes.begin(), sizes.end());
  r.slope = LogLogSlope(xs, r.wall_times);
  r.peak_rss_mb = PeakRssMb();
  return r;
}

// Number of distinct instances a timing workload cycles through. Re-running
// one fixed instance lets the branch predictor memorize data-dependent
// branches (sorting in particular), which makes small sizes look
// artificially fast and inflates the fitted slope.
inline int WorkloadPoolSize(int n) {
  return std::clamp(1000000 / std::max(n, 1), 4, 64);
}

// Workload: one learned-mechanism forward pass on a fresh N-client profile.
inline std::function<void()> LearnedForwardWorkload(int n, uint64_t seed,
                                                    const ArchConfig& arch = {}) {
  std::mt19937_64 rng(DeriveSeed(seed, {0x6677ULL, uint64_t(n)}));
  auto params = std::make_shared<MechanismParams>(
      MakeMechanism(n, 1, arch, rng));
  auto pool = std::make_shared<std::vector<BidProfile>>();
  for (int k = 0; k < WorkloadPoolSize(n); ++k) {
    pool->push_back(
        BidProfile::FromTypes(SampleTypes(Scenario::kUniform, n, rng())));
  }
  auto next = std::make_shared<size_t>(0);
  return [params, pool, next] {
    const ForwardResult r =
        MechanismForward(*params, (*pool)[(*next)++ % pool->size()], 50.0);
    (void)r;
  };
}

inline std::function<void()> PacWorkload(int n, uint64_t seed) {
  auto pool = std::make_shared<std::vector<std::vector<ClientType>>>();
  for (int k = 0; k < WorkloadPoolSize(n); ++k) {
    pool->push_back(SampleTypes(
        Scenario::kUniform, n,
        DeriveSeed(seed, {0x706163ULL, uint64_t(n), uint64_t(k)})));
  }
  auto next = std::make_shared<size_t>(0);
  return [pool, next] {
    const ClassicalOutcome o =
        PacAllocate((*pool)[(*next)++ % pool->size()], 50.0);
    (void)o;
  };
}

struct ApproxErrorSeries {
  std::vector<int> sizes;
  std::vector<double> eps_hat;                   // mean over seeds
  std::vector<std::vector<double>> per_seed;     // [size][seed]
  double slope = 0.0;
  double spearman = 0.0;
};

// eps_hat_N = (1/N) sum_i rgt_i: mean PGA regret per client.
inline double EmpiricalApproximationError(const MechanismParams& p,
                                          Scenario scenario, int n_samples,
                                          double budget, const PgaOptions& opt,
                                          uint64_t seed) {
  return EvaluateLearnedRegret(p, scenario, n_samples, budget, opt, seed).mean;
}

inline ApproxErrorSeries FitApproxSeries(
    const std::vector<int>& sizes,
    const std::vector<std::vector<double>>& per_seed) {
  if (sizes.size() < 2 || per_seed.size() != sizes.size()) {
    throw std::invalid_argument("approximation series needs >= 2 sizes");
  }
  ApproxErrorSeries s;
  s.sizes = sizes;
  s.per_seed = per_seed;
  for (const auto& v : per_seed) s.eps_hat.push_back(Mean(v));
  std::vector<double> xs(sizes.begin(), sizes.end());
  std::vector<double> ys;
  for (double e : s.eps_hat) ys.push_back(std::max(e, 1e-300));
  s.slope = LogLogSlope(xs, ys);
  s.spearman = SpearmanCorrelation(xs, s.eps_hat);
  return s;
}

// Trains one mechanism per (N, seed) from `base` and measures eps_hat_N.
inline ApproxErrorSeries ApproximationErrorVsN(
    const TrainConfig& base, const std::vector<int>& sizes,
    const std::vector<uint64_t>& seeds, int eval_samples,
    const std::function<void(int, uint64_t, double)>& on_point = {}) {
  std::vector<std::vector<double>> per_seed;
  for (int n : sizes) {
    std::vector<double> vals;
    for (uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.n_clients = n;
      cfg.seed = seed;
      if (cfg.regret_clients > n) cfg.regret_clients = 0;
      if (cfg.mf_target_clients > n) cfg.mf_target_clients = 0;
      const TrainResult tr = Train(cfg);
      const double e = EmpiricalApproximationError(
          tr.params, cfg.scenario, eval_samples, cfg.budget,
          PgaOptions::FromConfig(cfg), DeriveSeed(seed, {0x617070ULL}));
      if (on_point) on_point(n, seed, e);
      vals.push_back(e);
    }
    per_seed.push_back(std::move(vals));
  }
  return FitApproxSeries(sizes, per_seed);
}

inline void WriteApproxSeriesCsv(std::ostream& os, const ApproxErrorSeries& s) {
  os << "n,eps_hat";
  const size_t seeds = s.per_seed.empty() ? 0 : s.per_seed[0].size();
  for (size_t k = 0; k < seeds; ++k) os << ",seed" << k;
  os << '\n';
  for (size_t i = 0; i < s.sizes.size(); ++i) {
    os << s.sizes[i] << ',' << s.eps_hat[i];
    for (double v : s.per_seed[i]) os << ',' << v;
    os << '\n';
  }
  os << "# slope=" << s.slope << " spearman=" << s.spearman << '\n';
}

}  // namespace privmarket

#endif  // PRIVMARKET_EVAL_H_
