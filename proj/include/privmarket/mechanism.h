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

// The learned auction: a header network encodes the bid profile augmented
// with its mean-field row into a shared context; an allocation head turns
// the context into column-stochastic shares and a payment head into payment
// fractions. Scalar payments are projected onto the buyer's budget.
//
// Batches hold one bid profile per row, flattened client-major: column
// i * m + j is client i, item j.

#ifndef PRIVMARKET_MECHANISM_H_
#define PRIVMARKET_MECHANISM_H_

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "privmarket/classical.h"
#include "privmarket/diffnet.h"
#include "privmarket/market.h"

namespace privmarket {

struct ArchConfig {
  std::vector<int> header_hidden = {128, 128, 128};
  std::vector<int> head_hidden = {128};
  std::vector<int> critic_hidden = {64, 64};
};

template <typename T>
struct BasicMechanismParams {
  BasicMlp<T> header;      // (N+1)m -> N m context
  BasicMlp<T> alloc_head;  // N m -> N m allocation logits
  BasicMlp<T> pay_head;    // N m -> N m payment logits
  std::optional<BasicMlp<T>> critic;  // (own bid, mean-field bid) -> value
  int n_clients_trained = 0;
  int n_items = 1;
  // When false the mean-field row is zeroed (vanilla RegretNet ablation).
  bool use_mean_field = true;

  int64_t num_parameters() const {
    return header.num_parameters() + alloc_head.num_parameters() +
           pay_head.num_parameters();
  }

  // Mechanism networks converted to `U`; the critic is not copied.
  template <typename U>
  BasicMechanismParams<U> Cast() const {
    BasicMechanismParams<U> out;
    out.header = header.template Cast<U>();
    out.alloc_head = alloc_head.template Cast<U>();
    out.pay_head = pay_head.template Cast<U>();
    out.n_clients_trained = n_clients_trained;
    out.n_items = n_items;
    out.use_mean_field = use_mean_field;
    return out;
  }
};

using MechanismParams = BasicMechanismParams<double>;

inline std::vector<int> ConcatDims(int in, const std::vector<int>& hidden,
                                   int out) {
  std::vector<int> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

template <typename Rng>
MechanismParams MakeMechanism(int n_clients, int n_items,
                              const ArchConfig& arch, Rng& rng,
                              bool with_critic = false) {
  if (n_clients < 1 || n_items < 1) {
    throw std::invalid_argument("MakeMechanism: need N >= 1 and m >= 1");
  }
  const int flat = n_clients * n_items;
  MechanismParams p;
  p.n_clients_trained = n_clients;
  p.n_items = n_items;
  p.header = Mlp::Glorot(ConcatDims((n_clients + 1) * n_items,
                                    arch.header_hidden, flat),
                         Activation::kIdentity, rng);
  p.alloc_head = Mlp::Glorot(ConcatDims(flat, arch.head_hidden, flat),
                             Activation::kIdentity, rng);
  p.pay_head = Mlp::Glorot(ConcatDims(flat, arch.head_hidden, flat),
                           Activation::kIdentity, rng);
  if (with_critic) {
    p.critic = Mlp::Glorot(ConcatDims(2 * n_items, arch.critic_hidden, 1),
                           Activation::kIdentity, rng);
  }
  return p;
}

// Counts every double-precision profile evaluation and any breach of the
// hard feasibility invariants (budget after projection, column-stochastic
// allocation). Reduced-precision evaluations used inside the misreport
// search are not counted; their outcomes are never reported. Rows with
// non-finite outputs come from diverged parameters and are tallied apart.
struct FeasibilityStats {
  std::atomic<int64_t> evaluations{0};
  std::atomic<int64_t> budget_violations{0};
  std::atomic<int64_t> column_violations{0};
  std::atomic<int64_t> nonfinite_evaluations{0};
};

inline FeasibilityStats& GlobalFeasibilityStats() {
  static FeasibilityStats stats;
  return stats;
}

inline constexpr double kBudgetTolerance = 1e-9;
inline constexpr double kColumnTolerance = 1e-12;

template <typename T>
struct BasicMechanismBatchInput {
  MatrixT<T> bids;        // rows x N m
  MatrixT<T> mean_field;  // rows x m
  MatrixT<T> epsilons;    // rows x N m
};

template <typename T>
struct BasicMechanismBatchForward {
  BasicMlpOutput<T> header;
  BasicMlpOutput<T> alloc;
  BasicMlpOutput<T> pay;
  MatrixT<T> allocation;    // rows x N m
  MatrixT<T> pay_fraction;  // rows x N m
  MatrixT<T> raw_payments;  // rows x N
  MatrixT<T> projected;     // rows x N
  MatrixT<T> epsilon_out;   // rows x N
  VectorT<T> raw_total;     // rows
  T budget = T(0);
};

template <typename T>
struct BasicMechanismGradients {
  BasicGradients<T> header;
  BasicGradients<T> alloc;
  BasicGradients<T> pay;
  MatrixT<T> bids;        // d/d bids, direct and through the header
  MatrixT<T> mean_field;  // d/d mean-field row (zero when unused)

  BasicMechanismGradients& operator+=(const BasicMechanismGradients& o) {
    header += o.header;
    alloc += o.alloc;
    pay += o.pay;
    return *this;
  }

  bool AllFinite() const {
    return header.AllFinite() && alloc.AllFinite() && pay.AllFinite();
  }
};

using MechanismBatchInput = BasicMechanismBatchInput<double>;
using MechanismBatchForward = BasicMechanismBatchForward<double>;
using MechanismGradients = BasicMechanismGradients<double>;

namespace internal {

template <typename T>
void CheckBatchShapes(const BasicMechanismParams<T>& p,
                      const BasicMechanismBatchInput<T>& in) {
  const int flat = p.n_clients_trained * p.n_items;
  if (in.bids.cols() != flat || in.epsilons.cols() != flat ||
      in.epsilons.rows() != in.bids.rows() ||
      in.mean_field.cols() != p.n_items ||
      in.mean_field.rows() != in.bids.rows()) {
    throw std::invalid_argument(
        "mechanism: profile shape does not match the trained N=" +
        std::to_string(p.n_clients_trained) +
        ", m=" + std::to_string(p.n_items));
  }
}

template <typename T>
void RecordFeasibility(const BasicMechanismBatchForward<T>& f, int n, int m) {
  if constexpr (std::is_same_v<T, double>) {
    auto& stats = GlobalFeasibilityStats();
    int64_t budget_bad = 0, column_bad = 0, nonfinite = 0;
    for (Eigen::Index r = 0; r < f.projected.rows(); ++r) {
      if (!f.projected.row(r).allFinite() || !f.allocation.row(r).allFinite()) {
        ++nonfinite;
        continue;
      }
      if (!(f.projected.row(r).sum() <= f.budget + kBudgetTolerance)) {
        ++budget_bad;
      }
      for (int j = 0; j < m; ++j) {
        double col = 0.0;
        for (int i = 0; i < n; ++i) col += f.allocation(r, i * m + j);
        if (!(std::abs(col - 1.0) <= kColumnTolerance)) ++column_bad;
      }
    }
    stats.evaluations += f.projected.rows();
    if (budget_bad) stats.budget_violations += budget_bad;
    if (column_bad) stats.column_violations += column_bad;
    if (nonfinite) stats.nonfinite_evaluations += nonfinite;
  }
}

}  // namespace internal

template <typename T>
BasicMechanismBatchForward<T> ForwardBatch(
    const BasicMechanismParams<T>& p, const BasicMechanismBatchInput<T>& in,
    double budget) {
  internal::CheckBatchShapes(p, in);
  if (!(budget > 0.0)) throw std::invalid_argument("budget must be positive");
  const int n = p.n_clients_trained;
  const int m = p.n_items;
  const Eigen::Index rows = in.bids.rows();

  MatrixT<T> aug(rows, (n + 1) * m);
  aug.leftCols(n * m) = in.bids;
  if (p.use_mean_field) {
    aug.rightCols(m) = in.mean_field;
  } else {
    aug.rightCols(m).setZero();
  }

  BasicMechanismBatchForward<T> f;
  f.budget = static_cast<T>(budget);
  f.header = Forward(p.header, aug);
  f.alloc = Forward(p.alloc_head, f.header.output);
  f.pay = Forward(p.pay_head, f.header.output);

  f.allocation.resize(rows, n * m);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (int j = 0; j < m; ++j) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int i = 0; i < n; ++i) {
        mx = std::max(mx, f.alloc.output(r, i * m + j));
      }
      T total = T(0);
      for (int i = 0; i < n; ++i) {
        const T e = std::exp(f.alloc.output(r, i * m + j) - mx);
        f.allocation(r, i * m + j) = e;
        total += e;
      }
      for (int i = 0; i < n; ++i) f.allocation(r, i * m + j) /= total;
    }
  }
  f.pay_fraction = f.pay.output.unaryExpr([](T x) { return Sigmoid(x); });

  f.raw_payments.resize(rows, n);
  f.epsilon_out.resize(rows, n);
  for (int i = 0; i < n; ++i) {
    f.raw_payments.col(i) =
        (f.pay_fraction.middleCols(i * m, m).array() *
         in.bids.middleCols(i * m, m).array())
            .rowwise()
            .sum();
    f.epsilon_out.col(i) = (f.allocation.middleCols(i * m, m).array() *
                            in.epsilons.middleCols(i * m, m).array())
                               .rowwise()
                               .sum();
  }
  f.raw_total = f.raw_payments.rowwise().sum();
  f.projected.resize(rows, n);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T scale = std::max(T(1), f.raw_total(r) / f.budget);
    f.projected.row(r) = f.raw_payments.row(r) / scale;
  }
  internal::RecordFeasibility(f, n, m);
  return f;
}

// Reverse pass from dL/d(projected payment) and dL/d(effective epsilon).
template <typename T>
BasicMechanismGradients<T> BackwardBatch(
    const BasicMechanismParams<T>& p, const BasicMechanismBatchInput<T>& in,
    const BasicMechanismBatchForward<T>& f, const MatrixT<T>& d_projected,
    const MatrixT<T>& d_eps_out, bool param_grads = true) {
  const int n = p.n_clients_trained;
  const int m = p.n_items;
  const Eigen::Index rows = in.bids.rows();
  if (d_projected.rows() != rows || d_projected.cols() != n ||
      d_eps_out.rows() != rows || d_eps_out.cols() != n) {
    throw std::invalid_argument("BackwardBatch: upstream gradient shape");
  }

  // Budget projection p_bar = p / max(1, S / B).
  MatrixT<T> d_raw = d_projected;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T total = f.raw_total(r);
    if (total > f.budget) {
      const T scale = total / f.budget;
      const T inner = d_projected.row(r).dot(f.raw_payments.row(r)) / total;
      d_raw.row(r) = (d_projected.row(r).array() - inner) / scale;
    }
  }

  MatrixT<T> d_pay_logit(rows, n * m);
  MatrixT<T> d_alloc_logit(rows, n * m);
  BasicMechanismGradients<T> g;
  g.bids.resize(rows, n * m);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      const int c = i * m + j;
      const auto frac = f.pay_fraction.col(c).array();
      d_pay_logit.col(c) = (d_raw.col(i).array() * in.bids.col(c).array() *
                            frac * (T(1) - frac))
                               .matrix();
      g.bids.col(c) = (d_raw.col(i).array() * frac).matrix();
    }
  }
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (int j = 0; j < m; ++j) {
      T dot = T(0);
      for (int i = 0; i < n; ++i) {
        dot += f.allocation(r, i * m + j) * d_eps_out(r, i) *
               in.epsilons(r, i * m + j);
      }
      for (int i = 0; i < n; ++i) {
        const T dz = d_eps_out(r, i) * in.epsilons(r, i * m + j);
        d_alloc_logit(r, i * m + j) = f.allocation(r, i * m + j) * (dz - dot);
      }
    }
  }

  g.alloc = Backward(p.alloc_head, f.alloc.tape, d_alloc_logit, param_grads);
  g.pay = Backward(p.pay_head, f.pay.tape, d_pay_logit, param_grads);
  const MatrixT<T> d_context = g.alloc.input + g.pay.input;
  g.header = Backward(p.header, f.header.tape, d_context, param_grads);
  g.bids += g.header.input.leftCols(n * m);
  if (p.use_mean_field) {
    g.mean_field = g.header.input.rightCols(m);
  } else {
    g.mean_field = MatrixT<T>::Zero(rows, m);
  }
  return g;
}

inline MechanismBatchInput SingleProfileInput(const BidProfile& profile) {
  const int n = profile.n_clients();
  const int m = profile.n_items();
  MechanismBatchInput in;
  in.bids.resize(1, n * m);
  in.epsilons.resize(1, n * m);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      in.bids(0, i * m + j) = profile.bids()(i, j);
      in.epsilons(0, i * m + j) = profile.epsilons()(i, j);
    }
  }
  in.mean_field = profile.mean_field_bid().transpose();
  return in;
}

// Rows 1..N are the bids, row N+1 the mean-field bid.
inline Eigen::MatrixXd BuildAugmentedInput(const BidProfile& profile) {
  Eigen::MatrixXd a(profile.n_clients() + 1, profile.n_items());
  a.topRows(profile.n_clients()) = profile.bids();
  a.row(profile.n_clients()) = profile.mean_field_bid().transpose();
  return a;
}

struct ForwardResult {
  Eigen::MatrixXd context;       // N x m
  Eigen::MatrixXd allocation;    // N x m
  Eigen::MatrixXd pay_fractions; // N x m
  Eigen::VectorXd raw_payments;
  Eigen::VectorXd projected_payments;
  Eigen::VectorXd epsilon_out;
};

inline ForwardResult MechanismForward(const MechanismParams& p,
                                      const BidProfile& profile,
                                      double budget) {
  if (profile.n_clients() != p.n_clients_trained ||
      profile.n_items() != p.n_items) {
    throw std::invalid_argument(
        "MechanismForward: profile is " + std::to_string(profile.n_clients()) +
        "x" + std::to_string(profile.n_items()) + " but mechanism was trained for " +
        std::to_string(p.n_clients_trained) + "x" + std::to_string(p.n_items));
  }
  const int n = p.n_clients_trained;
  const int m = p.n_items;
  const MechanismBatchInput in = SingleProfileInput(profile);
  const MechanismBatchForward f = ForwardBatch(p, in, budget);
  ForwardResult r;
  r.context.resize(n, m);
  r.allocation.resize(n, m);
  r.pay_fractions.resize(n, m);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      r.context(i, j) = f.header.output(0, i * m + j);
      r.allocation(i, j) = f.allocation(0, i * m + j);
      r.pay_fractions(i, j) = f.pay_fraction(0, i * m + j);
    }
  }
  r.raw_payments = f.raw_payments.row(0).transpose();
  r.projected_payments = f.projected.row(0).transpose();
  r.epsilon_out = f.epsilon_out.row(0).transpose();
  return r;
}

inline AuctionOutcome ToOutcome(const ForwardResult& r) {
  AuctionOutcome o;
  o.allocation = r.allocation;
  o.payments = r.projected_payments;
  o.epsilon_out = r.epsilon_out;
  o.winners = WinnersOf(o.allocation);
  return o;
}

// Adapts a trained m = 1 mechanism to the allocate-function interface.
inline AllocateFn LearnedMechanism(const MechanismParams& p) {
  return [&p](std::span<const ClientType> types, double budget) {
    return ToOutcome(MechanismForward(p, BidProfile::FromTypes(types), budget));
  };
}

// u_i = p_bar_i - v * eps_out_i at the reported profile.
inline double ClientUtilityUnderMechanism(const MechanismParams& p,
                                          const BidProfile& profile,
                                          double budget, int i,
                                          double true_valuation) {
  if (i < 0 || i >= profile.n_clients()) {
    throw std::out_of_range("client index out of range");
  }
  const ForwardResult r = MechanismForward(p, profile, budget);
  return ClientUtility(r.projected_payments(i), true_valuation,
                       r.epsilon_out(i));
}

// d u_i / d b_i, where moving b_i also moves the mean-field row by 1/N.
inline Eigen::VectorXd ClientUtilityBidGradient(const MechanismParams& p,
                                                const BidProfile& profile,
                                                double budget, int i,
                                                double true_valuation) {
  const int n = p.n_clients_trained;
  const int m = p.n_items;
  const MechanismBatchInput in = SingleProfileInput(profile);
  const MechanismBatchForward f = ForwardBatch(p, in, budget);
  Eigen::MatrixXd dp = Eigen::MatrixXd::Zero(1, n);
  Eigen::MatrixXd de = Eigen::MatrixXd::Zero(1, n);
  dp(0, i) = 1.0;
  de(0, i) = -true_valuation;
  const MechanismGradients g = BackwardBatch(p, in, f, dp, de, false);
  Eigen::VectorXd grad(m);
  for (int j = 0; j < m; ++j) {
    grad(j) = g.bids(0, i * m + j) + g.mean_field(0, j) / n;
  }
  return grad;
}

inline Eigen::VectorXd CriticValues(const Mlp& critic,
                                    const Eigen::MatrixXd& own_bids,
                                    const Eigen::MatrixXd& mean_field) {
  Eigen::MatrixXd x(own_bids.rows(), own_bids.cols() + mean_field.cols());
  x << own_bids, mean_field;
  return Forward(critic, x).output.col(0);
}

// Mechanism checkpoint: a manifest of `key value` lines terminated by
// `end-manifest`, then each network in WriteMlp format introduced by a
// `[name]` line. Shape mismatches are detected from the manifest.
struct MechanismManifest {
  int n_clients = 0;
  int n_items = 1;
  std::string scenario = "uniform";
  std::string config_hash = "0";
  std::string version = "unknown";
  bool use_mean_field = true;
};

inline void WriteMechanism(std::ostream& os, const MechanismParams& p,
                           const MechanismManifest& manifest) {
  os << "privmarket-mechanism v1\n";
  os << "n_clients " << p.n_clients_trained << '\n';
  os << "n_items " << p.n_items << '\n';
  os << "scenario " << manifest.scenario << '\n';
  os << "config_hash " << manifest.config_hash << '\n';
  os << "version " << manifest.version << '\n';
  os << "use_mean_field " << (p.use_mean_field ? 1 : 0) << '\n';
  os << "has_critic " << (p.critic ? 1 : 0) << '\n';
  os << "end-manifest\n";
  os << "[header]\n";
  WriteMlp(os, p.header);
  os << "[alloc_head]\n";
  WriteMlp(os, p.alloc_head);
  os << "[pay_head]\n";
  WriteMlp(os, p.pay_head);
  if (p.critic) {
    os << "[critic]\n";
    WriteMlp(os, *p.critic);
  }
  os << "end\n";
}

struct LoadedMechanism {
  MechanismParams params;
  MechanismManifest manifest;
};

inline LoadedMechanism ReadMechanism(std::istream& is) {
  // Leading `#` lines carry provenance and are skipped.
  while ((is >> std::ws).peek() == '#') {
    std::string comment;
    std::getline(is, comment);
  }
  std::string tag, version;
  if (!(is >> tag >> version) || tag != "privmarket-mechanism" ||
      version != "v1") {
    throw std::runtime_error("checkpoint: bad header");
  }
  LoadedMechanism out;
  bool has_critic = false;
  std::string key;
  while (is >> key && key != "end-manifest") {
    std::string value;
    if (!(is >> value)) throw std::runtime_error("checkpoint: truncated manifest");
    if (key == "n_clients") {
      out.manifest.n_clients = std::stoi(value);
    } else if (key == "n_items") {
      out.manifest.n_items = std::stoi(value);
    } else if (key == "scenario") {
      out.manifest.scenario = value;
    } else if (key == "config_hash") {
      out.manifest.config_hash = value;
    } else if (key == "version") {
      out.manifest.version = value;
    } else if (key == "use_mean_field") {
      out.manifest.use_mean_field = value == "1";
    } else if (key == "has_critic") {
      has_critic = value == "1";
    } else {
      throw std::runtime_error("checkpoint: unknown manifest key '" + key + "'");
    }
  }
  if (key != "end-manifest") throw std::runtime_error("checkpoint: no manifest end");
  auto expect = [&](const char* name) {
    std::string line;
    if (!(is >> line) || line != name) {
      throw std::runtime_error(std::string("checkpoint: expected ") + name);
    }
  };
  MechanismParams& p = out.params;
  expect("[header]");
  p.header = ReadMlp(is);
  expect("[alloc_head]");
  p.alloc_head = ReadMlp(is);
  expect("[pay_head]");
  p.pay_head = ReadMlp(is);
  if (has_critic) {
    expect("[critic]");
    p.critic = ReadMlp(is);
  }
  expect("end");
  p.n_clients_trained = out.manifest.n_clients;
  p.n_items = out.manifest.n_items;
  p.use_mean_field = out.manifest.use_mean_field;
  const int n = p.n_clients_trained;
  const int m = p.n_items;
  if (n < 1 || m < 1 || p.header.input_dim() != (n + 1) * m ||
      p.header.output_dim() != n * m || p.alloc_head.input_dim() != n * m ||
      p.alloc_head.output_dim() != n * m || p.pay_head.input_dim() != n * m ||
      p.pay_head.output_dim() != n * m) {
    throw std::runtime_error("checkpoint: network shapes disagree with manifest");
  }
  return out;
}

// `comment` lines are written first, each prefixed with `# `.
inline void SaveMechanism(const std::string& path, const MechanismParams& p,
                          const MechanismManifest& manifest,
                          const std::string& comment = "") {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  std::istringstream lines(comment);
  for (std::string line; std::getline(lines, line);) os << "# " << line << '\n';
  WriteMechanism(os, p, manifest);
  if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

inline LoadedMechanism LoadMechanism(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  try {
    return ReadMechanism(is);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

}  // namespace privmarket

#endif  // PRIVMARKET_MECHANISM_H_
