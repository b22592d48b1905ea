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

// Experiment drivers behind the command-line tool. Each driver writes its
// artifacts under ExperimentConfig::out_dir; every CSV starts with `#` lines
// recording the version and the full resolved configuration.

#ifndef PRIVMARKET_EXPERIMENT_H_
#define PRIVMARKET_EXPERIMENT_H_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "privmarket/classical.h"
#include "privmarket/config.h"
#include "privmarket/eval.h"
#include "privmarket/fl_sim.h"
#include "privmarket/mechanism.h"
#include "privmarket/runtime.h"
#include "privmarket/trainer.h"

namespace privmarket {

// Bad flags, unknown keys, missing inputs. Maps to exit code 1.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  // Market size, budget, scenario and seed live here and are shared by
  // every subcommand.
  TrainConfig train;
  FlConfig fl;
  TaskConfig task;
  std::string mechanisms = "pac,vcg,mfgregretnet";
  std::string sizes = "10,50,100,200,500";
  // Empty selects seed, seed+1, seed+2.
  std::string seeds;
  int eval_samples = 256;
  int rounds = 100;
  int reps = 5;
  int grid_size = 200;
  std::string checkpoint;
  bool train_inline = false;
  std::string out_dir = ".";
  int jobs = 1;

  std::vector<uint64_t> SeedList() const {
    if (!seeds.empty()) return ParseList<uint64_t>("seeds", seeds);
    return {train.seed, train.seed + 1, train.seed + 2};
  }

  std::vector<int> SizeList() const {
    auto v = ParseList<int>("sizes", sizes);
    if (v.empty()) throw UsageError("sizes: need at least one size");
    return v;
  }

  FlConfig ResolvedFl() const {
    FlConfig f = fl;
    f.budget = train.budget;
    f.scenario = train.scenario;
    return f;
  }

  void Validate() const {
    train.Validate();
    fl.dp.Validate();
    auto require = [](bool ok, const char* what) {
      if (!ok) throw UsageError(std::string("config: ") + what);
    };
    require(eval_samples >= 1, "eval_samples must be >= 1");
    require(rounds >= 1, "rounds must be >= 1");
    require(reps >= 1, "reps must be >= 1");
    require(grid_size >= 2, "grid_size must be >= 2");
    require(jobs >= 1, "jobs must be >= 1");
    require(fl.rounds >= 0, "fl_rounds must be >= 0");
    require(fl.final_k >= 1, "final_k must be >= 1");
    require(!SeedList().empty(), "seeds must not be empty");
  }
};

inline std::vector<ConfigField> ExperimentConfigFields(ExperimentConfig& c) {
  std::vector<ConfigField> f = TrainConfigFields(c.train);
  const std::vector<ConfigField> extra = {
      StringField("mechanisms", &c.mechanisms,
                  "comma list: pac,vcg,mfgregretnet,fixed:<eps>,nodp"),
      StringField("sizes", &c.sizes, "comma list of market sizes"),
      StringField("seeds", &c.seeds, "comma list of seeds (empty = 3 from seed)"),
      IntField("eval_samples", &c.eval_samples, "profiles per regret estimate"),
      IntField("rounds", &c.rounds, "auction rounds per seed (efficiency)"),
      IntField("reps", &c.reps, "timing repetitions per size"),
      IntField("grid_size", &c.grid_size, "brute-force deviation grid points"),
      StringField("checkpoint", &c.checkpoint, "trained mechanism to load"),
      BoolField("train_inline", &c.train_inline,
                "train a mechanism when no checkpoint is given"),
      StringField("out_dir", &c.out_dir, "artifact directory"),
      IntField("jobs", &c.jobs, "worker threads over independent runs"),
      IntField("fl_rounds", &c.fl.rounds, "federated rounds (T)"),
      IntField("final_k", &c.fl.final_k, "rounds averaged into A_final"),
      DoubleField("dp_sensitivity", &c.fl.dp.sensitivity,
                  "update clip norm and Gaussian sensitivity"),
      DoubleField("dp_delta", &c.fl.dp.delta, "DP delta (0 = 1/N)"),
      DoubleField("dp_epsilon_floor", &c.fl.dp.epsilon_floor,
                  "smallest epsilon used for noise calibration"),
      BoolField("dp_disable_noise", &c.fl.dp.disable_noise,
                "skip Gaussian noise (no-DP reference)"),
      IntField("local_epochs", &c.fl.local.epochs, "local epochs per round"),
      IntField("local_batch", &c.fl.local.batch_size, "local minibatch size"),
      DoubleField("local_lr", &c.fl.local.learning_rate, "local learning rate"),
      IntField("task_feature_dim", &c.task.feature_dim, "synthetic feature dim"),
      IntField("task_classes", &c.task.n_classes, "synthetic classes"),
      IntField("task_samples", &c.task.samples_per_client,
               "training samples per client"),
      IntField("task_test_samples", &c.task.test_samples, "test samples"),
      DoubleField("task_alpha", &c.task.dirichlet_alpha,
                  "Dirichlet label-skew concentration"),
  };
  f.insert(f.end(), extra.begin(), extra.end());
  return f;
}

inline std::string FormatExperimentConfig(const ExperimentConfig& c,
                                          const std::string& prefix = "") {
  ExperimentConfig copy = c;
  return FormatConfig(ExperimentConfigFields(copy), prefix);
}

// `#` provenance block placed at the top of every artifact.
inline std::string ArtifactHeader(const std::string& command,
                                  const ExperimentConfig& c) {
  return "# privmarket " + std::string(VersionString()) + " " + command +
         "\n" + FormatExperimentConfig(c, "# ");
}

inline std::string OutPath(const ExperimentConfig& c, const std::string& name) {
  return (std::filesystem::path(c.out_dir) / name).string();
}

inline std::ofstream OpenArtifact(const ExperimentConfig& c,
                                  const std::string& name) {
  std::filesystem::create_directories(c.out_dir);
  const std::string path = OutPath(c, name);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

// ---------------------------------------------------------------- training

struct TrainRun {
  TrainResult result;
  std::string checkpoint_path;
  std::string checkpoint_hash;
};

inline std::string FileHash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return HashText(ss.str());
}

inline TrainRun RunTrain(const ExperimentConfig& c,
                         const std::function<void(const TrainLogRow&)>& on_row = {}) {
  c.Validate();
  auto log = OpenArtifact(c, "train_log.csv");
  log << ArtifactHeader("train", c) << TrainLogHeader() << '\n';
  TrainRun run;
  run.result = Train(c.train, [&](const TrainLogRow& row) {
    WriteTrainLogRow(log, row);
    log.flush();
    if (on_row) on_row(row);
  });
  run.checkpoint_path = OutPath(c, "mechanism.ckpt");
  SaveMechanism(run.checkpoint_path, run.result.params, ManifestFor(c.train),
                "privmarket " + std::string(VersionString()) + "\n" +
                    FormatTrainConfig(c.train));
  run.checkpoint_hash = FileHash(run.checkpoint_path);
  return run;
}

// Loads `checkpoint`, or trains inline when allowed. The mechanism must
// have been trained for the configured market size.
inline std::shared_ptr<MechanismParams> ObtainLearned(
    const ExperimentConfig& c, const std::function<void(const std::string&)>& note = {}) {
  std::shared_ptr<MechanismParams> p;
  if (!c.checkpoint.empty()) {
    p = std::make_shared<MechanismParams>(LoadMechanism(c.checkpoint).params);
  } else if (c.train_inline) {
    if (note) note("training mechanism inline (n_clients=" +
                   std::to_string(c.train.n_clients) + ")");
    p = std::make_shared<MechanismParams>(RunTrain(c).result.params);
  } else {
    throw UsageError(
        "mfgregretnet needs a trained mechanism: pass --checkpoint PATH or "
        "--train-inline");
  }
  if (p->n_clients_trained != c.train.n_clients) {
    throw std::runtime_error(
        "checkpoint " + c.checkpoint + " was trained for N=" +
        std::to_string(p->n_clients_trained) + ", but n_clients=" +
        std::to_string(c.train.n_clients));
  }
  return p;
}

// ---------------------------------------------------------------- mechanisms

struct ResolvedMechanism {
  std::string name;
  AllocateFn allocate;
  std::shared_ptr<MechanismParams> learned;  // set for the learned auction
  bool disable_noise = false;
};

inline bool IsLearnedName(const std::string& name) {
  return name == "mfgregretnet" || name == "learned";
}

// Resolves names in `c.mechanisms`; the learned mechanism is obtained once.
inline std::vector<ResolvedMechanism> ResolveMechanisms(
    const ExperimentConfig& c,
    const std::function<void(const std::string&)>& note = {}) {
  std::vector<ResolvedMechanism> out;
  std::shared_ptr<MechanismParams> learned;
  for (const std::string& name : SplitList(c.mechanisms)) {
    ResolvedMechanism m;
    m.name = name;
    if (name == "pac") {
      m.allocate = PacMechanism();
    } else if (name == "vcg") {
      m.allocate = VcgMechanism();
    } else if (IsLearnedName(name)) {
      if (!learned) learned = ObtainLearned(c, note);
      m.learned = learned;
      m.allocate = [learned](std::span<const ClientType> t, double b) {
        return LearnedMechanism(*learned)(t, b);
      };
    } else if (name.rfind("fixed:", 0) == 0) {
      const double eps = internal::ParseNumber<double>("mechanisms", name.substr(6));
      if (!(eps > 0.0)) throw UsageError("fixed:<eps> needs eps > 0");
      m.allocate = FixedEpsilonMechanism(eps);
    } else if (name == "nodp") {
      m.allocate = FixedEpsilonMechanism(1.0);
      m.disable_noise = true;
    } else {
      throw UsageError("unknown mechanism '" + name +
                       "' (expected pac, vcg, mfgregretnet, fixed:<eps>, nodp)");
    }
    out.push_back(std::move(m));
  }
  if (out.empty()) throw UsageError("mechanisms: list is empty");
  return out;
}

// ---------------------------------------------------------------- RQ1

struct RegretRow {
  std::string mechanism;
  RegretReport report;
};

inline std::vector<RegretRow> RunRegretStudy(const ExperimentConfig& c) {
  c.Validate();
  TuneAllocator();
  const auto mechs = ResolveMechanisms(c);
  std::vector<RegretRow> rows(mechs.size());
  DeviationGrid grid;
  grid.grid_size = c.grid_size;
  const uint64_t seed = DeriveSeed(c.train.seed, {0x727131ULL});
  ParallelFor(static_cast<int>(mechs.size()), c.jobs, [&](int k) {
    rows[k].mechanism = mechs[k].name;
    if (mechs[k].learned) {
      rows[k].report = EvaluateLearnedRegret(
          *mechs[k].learned, c.train.scenario, c.eval_samples, c.train.budget,
          PgaOptions::FromConfig(c.train), seed);
    } else {
      rows[k].report = EvaluateClassicalRegret(
          mechs[k].allocate, c.train.scenario, c.train.n_clients,
          c.eval_samples, c.train.budget, grid, seed);
    }
  });
  auto os = OpenArtifact(c, "regret.csv");
  os << ArtifactHeader("rq1", c)
     << "mechanism,samples,mean,std,q25,median,q75,mean_abs_utility,"
        "normalized,ir_violation_rate\n";
  for (const auto& r : rows) {
    const auto& p = r.report;
    os << r.mechanism << ',' << p.samples << ',' << p.mean << ',' << p.std
       << ',' << p.q25 << ',' << p.median << ',' << p.q75 << ','
       << p.mean_abs_truthful_utility << ',' << p.normalized_mean << ','
       << p.ir_violation_rate << '\n';
  }
  auto pc = OpenArtifact(c, "regret_per_client.csv");
  pc << ArtifactHeader("rq1", c) << "mechanism,client,mean_regret\n";
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.report.per_client_regret.size(); ++i) {
      pc << r.mechanism << ',' << i << ',' << r.report.per_client_regret[i]
         << '\n';
    }
  }
  return rows;
}

// ---------------------------------------------------------------- RQ2

inline std::function<void()> VcgWorkload(int n, uint64_t seed) {
  auto pool = std::make_shared<std::vector<std::vector<ClientType>>>();
  for (int k = 0; k < WorkloadPoolSize(n); ++k) {
    pool->push_back(SampleTypes(
        Scenario::kUniform, n,
        DeriveSeed(seed, {0x766367ULL, uint64_t(n), uint64_t(k)})));
  }
  auto next = std::make_shared<size_t>(0);
  return [pool, next] {
    const ClassicalOutcome o =
        VcgProcure((*pool)[(*next)++ % pool->size()], 50.0);
    (void)o;
  };
}

// Learned timings use freshly initialized weights of the configured
// architecture; forward cost does not depend on the weight values.
inline std::vector<ScalingReport> RunScalingStudy(const ExperimentConfig& c) {
  c.Validate();
  const std::vector<int> sizes = c.SizeList();
  std::vector<ScalingReport> reports;
  for (const std::string& name : SplitList(c.mechanisms)) {
    std::function<std::function<void()>(int)> make;
    if (name == "pac") {
      make = [&](int n) { return PacWorkload(n, c.train.seed); };
    } else if (name == "vcg") {
      make = [&](int n) { return VcgWorkload(n, c.train.seed); };
    } else if (IsLearnedName(name)) {
      make = [&](int n) {
        return LearnedForwardWorkload(n, c.train.seed, c.train.Arch());
      };
    } else {
      throw UsageError("rq2: cannot time mechanism '" + name + "'");
    }
    reports.push_back(ScalingBenchmark(name, sizes, c.reps, make));
  }
  auto os = OpenArtifact(c, "scaling.csv");
  os << ArtifactHeader("rq2", c) << "mechanism,n,seconds\n";
  for (const auto& r : reports) {
    for (size_t k = 0; k < r.sizes.size(); ++k) {
      os << r.name << ',' << r.sizes[k] << ',' << r.wall_times[k] << '\n';
    }
  }
  auto ss = OpenArtifact(c, "scaling_summary.csv");
  ss << ArtifactHeader("rq2", c) << "mechanism,slope,peak_rss_mb\n";
  for (const auto& r : reports) {
    ss << r.name << ',' << r.slope << ',' << r.peak_rss_mb << '\n';
  }
  return reports;
}

// ---------------------------------------------------------------- RQ3

inline std::vector<EfficiencyRow> RunEfficiencyStudy(const ExperimentConfig& c) {
  c.Validate();
  std::vector<NamedMechanism> named;
  const auto mechs = ResolveMechanisms(c);
  for (const auto& m : mechs) named.push_back({m.name, m.allocate});
  const auto seeds = c.SeedList();
  const auto rows = EfficiencyTable(named, c.train.scenario, c.train.n_clients,
                                    c.train.budget, c.rounds, seeds);
  auto csv = OpenArtifact(c, "efficiency.csv");
  csv << ArtifactHeader("rq3", c);
  WriteEfficiencyCsv(csv, rows);
  auto md = OpenArtifact(c, "efficiency.md");
  md << "<!--\n" << ArtifactHeader("rq3", c) << "-->\n";
  WriteEfficiencyMarkdown(md, rows);
  return rows;
}

// ---------------------------------------------------------------- RQ4

struct FlRun {
  std::string mechanism;
  uint64_t seed = 0;
  FlResult result;
};

inline std::vector<FlRun> RunFlStudy(const ExperimentConfig& c) {
  c.Validate();
  TuneAllocator();
  const auto mechs = ResolveMechanisms(c);
  const auto seeds = c.SeedList();
  const int n_seeds = static_cast<int>(seeds.size());
  std::vector<FlRun> runs(mechs.size() * seeds.size());
  ParallelFor(static_cast<int>(runs.size()), c.jobs, [&](int k) {
    const auto& m = mechs[k / n_seeds];
    const uint64_t seed = seeds[k % n_seeds];
    FlConfig fl = c.ResolvedFl();
    if (m.disable_noise) fl.dp.disable_noise = true;
    const SyntheticTask task = MakeSyntheticTask(c.train.n_clients, c.task, seed);
    runs[k] = {m.name, seed, RunFl(m.allocate, task, fl, seed)};
  });
  auto os = OpenArtifact(c, "fl_rounds.csv");
  os << ArtifactHeader("rq4", c) << "mechanism,seed," << RoundRecordHeader()
     << '\n';
  for (const auto& r : runs) {
    for (const auto& rec : r.result.records) {
      os << r.mechanism << ',' << r.seed << ',';
      WriteRoundRecord(os, rec);
    }
  }
  auto ss = OpenArtifact(c, "fl_summary.csv");
  ss << ArtifactHeader("rq4", c)
     << "mechanism,seed,final_accuracy,skipped_rounds,cum_eps_max\n";
  for (const auto& r : runs) {
    ss << r.mechanism << ',' << r.seed << ',' << r.result.final_accuracy << ','
       << r.result.skipped_rounds << ','
       << (r.result.cumulative_epsilon.size() ? r.result.cumulative_epsilon.maxCoeff() : 0.0)
       << '\n';
  }
  return runs;
}

}  // namespace privmarket

#endif  // PRIVMARKET_EXPERIMENT_H_
