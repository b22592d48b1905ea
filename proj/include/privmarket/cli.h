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

// The `privmarket` command line. Every configuration key is also a flag
// (`--outer_iters` or `--outer-iters`) and may appear before or after the
// subcommand. Settings resolve in this order, later winning: built-in
// defaults, --config FILE, the PRIVMARKET_SEED environment variable, flags.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error, 3 a verify
// criterion failed.

#ifndef PRIVMARKET_CLI_H_
#define PRIVMARKET_CLI_H_

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "privmarket/acceptance.h"
#include "privmarket/experiment.h"

namespace privmarket {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitAcceptance = 3;

namespace internal {

inline std::string Dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

// Applies defaults < config file < environment < flags to `c`.
inline void ResolveConfig(ExperimentConfig& c, const std::string& config_file,
                          const std::map<std::string, std::string>& flags) {
  const auto fields = ExperimentConfigFields(c);
  if (!config_file.empty()) {
    std::ifstream is(config_file);
    if (!is) throw UsageError("cannot open config file " + config_file);
    try {
      ParseConfig(is, fields);
    } catch (const std::invalid_argument& e) {
      throw UsageError(config_file + ": " + e.what());
    }
  }
  if (const char* env = std::getenv("PRIVMARKET_SEED"); env && *env) {
    try {
      SetField(fields, "seed", env);
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("PRIVMARKET_SEED: ") + e.what());
    }
  }
  for (const auto& [key, value] : flags) {
    try {
      SetField(fields, key, value);
    } catch (const std::invalid_argument& e) {
      throw UsageError("--" + key + ": " + e.what());
    }
  }
}

inline void PrintEfficiency(std::ostream& out,
                            const std::vector<EfficiencyRow>& rows) {
  WriteEfficiencyMarkdown(out, rows);
}

inline nlohmann::json ResultJson(const CriterionResult& r) {
  return {{"id", r.id},           {"name", r.name},
          {"passed", r.passed},   {"detail", r.detail},
          {"seconds", r.seconds}, {"limit_seconds", r.limit_seconds}};
}

}  // namespace internal

inline int RunCli(int argc, const char* const* argv, std::ostream& out,
                  std::ostream& err) {
  CLI::App app{"privmarket: privacy-budget auctions for federated learning",
               "privmarket"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(VersionString()));

  ExperimentConfig config;
  std::string config_file;
  app.add_option("--config", config_file, "key=value configuration file");

  // One string slot per key; only keys given on the command line are applied.
  std::map<std::string, std::string> slots;
  std::map<std::string, CLI::Option*> options;
  for (const auto& f : ExperimentConfigFields(config)) {
    std::string names = "--" + f.key;
    if (internal::Dashed(f.key) != f.key) names += ",--" + internal::Dashed(f.key);
    options[f.key] = app.add_option(names, slots[f.key], f.help)
                         ->default_str(f.get())
                         ->group("Configuration");
  }

  auto* train = app.add_subcommand("train", "Train the learned mechanism");
  auto* rq1 = app.add_subcommand("rq1", "Ex-post regret per mechanism");
  auto* rq2 = app.add_subcommand("rq2", "Wall-time scaling in N");
  auto* rq3 = app.add_subcommand("rq3", "Revenue, budget use and welfare");
  auto* rq4 = app.add_subcommand("rq4", "Federated accuracy under DP");
  auto* verify = app.add_subcommand("verify", "Run acceptance criteria");
  auto* inspect = app.add_subcommand("inspect-checkpoint",
                                     "Print a checkpoint's manifest");
  for (auto* sub : {train, rq1, rq2, rq3, rq4, verify, inspect}) {
    sub->fallthrough();
  }

  bool list = false;
  bool quiet = false;
  std::vector<int> only;
  verify->add_flag("--list", list, "List criteria and exit");
  verify->add_option("--only", only, "Criterion ids to run (default: all)");
  verify->add_flag("--quiet", quiet, "Suppress progress lines");
  std::string inspect_path;
  inspect->add_option("path", inspect_path, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  std::map<std::string, std::string> given;
  for (const auto& [key, opt] : options) {
    if (opt->count() > 0) given[key] = slots[key];
  }

  try {
    internal::ResolveConfig(config, config_file, given);
    config.Validate();
    TuneAllocator();
    auto note = [&err](const std::string& m) { err << "  .. " << m << '\n'; };

    if (*train) {
      const TrainRun run = RunTrain(config, [&](const TrainLogRow& r) {
        if (r.iteration % 10 == 0) {
          err << "  .. iteration " << r.iteration << " revenue " << r.revenue
              << " regret " << r.mean_regret << '\n';
        }
      });
      const auto& last = run.result.log.back();
      out << "trained n_clients=" << config.train.n_clients
          << " outer_iters=" << config.train.outer_iters
          << " final_regret=" << last.mean_regret
          << " final_revenue=" << last.revenue << '\n'
          << "checkpoint " << run.checkpoint_path << " hash "
          << run.checkpoint_hash << '\n';
      return kExitOk;
    }
    if (*rq1) {
      out << "mechanism      mean_regret  normalized  ir_violations\n";
      for (const auto& r : RunRegretStudy(config)) {
        out << std::left << std::setw(14) << r.mechanism << ' '
            << std::setw(12) << r.report.mean << ' ' << std::setw(11)
            << r.report.normalized_mean << ' ' << r.report.ir_violation_rate
            << '\n';
      }
      return kExitOk;
    }
    if (*rq2) {
      for (const auto& r : RunScalingStudy(config)) {
        out << r.name << " slope=" << r.slope << " peak_rss_mb="
            << r.peak_rss_mb << '\n';
      }
      return kExitOk;
    }
    if (*rq3) {
      internal::PrintEfficiency(out, RunEfficiencyStudy(config));
      return kExitOk;
    }
    if (*rq4) {
      const auto runs = RunFlStudy(config);
      std::map<std::string, std::vector<double>> finals;
      std::vector<std::string> order;
      for (const auto& r : runs) {
        if (!finals.count(r.mechanism)) order.push_back(r.mechanism);
        finals[r.mechanism].push_back(r.result.final_accuracy);
      }
      for (const auto& name : order) {
        out << name << " A_final(K=" << config.fl.final_k
            << ")=" << Mean(finals[name]) << " std=" << SampleStd(finals[name])
            << " seeds=" << finals[name].size() << '\n';
      }
      return kExitOk;
    }
    if (*inspect) {
      const LoadedMechanism m = LoadMechanism(inspect_path);
      const auto& p = m.params;
      out << "version     " << m.manifest.version << '\n'
          << "n_clients   " << m.manifest.n_clients << '\n'
          << "n_items     " << m.manifest.n_items << '\n'
          << "scenario    " << m.manifest.scenario << '\n'
          << "config_hash " << m.manifest.config_hash << '\n'
          << "mean_field  " << (m.manifest.use_mean_field ? "true" : "false")
          << '\n'
          << "parameters  " << p.num_parameters() << '\n'
          << "critic      " << (p.critic ? "yes" : "no") << '\n'
          << "finite      "
          << (p.header.AllFinite() && p.alloc_head.AllFinite() &&
                      p.pay_head.AllFinite()
                  ? "true"
                  : "false")
          << '\n';
      return kExitOk;
    }
    if (*verify) {
      if (list) {
        for (const auto& c : Criteria()) {
          out << std::setw(2) << c.id << ' ' << std::left << std::setw(26)
              << c.name << std::right << ' ' << c.summary << '\n';
        }
        return kExitOk;
      }
      AcceptanceOptions opts;
      opts.seed = config.train.seed;
      opts.out_dir = config.out_dir;
      opts.checkpoint = config.checkpoint;
      if (!quiet) opts.progress = note;
      if (only.empty()) {
        for (const auto& c : Criteria()) only.push_back(c.id);
      }
      for (int id : only) {
        if (std::none_of(Criteria().begin(), Criteria().end(),
                         [id](const CriterionInfo& c) { return c.id == id; })) {
          throw UsageError("--only: unknown criterion " + std::to_string(id));
        }
      }
      AcceptanceContext ctx(opts);
      nlohmann::json report = {{"version", VersionString()},
                               {"seed", opts.seed},
                               {"criteria", nlohmann::json::array()}};
      int failures = 0;
      for (int id : ExecutionOrder(only)) {
        const CriterionResult r = RunCriterion(id, ctx);
        if (!r.passed) ++failures;
        out << FormatResultLine(r) << std::endl;
        report["criteria"].push_back(internal::ResultJson(r));
      }
      report["passed"] = static_cast<int>(only.size()) - failures;
      report["total"] = only.size();
      auto js = OpenArtifact(config, "verify.json");
      js << report.dump(2) << '\n';
      out << (only.size() - failures) << "/" << only.size()
          << " criteria passed" << '\n';
      return failures == 0 ? kExitOk : kExitAcceptance;
    }
  } catch (const UsageError& e) {
    err << "privmarket: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "privmarket: invalid configuration: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "privmarket: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace privmarket

#endif  // PRIVMARKET_CLI_H_
