#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rl4rec/app/config.hpp"
#include "rl4rec/app/pipeline.hpp"
#include "rl4rec/data/dataset.hpp"
#include "rl4rec/error.hpp"

namespace rl4rec::app {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;     // unreadable or unusable data, usage errors
inline constexpr int kExitConfig = 3;    // invalid config, checkpoint/config mismatch
inline constexpr int kExitInternal = 4;  // violated invariant or numeric failure

/// Runs one command line; `log` receives progress and `err` diagnostics.
inline int run_cli(int argc, const char* const* argv, std::ostream& log, std::ostream& err) {
  CLI::App app{"rl4rec: reinforcement-learning recommender experiments"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir, baseline = "none", synth_kind = "coat";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> run_dirs;
  data::SynthConfig synth;
  data::CoatLikeConfig coat;

  auto stage = [&](const char* name, const char* help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "experiment config (INI)")->required();
    sub->add_option("--seed", seed, "overrides [experiment] seed");
    sub->add_option("--out", out_dir, "overrides [experiment] output_dir");
    return sub;
  };
  CLI::App* prepare_cmd = stage("prepare", "train and score the user models");
  CLI::App* train_cmd = stage("train", "train the policy");
  CLI::App* eval_cmd = stage("evaluate", "evaluate a policy in the evaluation simulator");
  eval_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint (default: <out>/policy.ckpt)");
  eval_cmd->add_option("--baseline", baseline, "'random' evaluates the uniform-random policy instead")
      ->check(CLI::IsMember({"none", "random"}));

  CLI::App* report_cmd = app.add_subcommand("report", "learning curves and overestimation table over runs");
  report_cmd->add_option("runs", run_dirs, "run directories")->required();
  report_cmd->add_option("--out", out_dir, "report directory")->required();

  CLI::App* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
  synth_cmd->add_option("--out", out_dir, "dataset directory")->required();
  synth_cmd->add_option("--kind", synth_kind, "coat (self-selected train, random test) or lowrank")
      ->check(CLI::IsMember({"coat", "lowrank"}));
  synth_cmd->add_option("--seed", seed, "generator seed");
  synth_cmd->add_option("--users", synth.users, "lowrank: users");
  synth_cmd->add_option("--items", synth.items, "lowrank: items");
  synth_cmd->add_option("--rank", synth.rank, "lowrank: rank");
  synth_cmd->add_option("--noise", synth.noise, "lowrank: Gaussian noise std");
  synth_cmd->add_option("--density", synth.density, "lowrank: observed share of the matrix");
  synth_cmd->add_option("--test-fraction", synth.test_fraction, "lowrank: share of pairs held out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, log, err);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    std::optional<fs::path> out;
    if (!out_dir.empty()) out = fs::path(out_dir);
    if (*prepare_cmd || *train_cmd || *eval_cmd) {
      const Run run = make_run(load_config(config_path), seed, out);
      log << run.header().substr(2) << "  out=" << run.out.string() << '\n';
      if (*prepare_cmd) {
        prepare(run, log);
      } else if (*train_cmd) {
        train(run, log);
      } else {
        std::optional<fs::path> ck;
        if (!checkpoint.empty()) ck = fs::path(checkpoint);
        evaluate(run, ck, baseline == "random" ? EvalActor::Random : EvalActor::Checkpoint, log);
      }
    } else if (*report_cmd) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const ReportResult r = report(dirs, *out);
      log << "report: " << r.runs << " runs, " << r.curves.rows.size() << " curve points, "
          << r.overestimation.rows.size() << " overestimation rows\n";
    } else if (*synth_cmd) {
      data::Dataset ds;
      if (synth_kind == "coat") {
        if (seed) coat.seed = *seed;
        ds = data::generate_coat_like(coat);
      } else {
        if (seed) synth.seed = *seed;
        ds = data::generate_synthetic(synth);
      }
      data::write_dataset(ds, *out);
      log << "synth: " << ds.n_users << " users, " << ds.n_items << " items, " << ds.train.size() << " train / "
          << ds.test.size() << " test records -> " << (*out / "dataset.desc").string() << '\n';
    }
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ContractViolation& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitOk;
}

}  // namespace rl4rec::app
