#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "rl4rec/app/config.hpp"
#include "rl4rec/buffer/buffer.hpp"
#include "rl4rec/buffer/collector.hpp"
#include "rl4rec/data/dataset.hpp"
#include "rl4rec/data/env.hpp"
#include "rl4rec/data/reward_model.hpp"
#include "rl4rec/exec/executor.hpp"
#include "rl4rec/exec/metrics.hpp"
#include "rl4rec/nn/checkpoint.hpp"
#include "rl4rec/policy/policy.hpp"

namespace rl4rec::app {

// Artifact file names inside a run directory.
inline constexpr const char* kConfigFile = "config.ini";
inline constexpr const char* kUserModelFile = "user_model.ckpt";
inline constexpr const char* kEvalModelFile = "eval_model.ckpt";
inline constexpr const char* kPrepareSummaryFile = "prepare_summary.tsv";
inline constexpr const char* kPolicyFile = "policy.ckpt";
inline constexpr const char* kHistoryFile = "history.tsv";
inline constexpr const char* kTrainSummaryFile = "summary.tsv";
inline constexpr const char* kCurvesFile = "curves.tsv";
inline constexpr const char* kOverestimationFile = "overestimation.tsv";

/// Graded relevance cut-off for the held-out ranking metrics, as a share of
/// the reward range above its minimum.
inline constexpr double kRelevantShare = 0.75;
inline constexpr std::size_t kRankingCutoff = 10;

/// A resolved experiment: the effective config (after command-line overrides)
/// plus everything derived from it.
struct Run {
  ExperimentConfig config;  // seeds derived
  fs::path descriptor_path;
  fs::path out;
  std::string hash;
  std::string prepare_hash;

  /// First line of every text artifact.
  std::string header() const { return "# config_hash=" + hash + " seed=" + std::to_string(config.seed); }
  fs::path file(const char* name) const { return out / name; }
};

inline Run make_run(ExperimentConfig cfg, const fs::path& descriptor_path,
                    std::optional<std::uint64_t> seed = std::nullopt,
                    std::optional<fs::path> out = std::nullopt) {
  if (seed) cfg.seed = *seed;
  if (out) cfg.output_dir = out->string();
  cfg.validate();
  Run run;
  run.descriptor_path = descriptor_path;
  run.out = cfg.output_dir;
  run.hash = config_hash(cfg);
  run.prepare_hash = app::prepare_hash(cfg);
  run.config = with_derived_seeds(std::move(cfg));
  fs::create_directories(run.out);
  std::ofstream os(run.file(kConfigFile));
  os << run.header() << '\n' << serialize_config(run.config);
  if (!os) throw DataError("cannot write " + run.file(kConfigFile).string());
  return run;
}

inline Run make_run(const LoadedConfig& loaded, std::optional<std::uint64_t> seed = std::nullopt,
                    std::optional<fs::path> out = std::nullopt) {
  return make_run(loaded.config, loaded.descriptor_path, seed, std::move(out));
}

// ---------------------------------------------------------------------------
// Text artifacts

inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  return detail::format_value(v);
}

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t c = 0; c < columns.size(); ++c)
      if (columns[c] == name) return c;
    throw DataError("table lacks column '" + name + "'");
  }
  bool has(const std::string& name) const {
    return std::find(columns.begin(), columns.end(), name) != columns.end();
  }
};

inline void write_table(const fs::path& path, const std::string& header, const Table& t) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << header << '\n';
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) os << (c ? "\t" : "") << cells[c];
    os << '\n';
  };
  line(t.columns);
  for (const auto& r : t.rows) line(r);
}

/// Lines starting with '#' are skipped; the first other line names the columns.
inline Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Table t;
  std::string line;
  bool have_columns = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto cells = data::split_line(line, '\t');
    if (!have_columns) {
      t.columns = std::move(cells);
      have_columns = true;
    } else {
      if (cells.size() != t.columns.size()) throw FormatError("ragged row in " + path.string());
      t.rows.push_back(std::move(cells));
    }
  }
  if (!have_columns) throw DataError("no table in " + path.string());
  return t;
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline void write_key_values(const fs::path& path, const std::string& header, const KeyValues& kv) {
  Table t{{"key", "value"}, {}};
  for (const auto& [k, v] : kv) t.rows.push_back({k, v});
  write_table(path, header, t);
}

inline std::map<std::string, std::string> read_key_values(const fs::path& path) {
  const Table t = read_table(path);
  std::map<std::string, std::string> out;
  for (const auto& r : t.rows) out[r.at(t.column("key"))] = r.at(t.column("value"));
  return out;
}

// ---------------------------------------------------------------------------
// Inputs

/// Without categories the quit rule falls back to its reward floor; a
/// categories file that is named but missing fails to load.
inline data::Dataset load_run_dataset(const Run& run) { return data::load_dataset(run.descriptor_path); }

inline void stamp(nn::Checkpoint& ck, const Run& run) {
  ck.meta["config_hash"] = run.hash;
  ck.meta["prepare_hash"] = run.prepare_hash;
  ck.meta["seed"] = std::to_string(run.config.seed);
}

/// Loads a checkpoint written for this run's dataset and user-model settings.
inline nn::Checkpoint load_stamped(const Run& run, const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) throw DataError("missing " + path.string() + "; " + hint);
  nn::Checkpoint ck = nn::load_checkpoint(path);
  if (ck.meta_or("prepare_hash") != run.prepare_hash)
    throw ConfigError(path.string() + " was produced under a different dataset, seed or [user_model] section");
  return ck;
}

inline std::shared_ptr<const data::RewardModel> load_reward_model(const Run& run, const char* name) {
  return std::make_shared<const data::RewardModel>(
      data::RewardModel::from_checkpoint(load_stamped(run, run.file(name), "run prepare first")));
}

struct Envs {
  std::shared_ptr<const data::ItemCatalog> catalog;
  std::unique_ptr<data::RecEnv> train;  // null when no user model is loaded
  std::unique_ptr<data::RecEnv> eval;   // null when evaluation is off
};

/// The training simulator answers from the train log and the train-split
/// model; the evaluation simulator from the test log and the test-split model.
inline Envs make_envs(const Run& run, const data::Dataset& ds,
                      std::shared_ptr<const data::RewardModel> train_model,
                      std::shared_ptr<const data::RewardModel> eval_model) {
  Envs e;
  e.catalog = std::make_shared<const data::ItemCatalog>(ds.catalog);
  if (train_model) {
    auto log = std::make_shared<const data::RewardLog>(ds.train, ds.n_items);
    e.train = std::make_unique<data::RecEnv>(train_model, log, e.catalog, run.config.env);
    e.train->set_n_users(ds.n_users);
  }
  if (eval_model) {
    auto log = std::make_shared<const data::RewardLog>(ds.test, ds.n_items);
    e.eval = std::make_unique<data::RecEnv>(eval_model, log, e.catalog,
                                            exec::eval_env_config(run.config.eval, run.config.env, ds.n_items));
    e.eval->set_n_users(ds.n_users);
  }
  return e;
}

inline policy::Policy make_policy(const Run& run, const data::Dataset& ds) {
  return policy::Policy(run.config.policy, run.config.tracker, ds.n_users, ds.n_items,
                        derive_seed(run.config.seed, kPolicyInit));
}

// ---------------------------------------------------------------------------
// prepare: user models

struct PrepareResult {
  data::RewardModel user_model;  // fit on the train split
  data::RewardModel eval_model;  // fit on the test split
  exec::UserModelReport test_report;
};

inline exec::UserModelReport score_user_model(const data::RewardModel& m, const data::Dataset& ds) {
  std::vector<exec::ScoredPair> pairs;
  for (const auto& r : ds.test) pairs.push_back({r.user, r.item, m.predict(r.user, r.item), r.reward});
  const double relevant_at = ds.reward_min + kRelevantShare * (ds.reward_max - ds.reward_min);
  return exec::compute_user_model_metrics(pairs, kRankingCutoff, relevant_at);
}

inline PrepareResult prepare(const Run& run, std::ostream& log = std::clog) {
  const data::Dataset ds = load_run_dataset(run);
  data::RewardModelConfig um = run.config.user_model;
  PrepareResult res{data::train_reward_model(ds, ds.train, um), {}, {}};
  // The ground-truth simulator must not move with the user model's negative
  // sampling, otherwise runs that differ only in n_negatives are scored
  // against different truths.
  um.seed = derive_seed(run.config.seed, kEvalModel);
  um.n_negatives = 0;
  um.negative_target.reset();
  res.eval_model = data::train_reward_model(ds, ds.test, um);
  res.test_report = score_user_model(res.user_model, ds);

  for (auto [name, model] : {std::pair{kUserModelFile, &res.user_model}, std::pair{kEvalModelFile, &res.eval_model}}) {
    nn::Checkpoint ck = model->to_checkpoint();
    stamp(ck, run);
    nn::save_checkpoint(run.file(name), ck);
  }
  const auto& r = res.test_report;
  const std::string k = std::to_string(r.k);
  write_key_values(run.file(kPrepareSummaryFile), run.header(),
                   {{"train_rmse", fmt_num(res.user_model.train_rmse())},
                    {"validation_rmse", fmt_num(res.user_model.validation_rmse())},
                    {"test_mae", fmt_num(r.mae)},
                    {"test_mse", fmt_num(r.mse)},
                    {"test_rmse", fmt_num(r.rmse)},
                    {"test_recall@" + k, fmt_num(r.recall)},
                    {"test_precision@" + k, fmt_num(r.precision)},
                    {"test_ndcg@" + k, fmt_num(r.ndcg)},
                    {"test_hit_rate@" + k, fmt_num(r.hit_rate)},
                    {"test_map@" + k, fmt_num(r.map)},
                    {"test_mrr@" + k, fmt_num(r.mrr)},
                    {"eval_model_validation_rmse", fmt_num(res.eval_model.validation_rmse())}});
  log << "prepare: validation RMSE " << res.user_model.validation_rmse() << ", held-out RMSE " << r.rmse
      << ", NDCG@" << k << ' ' << r.ndcg << '\n';
  return res;
}

// ---------------------------------------------------------------------------
// train

struct TrainResult {
  std::vector<exec::EpochRecord> history;
  std::optional<exec::Summary> summary;  // tail summary, when evaluation ran
};

inline Table history_table(const std::vector<exec::EpochRecord>& history) {
  std::vector<std::string> loss_names;
  for (const auto& rec : history)
    for (const auto& [name, v] : rec.losses)
      if (std::find(loss_names.begin(), loss_names.end(), name) == loss_names.end()) loss_names.push_back(name);
  std::sort(loss_names.begin(), loss_names.end());

  Table t;
  t.columns = {"epoch", "train_return", "buffer_blocks"};
  for (const auto& n : loss_names) t.columns.push_back("loss_" + n);
  for (const char* c : {"R_cumu", "R_avg", "length", "coverage", "diversity", "novelty"})
    t.columns.push_back(c);
  const double nan = std::nan("");
  for (const auto& rec : history) {
    std::vector<std::string> row = {std::to_string(rec.epoch), fmt_num(rec.train_return),
                                    std::to_string(rec.buffer_blocks)};
    for (const auto& n : loss_names) {
      auto it = rec.losses.find(n);
      row.push_back(fmt_num(it == rec.losses.end() ? nan : it->second));
    }
    const auto& e = rec.eval;
    for (double v : {e ? e->r_cumu : nan, e ? e->r_avg : nan, e ? e->length : nan, e ? e->coverage : nan,
                     e ? e->diversity : nan, e ? e->novelty : nan})
      row.push_back(fmt_num(v));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline KeyValues summary_rows(const exec::Summary& s) {
  return {{"R_cumu", fmt_num(s.r_cumu)},     {"R_avg", fmt_num(s.r_avg)},
          {"length", fmt_num(s.length)},     {"coverage", fmt_num(s.coverage)},
          {"diversity", fmt_num(s.diversity)}, {"novelty", fmt_num(s.novelty)},
          {"n_epochs", std::to_string(s.n_epochs)}};
}

inline TrainResult train(const Run& run, std::ostream& log = std::clog) {
  const ExperimentConfig& cfg = run.config;
  const data::Dataset ds = load_run_dataset(run);
  const bool offline = cfg.train.paradigm == exec::Paradigm::OfflineLogs;
  std::shared_ptr<const data::RewardModel> train_model, eval_model;
  if (!offline) train_model = load_reward_model(run, kUserModelFile);
  if (cfg.train.eval_every > 0) eval_model = load_reward_model(run, kEvalModelFile);
  const Envs envs = make_envs(run, ds, train_model, eval_model);

  std::optional<buffer::Buffer> logs;
  if (offline) logs = buffer::build_offline_buffer(ds.train, cfg.construction);

  policy::Policy pol = make_policy(run, ds);
  std::optional<exec::EvalSpec> eval;
  if (envs.eval) eval = exec::EvalSpec{envs.eval.get(), cfg.eval, envs.catalog.get()};
  TrainResult res;
  res.history = exec::train(pol, cfg.train, {logs ? &*logs : nullptr, envs.train.get()}, eval,
                            [&](const exec::EpochRecord& r) {
                              log << "epoch " << r.epoch + 1 << '/' << cfg.train.epochs;
                              if (!std::isnan(r.train_return)) log << "  train return " << r.train_return;
                              if (r.eval) log << "  R_cumu " << r.eval->r_cumu << "  length " << r.eval->length;
                              log << '\n';
                            });

  nn::Checkpoint ck = pol.to_checkpoint();
  stamp(ck, run);
  nn::save_checkpoint(run.file(kPolicyFile), ck);
  write_table(run.file(kHistoryFile), run.header(), history_table(res.history));
  KeyValues summary = {{"policy", policy::to_string(cfg.policy.kind)},
                       {"paradigm", exec::to_string(cfg.train.paradigm)},
                       {"epochs", std::to_string(res.history.size())}};
  if (eval) {
    res.summary = exec::summarize_tail(res.history);
    for (auto& kv : summary_rows(*res.summary)) summary.push_back(std::move(kv));
  }
  write_key_values(run.file(kTrainSummaryFile), run.header(), summary);
  return res;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalResult {
  exec::MetricReport report;
  std::optional<exec::PreferenceGap> gap;  // set when a train-split user model is present
};

enum class EvalActor { Checkpoint, Random };

/// Greedy rollouts in the evaluation simulator. The policy comes from
/// `checkpoint`, else from the run's policy.ckpt, else fresh initialization.
/// Outputs go to <prefix>_summary.tsv and <prefix>_episodes.tsv.
inline EvalResult evaluate(const Run& run, std::optional<fs::path> checkpoint = std::nullopt,
                           EvalActor actor = EvalActor::Checkpoint, std::ostream& log = std::clog) {
  const ExperimentConfig& cfg = run.config;
  const data::Dataset ds = load_run_dataset(run);
  const Envs envs = make_envs(run, ds, nullptr, load_reward_model(run, kEvalModelFile));

  policy::Policy pol = make_policy(run, ds);
  std::string source = "random";
  if (actor == EvalActor::Checkpoint) {
    if (!checkpoint && fs::exists(run.file(kPolicyFile))) checkpoint = run.file(kPolicyFile);
    if (checkpoint) {
      pol.load_checkpoint(load_stamped(run, *checkpoint, "run train first"));
      source = checkpoint->filename().string();
    } else {
      source = "initialization";
      log << "evaluate: no policy checkpoint; using a freshly initialized policy\n";
    }
  }
  EvalResult res;
  res.report = actor == EvalActor::Random
                   ? exec::evaluate(buffer::uniform_random_actor(), *envs.eval, cfg.eval, envs.catalog.get())
                   : exec::evaluate(pol, *envs.eval, cfg.eval, envs.catalog.get());
  if (fs::exists(run.file(kUserModelFile)))
    res.gap = exec::preference_gap(res.report, *load_reward_model(run, kUserModelFile));

  const std::string prefix = actor == EvalActor::Random ? "random_eval" : "eval";
  const auto& r = res.report;
  KeyValues kv = {{"policy", source},
                  {"mode", exec::mode_name(cfg.eval)},
                  {"n_episodes", std::to_string(r.per_episode.size())},
                  {"R_cumu", fmt_num(r.r_cumu)},
                  {"R_avg", fmt_num(r.r_avg)},
                  {"length", fmt_num(r.length)},
                  {"coverage", fmt_num(r.coverage)},
                  {"diversity", fmt_num(r.diversity)},
                  {"novelty", fmt_num(r.novelty)}};
  if (res.gap) {
    kv.push_back({"estimated_reward", fmt_num(res.gap->estimated)});
    kv.push_back({"true_reward", fmt_num(res.gap->truth)});
  }
  write_key_values(run.out / (prefix + "_summary.tsv"), run.header(), kv);
  Table episodes{{"episode", "R_cumu", "R_avg", "length"}, {}};
  for (std::size_t k = 0; k < r.per_episode.size(); ++k) {
    const auto& e = r.per_episode[k];
    episodes.rows.push_back({std::to_string(k), fmt_num(e.r_cumu), fmt_num(e.r_avg), fmt_num(e.length)});
  }
  write_table(run.out / (prefix + "_episodes.tsv"), run.header(), episodes);
  log << "evaluate (" << exec::mode_name(cfg.eval) << ", " << source << "): R_cumu " << r.r_cumu << "  length "
      << r.length << "  coverage " << r.coverage << '\n';
  return res;
}

// ---------------------------------------------------------------------------
// report: learning curves and the overestimation comparison

struct ReportResult {
  std::size_t runs = 0;
  Table curves;          // run, series, epoch, value
  Table overestimation;  // n_negatives, estimated, true, runs
};

inline ReportResult report(const std::vector<fs::path>& run_dirs, const fs::path& out) {
  ReportResult res;
  res.curves.columns = {"run", "series", "epoch", "value"};
  res.overestimation.columns = {"n_negatives", "estimated_reward", "true_reward", "runs"};
  std::string header = "# report over";
  std::map<std::size_t, std::array<double, 3>> by_negatives;  // sums of estimated, true; count

  for (const fs::path& dir : run_dirs) {
    if (!fs::is_regular_file(dir / kHistoryFile)) continue;
    ++res.runs;
    const Table h = read_table(dir / kHistoryFile);
    const std::string name = dir.filename().empty() ? dir.parent_path().filename().string()
                                                    : dir.filename().string();
    std::ifstream cfg_in(dir / kConfigFile);
    std::string first;
    std::getline(cfg_in, first);
    header += " " + name + (first.rfind("# ", 0) == 0 ? " (" + first.substr(2) + ")" : "");
    for (const char* series : {"R_cumu", "length", "R_avg"}) {
      const std::size_t col = h.column(series);
      for (const auto& row : h.rows)
        if (row[col] != "nan") res.curves.rows.push_back({name, series, row[h.column("epoch")], row[col]});
    }
    if (fs::is_regular_file(dir / "eval_summary.tsv")) {
      const auto kv = read_key_values(dir / "eval_summary.tsv");
      if (kv.count("estimated_reward")) {
        std::stringstream ss;
        ss << cfg_in.rdbuf();
        const ExperimentConfig c = parse_config(ss.str());
        auto& acc = by_negatives[c.user_model.n_negatives];
        acc[0] += std::stod(kv.at("estimated_reward"));
        acc[1] += std::stod(kv.at("true_reward"));
        acc[2] += 1.0;
      }
    }
  }
  if (res.runs == 0) throw DataError("no history file found in the given run directories");
  for (const auto& [n, acc] : by_negatives)
    res.overestimation.rows.push_back({std::to_string(n), fmt_num(acc[0] / acc[2]), fmt_num(acc[1] / acc[2]),
                                       std::to_string(static_cast<std::size_t>(acc[2]))});
  fs::create_directories(out);
  write_table(out / kCurvesFile, header, res.curves);
  if (!res.overestimation.rows.empty()) write_table(out / kOverestimationFile, header, res.overestimation);
  return res;
}

}  // namespace rl4rec::app
