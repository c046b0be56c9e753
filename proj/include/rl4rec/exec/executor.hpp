#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rl4rec/buffer/collector.hpp"
#include "rl4rec/data/env.hpp"
#include "rl4rec/exec/metrics.hpp"
#include "rl4rec/policy/policy.hpp"

namespace rl4rec::exec {

using buffer::Buffer;
using buffer::Collector;
using buffer::CollectTarget;
using policy::Family;
using policy::Losses;
using policy::Policy;

// ---------------------------------------------------------------------------
// Evaluation

enum class EvalMode { FreeB, NX_0, NX_X };

inline std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::FreeB: return "FreeB";
    case EvalMode::NX_0: return "NX_0_";
    case EvalMode::NX_X: return "NX_X_";
  }
  return "?";
}

struct EvalConfig {
  EvalMode mode = EvalMode::FreeB;
  std::size_t x = 10;  // rounds for NX_X_
  std::size_t n_episodes = 100;
  std::size_t max_steps = 30;
  std::size_t n_envs = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (mode == EvalMode::NX_X && x == 0) throw ConfigError("NX_X_ needs X >= 1");
    if (n_episodes == 0) throw ConfigError("n_episodes must be positive");
    if (max_steps == 0) throw ConfigError("max_steps must be positive");
    if (n_envs == 0) throw ConfigError("n_envs must be positive");
  }
};

/// Accepts "FreeB", "NX_0_" and "NX_<X>_".
inline EvalConfig parse_eval_mode(const std::string& s, EvalConfig base = {}) {
  if (s == "FreeB") {
    base.mode = EvalMode::FreeB;
  } else if (s == "NX_0_") {
    base.mode = EvalMode::NX_0;
  } else if (s.size() > 4 && s.rfind("NX_", 0) == 0 && s.back() == '_') {
    const std::string digits = s.substr(3, s.size() - 4);
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("bad evaluation mode '" + s + "'");
    base.mode = EvalMode::NX_X;
    base.x = std::stoul(digits);
    if (base.x == 0) base.mode = EvalMode::NX_0;
  } else {
    throw ConfigError("bad evaluation mode '" + s + "'");
  }
  return base;
}

inline std::string mode_name(const EvalConfig& c) {
  return c.mode == EvalMode::NX_X ? "NX_" + std::to_string(c.x) + "_" : to_string(c.mode);
}

/// Environment settings implementing an evaluation mode: FreeB allows repeats
/// with quit; NX_0_ removes repeats with quit; NX_X_ removes repeats, disables
/// quit and runs exactly X rounds.
inline data::RecEnvConfig eval_env_config(const EvalConfig& cfg, data::RecEnvConfig base, std::size_t n_items) {
  cfg.validate();
  base.max_steps = cfg.max_steps;
  switch (cfg.mode) {
    case EvalMode::FreeB:
      base.remove_recommended = false;
      base.quit_enabled = true;
      break;
    case EvalMode::NX_0:
      base.remove_recommended = true;
      base.quit_enabled = true;
      break;
    case EvalMode::NX_X:
      if (cfg.x > n_items)
        throw ConfigError("NX_" + std::to_string(cfg.x) + "_ exceeds the " + std::to_string(n_items) + " items");
      base.remove_recommended = true;
      base.quit_enabled = false;
      base.max_steps = cfg.x;
      break;
  }
  return base;
}

struct MetricReport {
  std::size_t epoch = 0;
  double r_cumu = 0.0, r_avg = 0.0, length = 0.0;
  double coverage = 0.0, diversity = 0.0, novelty = 0.0;
  std::vector<EpisodeMetrics> per_episode;
  std::vector<Trajectory> episodes;  // in (env, episode) order
};

/// Runs cfg.n_episodes episodes on fresh clones of `proto` and scores them.
/// Clones are seeded from cfg.seed, so repeated calls see the same users.
inline MetricReport evaluate(const buffer::ActFn& act, const data::Environment& proto, const EvalConfig& cfg,
                             const data::ItemCatalog* catalog = nullptr) {
  cfg.validate();
  const std::size_t n_envs = std::min(cfg.n_envs, cfg.n_episodes);
  Collector col(buffer::replicate(proto, n_envs, cfg.seed * 1000003ULL + 17));
  Buffer buf(n_envs);
  Rng rng(cfg.seed ^ 0x5eed5eedULL);
  col.collect(act, buf, CollectTarget::episodes(cfg.n_episodes), rng, false);
  MetricReport r;
  r.episodes = buffer::extract_trajectories(buf);
  const RlMetrics rl = compute_rl_metrics(r.episodes);
  r.r_cumu = rl.r_cumu;
  r.r_avg = rl.r_avg;
  r.length = rl.length;
  r.per_episode = rl.per_episode;
  if (catalog) {
    const ExposureMetrics ex = compute_exposure_metrics(r.episodes, *catalog);
    r.coverage = ex.coverage;
    r.diversity = ex.diversity;
    r.novelty = ex.novelty;
  }
  return r;
}

inline MetricReport evaluate(const Policy& pol, const data::Environment& proto, const EvalConfig& cfg,
                             const data::ItemCatalog* catalog = nullptr) {
  return evaluate(buffer::policy_actor(pol, policy::Mode::Greedy), proto, cfg, catalog);
}

// ---------------------------------------------------------------------------
// Training

enum class Paradigm { OfflineLogs, UserModel };

inline std::string to_string(Paradigm p) { return p == Paradigm::OfflineLogs ? "OfflineLogs" : "UserModel"; }

inline Paradigm parse_paradigm(const std::string& s) {
  if (s == "OfflineLogs") return Paradigm::OfflineLogs;
  if (s == "UserModel") return Paradigm::UserModel;
  throw ConfigError("unknown paradigm '" + s + "'");
}

struct TrainConfig {
  Paradigm paradigm = Paradigm::UserModel;
  std::size_t epochs = 100;
  std::size_t updates_per_epoch = 10;
  std::size_t episodes_per_update = 8;  // on-policy collection per update
  std::size_t steps_per_update = 32;    // off-policy collection per update
  std::size_t batch_size = 64;
  std::size_t n_envs = 8;
  std::size_t eval_every = 1;  // 0 disables evaluation
  std::size_t buffer_capacity = buffer::kDefaultLaneCapacity;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (updates_per_epoch == 0) throw ConfigError("updates_per_epoch must be positive");
    if (episodes_per_update == 0 || steps_per_update == 0) throw ConfigError("collection sizes must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (n_envs == 0) throw ConfigError("n_envs must be positive");
    if (buffer_capacity == 0) throw ConfigError("buffer_capacity must be positive");
  }
};

/// On-policy learners need fresh trajectories, so they cannot learn from logs;
/// batch-RL learners never interact with an environment.
inline void check_paradigm(policy::PolicyKind kind, Paradigm p) {
  const Family f = policy::family(kind);
  if (p == Paradigm::OfflineLogs && f == Family::OnPolicy)
    throw ConfigError(std::string(policy::to_string(kind)) + " is on-policy and cannot train on offline logs");
  if (p == Paradigm::UserModel && f == Family::Batch)
    throw ConfigError(std::string(policy::to_string(kind)) + " is a batch-RL method and requires offline logs");
}

struct EpochRecord {
  std::size_t epoch = 0;
  Losses losses;  // mean over the epoch's updates
  double train_return = std::nan("");  // mean return of episodes collected this epoch
  std::size_t buffer_blocks = 0;       // training buffer size at epoch end
  std::optional<MetricReport> eval;
};

struct TrainSource {
  const Buffer* offline = nullptr;          // OfflineLogs
  const data::Environment* env = nullptr;   // UserModel: prototype of the simulated user
};

struct EvalSpec {
  const data::Environment* env = nullptr;
  EvalConfig config;
  const data::ItemCatalog* catalog = nullptr;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline std::vector<EpochRecord> train(Policy& pol, const TrainConfig& cfg, const TrainSource& src,
                                      const std::optional<EvalSpec>& eval = std::nullopt,
                                      const EpochCallback& on_epoch = {}) {
  cfg.validate();
  check_paradigm(pol.kind(), cfg.paradigm);
  if (cfg.paradigm == Paradigm::OfflineLogs && (!src.offline || src.offline->n_transitions() == 0))
    throw ConfigError("OfflineLogs training needs a non-empty offline buffer");
  if (cfg.paradigm == Paradigm::UserModel && !src.env)
    throw ConfigError("UserModel training needs a simulated environment");
  if (eval) RL4REC_EXPECT(eval->env != nullptr, "evaluation spec lacks an environment");

  Rng root(cfg.seed);
  Rng collect_rng = root.split(), sample_rng = root.split();
  const Family fam = policy::family(pol.kind());
  std::optional<Collector> collector;
  std::optional<Buffer> online;
  if (cfg.paradigm == Paradigm::UserModel) {
    collector.emplace(buffer::replicate(*src.env, cfg.n_envs, cfg.seed * 7919ULL + 1));
    online.emplace(cfg.n_envs, cfg.buffer_capacity, policy::DataSource::Online);
  }

  std::vector<EpochRecord> history;
  const double total_updates = static_cast<double>(cfg.epochs * cfg.updates_per_epoch);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    double returns = 0.0;
    std::size_t episodes = 0;
    for (std::size_t u = 0; u < cfg.updates_per_epoch; ++u) {
      pol.set_progress(static_cast<double>(epoch * cfg.updates_per_epoch + u) / total_updates);
      Losses l;
      if (cfg.paradigm == Paradigm::OfflineLogs) {
        const auto batch = buffer::sample_batch(*src.offline, cfg.batch_size, sample_rng);
        l = fam == Family::Batch ? pol.update_batchrl(batch) : pol.update_offpolicy(batch);
      } else if (fam == Family::OnPolicy) {
        const auto s = collector->collect(pol, *online, CollectTarget::episodes(cfg.episodes_per_update),
                                          policy::Mode::Explore, collect_rng);
        for (double r : s.episode_returns) returns += r;
        episodes += s.episodes;
        l = pol.update_onpolicy(buffer::extract_trajectories(*online));
        online->clear();
      } else {
        const auto s = collector->collect(pol, *online, CollectTarget::steps(cfg.steps_per_update),
                                          policy::Mode::Explore, collect_rng);
        for (double r : s.episode_returns) returns += r;
        episodes += s.episodes;
        if (online->n_transitions() == 0) continue;
        l = pol.update_offpolicy(buffer::sample_batch(*online, cfg.batch_size, sample_rng));
      }
      for (const auto& [k, v] : l) rec.losses[k] += v / static_cast<double>(cfg.updates_per_epoch);
    }
    if (episodes) rec.train_return = returns / static_cast<double>(episodes);
    rec.buffer_blocks = online ? online->size() : src.offline->size();
    const bool last = epoch + 1 == cfg.epochs;
    if (eval && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last)) {
      rec.eval = evaluate(pol, *eval->env, eval->config, eval->catalog);
      rec.eval->epoch = epoch;
    }
    if (on_epoch) on_epoch(rec);
    history.push_back(std::move(rec));
  }
  return history;
}

// ---------------------------------------------------------------------------
// Summaries

struct Summary {
  double r_cumu = 0.0, r_avg = 0.0, length = 0.0;
  double coverage = 0.0, diversity = 0.0, novelty = 0.0;
  std::size_t n_epochs = 0;  // evaluated epochs that were averaged
};

/// Mean of the evaluations in the last `fraction` of the epochs.
inline Summary summarize_tail(const std::vector<EpochRecord>& history, double fraction = 0.25) {
  RL4REC_EXPECT(!history.empty(), "summarize_tail: empty history");
  RL4REC_EXPECT(fraction > 0.0 && fraction <= 1.0, "summarize_tail: fraction must be in (0, 1]");
  const std::size_t n = history.size();
  const std::size_t tail = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * n)));
  Summary s;
  for (std::size_t k = n - tail; k < n; ++k) {
    const auto& e = history[k].eval;
    if (!e) continue;
    s.r_cumu += e->r_cumu;
    s.r_avg += e->r_avg;
    s.length += e->length;
    s.coverage += e->coverage;
    s.diversity += e->diversity;
    s.novelty += e->novelty;
    ++s.n_epochs;
  }
  RL4REC_EXPECT(s.n_epochs > 0, "summarize_tail: no evaluated epoch in the tail");
  const double d = static_cast<double>(s.n_epochs);
  for (double* v : {&s.r_cumu, &s.r_avg, &s.length, &s.coverage, &s.diversity, &s.novelty}) *v /= d;
  return s;
}

inline Summary summarize(const MetricReport& r) {
  return {r.r_cumu, r.r_avg, r.length, r.coverage, r.diversity, r.novelty, 1};
}

/// Mean reward a user model predicts for the items a policy recommends versus
/// the mean reward those recommendations actually earn.
struct PreferenceGap {
  double estimated = 0.0;
  double truth = 0.0;
};

inline PreferenceGap preference_gap(const MetricReport& truth_episodes, const data::RewardModel& estimator) {
  PreferenceGap g;
  std::size_t n = 0;
  for (const auto& tr : truth_episodes.episodes)
    for (const auto& s : tr.steps) {
      g.estimated += estimator.predict(s.observation.user, s.action);
      g.truth += s.reward;
      ++n;
    }
  RL4REC_EXPECT(n > 0, "preference_gap: no recommendations");
  g.estimated /= static_cast<double>(n);
  g.truth /= static_cast<double>(n);
  return g;
}

}  // namespace rl4rec::exec
