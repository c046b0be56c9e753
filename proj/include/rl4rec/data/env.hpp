#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rl4rec/data/dataset.hpp"
#include "rl4rec/data/reward_model.hpp"
#include "rl4rec/error.hpp"
#include "rl4rec/rng.hpp"

namespace rl4rec::data {

struct Interaction {
  ItemId item = 0;
  double reward = 0.0;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct Observation {
  UserId user = 0;
  std::vector<Interaction> history;

  friend bool operator==(const Observation&, const Observation&) = default;
};

struct StepInfo {
  bool quit = false;       // the quit rule fired
  bool truncated = false;  // max_steps reached
  bool exhausted = false;  // repeat removal ran out of items
  bool from_log = false;   // reward came from the ground-truth log
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool terminated = false;
  StepInfo info;
};

/// Allowed-action flags (1 = allowed) over the item space.
using ActionMask = std::vector<std::uint8_t>;

/// Category-boredom quit rule: the newest item triggers a quit when at least
/// K of the W items shown before it share its category, or when its reward is
/// below min_reward.
struct QuitRule {
  std::size_t window = 4;
  std::size_t category_threshold = 2;
  std::optional<double> min_reward;

  void validate() const {
    if (window == 0 || category_threshold == 0) throw ConfigError("quit rule: W and K must be positive");
    if (category_threshold > window) throw ConfigError("quit rule: K must not exceed W");
  }
};

/// `categories` may be empty, in which case only the reward floor applies.
inline bool quit_triggered(std::span<const Interaction> history, const QuitRule& rule,
                           std::span<const int> categories) {
  if (history.empty()) return false;
  const Interaction& newest = history.back();
  if (rule.min_reward && newest.reward < *rule.min_reward) return true;
  if (categories.empty()) return false;
  const int cat = categories[newest.item];
  const std::size_t n_prev = history.size() - 1;
  const std::size_t begin = n_prev > rule.window ? n_prev - rule.window : 0;
  std::size_t same = 0;
  for (std::size_t k = begin; k < n_prev; ++k)
    if (categories[history[k].item] == cat) ++same;
  return same >= rule.category_threshold;
}

/// Gymnasium-style environment over a discrete item space.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual Observation reset(std::optional<UserId> user = std::nullopt) = 0;
  virtual StepResult step(ItemId action) = 0;
  virtual ActionMask action_mask() const = 0;
  virtual std::size_t n_items() const = 0;
  virtual std::size_t n_users() const = 0;
  virtual bool terminated() const = 0;
  virtual const Observation& observation() const = 0;
  virtual std::unique_ptr<Environment> clone(std::uint64_t seed) const = 0;
  /// True when already-recommended items are masked out.
  virtual bool removes_repeats() const { return false; }
};

/// Exact-match lookup of logged rewards.
class RewardLog {
 public:
  RewardLog(std::span<const InteractionRecord> records, std::size_t n_items) : n_items_(n_items) {
    for (const auto& r : records) values_[key(r.user, r.item)] = r.reward;
  }
  std::optional<double> find(UserId u, ItemId i) const {
    auto it = values_.find(key(u, i));
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t size() const { return values_.size(); }

 private:
  std::uint64_t key(UserId u, ItemId i) const { return static_cast<std::uint64_t>(u) * n_items_ + i; }
  std::size_t n_items_;
  std::unordered_map<std::uint64_t, double> values_;
};

struct RecEnvConfig {
  std::size_t max_steps = 30;
  bool remove_recommended = false;
  bool quit_enabled = true;
  QuitRule quit;
  std::uint64_t seed = 0;
};

/// Simulated user: rewards come from the ground-truth log when the pair was
/// observed and from the reward model otherwise.
class RecEnv final : public Environment {
 public:
  RecEnv(std::shared_ptr<const RewardModel> model, std::shared_ptr<const RewardLog> log,
         std::shared_ptr<const ItemCatalog> catalog, RecEnvConfig cfg)
      : model_(std::move(model)), log_(std::move(log)), catalog_(std::move(catalog)), cfg_(cfg), rng_(cfg.seed) {
    RL4REC_EXPECT(model_ != nullptr || log_ != nullptr, "RecEnv needs a reward model or a log");
    RL4REC_EXPECT(catalog_ != nullptr, "RecEnv needs an item catalog");
    if (cfg_.max_steps == 0) throw ConfigError("max_steps must be positive");
    if (cfg_.quit_enabled) cfg_.quit.validate();
    n_users_ = model_ ? model_->n_users() : 0;
    if (model_) RL4REC_EXPECT(model_->n_items() == catalog_->n_items, "RecEnv: model/catalog item mismatch");
    shown_.assign(catalog_->n_items, 0);
    terminated_ = true;
  }

  void set_n_users(std::size_t n) { n_users_ = n; }
  const RecEnvConfig& config() const { return cfg_; }

  Observation reset(std::optional<UserId> user = std::nullopt) override {
    RL4REC_EXPECT(n_users_ > 0, "RecEnv: no users");
    const UserId u = user ? *user : static_cast<UserId>(rng_.uniform_int(n_users_));
    RL4REC_EXPECT(u < n_users_, "env_reset: unknown user " + std::to_string(u));
    obs_ = Observation{u, {}};
    std::fill(shown_.begin(), shown_.end(), 0);
    n_shown_ = 0;
    terminated_ = false;
    return obs_;
  }

  StepResult step(ItemId action) override {
    RL4REC_EXPECT(!terminated_, "env_step after termination");
    RL4REC_EXPECT(action < catalog_->n_items, "env_step: item id out of range");
    RL4REC_EXPECT(!(cfg_.remove_recommended && shown_[action]),
                  "env_step: item " + std::to_string(action) + " already recommended");
    StepResult out;
    if (log_) {
      if (auto v = log_->find(obs_.user, action)) {
        out.reward = *v;
        out.info.from_log = true;
      }
    }
    if (!out.info.from_log) {
      RL4REC_EXPECT(model_ != nullptr, "RecEnv: pair absent from log and no reward model");
      out.reward = model_->predict(obs_.user, action);
    }
    obs_.history.push_back({action, out.reward});
    if (!shown_[action]) {
      shown_[action] = 1;
      ++n_shown_;
    }
    const std::span<const int> cats =
        catalog_->has_categories ? std::span<const int>(catalog_->category) : std::span<const int>();
    out.info.quit = cfg_.quit_enabled && quit_triggered(obs_.history, cfg_.quit, cats);
    out.info.truncated = obs_.history.size() >= cfg_.max_steps;
    out.info.exhausted = cfg_.remove_recommended && n_shown_ == catalog_->n_items;
    terminated_ = out.info.quit || out.info.truncated || out.info.exhausted;
    out.terminated = terminated_;
    out.observation = obs_;
    return out;
  }

  ActionMask action_mask() const override {
    ActionMask m(catalog_->n_items, 1);
    if (cfg_.remove_recommended)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = shown_[i] ? 0 : 1;
    return m;
  }

  std::size_t n_items() const override { return catalog_->n_items; }
  std::size_t n_users() const override { return n_users_; }
  bool terminated() const override { return terminated_; }
  const Observation& observation() const override { return obs_; }
  std::size_t step_count() const { return obs_.history.size(); }
  bool removes_repeats() const override { return cfg_.remove_recommended; }

  std::unique_ptr<Environment> clone(std::uint64_t seed) const override {
    RecEnvConfig c = cfg_;
    c.seed = seed;
    auto env = std::make_unique<RecEnv>(model_, log_, catalog_, c);
    env->n_users_ = n_users_;
    return env;
  }

 private:
  std::shared_ptr<const RewardModel> model_;
  std::shared_ptr<const RewardLog> log_;
  std::shared_ptr<const ItemCatalog> catalog_;
  RecEnvConfig cfg_;
  Rng rng_;
  std::size_t n_users_ = 0;
  Observation obs_;
  std::vector<std::uint8_t> shown_;
  std::size_t n_shown_ = 0;
  bool terminated_ = true;
};

// ---------------------------------------------------------------------------
// Small MDPs with known optimal values. The observation's user field carries
// the state index and the history stays empty, so a user-embedding tracker
// sees a tabular state. Actions are "items".

/// Deterministic chain of n states; action 0 moves left, 1 moves right.
/// Entering the last state pays 1 and ends the episode.
class ChainEnv final : public Environment {
 public:
  explicit ChainEnv(std::size_t n_states = 5, std::size_t max_steps = 20)
      : n_states_(n_states), max_steps_(max_steps) {
    RL4REC_EXPECT(n_states >= 2, "ChainEnv needs at least two states");
  }

  Observation reset(std::optional<UserId> = std::nullopt) override {
    obs_ = Observation{0, {}};
    steps_ = 0;
    terminated_ = false;
    return obs_;
  }

  StepResult step(ItemId action) override {
    RL4REC_EXPECT(!terminated_, "env_step after termination");
    RL4REC_EXPECT(action < 2, "ChainEnv: action out of range");
    StepResult out;
    std::size_t s = obs_.user;
    s = action == 1 ? s + 1 : (s > 0 ? s - 1 : 0);
    out.reward = s == n_states_ - 1 ? 1.0 : 0.0;
    obs_.user = s;
    ++steps_;
    out.info.quit = s == n_states_ - 1;
    out.info.truncated = steps_ >= max_steps_;
    terminated_ = out.info.quit || out.info.truncated;
    out.terminated = terminated_;
    out.observation = obs_;
    return out;
  }

  ActionMask action_mask() const override { return ActionMask(2, 1); }
  std::size_t n_items() const override { return 2; }
  std::size_t n_users() const override { return n_states_; }
  bool terminated() const override { return terminated_; }
  const Observation& observation() const override { return obs_; }
  std::unique_ptr<Environment> clone(std::uint64_t) const override {
    return std::make_unique<ChainEnv>(n_states_, max_steps_);
  }

  /// Discounted return of the optimal policy from the start state.
  double optimal_return(double gamma) const { return std::pow(gamma, static_cast<double>(n_states_ - 2)); }

 private:
  std::size_t n_states_, max_steps_;
  std::size_t steps_ = 0;
  Observation obs_;
  bool terminated_ = true;
};

/// One-step bandit with fixed arm rewards.
class BanditEnv final : public Environment {
 public:
  explicit BanditEnv(std::vector<double> arm_rewards = {1.0, 0.0}) : rewards_(std::move(arm_rewards)) {
    RL4REC_EXPECT(!rewards_.empty(), "BanditEnv needs arms");
  }

  Observation reset(std::optional<UserId> = std::nullopt) override {
    obs_ = Observation{0, {}};
    terminated_ = false;
    return obs_;
  }

  StepResult step(ItemId action) override {
    RL4REC_EXPECT(!terminated_, "env_step after termination");
    RL4REC_EXPECT(action < rewards_.size(), "BanditEnv: arm out of range");
    StepResult out;
    out.reward = rewards_[action];
    terminated_ = true;
    out.terminated = true;
    out.info.truncated = true;
    out.observation = obs_;
    return out;
  }

  ActionMask action_mask() const override { return ActionMask(rewards_.size(), 1); }
  std::size_t n_items() const override { return rewards_.size(); }
  std::size_t n_users() const override { return 1; }
  bool terminated() const override { return terminated_; }
  const Observation& observation() const override { return obs_; }
  std::unique_ptr<Environment> clone(std::uint64_t) const override {
    return std::make_unique<BanditEnv>(rewards_);
  }

 private:
  std::vector<double> rewards_;
  Observation obs_;
  bool terminated_ = true;
};

}  // namespace rl4rec::data
