#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "rl4rec/buffer/buffer.hpp"
#include "rl4rec/data/env.hpp"
#include "rl4rec/policy/policy.hpp"

namespace rl4rec::buffer {

/// Exactly one of the two counts must be set.
struct CollectTarget {
  std::size_t n_episodes = 0;
  std::size_t n_steps = 0;

  static CollectTarget episodes(std::size_t n) { return {n, 0}; }
  static CollectTarget steps(std::size_t n) { return {0, n}; }
};

struct CollectStats {
  std::size_t episodes = 0;  // episodes finished during the call
  std::size_t steps = 0;
  double reward_sum = 0.0;             // over every step taken during the call
  std::vector<double> episode_returns;  // whole-episode returns, in finishing order
};

/// Chooses one action per observation under the matching mask.
using ActFn = std::function<std::vector<policy::ActionChoice>(std::span<const data::Observation* const>,
                                                              std::span<const data::ActionMask>, Rng&)>;

inline ActFn policy_actor(const policy::Policy& pol, policy::Mode mode) {
  return [&pol, mode](std::span<const data::Observation* const> obs, std::span<const data::ActionMask> masks,
                      Rng& rng) { return pol.select_actions(obs, masks, mode, rng); };
}

/// Uniform over allowed items; the baseline every learned policy is compared to.
inline ActFn uniform_random_actor() {
  return [](std::span<const data::Observation* const> obs, std::span<const data::ActionMask> masks, Rng& rng) {
    std::vector<policy::ActionChoice> out(obs.size());
    for (std::size_t b = 0; b < obs.size(); ++b) {
      std::vector<double> w(masks[b].begin(), masks[b].end());
      RL4REC_EXPECT(policy::any_allowed(masks[b]), "action requested with every item masked");
      out[b].item = rng.categorical(w);
      double n = 0.0;
      for (double x : w) n += x;
      out[b].logprob = -std::log(n);
    }
    return out;
  };
}

/// Steps a fixed set of environments round-robin, one block per step into the
/// lane matching the environment's index. Episodes left unfinished by a
/// step-count target resume on the next call.
class Collector {
 public:
  explicit Collector(std::vector<std::unique_ptr<data::Environment>> envs) : envs_(std::move(envs)) {
    RL4REC_EXPECT(!envs_.empty(), "collector needs at least one environment");
    running_.assign(envs_.size(), 0.0);
  }

  std::size_t n_envs() const { return envs_.size(); }
  data::Environment& env(std::size_t k) { return *envs_.at(k); }

  /// With an episode target, no episode is started once enough are under way,
  /// so the call ends with every environment between episodes.
  CollectStats collect(const policy::Policy& pol, Buffer& buf, CollectTarget target, policy::Mode mode,
                       Rng& rng) {
    return collect(policy_actor(pol, mode), buf, target, rng,
                   policy::family(pol.kind()) == policy::Family::OnPolicy);
  }

  CollectStats collect(const ActFn& act, Buffer& buf, CollectTarget target, Rng& rng, bool record_logprob) {
    RL4REC_EXPECT((target.n_episodes > 0) != (target.n_steps > 0),
                  "collect: exactly one positive target (episodes or steps) required");
    RL4REC_EXPECT(buf.n_lanes() == envs_.size(), "collect: buffer lanes must match environments");
    const bool by_episodes = target.n_episodes > 0;
    CollectStats stats;
    std::vector<std::uint8_t> active(envs_.size(), 0);
    std::size_t in_progress = 0;
    for (std::size_t k = 0; k < envs_.size(); ++k) {
      // A cleared lane orphans an unfinished episode; it is dropped.
      if (!envs_[k]->terminated() && !buf.expects_start(k)) {
        active[k] = 1;
        ++in_progress;
      }
    }
    auto done = [&] {
      return by_episodes ? stats.episodes >= target.n_episodes : stats.steps >= target.n_steps;
    };
    while (!done()) {
      for (std::size_t k = 0; k < envs_.size(); ++k) {
        if (active[k]) continue;
        if (by_episodes && stats.episodes + in_progress >= target.n_episodes) continue;
        envs_[k]->reset();
        running_[k] = 0.0;
        active[k] = 1;
        ++in_progress;
      }
      std::vector<std::size_t> ids;
      std::vector<const data::Observation*> obs;
      std::vector<data::ActionMask> masks;
      for (std::size_t k = 0; k < envs_.size(); ++k) {
        if (!active[k]) continue;
        ids.push_back(k);
        obs.push_back(&envs_[k]->observation());
        masks.push_back(envs_[k]->action_mask());
      }
      RL4REC_EXPECT(!ids.empty(), "collect: no environment can make progress");
      const auto choices = act(obs, masks, rng);
      for (std::size_t j = 0; j < ids.size() && !done(); ++j) {
        const std::size_t k = ids[j];
        data::Environment& e = *envs_[k];
        Block b;
        b.env_id = k;
        b.observation = e.observation();
        b.action = choices[j].item;
        b.is_start = buf.expects_start(k);
        b.repeat_removal = e.removes_repeats();
        if (record_logprob) b.behavior_logprob = choices[j].logprob;
        const data::StepResult r = e.step(b.action);
        b.reward = r.reward;
        b.done = r.terminated;
        buf.push(std::move(b));
        ++stats.steps;
        stats.reward_sum += r.reward;
        running_[k] += r.reward;
        if (r.terminated) {
          ++stats.episodes;
          stats.episode_returns.push_back(running_[k]);
          active[k] = 0;
          --in_progress;
        }
      }
    }
    return stats;
  }

 private:
  std::vector<std::unique_ptr<data::Environment>> envs_;
  std::vector<double> running_;
};

/// Independent copies of a template environment with seeds base, base+1, ...
inline std::vector<std::unique_ptr<data::Environment>> replicate(const data::Environment& proto, std::size_t n,
                                                                 std::uint64_t base_seed) {
  std::vector<std::unique_ptr<data::Environment>> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(proto.clone(base_seed + k));
  return out;
}

}  // namespace rl4rec::buffer
