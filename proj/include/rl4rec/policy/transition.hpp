#pragma once

#include <cstdint>
#include <vector>

#include "rl4rec/data/env.hpp"
#include "rl4rec/error.hpp"

namespace rl4rec::policy {

using data::ActionMask;
using data::ItemId;
using data::Observation;

/// Allowed items for an observation. Under repeat removal, items already in
/// the history are excluded.
inline ActionMask mask_for(const Observation& o, std::size_t n_items, bool repeat_removal) {
  ActionMask m(n_items, 1);
  if (repeat_removal)
    for (const auto& x : o.history)
      if (x.item < n_items) m[x.item] = 0;
  return m;
}

inline bool any_allowed(const ActionMask& m) {
  for (auto v : m)
    if (v) return true;
  return false;
}

/// One decision within a trajectory.
struct Step {
  Observation observation;
  ItemId action = 0;
  double reward = 0.0;
  bool done = false;
  double behavior_logprob = 0.0;
  bool repeat_removal = false;
};

struct Trajectory {
  std::vector<Step> steps;

  double reward_sum() const {
    double s = 0.0;
    for (const auto& x : steps) s += x.reward;
    return s;
  }
};

enum class DataSource { Online, Offline };

/// Column-wise transitions. Rows with done = 1 must not bootstrap from the
/// next state.
struct TransitionBatch {
  std::vector<Observation> states;
  std::vector<ItemId> actions;
  std::vector<double> rewards;
  std::vector<Observation> next_states;
  std::vector<std::uint8_t> dones;
  std::vector<std::uint8_t> repeat_removal;  // per row; masks derive from it
  std::vector<double> behavior_logprobs;     // may be empty
  DataSource source = DataSource::Online;

  std::size_t size() const { return states.size(); }

  void push(const Observation& s, ItemId a, double r, const Observation& next, bool done,
            bool removal, double logprob = 0.0) {
    states.push_back(s);
    actions.push_back(a);
    rewards.push_back(r);
    next_states.push_back(next);
    dones.push_back(done ? 1 : 0);
    repeat_removal.push_back(removal ? 1 : 0);
    behavior_logprobs.push_back(logprob);
  }

  void validate() const {
    const std::size_t n = states.size();
    RL4REC_EXPECT(n > 0, "transition batch is empty");
    RL4REC_EXPECT(actions.size() == n && rewards.size() == n && dones.size() == n &&
                      repeat_removal.size() == n,
                  "transition batch columns differ in length");
    RL4REC_EXPECT(next_states.size() == n, "transition batch lacks next states");
    RL4REC_EXPECT(behavior_logprobs.empty() || behavior_logprobs.size() == n,
                  "transition batch behavior log-probs differ in length");
  }
};

/// Flattens trajectories into transitions; the next state of a step is the
/// observation of the following step (the final step's own observation is
/// used as an unused placeholder since it is done).
inline TransitionBatch to_batch(const std::vector<Trajectory>& trajectories, DataSource source) {
  TransitionBatch b;
  b.source = source;
  for (const auto& tr : trajectories) {
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const Step& s = tr.steps[t];
      const bool last = t + 1 == tr.steps.size();
      b.push(s.observation, s.action, s.reward, last ? s.observation : tr.steps[t + 1].observation,
             s.done || last, s.repeat_removal, s.behavior_logprob);
    }
  }
  return b;
}

/// G_t = r_t + gamma * G_{t+1}, accumulated from the end.
inline std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t k = rewards.size(); k-- > 0;) {
    acc = rewards[k] + gamma * acc;
    g[k] = acc;
  }
  return g;
}

}  // namespace rl4rec::policy
