#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rl4rec/error.hpp"
#include "rl4rec/nn/checkpoint.hpp"
#include "rl4rec/nn/layers.hpp"
#include "rl4rec/nn/optim.hpp"
#include "rl4rec/nn/tape.hpp"
#include "rl4rec/policy/transition.hpp"
#include "rl4rec/rng.hpp"
#include "rl4rec/tracker/state_tracker.hpp"

namespace rl4rec::policy {

enum class PolicyKind { PG, A2C, PPO, DQN, DDPG, BCQ, CQL, CRR, SQN };
enum class Family { OnPolicy, OffPolicy, Batch };
enum class Mode { Explore, Greedy };
enum class CrrTransform { BinaryMax, Exp };

inline constexpr PolicyKind kAllPolicyKinds[] = {PolicyKind::PG,  PolicyKind::A2C,  PolicyKind::PPO,
                                                 PolicyKind::DQN, PolicyKind::DDPG, PolicyKind::BCQ,
                                                 PolicyKind::CQL, PolicyKind::CRR,  PolicyKind::SQN};

inline const char* to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::PG: return "PG";
    case PolicyKind::A2C: return "A2C";
    case PolicyKind::PPO: return "PPO";
    case PolicyKind::DQN: return "DQN";
    case PolicyKind::DDPG: return "DDPG";
    case PolicyKind::BCQ: return "BCQ";
    case PolicyKind::CQL: return "CQL";
    case PolicyKind::CRR: return "CRR";
    case PolicyKind::SQN: return "SQN";
  }
  return "?";
}

inline PolicyKind parse_policy_kind(const std::string& s) {
  for (auto k : kAllPolicyKinds)
    if (s == to_string(k)) return k;
  throw ConfigError("unknown policy kind '" + s + "'");
}

inline Family family(PolicyKind k) {
  switch (k) {
    case PolicyKind::PG:
    case PolicyKind::A2C:
    case PolicyKind::PPO: return Family::OnPolicy;
    case PolicyKind::DQN:
    case PolicyKind::DDPG: return Family::OffPolicy;
    default: return Family::Batch;
  }
}

struct PolicyConfig {
  PolicyKind kind = PolicyKind::A2C;
  double gamma = 0.9;
  double learning_rate = 1e-3;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::size_t hidden = 64;
  // Actor-critic family.
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  bool normalize_advantage = true;
  double ppo_clip = 0.2;
  std::size_t ppo_epochs = 4;
  // Q-learning family.
  bool huber = true;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_fraction = 0.5;  // share of training over which epsilon decays
  std::size_t target_sync = 100;  // hard target sync period, in updates
  double ddpg_tau = 0.005;
  double ddpg_noise = 0.1;
  double bcq_threshold = 0.3;
  double cql_alpha = 1.0;
  CrrTransform crr_transform = CrrTransform::BinaryMax;
  double crr_beta = 1.0;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("policy: gamma must lie in [0, 1]");
    if (!(learning_rate > 0.0)) throw ConfigError("policy: learning rate must be positive");
    if (hidden == 0) throw ConfigError("policy: hidden size must be positive");
    if (!(ppo_clip > 0.0)) throw ConfigError("policy: ppo_clip must be positive");
    if (ppo_epochs == 0) throw ConfigError("policy: ppo_epochs must be positive");
    if (target_sync == 0) throw ConfigError("policy: target_sync must be positive");
    if (!(epsilon_end >= 0.0 && epsilon_start <= 1.0 && epsilon_end <= 1.0 && epsilon_start >= 0.0))
      throw ConfigError("policy: epsilon values must lie in [0, 1]");
    if (!(epsilon_fraction > 0.0)) throw ConfigError("policy: epsilon_fraction must be positive");
    if (!(ddpg_tau > 0.0 && ddpg_tau <= 1.0)) throw ConfigError("policy: ddpg_tau must lie in (0, 1]");
    if (!(bcq_threshold >= 0.0 && bcq_threshold <= 1.0)) throw ConfigError("policy: bcq_threshold must lie in [0, 1]");
    if (!(crr_beta > 0.0)) throw ConfigError("policy: crr_beta must be positive");
  }
};

struct ActionChoice {
  ItemId item = 0;
  double logprob = 0.0;
};

using Losses = std::map<std::string, double>;

// ---------------------------------------------------------------------------
// Action helpers

/// Highest value among allowed entries; ties go to the lowest index.
inline ItemId masked_argmax(std::span<const double> values, const ActionMask& mask) {
  RL4REC_EXPECT(mask.size() == values.size(), "masked_argmax: mask size mismatch");
  std::size_t best = values.size();
  for (std::size_t i = 0; i < values.size(); ++i)
    if (mask[i] && (best == values.size() || values[i] > values[best])) best = i;
  RL4REC_EXPECT(best < values.size(), "action requested with every item masked");
  return best;
}

/// Log-probabilities of a masked softmax; masked entries hold -infinity.
inline std::vector<double> masked_log_softmax(std::span<const double> logits, const ActionMask& mask) {
  RL4REC_EXPECT(mask.size() == logits.size(), "masked_log_softmax: mask size mismatch");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) mx = std::max(mx, logits[i]);
  RL4REC_EXPECT(std::isfinite(mx), "action requested with every item masked");
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) z += std::exp(logits[i] - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(logits.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) out[i] = logits[i] - lz;
  return out;
}

/// Allowed item whose embedding has the largest dot product with the
/// proto-action; ties go to the lowest id. Rows of `item_embeddings` beyond
/// the mask size (padding) are ignored.
inline ItemId map_continuous_action(std::span<const double> proto, const nn::Tensor& item_embeddings,
                                    const ActionMask& mask) {
  RL4REC_EXPECT(item_embeddings.cols() == proto.size(), "map_continuous_action: dimension mismatch");
  RL4REC_EXPECT(item_embeddings.rows() >= mask.size(), "map_continuous_action: too few embeddings");
  for (double v : proto) RL4REC_EXPECT(std::isfinite(v), "map_continuous_action: non-finite proto-action");
  std::vector<double> scores(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto e = item_embeddings.row_span(i);
    double s = 0.0;
    for (std::size_t k = 0; k < proto.size(); ++k) s += proto[k] * e[k];
    scores[i] = s;
  }
  return masked_argmax(scores, mask);
}

/// PPO clipped surrogate per row: min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)
/// with rho = exp(logp - logp_old).
inline nn::Var ppo_surrogate(nn::Var logp, nn::Var logp_old, nn::Var advantage, double clip_eps) {
  nn::Var ratio = nn::exp(logp - logp_old);
  return nn::minimum(ratio * advantage, nn::clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage);
}

/// Per-row entropy of a masked softmax (B x 1).
inline nn::Var masked_entropy(nn::Var logits, std::span<const std::uint8_t> mask) {
  return nn::neg(nn::sum_cols(nn::softmax(logits, mask) * nn::log_softmax(logits, mask)));
}

// ---------------------------------------------------------------------------

/// All trainable pieces of a policy. Unused heads stay empty.
struct Networks {
  tracker::StateTracker tracker;
  nn::Mlp actor;   // logits over items: policy, behavior-cloning or next-item head
  nn::Mlp critic;  // V(s)
  nn::Mlp q;       // Q(s, .)
  nn::Mlp proto;   // continuous actor: state -> proto-action
  nn::Mlp qsa;     // continuous critic: [state, action embedding] -> Q

  std::vector<nn::Parameter*> parameters() {
    auto out = tracker.parameters();
    for (nn::Mlp* m : {&actor, &critic, &q, &proto, &qsa}) m->collect(out);
    return out;
  }
};

class Policy {
 public:
  Policy(const PolicyConfig& cfg, const tracker::TrackerConfig& tcfg, std::size_t n_users,
         std::size_t n_items, std::uint64_t seed)
      : cfg_(cfg), n_items_(n_items) {
    cfg_.validate();
    RL4REC_EXPECT(n_items > 0, "policy: n_items must be positive");
    // Every component draws from its own stream, so the parameters a kind
    // shares with another kind are initialized identically under one seed.
    Rng root(seed);
    const std::uint64_t tracker_seed = root.next();
    Rng r_actor = root.split(), r_critic = root.split(), r_q = root.split(), r_proto = root.split(),
        r_qsa = root.split();
    live_ = std::make_unique<Networks>();
    live_->tracker = tracker::StateTracker(tcfg, n_users, n_items, tracker_seed);
    const std::size_t S = live_->tracker.output_dim(), H = cfg_.hidden, d = tcfg.embedding_dim;
    const PolicyKind k = cfg_.kind;
    if (k == PolicyKind::PG || k == PolicyKind::A2C || k == PolicyKind::PPO || k == PolicyKind::BCQ ||
        k == PolicyKind::CRR || k == PolicyKind::SQN)
      live_->actor = nn::Mlp("actor", {S, H, n_items}, r_actor);
    if (k == PolicyKind::A2C || k == PolicyKind::PPO) live_->critic = nn::Mlp("critic", {S, H, 1}, r_critic);
    if (k == PolicyKind::DQN || k == PolicyKind::BCQ || k == PolicyKind::CQL || k == PolicyKind::CRR ||
        k == PolicyKind::SQN)
      live_->q = nn::Mlp("q", {S, H, n_items}, r_q);
    if (k == PolicyKind::DDPG) {
      live_->proto = nn::Mlp("proto", {S, H, d}, r_proto);
      live_->qsa = nn::Mlp("qsa", {S + d, H, 1}, r_qsa);
    }
    if (has_target()) target_ = std::make_unique<Networks>(*live_);
    nn::OptimizerConfig oc;
    oc.learning_rate = cfg_.learning_rate;
    oc.max_grad_norm = cfg_.max_grad_norm;
    optimizer_ = nn::Optimizer(oc, live_->parameters());
  }

  PolicyKind kind() const { return cfg_.kind; }
  const PolicyConfig& config() const { return cfg_; }
  std::size_t n_items() const { return n_items_; }
  bool has_target() const { return family(cfg_.kind) != Family::OnPolicy; }
  std::size_t update_count() const { return updates_; }
  const tracker::StateTracker& tracker() const { return live_->tracker; }
  Networks& live() { return *live_; }
  const Networks& live() const { return *live_; }
  Networks* target() { return target_.get(); }

  std::vector<nn::Parameter*> parameters() { return live_->parameters(); }
  std::vector<nn::Parameter*> target_parameters() {
    return target_ ? target_->parameters() : std::vector<nn::Parameter*>{};
  }

  /// Training progress in [0, 1]; drives the epsilon schedule.
  void set_progress(double fraction) { progress_ = std::clamp(fraction, 0.0, 1.0); }
  double epsilon() const {
    const double t = std::min(1.0, progress_ / cfg_.epsilon_fraction);
    return cfg_.epsilon_start + (cfg_.epsilon_end - cfg_.epsilon_start) * t;
  }

  void sync_target() {
    if (target_) *target_ = *live_;
  }

  // -------------------------------------------------------------------------
  // Acting

  std::vector<ActionChoice> select_actions(std::span<const Observation* const> obs,
                                           std::span<const ActionMask> masks, Mode mode, Rng& rng) const {
    RL4REC_EXPECT(obs.size() == masks.size(), "select_actions: one mask per observation required");
    for (const auto& m : masks) {
      RL4REC_EXPECT(m.size() == n_items_, "select_actions: mask size mismatch");
      RL4REC_EXPECT(any_allowed(m), "action requested with every item masked");
    }
    std::vector<ActionChoice> out(obs.size());
    if (obs.empty()) return out;
    nn::Tape t(false);
    nn::Var s = live_->tracker.encode(t, obs);
    switch (cfg_.kind) {
      case PolicyKind::DQN:
      case PolicyKind::CQL:
      case PolicyKind::BCQ: {
        const nn::Tensor q = live_->q(t, s).value();
        nn::Tensor bc;
        if (cfg_.kind == PolicyKind::BCQ) bc = live_->actor(t, s).value();
        for (std::size_t b = 0; b < obs.size(); ++b) {
          ActionMask allowed = masks[b];
          if (cfg_.kind == PolicyKind::BCQ) allowed = bcq_filter(bc.row_span(b), masks[b]);
          if (mode == Mode::Explore && rng.bernoulli(epsilon())) {
            out[b].item = uniform_allowed(allowed, rng);
          } else {
            out[b].item = masked_argmax(q.row_span(b), allowed);
          }
        }
        break;
      }
      case PolicyKind::DDPG: {
        nn::Tensor proto = live_->proto(t, s).value();
        const nn::Tensor& table = live_->tracker.item_embeddings().value;
        for (std::size_t b = 0; b < obs.size(); ++b) {
          auto row = proto.row_span(b);
          if (mode == Mode::Explore)
            for (double& v : row) v += rng.normal(0.0, cfg_.ddpg_noise);
          out[b].item = map_continuous_action(row, table, masks[b]);
        }
        break;
      }
      default: {
        const nn::Tensor logits = live_->actor(t, s).value();
        for (std::size_t b = 0; b < obs.size(); ++b) {
          const auto logp = masked_log_softmax(logits.row_span(b), masks[b]);
          ItemId a;
          if (mode == Mode::Explore) {
            std::vector<double> p(logp.size());
            for (std::size_t i = 0; i < p.size(); ++i) p[i] = masks[b][i] ? std::exp(logp[i]) : 0.0;
            a = rng.categorical(p);
          } else {
            a = masked_argmax(logits.row_span(b), masks[b]);
          }
          out[b] = {a, logp[a]};
        }
        break;
      }
    }
    return out;
  }

  ActionChoice select_action(const Observation& o, const ActionMask& mask, Mode mode, Rng& rng) const {
    const Observation* p = &o;
    return select_actions(std::span<const Observation* const>(&p, 1), std::span<const ActionMask>(&mask, 1),
                          mode, rng)
        .front();
  }

  /// Head outputs for one observation, for inspection and tests.
  nn::Tensor q_values(const Observation& o, bool use_target = false) const {
    const Networks& n = use_target && target_ ? *target_ : *live_;
    RL4REC_EXPECT(!n.q.empty(), "policy kind has no Q head");
    nn::Tape t(false);
    return n.q(t, n.tracker.encode(t, o)).value();
  }
  nn::Tensor logits(const Observation& o) const {
    RL4REC_EXPECT(!live_->actor.empty(), "policy kind has no logit head");
    nn::Tape t(false);
    return live_->actor(t, live_->tracker.encode(t, o)).value();
  }

  // -------------------------------------------------------------------------
  // Learning

  /// REINFORCE (PG), advantage actor-critic (A2C) or PPO on trajectories
  /// collected by this very policy.
  Losses update_onpolicy(const std::vector<Trajectory>& trajectories) {
    if (family(cfg_.kind) != Family::OnPolicy)
      throw ConfigError(std::string(to_string(cfg_.kind)) + " is not an on-policy method");
    RL4REC_EXPECT(!trajectories.empty(), "update_onpolicy: no trajectories");
    for (const auto& tr : trajectories) RL4REC_EXPECT(!tr.steps.empty(), "update_onpolicy: empty trajectory");
    const TransitionBatch batch = to_batch(trajectories, DataSource::Online);
    const std::size_t B = batch.size();
    const auto states = pointers(batch.states);
    const nn::Mask mask = batch_mask(batch.states, batch.repeat_removal);
    Losses losses;

    if (cfg_.kind == PolicyKind::PG) {
      std::vector<double> g;
      for (const auto& tr : trajectories) {
        std::vector<double> r;
        for (const auto& s : tr.steps) r.push_back(s.reward);
        const auto gt = discounted_returns(r, cfg_.gamma);
        g.insert(g.end(), gt.begin(), gt.end());
      }
      double baseline = 0.0;
      for (double v : g) baseline += v;
      baseline /= static_cast<double>(B);
      nn::Tensor adv(B, 1);
      for (std::size_t k = 0; k < B; ++k) adv[k] = g[k] - baseline;
      optimizer_.zero_grad();
      nn::Tape t;
      nn::Var logits = live_->actor(t, live_->tracker.encode(t, states));
      nn::Var logp = nn::pick(nn::log_softmax(logits, mask), batch.actions);
      nn::Var actor = nn::neg(nn::mean(logp * t.constant(adv)));
      nn::Var entropy = nn::mean(masked_entropy(logits, mask));
      nn::Var loss = actor - nn::scale(entropy, cfg_.entropy_coef);
      t.backward(loss);
      optimizer_.step();
      losses = {{"actor", actor.item()}, {"entropy", entropy.item()}, {"total", loss.item()}};
    } else {
      // Critic targets and advantages from the pre-update networks.
      const nn::Tensor v_next = values(batch.next_states);
      const nn::Tensor v_now = values(batch.states);
      nn::Tensor target(B, 1), adv(B, 1);
      for (std::size_t k = 0; k < B; ++k) {
        target[k] = batch.rewards[k] + (batch.dones[k] ? 0.0 : cfg_.gamma * v_next[k]);
        adv[k] = target[k] - v_now[k];
      }
      if (cfg_.normalize_advantage) normalize(adv);
      nn::Tensor old_logp(B, 1);
      for (std::size_t k = 0; k < B; ++k) old_logp[k] = batch.behavior_logprobs[k];
      const std::size_t rounds = cfg_.kind == PolicyKind::PPO ? cfg_.ppo_epochs : 1;
      for (std::size_t r = 0; r < rounds; ++r) {
        optimizer_.zero_grad();
        nn::Tape t;
        nn::Var s = live_->tracker.encode(t, states);
        nn::Var logits = live_->actor(t, s);
        nn::Var logp = nn::pick(nn::log_softmax(logits, mask), batch.actions);
        nn::Var actor = cfg_.kind == PolicyKind::PPO
                            ? nn::neg(nn::mean(ppo_surrogate(logp, t.constant(old_logp), t.constant(adv), cfg_.ppo_clip)))
                            : nn::neg(nn::mean(logp * t.constant(adv)));
        nn::Var critic = nn::mean(nn::square(live_->critic(t, s) - t.constant(target)));
        nn::Var entropy = nn::mean(masked_entropy(logits, mask));
        nn::Var loss = actor + nn::scale(critic, cfg_.value_coef) - nn::scale(entropy, cfg_.entropy_coef);
        t.backward(loss);
        optimizer_.step();
        losses = {{"actor", actor.item()}, {"critic", critic.item()}, {"entropy", entropy.item()},
                  {"total", loss.item()}};
      }
    }
    ++updates_;
    return losses;
  }

  /// DQN or DDPG on a replay batch.
  Losses update_offpolicy(const TransitionBatch& batch) {
    if (family(cfg_.kind) != Family::OffPolicy)
      throw ConfigError(std::string(to_string(cfg_.kind)) + " is not an off-policy method");
    batch.validate();
    return cfg_.kind == PolicyKind::DDPG ? update_ddpg(batch) : update_q(batch);
  }

  /// BCQ, CQL, CRR or SQN on a batch drawn from a fixed offline buffer.
  Losses update_batchrl(const TransitionBatch& batch) {
    if (family(cfg_.kind) != Family::Batch)
      throw ConfigError(std::string(to_string(cfg_.kind)) + " is not a batch RL method");
    if (batch.source != DataSource::Offline)
      throw ConfigError("batch RL methods learn from offline logs only; got online transitions");
    batch.validate();
    return cfg_.kind == PolicyKind::CRR ? update_crr(batch) : update_q(batch);
  }

  /// TD target r + gamma * (1 - done) * bootstrap for each row (exposed for tests).
  std::vector<double> td_targets(const TransitionBatch& batch) const {
    const std::size_t B = batch.size();
    std::vector<double> y(batch.rewards);
    std::vector<std::size_t> live_rows;
    for (std::size_t k = 0; k < B; ++k)
      if (!batch.dones[k]) live_rows.push_back(k);
    if (live_rows.empty()) return y;
    std::vector<const Observation*> next;
    std::vector<ActionMask> masks;
    for (std::size_t k : live_rows) {
      next.push_back(&batch.next_states[k]);
      masks.push_back(mask_for(batch.next_states[k], n_items_, batch.repeat_removal[k]));
    }
    const std::vector<double> boot = bootstrap_values(next, masks);
    for (std::size_t j = 0; j < live_rows.size(); ++j) y[live_rows[j]] += cfg_.gamma * boot[j];
    return y;
  }

  // -------------------------------------------------------------------------
  // Persistence

  nn::Checkpoint to_checkpoint() const {
    nn::Checkpoint ck;
    ck.meta["kind"] = to_string(cfg_.kind);
    ck.meta["tracker"] = tracker::to_string(live_->tracker.config().kind);
    ck.meta["n_items"] = std::to_string(n_items_);
    ck.meta["updates"] = std::to_string(updates_);
    for (const nn::Parameter* p : live_->parameters()) ck.arrays.push_back({p->name, p->value});
    if (target_)
      for (const nn::Parameter* p : target_->parameters()) ck.arrays.push_back({"target." + p->name, p->value});
    return ck;
  }

  void load_checkpoint(const nn::Checkpoint& ck) {
    if (ck.meta_or("kind") != to_string(cfg_.kind))
      throw ConfigError("checkpoint holds a " + ck.meta_or("kind", "?") + " policy, config asks for " +
                        to_string(cfg_.kind));
    if (ck.meta_or("n_items") != std::to_string(n_items_))
      throw ConfigError("checkpoint item count differs from the dataset");
    nn::restore_parameters(ck, live_->parameters());
    if (target_) {
      for (nn::Parameter* p : target_->parameters()) {
        const nn::Tensor* v = ck.find("target." + p->name);
        if (v == nullptr || !v->same_shape(p->value)) throw ConfigError("checkpoint lacks target " + p->name);
        p->value = *v;
      }
    }
    updates_ = std::stoull(ck.meta_or("updates", "0"));
  }

 private:
  static std::vector<const Observation*> pointers(const std::vector<Observation>& v) {
    std::vector<const Observation*> out;
    out.reserve(v.size());
    for (const auto& o : v) out.push_back(&o);
    return out;
  }

  /// Row-major B x n_items mask, or empty when every row allows everything.
  nn::Mask batch_mask(const std::vector<Observation>& states, const std::vector<std::uint8_t>& removal) const {
    bool any = false;
    for (std::size_t k = 0; k < states.size(); ++k) any |= removal[k] && !states[k].history.empty();
    if (!any) return {};
    nn::Mask m;
    m.reserve(states.size() * n_items_);
    for (std::size_t k = 0; k < states.size(); ++k) {
      const ActionMask row = mask_for(states[k], n_items_, removal[k]);
      m.insert(m.end(), row.begin(), row.end());
    }
    return m;
  }

  static void normalize(nn::Tensor& x) {
    if (x.size() < 2) return;
    double mu = 0.0, var = 0.0;
    for (double v : x.values()) mu += v;
    mu /= static_cast<double>(x.size());
    for (double v : x.values()) var += (v - mu) * (v - mu);
    const double sd = std::sqrt(var / static_cast<double>(x.size()));
    for (double& v : x.values()) v = (v - mu) / (sd + 1e-8);
  }

  static ItemId uniform_allowed(const ActionMask& m, Rng& rng) {
    std::vector<ItemId> allowed;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i]) allowed.push_back(i);
    return allowed[rng.uniform_int(allowed.size())];
  }

  /// Keeps allowed actions whose behavior-cloning probability is at least
  /// bcq_threshold times the most likely allowed action's.
  ActionMask bcq_filter(std::span<const double> bc_logits, const ActionMask& mask) const {
    if (cfg_.bcq_threshold <= 0.0) return mask;
    const auto logp = masked_log_softmax(bc_logits, mask);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < logp.size(); ++i)
      if (mask[i]) best = std::max(best, logp[i]);
    const double cut = best + std::log(cfg_.bcq_threshold);
    ActionMask out(mask.size(), 0);
    for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] && logp[i] >= cut;
    return out;
  }

  /// V(s) from the live critic without recording gradients.
  nn::Tensor values(const std::vector<Observation>& obs) const {
    nn::Tape t(false);
    return live_->critic(t, live_->tracker.encode(t, pointers(obs))).value();
  }

  /// Bootstrap value of each (non-terminal) next state.
  std::vector<double> bootstrap_values(const std::vector<const Observation*>& next,
                                       const std::vector<ActionMask>& masks) const {
    const Networks& tgt = *target_;
    std::vector<double> out(next.size());
    nn::Tape t(false);
    nn::Var s = tgt.tracker.encode(t, next);
    if (cfg_.kind == PolicyKind::DDPG) {
      const nn::Tensor proto = tgt.proto(t, s).value();
      std::vector<std::size_t> actions(next.size());
      for (std::size_t b = 0; b < next.size(); ++b)
        actions[b] = map_continuous_action(proto.row_span(b), tgt.tracker.item_embeddings().value, masks[b]);
      nn::Var e = nn::gather_rows(nn::use(t, tgt.tracker.item_embeddings()), actions);
      const nn::Tensor q = tgt.qsa(t, nn::concat_cols({s, e})).value();
      for (std::size_t b = 0; b < next.size(); ++b) out[b] = q[b];
      return out;
    }
    const nn::Tensor q = tgt.q(t, s).value();
    if (cfg_.kind == PolicyKind::CRR) {
      // Expectation of the target critic under the current actor.
      nn::Tape lt(false);
      const nn::Tensor logits = live_->actor(lt, live_->tracker.encode(lt, next)).value();
      for (std::size_t b = 0; b < next.size(); ++b) {
        const auto logp = masked_log_softmax(logits.row_span(b), masks[b]);
        double v = 0.0;
        for (std::size_t i = 0; i < n_items_; ++i)
          if (masks[b][i]) v += std::exp(logp[i]) * q(b, i);
        out[b] = v;
      }
      return out;
    }
    nn::Tensor bc;
    if (cfg_.kind == PolicyKind::BCQ && cfg_.bcq_threshold > 0.0) {
      nn::Tape lt(false);
      bc = live_->actor(lt, live_->tracker.encode(lt, next)).value();
    }
    for (std::size_t b = 0; b < next.size(); ++b) {
      const ActionMask allowed = bc.size() > 0 ? bcq_filter(bc.row_span(b), masks[b]) : masks[b];
      out[b] = q(b, masked_argmax(q.row_span(b), allowed));
    }
    return out;
  }

  nn::Var td_loss(nn::Var prediction, nn::Var target) const {
    nn::Var diff = prediction - target;
    return nn::mean(cfg_.huber ? nn::huber(diff) : nn::square(diff));
  }

  void after_update() {
    ++updates_;
    if (cfg_.kind == PolicyKind::DDPG) {
      auto live = live_->parameters(), tgt = target_->parameters();
      for (std::size_t k = 0; k < live.size(); ++k) {
        auto dst = tgt[k]->value.values();
        auto src = live[k]->value.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += cfg_.ddpg_tau * (src[i] - dst[i]);
      }
    } else if (updates_ % cfg_.target_sync == 0) {
      sync_target();
    }
  }

  /// Q-learning family: DQN, BCQ, CQL and SQN share the TD core.
  Losses update_q(const TransitionBatch& batch) {
    const std::vector<double> y = td_targets(batch);
    const auto states = pointers(batch.states);
    const nn::Mask mask = batch_mask(batch.states, batch.repeat_removal);
    optimizer_.zero_grad();
    nn::Tape t;
    nn::Var s = live_->tracker.encode(t, states);
    nn::Var q = live_->q(t, s);
    nn::Var q_sa = nn::pick(q, batch.actions);
    nn::Var td = td_loss(q_sa, t.constant(nn::Tensor(y.size(), 1, y)));
    nn::Var loss = td;
    Losses losses{{"td", td.item()}};
    if (cfg_.kind == PolicyKind::CQL) {
      nn::Var reg = nn::mean(nn::logsumexp(q, mask) - q_sa);
      loss = loss + nn::scale(reg, cfg_.cql_alpha);
      losses["cql"] = reg.item();
    } else if (cfg_.kind == PolicyKind::BCQ || cfg_.kind == PolicyKind::SQN) {
      // BCQ's imitation head reads a detached state so it never alters the
      // Q-learning path; SQN's supervised head shares the tracker.
      nn::Var in = cfg_.kind == PolicyKind::BCQ ? nn::detach(s) : s;
      nn::Var ce = nn::neg(nn::mean(nn::pick(nn::log_softmax(live_->actor(t, in), mask), batch.actions)));
      loss = loss + ce;
      losses[cfg_.kind == PolicyKind::BCQ ? "imitation" : "next_item"] = ce.item();
    }
    t.backward(loss);
    optimizer_.step();
    losses["total"] = loss.item();
    after_update();
    return losses;
  }

  Losses update_crr(const TransitionBatch& batch) {
    const std::vector<double> y = td_targets(batch);
    const auto states = pointers(batch.states);
    const nn::Mask mask = batch_mask(batch.states, batch.repeat_removal);
    const std::size_t B = batch.size();
    optimizer_.zero_grad();
    nn::Tape t;
    nn::Var s = live_->tracker.encode(t, states);
    nn::Var q = live_->q(t, s);
    nn::Var q_sa = nn::pick(q, batch.actions);
    nn::Var critic = td_loss(q_sa, t.constant(nn::Tensor(B, 1, y)));
    nn::Var logits = live_->actor(t, nn::detach(s));
    nn::Var logp_all = nn::log_softmax(logits, mask);
    // Advantage of the logged action against the actor's expected value.
    const nn::Tensor pi = nn::softmax(logits, mask).value();
    nn::Tensor weight(B, 1);
    std::size_t positive = 0;
    for (std::size_t b = 0; b < B; ++b) {
      double v = 0.0;
      for (std::size_t i = 0; i < n_items_; ++i) v += pi(b, i) * q.value()(b, i);
      const double adv = q_sa.value()[b] - v;
      weight[b] = cfg_.crr_transform == CrrTransform::BinaryMax ? (adv > 0.0 ? 1.0 : 0.0)
                                                                : std::min(std::exp(adv / cfg_.crr_beta), 20.0);
      positive += adv > 0.0;
    }
    nn::Var actor = nn::neg(nn::mean(nn::pick(logp_all, batch.actions) * t.constant(weight)));
    nn::Var loss = critic + actor;
    t.backward(loss);
    optimizer_.step();
    after_update();
    return {{"critic", critic.item()},
            {"actor", actor.item()},
            {"positive_advantage", static_cast<double>(positive) / static_cast<double>(B)},
            {"total", loss.item()}};
  }

  Losses update_ddpg(const TransitionBatch& batch) {
    const std::vector<double> y = td_targets(batch);
    const auto states = pointers(batch.states);
    const std::size_t B = batch.size();
    optimizer_.zero_grad();
    nn::Tape t;
    nn::Var s = live_->tracker.encode(t, states);
    nn::Var e = nn::gather_rows(nn::use(t, live_->tracker.item_embeddings()), batch.actions);
    nn::Var q_sa = live_->qsa(t, nn::concat_cols({s, e}));
    nn::Var critic = td_loss(q_sa, t.constant(nn::Tensor(B, 1, y)));
    // The actor ascends the critic through the proto-action; the critic and
    // the tracker are read-only for this term.
    nn::Var s_fixed = nn::detach(s);
    nn::Var proto = live_->proto(t, s_fixed);
    nn::Var actor = nn::neg(nn::mean(live_->qsa(t, nn::concat_cols({s_fixed, proto}), /*frozen=*/true)));
    nn::Var loss = critic + actor;
    t.backward(loss);
    optimizer_.step();
    after_update();
    return {{"critic", critic.item()}, {"actor", actor.item()}, {"total", loss.item()}};
  }

  PolicyConfig cfg_;
  std::size_t n_items_;
  std::unique_ptr<Networks> live_, target_;
  nn::Optimizer optimizer_;
  double progress_ = 0.0;
  std::size_t updates_ = 0;
};

}  // namespace rl4rec::policy
