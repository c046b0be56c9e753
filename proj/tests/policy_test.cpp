#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "grad_cases.hpp"
#include "grad_check.hpp"
#include "rl4rec/policy/policy.hpp"

namespace rl4rec::policy {
namespace {

using tracker::TrackerConfig;
using tracker::TrackerKind;

TrackerConfig tiny_tracker(TrackerKind kind = TrackerKind::Average) {
  TrackerConfig c;
  c.kind = kind;
  c.embedding_dim = 4;
  c.max_history = 4;
  return c;
}

PolicyConfig config_for(PolicyKind kind) {
  PolicyConfig c;
  c.kind = kind;
  c.hidden = 8;
  c.learning_rate = 1e-2;
  return c;
}

Observation random_obs(Rng& rng, std::size_t n_users, std::size_t n_items, std::size_t max_len) {
  Observation o{rng.uniform_int(n_users), {}};
  const std::size_t len = rng.uniform_int(max_len + 1);
  for (std::size_t k = 0; k < len; ++k) o.history.push_back({rng.uniform_int(n_items), rng.uniform(0.0, 2.0)});
  return o;
}

TransitionBatch random_batch(Rng& rng, std::size_t n, std::size_t n_users, std::size_t n_items,
                             DataSource source) {
  TransitionBatch b;
  b.source = source;
  for (std::size_t k = 0; k < n; ++k) {
    Observation s = random_obs(rng, n_users, n_items, 3);
    const ItemId a = rng.uniform_int(n_items);
    const double r = rng.uniform(0.0, 1.0);
    Observation next = s;
    next.history.push_back({a, r});
    b.push(s, a, r, next, rng.bernoulli(0.2), false);
  }
  return b;
}

/// Zeroes the last layer's weights and sets its bias, so the head outputs
/// `bias` for every state.
void set_constant_head(nn::Mlp& head, const std::vector<double>& bias) {
  auto& last = head.layers.back();
  last.weight.value.fill(0.0);
  ASSERT_EQ(last.bias.value.size(), bias.size());
  for (std::size_t i = 0; i < bias.size(); ++i) last.bias.value[i] = bias[i];
}

// ---------------------------------------------------------------------------
// Action selection

TEST(MaskedArgmax, Examples) {
  const std::vector<double> q = {1, 5, 3};
  EXPECT_EQ(masked_argmax(q, ActionMask{1, 1, 1}), 1u);
  EXPECT_EQ(masked_argmax(q, ActionMask{1, 0, 1}), 2u);
  EXPECT_EQ(masked_argmax(std::vector<double>{2, 2, 1}, ActionMask{1, 1, 1}), 0u);
  EXPECT_THROW(masked_argmax(q, ActionMask{0, 0, 0}), ContractViolation);
}

TEST(MaskedArgmax, InvariantToPositiveScaling) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> v(7);
    ActionMask m(7);
    for (auto& x : v) x = rng.normal();
    for (auto& x : m) x = rng.bernoulli(0.6);
    m[rng.uniform_int(7)] = 1;
    const double c = rng.uniform(0.01, 100.0);
    std::vector<double> scaled(v);
    for (auto& x : scaled) x *= c;
    EXPECT_EQ(masked_argmax(v, m), masked_argmax(scaled, m));
  }
}

TEST(Policy, GreedyDqnPicksMaskedArgmaxOfQ) {
  Policy p(config_for(PolicyKind::DQN), tiny_tracker(), 3, 3, 1);
  set_constant_head(p.live().q, {1, 5, 3});
  Rng rng(0);
  const Observation o{0, {}};
  EXPECT_EQ(p.select_action(o, {1, 1, 1}, Mode::Greedy, rng).item, 1u);
  EXPECT_EQ(p.select_action(o, {1, 0, 1}, Mode::Greedy, rng).item, 2u);
}

TEST(Policy, ExploreWithUniformLogitsIsUniformOverAllowed) {
  Policy p(config_for(PolicyKind::PG), tiny_tracker(), 2, 6, 1);
  set_constant_head(p.live().actor, std::vector<double>(6, 0.3));
  const ActionMask mask = {1, 0, 1, 1, 0, 1};
  Rng rng(12);
  std::vector<int> counts(6, 0);
  const int n = 10000;
  for (int k = 0; k < n; ++k) {
    const auto c = p.select_action(Observation{1, {}}, mask, Mode::Explore, rng);
    ++counts[c.item];
    EXPECT_NEAR(c.logprob, std::log(0.25), 1e-12);
  }
  const double sigma = std::sqrt(n * 0.25 * 0.75);
  for (std::size_t i = 0; i < 6; ++i) {
    if (!mask[i]) {
      EXPECT_EQ(counts[i], 0);
    } else {
      EXPECT_LT(std::abs(counts[i] - n * 0.25), 3 * sigma) << "item " << i;
    }
  }
}

class EveryPolicy : public ::testing::TestWithParam<PolicyKind> {};

INSTANTIATE_TEST_SUITE_P(Kinds, EveryPolicy, ::testing::ValuesIn(kAllPolicyKinds),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST_P(EveryPolicy, NeverReturnsMaskedItem) {
  Policy p(config_for(GetParam()), tiny_tracker(), 4, 9, 5);
  p.set_progress(0.3);
  Rng rng(6);
  for (Mode mode : {Mode::Explore, Mode::Greedy}) {
    for (int k = 0; k < 10000; ++k) {
      ActionMask m(9);
      for (auto& x : m) x = rng.bernoulli(0.3);
      m[rng.uniform_int(9)] = 1;
      const auto c = p.select_action(random_obs(rng, 4, 9, 3), m, mode, rng);
      ASSERT_LT(c.item, 9u);
      ASSERT_TRUE(m[c.item]) << "kind " << to_string(GetParam());
    }
  }
  EXPECT_THROW(p.select_action(Observation{0, {}}, ActionMask(9, 0), Mode::Greedy, rng), ContractViolation);
}

TEST_P(EveryPolicy, CheckpointRoundTrip) {
  Policy a(config_for(GetParam()), tiny_tracker(), 4, 9, 5);
  Policy b(config_for(GetParam()), tiny_tracker(), 4, 9, 77);
  std::stringstream ss;
  nn::write_checkpoint(ss, a.to_checkpoint());
  b.load_checkpoint(nn::read_checkpoint(ss));
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k]->value, pb[k]->value);

  PolicyKind other = GetParam() == PolicyKind::A2C ? PolicyKind::PG : PolicyKind::A2C;
  Policy c(config_for(other), tiny_tracker(), 4, 9, 5);
  EXPECT_THROW(c.load_checkpoint(a.to_checkpoint()), ConfigError);
  Policy wider(config_for(GetParam()), tiny_tracker(), 4, 10, 5);
  EXPECT_THROW(wider.load_checkpoint(a.to_checkpoint()), ConfigError);
}

TEST_P(EveryPolicy, HeadsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    EXPECT_LT(testing::policy_heads_grad_error(GetParam(), seed), 1e-4) << "seed " << seed;
}

// ---------------------------------------------------------------------------
// Continuous mapping

TEST(MapContinuous, Examples) {
  nn::Tensor emb(10, 3);
  Rng rng(1);
  for (std::size_t i = 0; i < 10; ++i) {
    double norm = 0.0;
    for (std::size_t k = 0; k < 3; ++k) norm += std::pow(emb(i, k) = rng.normal(), 2);
    for (std::size_t k = 0; k < 3; ++k) emb(i, k) /= std::sqrt(norm);
  }
  const ActionMask all(10, 1);
  EXPECT_EQ(map_continuous_action(emb.row_span(7), emb, all), 7u);

  nn::Tensor axis(4, 3);
  axis(0, 1) = 1.0;
  axis(1, 1) = -1.0;
  axis(2, 0) = 1.0;
  axis(3, 2) = 1.0;
  EXPECT_EQ(map_continuous_action(std::vector<double>{2.0, 0.0, 0.0}, axis, ActionMask(4, 1)), 2u);
  // Ties resolve to the lowest id.
  EXPECT_EQ(map_continuous_action(std::vector<double>{0.0, 0.0, 0.0}, axis, ActionMask(4, 1)), 0u);
  EXPECT_THROW(map_continuous_action(std::vector<double>{1.0, 0.0, 0.0}, axis, ActionMask(4, 0)),
               ContractViolation);
}

TEST(MapContinuous, MatchesExhaustiveScan) {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.uniform_int(20), d = 1 + rng.uniform_int(5);
    const nn::Tensor emb = testing::random_tensor(n + 1, d, rng);
    std::vector<double> proto(d);
    for (auto& v : proto) v = rng.normal();
    ActionMask m(n);
    for (auto& x : m) x = rng.bernoulli(0.5);
    m[rng.uniform_int(n)] = 1;
    double best = -1e300;
    std::size_t arg = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!m[i]) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += proto[k] * emb(i, k);
      if (s > best) {
        best = s;
        arg = i;
      }
    }
    ASSERT_EQ(map_continuous_action(proto, emb, m), arg);
  }
}

// ---------------------------------------------------------------------------
// Returns and surrogate

TEST(DiscountedReturns, MatchesForwardSumOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t len = 1 + rng.uniform_int(30);
    const double gamma = rng.uniform(0.0, 1.0);
    std::vector<double> r(len);
    for (auto& v : r) v = rng.uniform(-2.0, 5.0);
    const auto g = discounted_returns(r, gamma);
    for (std::size_t t = 0; t < len; ++t) {
      double expected = 0.0, disc = 1.0;
      for (std::size_t k = t; k < len; ++k, disc *= gamma) expected += disc * r[k];
      ASSERT_NEAR(g[t], expected, 1e-10);
    }
  }
  EXPECT_EQ(discounted_returns({3.5}, 0.37), std::vector<double>{3.5});
}

TEST(PpoSurrogate, ClipRegionsHaveZeroGradient) {
  // Rows: (log-ratio, advantage). Clip active and pushing further: rows 0, 1.
  // Inside the trust region: rows 2, 3. Clip active but objective still
  // improved by moving back: rows 4, 5.
  const std::vector<std::pair<double, double>> rows = {
      {std::log(1.5), 1.0}, {std::log(0.5), -1.0}, {std::log(1.1), 1.0},
      {std::log(0.9), -1.0}, {std::log(1.5), -1.0}, {std::log(0.5), 1.0}};
  const std::size_t B = rows.size(), n = 3;
  Rng rng(4);
  nn::Tensor logits = testing::random_tensor(B, n, rng);
  std::vector<std::size_t> actions(B, 1);
  nn::Tensor old(B, 1), adv(B, 1);
  {
    nn::Tape t(false);
    const nn::Tensor lp = nn::log_softmax(t.constant(logits)).value();
    for (std::size_t b = 0; b < B; ++b) {
      old[b] = lp(b, 1) - rows[b].first;
      adv[b] = rows[b].second;
    }
  }
  nn::Tape t;
  nn::Var x = t.leaf(logits, true);
  nn::Var logp = nn::pick(nn::log_softmax(x), actions);
  t.backward(nn::sum(ppo_surrogate(logp, t.constant(old), t.constant(adv), 0.2)));
  const nn::Tensor& g = t.grad(x);
  for (std::size_t b = 0; b < B; ++b) {
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm += std::abs(g(b, i));
    if (b < 2) {
      EXPECT_EQ(norm, 0.0) << "row " << b;
    } else {
      EXPECT_GT(norm, 1e-3) << "row " << b;
    }
  }
}

// ---------------------------------------------------------------------------
// Updates

TEST(Updates, DoneRowTargetIsReward) {
  Policy p(config_for(PolicyKind::DQN), tiny_tracker(), 3, 5, 1);
  Rng rng(2);
  TransitionBatch b = random_batch(rng, 20, 3, 5, DataSource::Online);
  const auto y = p.td_targets(b);
  for (std::size_t k = 0; k < b.size(); ++k) {
    if (b.dones[k]) {
      EXPECT_EQ(y[k], b.rewards[k]);
    }
  }
}

TEST(Updates, TargetNetworkOnlyChangesOnSync) {
  PolicyConfig cfg = config_for(PolicyKind::DQN);
  cfg.target_sync = 3;
  Policy p(cfg, tiny_tracker(), 3, 5, 1);
  Rng rng(2);
  std::vector<nn::Tensor> before;
  for (auto* q : p.target_parameters()) before.push_back(q->value);
  for (int k = 0; k < 2; ++k) p.update_offpolicy(random_batch(rng, 8, 3, 5, DataSource::Online));
  auto tp = p.target_parameters();
  for (std::size_t k = 0; k < tp.size(); ++k) EXPECT_EQ(tp[k]->value, before[k]);
  for (auto* q : tp) EXPECT_EQ(q->grad, nn::Tensor(q->value.rows(), q->value.cols()));
  p.update_offpolicy(random_batch(rng, 8, 3, 5, DataSource::Online));
  for (int probe = 0; probe < 10; ++probe) {
    const Observation o = random_obs(rng, 3, 5, 3);
    EXPECT_EQ(p.q_values(o), p.q_values(o, true));
  }
}

TEST(Updates, DdpgTargetsTrackLiveSoftly) {
  PolicyConfig cfg = config_for(PolicyKind::DDPG);
  cfg.ddpg_tau = 0.25;
  Policy p(cfg, tiny_tracker(), 3, 5, 1);
  std::vector<nn::Tensor> before;
  for (auto* q : p.target_parameters()) before.push_back(q->value);
  Rng rng(3);
  p.update_offpolicy(random_batch(rng, 8, 3, 5, DataSource::Online));
  auto live = p.parameters(), tgt = p.target_parameters();
  for (std::size_t k = 0; k < live.size(); ++k)
    for (std::size_t i = 0; i < live[k]->value.size(); ++i)
      EXPECT_NEAR(tgt[k]->value[i], 0.75 * before[k][i] + 0.25 * live[k]->value[i], 1e-12);
}

TEST(Updates, BcqWithZeroThresholdEqualsDqn) {
  PolicyConfig dq = config_for(PolicyKind::DQN);
  PolicyConfig bc = config_for(PolicyKind::BCQ);
  bc.bcq_threshold = 0.0;
  dq.target_sync = bc.target_sync = 2;
  Policy a(dq, tiny_tracker(), 3, 6, 9), b(bc, tiny_tracker(), 3, 6, 9);
  Rng rng(10);
  for (int k = 0; k < 5; ++k) {
    TransitionBatch batch = random_batch(rng, 16, 3, 6, DataSource::Offline);
    a.update_offpolicy(batch);
    b.update_batchrl(batch);
  }
  const std::vector<nn::Parameter*> pa = a.parameters();
  std::map<std::string, const nn::Parameter*> pb;
  for (const auto* q : b.parameters()) pb[q->name] = q;
  for (const auto* q : pa) {
    ASSERT_TRUE(pb.count(q->name)) << q->name;
    EXPECT_EQ(q->value, pb[q->name]->value) << q->name;
  }
}

TEST(Updates, CqlRaisesLoggedActionAboveOthers) {
  PolicyConfig cfg = config_for(PolicyKind::CQL);
  cfg.learning_rate = 1e-2;
  Policy p(cfg, tiny_tracker(), 2, 4, 3);
  set_constant_head(p.live().q, {0.5, 0.5, 0.5, 0.5});
  TransitionBatch b;
  b.source = DataSource::Offline;
  const Observation s{0, {}};
  b.push(s, 2, 0.5, s, true, false);  // TD error is zero at the start
  auto gap = [&] {
    const nn::Tensor q = p.q_values(s);
    double mean = 0.0;
    for (double v : q.values()) mean += v / 4.0;
    return q[2] - mean;
  };
  const double before = gap();
  EXPECT_NEAR(before, 0.0, 1e-12);
  const auto losses = p.update_batchrl(b);
  EXPECT_NEAR(losses.at("cql"), std::log(4.0), 1e-9);
  EXPECT_GT(gap(), before);
}

TEST(Updates, CrrIgnoresRowsWithNegativeAdvantage) {
  Policy p(config_for(PolicyKind::CRR), tiny_tracker(), 2, 4, 3);
  set_constant_head(p.live().q, {2.0, 1.0, 3.0, 0.0});  // action 3 is the worst
  std::vector<nn::Tensor> actor_before;
  for (const auto& l : p.live().actor.layers) {
    actor_before.push_back(l.weight.value);
    actor_before.push_back(l.bias.value);
  }
  TransitionBatch b;
  b.source = DataSource::Offline;
  b.push(Observation{1, {}}, 3, 0.0, Observation{1, {}}, true, false);
  const auto losses = p.update_batchrl(b);
  EXPECT_EQ(losses.at("positive_advantage"), 0.0);
  std::size_t k = 0;
  for (const auto& l : p.live().actor.layers) {
    EXPECT_EQ(l.weight.value, actor_before[k++]);
    EXPECT_EQ(l.bias.value, actor_before[k++]);
  }
}

TEST(Updates, FamilyAndSourceChecks) {
  Rng rng(1);
  Policy pg(config_for(PolicyKind::PG), tiny_tracker(), 3, 5, 1);
  EXPECT_THROW(pg.update_offpolicy(random_batch(rng, 4, 3, 5, DataSource::Online)), ConfigError);
  EXPECT_THROW(pg.update_onpolicy({}), ContractViolation);
  Policy dqn(config_for(PolicyKind::DQN), tiny_tracker(), 3, 5, 1);
  EXPECT_THROW(dqn.update_onpolicy({Trajectory{}}), ConfigError);
  Policy cql(config_for(PolicyKind::CQL), tiny_tracker(), 3, 5, 1);
  EXPECT_THROW(cql.update_batchrl(random_batch(rng, 4, 3, 5, DataSource::Online)), ConfigError);
  TransitionBatch broken = random_batch(rng, 4, 3, 5, DataSource::Offline);
  broken.next_states.clear();
  EXPECT_THROW(cql.update_batchrl(broken), ContractViolation);
  PolicyConfig bad = config_for(PolicyKind::DQN);
  bad.gamma = 1.5;
  EXPECT_THROW(Policy(bad, tiny_tracker(), 3, 5, 1), ConfigError);
}

TEST(Updates, BatchRlIsPureFunctionOfDataAndSeed) {
  for (PolicyKind kind : {PolicyKind::BCQ, PolicyKind::CQL, PolicyKind::CRR, PolicyKind::SQN}) {
    auto run = [&] {
      Policy p(config_for(kind), tiny_tracker(TrackerKind::GRU), 3, 6, 21);
      Rng rng(22);
      for (int k = 0; k < 4; ++k) p.update_batchrl(random_batch(rng, 8, 3, 6, DataSource::Offline));
      std::vector<nn::Tensor> out;
      for (auto* q : p.parameters()) out.push_back(q->value);
      return out;
    };
    EXPECT_EQ(run(), run()) << to_string(kind);
  }
}

TEST(Updates, PgLearnsTwoArmedBandit) {
  PolicyConfig cfg = config_for(PolicyKind::PG);
  cfg.entropy_coef = 0.0;
  Policy p(cfg, tiny_tracker(), 1, 2, 4);
  Rng rng(5);
  const ActionMask all(2, 1);
  for (int update = 0; update < 300; ++update) {
    std::vector<Trajectory> batch;
    for (int e = 0; e < 8; ++e) {
      const Observation o{0, {}};
      const auto c = p.select_action(o, all, Mode::Explore, rng);
      batch.push_back({{Step{o, c.item, c.item == 0 ? 1.0 : 0.0, true, c.logprob, false}}});
    }
    p.update_onpolicy(batch);
  }
  const auto logp = masked_log_softmax(p.logits(Observation{0, {}}).row_span(0), all);
  EXPECT_GT(std::exp(logp[0]), 0.95);
}

TEST(Updates, EpsilonScheduleDecaysLinearly) {
  Policy p(config_for(PolicyKind::DQN), tiny_tracker(), 1, 2, 4);
  EXPECT_DOUBLE_EQ(p.epsilon(), 1.0);
  p.set_progress(0.25);
  EXPECT_NEAR(p.epsilon(), 1.0 - 0.95 * 0.5, 1e-12);
  p.set_progress(0.5);
  EXPECT_NEAR(p.epsilon(), 0.05, 1e-12);
  p.set_progress(0.9);
  EXPECT_NEAR(p.epsilon(), 0.05, 1e-12);
}

}  // namespace
}  // namespace rl4rec::policy
