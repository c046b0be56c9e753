#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

#include "rl4rec/buffer/collector.hpp"

namespace rl4rec::buffer {
namespace {

using data::Environment;
using data::StepResult;
using policy::Mode;
using policy::Policy;
using policy::PolicyConfig;
using policy::PolicyKind;

/// Episodes of a fixed length; step t pays t + 1 + 10 * id so every block is
/// traceable to its environment.
class FixedLengthEnv final : public Environment {
 public:
  FixedLengthEnv(std::size_t length, std::size_t id, std::size_t n_items = 4)
      : length_(length), id_(id), n_items_(n_items) {}
  Observation reset(std::optional<data::UserId> = std::nullopt) override {
    obs_ = {id_, {}};
    terminated_ = false;
    return obs_;
  }
  StepResult step(ItemId a) override {
    RL4REC_EXPECT(!terminated_, "step after termination");
    StepResult r;
    r.reward = static_cast<double>(obs_.history.size() + 1 + 10 * id_);
    obs_.history.push_back({a, r.reward});
    terminated_ = r.terminated = obs_.history.size() >= length_;
    r.observation = obs_;
    return r;
  }
  data::ActionMask action_mask() const override { return data::ActionMask(n_items_, 1); }
  std::size_t n_items() const override { return n_items_; }
  std::size_t n_users() const override { return id_ + 1; }
  bool terminated() const override { return terminated_; }
  const Observation& observation() const override { return obs_; }
  std::unique_ptr<Environment> clone(std::uint64_t) const override {
    return std::make_unique<FixedLengthEnv>(length_, id_, n_items_);
  }

 private:
  std::size_t length_, id_, n_items_;
  Observation obs_;
  bool terminated_ = true;
};

Policy tiny_policy(PolicyKind kind = PolicyKind::PG, std::size_t n_items = 4) {
  PolicyConfig c;
  c.kind = kind;
  c.hidden = 8;
  tracker::TrackerConfig t;
  t.embedding_dim = 4;
  t.max_history = 4;
  return Policy(c, t, 16, n_items, 1);
}

Collector fixed_envs(std::initializer_list<std::size_t> lengths) {
  std::vector<std::unique_ptr<Environment>> envs;
  std::size_t id = 0;
  for (std::size_t len : lengths) envs.push_back(std::make_unique<FixedLengthEnv>(len, id++));
  return Collector(std::move(envs));
}

Block block(std::size_t lane, data::UserId user, ItemId item, double reward, bool start, bool done) {
  Block b;
  b.env_id = lane;
  b.observation = {user, {}};
  b.action = item;
  b.reward = reward;
  b.is_start = start;
  b.done = done;
  return b;
}

std::vector<InteractionRecord> random_log(Rng& rng, std::size_t n_users, std::size_t n_items,
                                          std::size_t max_per_user) {
  std::vector<InteractionRecord> log;
  for (std::size_t u = 0; u < n_users; ++u) {
    const std::size_t n = 1 + rng.uniform_int(max_per_user);
    for (std::size_t k = 0; k < n; ++k)
      log.push_back({u, rng.uniform_int(n_items), std::round(rng.uniform(1.0, 5.0)),
                     static_cast<std::int64_t>(rng.uniform_int(1000))});
  }
  rng.shuffle(log);
  return log;
}

using Triple = std::tuple<data::UserId, ItemId, double>;

// ---------------------------------------------------------------------------
// Collection

TEST(Collect, ExactEpisodeCount) {
  Collector c = fixed_envs({3, 5, 2, 7});
  Buffer buf(4);
  Policy p = tiny_policy();
  Rng rng(1);
  const auto stats = c.collect(p, buf, CollectTarget::episodes(100), Mode::Explore, rng);
  EXPECT_EQ(stats.episodes, 100u);
  EXPECT_EQ(stats.episode_returns.size(), 100u);
  EXPECT_EQ(extract_trajectories(buf).size(), 100u);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_TRUE(buf.expects_start(k));
  EXPECT_THROW(c.collect(p, buf, CollectTarget{}, Mode::Explore, rng), ContractViolation);
  EXPECT_THROW(c.collect(p, buf, CollectTarget{1, 1}, Mode::Explore, rng), ContractViolation);
}

TEST(Collect, SingleEpisodeLayout) {
  Collector c = fixed_envs({6});
  Buffer buf(1);
  Policy p = tiny_policy();
  Rng rng(2);
  c.collect(p, buf, CollectTarget::episodes(1), Mode::Explore, rng);
  const auto& lane = buf.lane(0);
  ASSERT_EQ(lane.size(), 6u);
  for (std::size_t t = 0; t < 6; ++t) {
    EXPECT_EQ(lane[t].is_start, t == 0);
    EXPECT_EQ(lane[t].done, t == 5);
    EXPECT_EQ(lane[t].observation.history.size(), t);
    ASSERT_TRUE(lane[t].behavior_logprob.has_value());
    EXPECT_LE(*lane[t].behavior_logprob, 0.0);
  }
}

TEST(Collect, RewardAccountingMatchesStoredBlocks) {
  Collector c = fixed_envs({3, 4, 9});
  Buffer buf(3);
  Policy p = tiny_policy(PolicyKind::DQN);
  Rng rng(3);
  const auto stats = c.collect(p, buf, CollectTarget::episodes(20), Mode::Explore, rng);
  double stored = 0.0;
  std::size_t blocks = 0;
  for (std::size_t k = 0; k < 3; ++k)
    for (const auto& b : buf.lane(k)) {
      stored += b.reward;
      ++blocks;
      EXPECT_FALSE(b.behavior_logprob.has_value());
    }
  EXPECT_EQ(stats.reward_sum, stored);
  EXPECT_EQ(stats.steps, blocks);

  std::vector<double> extracted;
  for (const auto& tr : extract_trajectories(buf)) extracted.push_back(tr.reward_sum());
  std::vector<double> collected = stats.episode_returns;
  std::sort(extracted.begin(), extracted.end());
  std::sort(collected.begin(), collected.end());
  EXPECT_EQ(extracted, collected);
}

TEST(Collect, StepTargetResumesUnfinishedEpisodes) {
  Collector c = fixed_envs({4, 4});
  Buffer buf(2);
  Policy p = tiny_policy();
  Rng rng(4);
  auto s1 = c.collect(p, buf, CollectTarget::steps(3), Mode::Explore, rng);
  EXPECT_EQ(s1.steps, 3u);
  EXPECT_EQ(buf.size(), 3u);
  EXPECT_TRUE(extract_trajectories(buf).empty());
  // Rounds: (env0 t3, env1 t2), (env0 t4 done, env1 t3), (env0 restart, env1 t4 done).
  auto s2 = c.collect(p, buf, CollectTarget::steps(6), Mode::Explore, rng);
  EXPECT_EQ(s2.steps, 6u);
  EXPECT_EQ(s2.episodes, 2u);
  // Whole-episode returns include the steps taken during the first call.
  std::vector<double> returns = s2.episode_returns;
  std::sort(returns.begin(), returns.end());
  EXPECT_EQ(returns, (std::vector<double>{1 + 2 + 3 + 4, 11 + 12 + 13 + 14}));
}

TEST(Collect, ClearedLaneRestartsEpisode) {
  Collector c = fixed_envs({5});
  Buffer buf(1);
  Policy p = tiny_policy();
  Rng rng(5);
  c.collect(p, buf, CollectTarget::steps(2), Mode::Explore, rng);
  buf.clear();
  c.collect(p, buf, CollectTarget::episodes(1), Mode::Explore, rng);
  ASSERT_EQ(buf.lane(0).size(), 5u);
  EXPECT_TRUE(buf.lane(0).front().is_start);
}

TEST(Collect, RecEnvNoRepeatsUnderRemoval) {
  data::SynthConfig sc;
  sc.users = 10;
  sc.items = 12;
  const data::Dataset ds = data::generate_synthetic(sc);
  auto model = std::make_shared<data::RewardModel>(10, 12, 2, 0, 0.0, 5.0);
  auto catalog = std::make_shared<data::ItemCatalog>(ds.catalog);
  data::RecEnvConfig ec;
  ec.remove_recommended = true;
  ec.quit_enabled = false;
  ec.max_steps = 12;
  data::RecEnv proto(model, nullptr, catalog, ec);
  Collector c(replicate(proto, 3, 10));
  Buffer buf(3);
  Policy p = tiny_policy(PolicyKind::PG, 12);
  Rng rng(6);
  c.collect(p, buf, CollectTarget::episodes(30), Mode::Explore, rng);
  for (const auto& tr : extract_trajectories(buf)) {
    EXPECT_EQ(tr.steps.size(), 12u);
    std::vector<ItemId> items;
    for (const auto& s : tr.steps) {
      items.push_back(s.action);
      EXPECT_TRUE(s.repeat_removal);
    }
    std::sort(items.begin(), items.end());
    EXPECT_EQ(std::unique(items.begin(), items.end()), items.end());
  }
}

// ---------------------------------------------------------------------------
// Lanes, extraction, eviction

TEST(Lanes, InterleavedExtraction) {
  // Hand-enumerated interleaving: lane 0 runs an episode of length 3, lane 1
  // one of length 2, steps alternate starting with lane 0.
  Buffer buf(2);
  buf.push(block(0, 0, 1, 1, true, false));
  buf.push(block(1, 1, 2, 2, true, false));
  buf.push(block(0, 0, 3, 3, false, false));
  buf.push(block(1, 1, 4, 4, false, true));
  buf.push(block(0, 0, 5, 5, false, true));
  buf.push(block(1, 1, 6, 6, true, false));  // unfinished tail
  const auto trs = extract_trajectories(buf);
  ASSERT_EQ(trs.size(), 2u);
  ASSERT_EQ(trs[0].steps.size(), 3u);
  ASSERT_EQ(trs[1].steps.size(), 2u);
  EXPECT_EQ(trs[0].steps[1].action, 3u);
  EXPECT_EQ(trs[1].steps[1].action, 4u);
  EXPECT_TRUE(extract_trajectories(Buffer(3)).empty());
}

TEST(Lanes, PushEnforcesStartFlags) {
  Buffer buf(2);
  EXPECT_THROW(buf.push(block(0, 0, 1, 1, false, false)), ContractViolation);
  buf.push(block(0, 0, 1, 1, true, false));
  EXPECT_THROW(buf.push(block(0, 0, 1, 1, true, false)), ContractViolation);
  EXPECT_THROW(buf.push(block(2, 0, 1, 1, true, false)), ContractViolation);
}

TEST(Lanes, EvictionDropsWholeOldestTrajectories) {
  Buffer buf(1, 5);
  for (int e = 0; e < 3; ++e) {
    buf.push(block(0, 0, e, 1, true, false));
    buf.push(block(0, 0, e, 1, false, true));
  }
  ASSERT_EQ(buf.lane(0).size(), 4u);
  EXPECT_EQ(buf.lane(0).front().action, 1u);
  EXPECT_TRUE(buf.lane(0).front().is_start);

  Buffer tight(1, 3);
  tight.push(block(0, 0, 0, 1, true, false));
  tight.push(block(0, 0, 0, 1, false, false));
  tight.push(block(0, 0, 0, 1, false, false));
  EXPECT_THROW(tight.push(block(0, 0, 0, 1, false, true)), ContractViolation);
}

TEST(Lanes, EvictionPropertyFirstBlockAlwaysStarts) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cap = 4 + rng.uniform_int(20);
    Buffer buf(2, cap);
    for (int e = 0; e < 50; ++e) {
      const std::size_t lane = rng.uniform_int(2);
      const std::size_t len = 1 + rng.uniform_int(4);
      for (std::size_t t = 0; t < len; ++t) buf.push(block(lane, lane, t, 1, t == 0, t + 1 == len));
      for (std::size_t k = 0; k < 2; ++k) {
        const auto& l = buf.lane(k);
        ASSERT_LE(l.size(), cap);
        if (!l.empty()) {
          ASSERT_TRUE(l.front().is_start);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Sampling

TEST(Sample, DegeneratePoolRepeats) {
  Buffer buf(1);
  buf.push(block(0, 3, 2, 4.5, true, true));
  const auto b = sample_batch(buf, 4, std::uint64_t{1});
  ASSERT_EQ(b.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(b.actions[k], 2u);
    EXPECT_EQ(b.rewards[k], 4.5);
    EXPECT_EQ(b.dones[k], 1);
  }
  EXPECT_THROW(sample_batch(Buffer(2), 1, std::uint64_t{1}), ContractViolation);
  Buffer tail_only(1);
  tail_only.push(block(0, 0, 0, 1, true, false));
  EXPECT_THROW(sample_batch(tail_only, 1, std::uint64_t{1}), ContractViolation);
}

TEST(Sample, UniformWithinThreeSigma) {
  // Ten transitions over two lanes, lengths 6 and 4.
  Buffer buf(2);
  for (std::size_t t = 0; t < 6; ++t) buf.push(block(0, 0, t, 0, t == 0, t == 5));
  for (std::size_t t = 0; t < 4; ++t) buf.push(block(1, 1, 6 + t, 0, t == 0, t == 3));
  const std::size_t n = 100000;
  const auto b = sample_batch(buf, n, std::uint64_t{8});
  std::vector<double> counts(10, 0.0);
  for (auto a : b.actions) counts[a] += 1;
  const double expect = n / 10.0, sigma = std::sqrt(n * 0.1 * 0.9);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_LT(std::abs(counts[i] - expect), 3 * sigma) << i;
}

TEST(Sample, NextStateComesFromSameLane) {
  Collector c = fixed_envs({3, 5, 7});
  Buffer buf(3);
  Policy p = tiny_policy();
  Rng rng(9);
  c.collect(p, buf, CollectTarget::steps(40), Mode::Explore, rng);
  const auto b = sample_batch(buf, 2000, rng);
  for (std::size_t k = 0; k < b.size(); ++k) {
    EXPECT_EQ(b.states[k].user, b.next_states[k].user);
    ASSERT_EQ(b.next_states[k].history.size(), b.states[k].history.size() + 1);
    EXPECT_EQ(b.next_states[k].history.back().item, b.actions[k]);
    EXPECT_EQ(b.next_states[k].history.back().reward, b.rewards[k]);
    EXPECT_EQ(b.dones[k] == 1, b.next_states[k].history.size() == 3 + 2 * b.states[k].user);
  }
  EXPECT_EQ(b.source, DataSource::Online);
  const auto again = sample_batch(buf, 50, std::uint64_t{3}), twice = sample_batch(buf, 50, std::uint64_t{3});
  EXPECT_EQ(again.actions, twice.actions);
  EXPECT_EQ(again.states, twice.states);
}

// ---------------------------------------------------------------------------
// Offline construction

std::vector<InteractionRecord> five_for_one_user() {
  return {{7, 4, 1, 50}, {7, 2, 2, 10}, {7, 9, 3, 40}, {7, 1, 4, 20}, {7, 3, 5, 30}};
}

TEST(Offline, SequentialSingleChunk) {
  const Buffer buf = build_offline_buffer(five_for_one_user(), {});
  EXPECT_EQ(buf.source(), DataSource::Offline);
  const auto trs = extract_trajectories(buf);
  ASSERT_EQ(trs.size(), 1u);
  const std::vector<ItemId> expect = {2, 1, 3, 9, 4};
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_EQ(trs[0].steps[t].action, expect[t]);
    EXPECT_EQ(trs[0].steps[t].observation.user, 7u);
    ASSERT_EQ(trs[0].steps[t].observation.history.size(), t);
    for (std::size_t j = 0; j < t; ++j) EXPECT_EQ(trs[0].steps[t].observation.history[j].item, expect[j]);
  }
  ConstructionMethod chunked;
  chunked.max_steps = 2;
  std::vector<std::size_t> lengths;
  for (const auto& tr : extract_trajectories(build_offline_buffer(five_for_one_user(), chunked)))
    lengths.push_back(tr.steps.size());
  EXPECT_EQ(lengths, (std::vector<std::size_t>{2, 2, 1}));
}

TEST(Offline, ConvolutionWindowExample) {
  ConstructionMethod m;
  m.kind = ConstructionKind::Convolution;
  m.window = 3;
  const auto trs = extract_trajectories(build_offline_buffer(five_for_one_user(), m));
  std::map<std::size_t, int> by_len;
  for (const auto& tr : trs) ++by_len[tr.steps.size()];
  EXPECT_EQ(trs.size(), 8u);
  EXPECT_EQ(by_len[5], 1);
  EXPECT_EQ(by_len[2], 4);
  EXPECT_EQ(by_len[3], 3);
  m.window = 1;
  EXPECT_THROW(build_offline_buffer(five_for_one_user(), m), ConfigError);
  EXPECT_THROW(build_offline_buffer({}, {}), ContractViolation);
}

TEST(Offline, ConvolutionCountsMatchEnumeration) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto log = random_log(rng, 6, 30, 25);
    ConstructionMethod m;
    m.kind = ConstructionKind::Convolution;
    m.window = rng.bernoulli(0.5) ? 0 : 2 + rng.uniform_int(6);
    m.max_steps = 100;
    std::map<data::UserId, std::size_t> per_user;
    for (const auto& r : log) ++per_user[r.user];
    // Oracle: enumerate every (start, length) pair directly.
    std::size_t expected = 0;
    for (const auto& [u, n] : per_user) {
      const std::size_t w = m.window ? std::min(m.window, n) : std::min<std::size_t>(10, n);
      ++expected;
      for (std::size_t k = 2; k <= w; ++k)
        for (std::size_t s = 0; s < n; ++s)
          if (s + k <= n) ++expected;
    }
    EXPECT_EQ(extract_trajectories(build_offline_buffer(log, m)).size(), expected);
  }
}

TEST(Offline, SequentialEqualsSortAndGroup) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto log = random_log(rng, 8, 20, 40);
    ConstructionMethod m;
    m.max_steps = 1000;
    // Oracle: sort whole log by (user, timestamp, item), then cut at user changes.
    auto sorted = log;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return std::tie(a.user, a.timestamp, a.item) < std::tie(b.user, b.timestamp, b.item);
    });
    std::vector<std::vector<std::pair<ItemId, double>>> expected;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
      if (k == 0 || sorted[k].user != sorted[k - 1].user) expected.emplace_back();
      expected.back().push_back({sorted[k].item, sorted[k].reward});
    }
    std::vector<std::vector<std::pair<ItemId, double>>> got;
    for (const auto& tr : extract_trajectories(build_offline_buffer(log, m))) {
      got.emplace_back();
      for (const auto& s : tr.steps) got.back().push_back({s.action, s.reward});
    }
    ASSERT_EQ(got, expected);
  }
}

std::vector<Triple> base_triples(const Buffer& buf, const std::map<data::UserId, std::size_t>& per_user) {
  // Base trajectories come first in each lane and cover the user's n records.
  std::vector<Triple> out;
  for (std::size_t k = 0; k < buf.n_lanes(); ++k) {
    const auto& lane = buf.lane(k);
    const data::UserId u = lane.front().observation.user;
    for (std::size_t j = 0; j < per_user.at(u); ++j) out.emplace_back(u, lane[j].action, lane[j].reward);
  }
  std::sort(out.begin(), out.end());
  return out;
}

TEST(Offline, EveryMethodConservesTheLog) {
  Rng rng(13);
  for (auto kind : {ConstructionKind::Sequential, ConstructionKind::Convolution,
                    ConstructionKind::Counterfactual}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto log = random_log(rng, 5, 15, 50);
      ConstructionMethod m;
      m.kind = kind;
      m.shuffle_seed = trial;
      m.max_steps = 1 + rng.uniform_int(30);
      std::map<data::UserId, std::size_t> per_user;
      std::vector<Triple> expected;
      for (const auto& r : log) {
        ++per_user[r.user];
        expected.emplace_back(r.user, r.item, r.reward);
      }
      std::sort(expected.begin(), expected.end());
      EXPECT_EQ(base_triples(build_offline_buffer(log, m), per_user), expected) << to_string(kind);
    }
  }
}

TEST(Offline, CounterfactualDeterministicAndReordered) {
  Rng rng(14);
  const auto log = random_log(rng, 4, 50, 30);
  ConstructionMethod m;
  m.kind = ConstructionKind::Counterfactual;
  m.max_steps = 1000;
  m.shuffle_seed = 5;
  const Buffer a = build_offline_buffer(log, m), b = build_offline_buffer(log, m);
  for (std::size_t k = 0; k < a.n_lanes(); ++k) EXPECT_EQ(a.lane(k), b.lane(k));
  m.shuffle_seed = 6;
  const Buffer c = build_offline_buffer(log, m);
  bool differs = false;
  for (std::size_t k = 0; k < a.n_lanes(); ++k) differs |= !(a.lane(k) == c.lane(k));
  EXPECT_TRUE(differs);
  std::map<data::UserId, std::size_t> per_user;
  for (const auto& r : log) ++per_user[r.user];
  EXPECT_EQ(base_triples(a, per_user), base_triples(c, per_user));
}

// ---------------------------------------------------------------------------
// Serialization

TEST(Serialize, RoundTripAndCorruption) {
  ConstructionMethod m;
  m.kind = ConstructionKind::Convolution;
  Rng rng(15);
  const Buffer buf = build_offline_buffer(random_log(rng, 3, 10, 12), m);
  std::stringstream ss;
  write_buffer(ss, buf);
  const std::string bytes = ss.str();
  std::istringstream in(bytes);
  const Buffer back = read_buffer(in);
  ASSERT_EQ(back.n_lanes(), buf.n_lanes());
  EXPECT_EQ(back.source(), DataSource::Offline);
  for (std::size_t k = 0; k < buf.n_lanes(); ++k) EXPECT_EQ(back.lane(k), buf.lane(k));

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::istringstream in2(bad_magic);
  EXPECT_THROW(read_buffer(in2), FormatError);
  std::istringstream in3(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_buffer(in3), FormatError);
}

}  // namespace
}  // namespace rl4rec::buffer
