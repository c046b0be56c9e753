#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <vector>

#include "rl4rec/binary_io.hpp"
#include "rl4rec/data/dataset.hpp"
#include "rl4rec/error.hpp"
#include "rl4rec/policy/transition.hpp"
#include "rl4rec/rng.hpp"

namespace rl4rec::buffer {

using data::InteractionRecord;
using data::ItemId;
using data::Observation;
using policy::DataSource;
using policy::Trajectory;
using policy::TransitionBatch;

/// One environment step as stored in a lane.
struct Block {
  std::size_t env_id = 0;
  Observation observation;  // state the action was taken in
  ItemId action = 0;
  double reward = 0.0;
  bool done = false;
  bool is_start = false;
  std::optional<double> behavior_logprob;
  bool repeat_removal = false;

  friend bool operator==(const Block&, const Block&) = default;
};

inline constexpr std::size_t kDefaultLaneCapacity = 100000;

/// Per-environment lanes of blocks. A trajectory starts at an is_start block
/// and ends at the next done block of the same lane. When a lane is full the
/// oldest whole trajectory is evicted.
class Buffer {
 public:
  explicit Buffer(std::size_t n_lanes = 1, std::size_t capacity = kDefaultLaneCapacity,
                  DataSource source = DataSource::Online)
      : lanes_(n_lanes), capacity_(capacity), source_(source) {
    RL4REC_EXPECT(n_lanes > 0, "buffer needs at least one lane");
    RL4REC_EXPECT(capacity > 0, "buffer lane capacity must be positive");
  }

  std::size_t n_lanes() const { return lanes_.size(); }
  std::size_t capacity() const { return capacity_; }
  DataSource source() const { return source_; }
  const std::deque<Block>& lane(std::size_t k) const { return lanes_.at(k); }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& l : lanes_) n += l.size();
    return n;
  }
  bool empty() const { return size() == 0; }

  /// Transitions whose successor is known: every block except an unfinished
  /// lane tail.
  std::size_t n_transitions(std::size_t k) const {
    const auto& l = lanes_[k];
    if (l.empty()) return 0;
    return l.back().done ? l.size() : l.size() - 1;
  }
  std::size_t n_transitions() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < lanes_.size(); ++k) n += n_transitions(k);
    return n;
  }

  /// True when the next block pushed to lane k must start a trajectory.
  bool expects_start(std::size_t k) const { return lanes_.at(k).empty() || lanes_[k].back().done; }

  void push(Block b) {
    RL4REC_EXPECT(b.env_id < lanes_.size(), "block env_id out of range");
    auto& l = lanes_[b.env_id];
    RL4REC_EXPECT(b.is_start == expects_start(b.env_id),
                  b.is_start ? "trajectory started before the previous one finished"
                             : "block continues a trajectory that was never started");
    if (l.size() == capacity_) evict(l);
    l.push_back(std::move(b));
  }

  void clear() {
    for (auto& l : lanes_) l.clear();
  }

 private:
  void evict(std::deque<Block>& l) {
    // Oldest whole trajectory: from the front up to (excluding) the next start.
    std::size_t end = 1;
    while (end < l.size() && !l[end].is_start) ++end;
    RL4REC_EXPECT(end < l.size() || l.back().done, "trajectory longer than the lane capacity");
    l.erase(l.begin(), l.begin() + static_cast<std::ptrdiff_t>(end));
  }

  std::vector<std::deque<Block>> lanes_;
  std::size_t capacity_;
  DataSource source_;
};

/// Complete trajectories in lane order, then time order. Unfinished tails are
/// skipped.
inline std::vector<Trajectory> extract_trajectories(const Buffer& buf) {
  std::vector<Trajectory> out;
  for (std::size_t k = 0; k < buf.n_lanes(); ++k) {
    Trajectory cur;
    for (const Block& b : buf.lane(k)) {
      if (b.is_start) cur.steps.clear();
      cur.steps.push_back({b.observation, b.action, b.reward, b.done, b.behavior_logprob.value_or(0.0),
                           b.repeat_removal});
      if (b.done) {
        out.push_back(std::move(cur));
        cur = {};
      }
    }
  }
  return out;
}

/// State reached after a done block; never bootstrapped from.
inline Observation terminal_successor(const Block& b) {
  Observation o = b.observation;
  o.history.push_back({b.action, b.reward});
  return o;
}

/// Uniform sampling with replacement over stored transitions. The next state
/// comes from the following block of the same lane.
inline TransitionBatch sample_batch(const Buffer& buf, std::size_t batch_size, Rng& rng) {
  RL4REC_EXPECT(batch_size > 0, "sample_batch: batch_size must be positive");
  std::vector<std::size_t> cumulative(buf.n_lanes());
  std::size_t total = 0;
  for (std::size_t k = 0; k < buf.n_lanes(); ++k) cumulative[k] = total += buf.n_transitions(k);
  RL4REC_EXPECT(total > 0, "sample_batch: buffer holds no complete transition");
  TransitionBatch batch;
  batch.source = buf.source();
  for (std::size_t n = 0; n < batch_size; ++n) {
    const std::size_t idx = rng.uniform_int(total);
    const std::size_t k = static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), idx) - cumulative.begin());
    const std::size_t pos = idx - (k == 0 ? 0 : cumulative[k - 1]);
    const auto& lane = buf.lane(k);
    const Block& b = lane[pos];
    batch.push(b.observation, b.action, b.reward, b.done ? terminal_successor(b) : lane[pos + 1].observation,
               b.done, b.repeat_removal, b.behavior_logprob.value_or(0.0));
  }
  return batch;
}

inline TransitionBatch sample_batch(const Buffer& buf, std::size_t batch_size, std::uint64_t seed) {
  Rng rng(seed);
  return sample_batch(buf, batch_size, rng);
}

// ---------------------------------------------------------------------------
// Offline construction

enum class ConstructionKind { Sequential, Convolution, Counterfactual };

inline const char* to_string(ConstructionKind k) {
  switch (k) {
    case ConstructionKind::Sequential: return "Sequential";
    case ConstructionKind::Convolution: return "Convolution";
    case ConstructionKind::Counterfactual: return "Counterfactual";
  }
  return "?";
}

inline ConstructionKind parse_construction_kind(const std::string& s) {
  for (auto k : {ConstructionKind::Sequential, ConstructionKind::Convolution, ConstructionKind::Counterfactual})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown buffer construction '" + s + "'");
}

struct ConstructionMethod {
  ConstructionKind kind = ConstructionKind::Sequential;
  std::size_t window = 0;  // Convolution: longest window; 0 means min(10, sequence length)
  std::uint64_t shuffle_seed = 0;
  std::size_t max_steps = 30;  // trajectories are chunked at this length
  bool repeat_removal = false;

  void validate() const {
    if (kind == ConstructionKind::Convolution && window == 1)
      throw ConfigError("convolution window must be at least 2");
    if (max_steps == 0) throw ConfigError("max_steps must be positive");
  }
};

/// Per-user interaction sequences in timestamp order, keyed by user.
inline std::map<data::UserId, std::vector<InteractionRecord>> group_by_user(
    const std::vector<InteractionRecord>& log) {
  std::vector<InteractionRecord> sorted(log);
  std::stable_sort(sorted.begin(), sorted.end(), data::chronological);
  std::map<data::UserId, std::vector<InteractionRecord>> out;
  for (const auto& r : sorted) out[r.user].push_back(r);
  return out;
}

namespace detail {

inline void push_trajectory(Buffer& buf, std::size_t lane, const InteractionRecord* first, std::size_t len,
                            bool repeat_removal) {
  Observation obs{first->user, {}};
  for (std::size_t t = 0; t < len; ++t) {
    const InteractionRecord& r = first[t];
    buf.push({lane, obs, r.item, r.reward, t + 1 == len, t == 0, std::nullopt, repeat_removal});
    obs.history.push_back({r.item, r.reward});
  }
}

}  // namespace detail

/// Builds a fixed buffer from logged interactions, one lane per user. Rewards
/// are the logged values.
inline Buffer build_offline_buffer(const std::vector<InteractionRecord>& log, const ConstructionMethod& method) {
  method.validate();
  RL4REC_EXPECT(!log.empty(), "build_offline_buffer: empty log");
  auto users = group_by_user(log);
  if (method.kind == ConstructionKind::Counterfactual) {
    Rng rng(method.shuffle_seed);
    for (auto& [u, seq] : users) rng.shuffle(seq);
  }
  std::size_t capacity = kDefaultLaneCapacity;
  for (const auto& [u, seq] : users) {
    const std::size_t w = std::min<std::size_t>(method.window ? method.window : 10, seq.size());
    // A full convolution over a length-n sequence stores at most n * w^2 blocks.
    capacity = std::max(capacity, seq.size() * (1 + w * w));
  }
  Buffer buf(users.size(), capacity, DataSource::Offline);
  std::size_t lane = 0;
  for (const auto& [u, seq] : users) {
    const std::size_t n = seq.size();
    for (std::size_t begin = 0; begin < n; begin += method.max_steps)
      detail::push_trajectory(buf, lane, seq.data() + begin, std::min(method.max_steps, n - begin),
                              method.repeat_removal);
    if (method.kind == ConstructionKind::Convolution) {
      const std::size_t w = method.window ? std::min(method.window, n) : std::min<std::size_t>(10, n);
      for (std::size_t k = 2; k <= w; ++k)
        for (std::size_t begin = 0; begin + k <= n; ++begin)
          detail::push_trajectory(buf, lane, seq.data() + begin, std::min(k, method.max_steps),
                                  method.repeat_removal);
    }
    ++lane;
  }
  return buf;
}

// ---------------------------------------------------------------------------
// Serialization: magic, version, lane count, capacity, source, block schema,
// then per lane a block count followed by the blocks.

inline constexpr char kBufferMagic[8] = {'R', 'L', '4', 'R', 'B', 'U', 'F', '1'};
inline constexpr std::uint32_t kBufferVersion = 1;
inline constexpr const char* kBlockSchema =
    "env_id:u64 user:u64 history:[item:u64 reward:f64] action:u64 reward:f64 flags:u8 logprob:f64";

inline void write_buffer(std::ostream& os, const Buffer& buf) {
  os.write(kBufferMagic, sizeof kBufferMagic);
  io::write_u32(os, kBufferVersion);
  io::write_u64(os, buf.n_lanes());
  io::write_u64(os, buf.capacity());
  io::write_u8(os, buf.source() == DataSource::Offline ? 1 : 0);
  io::write_str(os, kBlockSchema);
  for (std::size_t k = 0; k < buf.n_lanes(); ++k) {
    io::write_u64(os, buf.lane(k).size());
    for (const Block& b : buf.lane(k)) {
      io::write_u64(os, b.env_id);
      io::write_u64(os, b.observation.user);
      io::write_u64(os, b.observation.history.size());
      for (const auto& h : b.observation.history) {
        io::write_u64(os, h.item);
        io::write_f64(os, h.reward);
      }
      io::write_u64(os, b.action);
      io::write_f64(os, b.reward);
      io::write_u8(os, static_cast<std::uint8_t>((b.done ? 1 : 0) | (b.is_start ? 2 : 0) |
                                                 (b.behavior_logprob ? 4 : 0) | (b.repeat_removal ? 8 : 0)));
      io::write_f64(os, b.behavior_logprob.value_or(0.0));
    }
  }
  if (!os) throw DataError("failed writing buffer");
}

inline Buffer read_buffer(std::istream& is) {
  char magic[sizeof kBufferMagic];
  io::read_exact(is, magic, sizeof magic);
  if (!std::equal(magic, magic + sizeof magic, kBufferMagic)) throw FormatError("not a buffer file");
  if (io::read_u32(is) != kBufferVersion) throw FormatError("unsupported buffer version");
  const std::uint64_t n_lanes = io::read_u64(is), capacity = io::read_u64(is);
  const DataSource source = io::read_u8(is) ? DataSource::Offline : DataSource::Online;
  if (io::read_str(is) != kBlockSchema) throw FormatError("buffer block schema mismatch");
  if (n_lanes == 0 || capacity == 0) throw FormatError("buffer header has zero lanes or capacity");
  Buffer buf(n_lanes, capacity, source);
  for (std::size_t k = 0; k < n_lanes; ++k) {
    const std::uint64_t n = io::read_u64(is);
    if (n > capacity) throw FormatError("buffer lane exceeds its capacity");
    for (std::uint64_t j = 0; j < n; ++j) {
      Block b;
      b.env_id = io::read_u64(is);
      if (b.env_id != k) throw FormatError("buffer block stored in the wrong lane");
      b.observation.user = io::read_u64(is);
      const std::uint64_t h = io::read_u64(is);
      if (h > (1u << 24)) throw FormatError("buffer history length implausible");
      b.observation.history.resize(h);
      for (auto& x : b.observation.history) {
        x.item = io::read_u64(is);
        x.reward = io::read_f64(is);
      }
      b.action = io::read_u64(is);
      b.reward = io::read_f64(is);
      const std::uint8_t flags = io::read_u8(is);
      const double lp = io::read_f64(is);
      b.done = flags & 1;
      b.is_start = flags & 2;
      if (flags & 4) b.behavior_logprob = lp;
      b.repeat_removal = flags & 8;
      try {
        buf.push(std::move(b));
      } catch (const ContractViolation& e) {
        throw FormatError(std::string("buffer lane malformed: ") + e.what());
      }
    }
  }
  return buf;
}

}  // namespace rl4rec::buffer
