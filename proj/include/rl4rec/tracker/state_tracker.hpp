#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "rl4rec/data/env.hpp"
#include "rl4rec/error.hpp"
#include "rl4rec/nn/layers.hpp"
#include "rl4rec/nn/tape.hpp"
#include "rl4rec/rng.hpp"

namespace rl4rec::tracker {

enum class TrackerKind { Average, GRU, Caser, SASRec, NextItNet };

inline const char* to_string(TrackerKind k) {
  switch (k) {
    case TrackerKind::Average: return "Average";
    case TrackerKind::GRU: return "GRU";
    case TrackerKind::Caser: return "Caser";
    case TrackerKind::SASRec: return "SASRec";
    case TrackerKind::NextItNet: return "NextItNet";
  }
  return "?";
}

inline TrackerKind parse_tracker_kind(const std::string& s) {
  for (auto k : {TrackerKind::Average, TrackerKind::GRU, TrackerKind::Caser, TrackerKind::SASRec,
                 TrackerKind::NextItNet})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown tracker kind '" + s + "'");
}

struct TrackerConfig {
  TrackerKind kind = TrackerKind::Average;
  std::size_t embedding_dim = 32;
  std::size_t max_history = 10;
  bool reward_weighting = false;

  void validate() const {
    if (embedding_dim == 0) throw ConfigError("tracker: embedding_dim must be positive");
    if (max_history == 0) throw ConfigError("tracker: max_history must be positive");
  }
};

/// Encodes (user, history) observations into fixed-size state vectors. The
/// item table has one extra row (index n_items) holding the learned padding
/// embedding; sequence models left-pad histories to max_history with it.
class StateTracker {
 public:
  static constexpr std::size_t kCaserFiltersPerHeight = 4;

  StateTracker() = default;
  StateTracker(const TrackerConfig& cfg, std::size_t n_users, std::size_t n_items, std::uint64_t seed)
      : cfg_(cfg), n_users_(n_users), n_items_(n_items) {
    cfg_.validate();
    RL4REC_EXPECT(n_users > 0 && n_items > 0, "tracker: counts must be positive");
    const std::size_t d = cfg_.embedding_dim, L = cfg_.max_history;
    Rng rng(seed);
    items_ = nn::Parameter("tracker.item_embeddings", nn::uniform_init(n_items + 1, d, d, rng));
    switch (cfg_.kind) {
      case TrackerKind::Average:
        users_ = nn::Parameter("tracker.user_embeddings", nn::uniform_init(n_users, d, d, rng));
        break;
      case TrackerKind::GRU:
        gru_ = nn::GruCell("tracker.gru", d, d, rng);
        break;
      case TrackerKind::Caser:
        for (std::size_t h = 1; h <= std::min<std::size_t>(2, L); ++h)
          horizontal_.emplace_back("tracker.caser.h" + std::to_string(h), h * d, kCaserFiltersPerHeight, rng);
        vertical_ = nn::Parameter("tracker.caser.vertical", nn::uniform_init(1, L, L, rng));
        break;
      case TrackerKind::SASRec:
        positions_ = nn::Parameter("tracker.sasrec.positions", nn::uniform_init(L, d, d, rng));
        wq_ = nn::Linear("tracker.sasrec.q", d, d, rng);
        wk_ = nn::Linear("tracker.sasrec.k", d, d, rng);
        wv_ = nn::Linear("tracker.sasrec.v", d, d, rng);
        ffn_ = nn::Mlp("tracker.sasrec.ffn", {d, d, d}, rng, nn::Activation::Relu);
        break;
      case TrackerKind::NextItNet:
        for (std::size_t dil : {1, 2}) {
          const std::string name = "tracker.nextitnet.d" + std::to_string(dil);
          conv_past_.emplace_back(name + ".past", d, d, rng);
          conv_now_.emplace_back(name + ".now", d, d, rng);
        }
        break;
    }
  }

  const TrackerConfig& config() const { return cfg_; }
  std::size_t n_users() const { return n_users_; }
  std::size_t n_items() const { return n_items_; }
  std::size_t padding_index() const { return n_items_; }

  std::size_t output_dim() const {
    const std::size_t d = cfg_.embedding_dim;
    switch (cfg_.kind) {
      case TrackerKind::Average: return 2 * d;
      case TrackerKind::Caser: return horizontal_.size() * kCaserFiltersPerHeight + d;
      default: return d;
    }
  }

  nn::Parameter& item_embeddings() { return items_; }
  const nn::Parameter& item_embeddings() const { return items_; }
  nn::Parameter& user_embeddings() { return users_; }

  std::vector<nn::Parameter*> parameters() {
    std::vector<nn::Parameter*> out{&items_};
    switch (cfg_.kind) {
      case TrackerKind::Average: out.push_back(&users_); break;
      case TrackerKind::GRU: gru_.collect(out); break;
      case TrackerKind::Caser:
        for (auto& h : horizontal_) h.collect(out);
        out.push_back(&vertical_);
        break;
      case TrackerKind::SASRec:
        out.push_back(&positions_);
        wq_.collect(out);
        wk_.collect(out);
        wv_.collect(out);
        ffn_.collect(out);
        break;
      case TrackerKind::NextItNet:
        for (auto& l : conv_past_) l.collect(out);
        for (auto& l : conv_now_) l.collect(out);
        break;
    }
    return out;
  }

  /// B observations -> B x output_dim.
  nn::Var encode(nn::Tape& t, std::span<const data::Observation* const> batch) const {
    RL4REC_EXPECT(!batch.empty(), "encode: empty batch");
    for (const auto* o : batch) {
      RL4REC_EXPECT(o->user < n_users_, "encode: user id out of range");
      for (const auto& x : o->history) RL4REC_EXPECT(x.item < n_items_, "encode: item id out of range");
    }
    switch (cfg_.kind) {
      case TrackerKind::Average: return encode_average(t, batch);
      case TrackerKind::GRU: return encode_gru(t, batch);
      default: {
        std::vector<nn::Var> rows;
        rows.reserve(batch.size());
        for (const auto* o : batch) {
          nn::Var seq = sequence_outputs(t, *o);
          if (cfg_.kind == TrackerKind::Caser) {
            rows.push_back(seq);
          } else {
            rows.push_back(nn::slice_rows(seq, seq.rows() - 1, seq.rows()));
          }
        }
        return rows.size() == 1 ? rows.front() : nn::concat_rows(rows);
      }
    }
  }

  nn::Var encode(nn::Tape& t, const data::Observation& o) const {
    const data::Observation* p = &o;
    return encode(t, std::span<const data::Observation* const>(&p, 1));
  }

  /// Convenience: encoded state without recording gradients.
  nn::Tensor encode_value(const data::Observation& o) const {
    nn::Tape t(false);
    return encode(t, o).value();
  }

  /// Per-position outputs (max_history x d) for SASRec and NextItNet; for
  /// Caser the single pooled row. Position p only sees positions <= p.
  nn::Var sequence_outputs(nn::Tape& t, const data::Observation& o) const {
    const std::size_t L = cfg_.max_history;
    nn::Var e = nn::gather_rows(nn::use(t, items_), padded_items(o));
    if (cfg_.reward_weighting) e = e * t.constant(padded_weights(o));
    switch (cfg_.kind) {
      case TrackerKind::Caser: {
        std::vector<nn::Var> parts;
        for (const auto& h : horizontal_) parts.push_back(nn::max_rows(nn::relu(h(t, nn::unfold(e, h.in_dim() / cfg_.embedding_dim)))));
        parts.push_back(nn::matmul(nn::use(t, vertical_), e));
        return nn::concat_cols(parts);
      }
      case TrackerKind::SASRec: {
        nn::Var x = e + nn::use(t, positions_);
        nn::Var scores = nn::scale(nn::matmul(wq_(t, x), nn::transpose(wk_(t, x))),
                                   1.0 / std::sqrt(static_cast<double>(cfg_.embedding_dim)));
        nn::Mask causal(L * L, 0);
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = 0; j <= i; ++j) causal[i * L + j] = 1;
        nn::Var h = x + nn::matmul(nn::softmax(scores, causal), wv_(t, x));
        return h + ffn_(t, h);
      }
      case TrackerKind::NextItNet: {
        nn::Var x = e;
        for (std::size_t l = 0; l < conv_past_.size(); ++l) {
          const std::size_t dilation = std::size_t{1} << l;
          x = x + nn::relu(conv_past_[l](t, nn::shift_rows(x, dilation)) + conv_now_[l](t, x));
        }
        return x;
      }
      default:
        throw ContractViolation("sequence_outputs: tracker kind has no per-position output");
    }
  }

 private:
  /// Most recent max_history items, left-padded with the padding row.
  std::vector<std::size_t> padded_items(const data::Observation& o) const {
    const std::size_t L = cfg_.max_history, n = std::min(L, o.history.size());
    std::vector<std::size_t> idx(L, padding_index());
    for (std::size_t k = 0; k < n; ++k) idx[L - n + k] = o.history[o.history.size() - n + k].item;
    return idx;
  }

  nn::Tensor padded_weights(const data::Observation& o) const {
    const std::size_t L = cfg_.max_history, n = std::min(L, o.history.size());
    nn::Tensor w(L, 1, 1.0);
    for (std::size_t k = 0; k < n; ++k) w[L - n + k] = o.history[o.history.size() - n + k].reward;
    return w;
  }

  nn::Var encode_average(nn::Tape& t, std::span<const data::Observation* const> batch) const {
    std::vector<std::size_t> users, idx;
    std::vector<std::pair<std::size_t, double>> weights;  // (row in idx, weight) per batch row
    std::vector<std::size_t> row_begin;
    for (const auto* o : batch) {
      users.push_back(o->user);
      row_begin.push_back(idx.size());
      const std::size_t n = std::min(cfg_.max_history, o->history.size());
      if (n == 0) {
        idx.push_back(padding_index());
        weights.push_back({idx.size() - 1, 1.0});
        continue;
      }
      for (std::size_t k = o->history.size() - n; k < o->history.size(); ++k) {
        idx.push_back(o->history[k].item);
        const double r = cfg_.reward_weighting ? o->history[k].reward : 1.0;
        weights.push_back({idx.size() - 1, r / static_cast<double>(n)});
      }
    }
    row_begin.push_back(idx.size());
    nn::Tensor pool(batch.size(), idx.size());
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (std::size_t k = row_begin[b]; k < row_begin[b + 1]; ++k) pool(b, k) = weights[k].second;
    nn::Var items = nn::matmul(t.constant(std::move(pool)), nn::gather_rows(nn::use(t, items_), idx));
    return nn::concat_cols({nn::gather_rows(nn::use(t, users_), users), items});
  }

  nn::Var encode_gru(nn::Tape& t, std::span<const data::Observation* const> batch) const {
    const std::size_t L = cfg_.max_history, B = batch.size();
    std::vector<std::vector<std::size_t>> padded;
    std::vector<nn::Tensor> weights;
    for (const auto* o : batch) {
      padded.push_back(padded_items(*o));
      if (cfg_.reward_weighting) weights.push_back(padded_weights(*o));
    }
    nn::Var table = nn::use(t, items_);
    nn::Var h = t.constant(nn::Tensor(B, cfg_.embedding_dim));
    std::vector<std::size_t> step_idx(B);
    for (std::size_t p = 0; p < L; ++p) {
      for (std::size_t b = 0; b < B; ++b) step_idx[b] = padded[b][p];
      nn::Var x = nn::gather_rows(table, step_idx);
      if (cfg_.reward_weighting) {
        nn::Tensor w(B, 1);
        for (std::size_t b = 0; b < B; ++b) w[b] = weights[b][p];
        x = x * t.constant(std::move(w));
      }
      h = gru_(t, x, h);
    }
    return h;
  }

  TrackerConfig cfg_;
  std::size_t n_users_ = 0, n_items_ = 0;
  nn::Parameter items_, users_;
  nn::GruCell gru_;
  std::vector<nn::Linear> horizontal_;
  nn::Parameter vertical_;
  nn::Parameter positions_;
  nn::Linear wq_, wk_, wv_;
  nn::Mlp ffn_;
  std::vector<nn::Linear> conv_past_, conv_now_;
};

}  // namespace rl4rec::tracker
