#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "rl4rec/data/dataset.hpp"
#include "rl4rec/error.hpp"
#include "rl4rec/nn/checkpoint.hpp"
#include "rl4rec/rng.hpp"

namespace rl4rec::data {

struct RewardModelConfig {
  std::size_t dim = 16;
  std::size_t n_negatives = 0;
  std::optional<double> negative_target;  // defaults to the dataset minimum reward
  std::size_t epochs = 50;
  double learning_rate = 0.02;
  double l2 = 1e-4;
  double init_scale = 0.1;
  std::size_t head_hidden = 0;  // 0 disables the nonlinear head
  double validation_fraction = 0.1;
  std::uint64_t seed = 7;
};

/// Biased matrix factorization. With a head, the prediction adds
/// w2 . tanh(W1 [p_u; q_i] + b1).
class RewardModel {
 public:
  RewardModel() = default;
  RewardModel(std::size_t n_users, std::size_t n_items, std::size_t dim, std::size_t head_hidden,
              double reward_min, double reward_max)
      : n_users_(n_users),
        n_items_(n_items),
        dim_(dim),
        hidden_(head_hidden),
        reward_min_(reward_min),
        reward_max_(reward_max),
        user_emb_(n_users, dim),
        item_emb_(n_items, dim),
        user_bias_(1, n_users),
        item_bias_(1, n_items),
        head_w1_(2 * dim, head_hidden),
        head_b1_(1, head_hidden),
        head_w2_(1, head_hidden) {
    if (dim == 0) throw ConfigError("reward model: latent dimension must be positive");
    if (!(reward_min <= reward_max)) throw ConfigError("reward model: empty reward range");
  }

  std::size_t n_users() const { return n_users_; }
  std::size_t n_items() const { return n_items_; }
  std::size_t dim() const { return dim_; }
  std::size_t head_hidden() const { return hidden_; }
  double reward_min() const { return reward_min_; }
  double reward_max() const { return reward_max_; }
  double train_rmse() const { return train_rmse_; }
  double validation_rmse() const { return validation_rmse_; }

  double& global_bias() { return global_bias_; }
  nn::Tensor& user_embeddings() { return user_emb_; }
  nn::Tensor& item_embeddings() { return item_emb_; }
  nn::Tensor& user_bias() { return user_bias_; }
  nn::Tensor& item_bias() { return item_bias_; }
  nn::Tensor& head_w1() { return head_w1_; }
  nn::Tensor& head_b1() { return head_b1_; }
  nn::Tensor& head_w2() { return head_w2_; }

  /// Unclipped model output.
  double raw(UserId u, ItemId i) const {
    RL4REC_EXPECT(u < n_users_ && i < n_items_, "predict_reward: id out of range");
    double s = global_bias_ + user_bias_[u] + item_bias_[i];
    const auto p = user_emb_.row_span(u);
    const auto q = item_emb_.row_span(i);
    for (std::size_t k = 0; k < dim_; ++k) s += p[k] * q[k];
    for (std::size_t h = 0; h < hidden_; ++h) s += head_w2_[h] * std::tanh(head_pre(p, q, h));
    return s;
  }

  double predict(UserId u, ItemId i) const {
    return std::clamp(raw(u, i), reward_min_, reward_max_);
  }

  /// One SGD step on 0.5 * (raw - target)^2 + 0.5 * l2 * |touched params|^2.
  /// Returns the residual before the step.
  double sgd_step(UserId u, ItemId i, double target, double lr, double l2) {
    const double e = raw(u, i) - target;
    auto p = user_emb_.row_span(u);
    auto q = item_emb_.row_span(i);
    std::vector<double> gp(dim_), gq(dim_);
    for (std::size_t k = 0; k < dim_; ++k) {
      gp[k] = e * q[k] + l2 * p[k];
      gq[k] = e * p[k] + l2 * q[k];
    }
    for (std::size_t h = 0; h < hidden_; ++h) {
      const double a = std::tanh(head_pre(p, q, h));
      const double ga = e * head_w2_[h] * (1.0 - a * a);
      for (std::size_t k = 0; k < dim_; ++k) {
        gp[k] += ga * head_w1_(k, h);
        gq[k] += ga * head_w1_(dim_ + k, h);
        head_w1_(k, h) -= lr * (ga * p[k] + l2 * head_w1_(k, h));
        head_w1_(dim_ + k, h) -= lr * (ga * q[k] + l2 * head_w1_(dim_ + k, h));
      }
      head_b1_[h] -= lr * ga;
      head_w2_[h] -= lr * (e * a + l2 * head_w2_[h]);
    }
    for (std::size_t k = 0; k < dim_; ++k) {
      p[k] -= lr * gp[k];
      q[k] -= lr * gq[k];
    }
    user_bias_[u] -= lr * (e + l2 * user_bias_[u]);
    item_bias_[i] -= lr * (e + l2 * item_bias_[i]);
    global_bias_ -= lr * e;
    return e;
  }

  void set_rmse(double train, double validation) {
    train_rmse_ = train;
    validation_rmse_ = validation;
  }

  nn::Checkpoint to_checkpoint() const {
    nn::Checkpoint ck;
    ck.meta["kind"] = "reward_model";
    ck.meta["train_rmse"] = std::to_string(train_rmse_);
    ck.meta["validation_rmse"] = std::to_string(validation_rmse_);
    ck.arrays = {{"global_bias", nn::Tensor::scalar(global_bias_)},
                 {"reward_range", nn::Tensor::row({reward_min_, reward_max_})},
                 {"user_embeddings", user_emb_},
                 {"item_embeddings", item_emb_},
                 {"user_bias", user_bias_},
                 {"item_bias", item_bias_},
                 {"head_w1", head_w1_},
                 {"head_b1", head_b1_},
                 {"head_w2", head_w2_}};
    return ck;
  }

  static RewardModel from_checkpoint(const nn::Checkpoint& ck) {
    auto need = [&](const char* name) -> const nn::Tensor& {
      const nn::Tensor* t = ck.find(name);
      if (t == nullptr) throw ConfigError(std::string("reward model checkpoint lacks ") + name);
      return *t;
    };
    const auto& ue = need("user_embeddings");
    const auto& ie = need("item_embeddings");
    const auto& range = need("reward_range");
    const auto& w1 = need("head_w1");
    if (range.size() != 2 || ue.cols() != ie.cols()) throw ConfigError("malformed reward model checkpoint");
    RewardModel m(ue.rows(), ie.rows(), ue.cols(), w1.cols(), range[0], range[1]);
    m.global_bias_ = need("global_bias").item();
    m.user_emb_ = ue;
    m.item_emb_ = ie;
    m.user_bias_ = need("user_bias");
    m.item_bias_ = need("item_bias");
    m.head_w1_ = w1;
    m.head_b1_ = need("head_b1");
    m.head_w2_ = need("head_w2");
    if (m.user_bias_.size() != m.n_users_ || m.item_bias_.size() != m.n_items_ ||
        m.head_w1_.rows() != 2 * m.dim_ || m.head_b1_.size() != m.hidden_ ||
        m.head_w2_.size() != m.hidden_)
      throw ConfigError("malformed reward model checkpoint");
    m.train_rmse_ = std::stod(ck.meta_or("train_rmse", "nan"));
    m.validation_rmse_ = std::stod(ck.meta_or("validation_rmse", "nan"));
    return m;
  }

 private:
  double head_pre(std::span<const double> p, std::span<const double> q, std::size_t h) const {
    double z = head_b1_[h];
    for (std::size_t k = 0; k < dim_; ++k) z += head_w1_(k, h) * p[k] + head_w1_(dim_ + k, h) * q[k];
    return z;
  }

  std::size_t n_users_ = 0, n_items_ = 0, dim_ = 1, hidden_ = 0;
  double reward_min_ = 0.0, reward_max_ = 1.0;
  double global_bias_ = 0.0;
  nn::Tensor user_emb_, item_emb_, user_bias_, item_bias_;
  nn::Tensor head_w1_, head_b1_, head_w2_;
  double train_rmse_ = 0.0, validation_rmse_ = 0.0;
};

inline double predict_reward(const RewardModel& m, UserId u, ItemId i) { return m.predict(u, i); }

/// Trains on `records` (observed pairs) plus n_negatives unobserved pairs per
/// positive, labelled with the negative target. A random validation_fraction
/// of the observed records is held out for the reported validation RMSE.
inline RewardModel train_reward_model(std::span<const InteractionRecord> records, std::size_t n_users,
                                      std::size_t n_items, double reward_min, double reward_max,
                                      const RewardModelConfig& cfg) {
  if (cfg.dim == 0) throw ConfigError("reward model: latent dimension must be positive");
  if (cfg.learning_rate <= 0.0) throw ConfigError("reward model: learning rate must be positive");
  if (cfg.validation_fraction < 0.0 || cfg.validation_fraction >= 1.0)
    throw ConfigError("reward model: validation_fraction must be in [0, 1)");
  RL4REC_EXPECT(!records.empty(), "train_reward_model: no records");

  Rng rng(cfg.seed);
  RewardModel model(n_users, n_items, cfg.dim, cfg.head_hidden, reward_min, reward_max);
  for (double& v : model.user_embeddings().values()) v = rng.uniform(-cfg.init_scale, cfg.init_scale);
  for (double& v : model.item_embeddings().values()) v = rng.uniform(-cfg.init_scale, cfg.init_scale);
  for (double& v : model.head_w1().values()) v = rng.uniform(-cfg.init_scale, cfg.init_scale);
  for (double& v : model.head_w2().values()) v = rng.uniform(-cfg.init_scale, cfg.init_scale);

  std::vector<std::size_t> order(records.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  rng.shuffle(order);
  auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * records.size()));
  if (n_val >= records.size()) n_val = 0;
  const std::vector<std::size_t> val(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> fit(order.begin() + n_val, order.end());
  std::sort(fit.begin(), fit.end());

  std::unordered_set<std::uint64_t> observed;
  std::vector<std::size_t> seen_per_user(n_users, 0);
  for (const auto& r : records) {
    RL4REC_EXPECT(r.user < n_users && r.item < n_items, "train_reward_model: id out of range");
    if (observed.insert(static_cast<std::uint64_t>(r.user) * n_items + r.item).second)
      ++seen_per_user[r.user];
  }
  const double neg_target = cfg.negative_target.value_or(reward_min);

  double mean = 0.0;
  for (std::size_t k : fit) mean += records[k].reward;
  model.global_bias() = mean / static_cast<double>(fit.size());

  struct Sample {
    UserId user;
    ItemId item;
    double target;
  };
  std::vector<Sample> samples;
  samples.reserve(fit.size() * (1 + cfg.n_negatives));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    samples.clear();
    for (std::size_t k : fit) {
      const auto& r = records[k];
      samples.push_back({r.user, r.item, r.reward});
      if (seen_per_user[r.user] >= n_items) continue;
      for (std::size_t n = 0; n < cfg.n_negatives; ++n) {
        ItemId j;
        do {
          j = rng.uniform_int(n_items);
        } while (observed.count(static_cast<std::uint64_t>(r.user) * n_items + j));
        samples.push_back({r.user, j, neg_target});
      }
    }
    rng.shuffle(samples);
    for (const auto& s : samples) model.sgd_step(s.user, s.item, s.target, cfg.learning_rate, cfg.l2);
  }

  auto rmse = [&](const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    double se = 0.0;
    for (std::size_t k : idx) {
      const double e = model.predict(records[k].user, records[k].item) - records[k].reward;
      se += e * e;
    }
    const double v = std::sqrt(se / static_cast<double>(idx.size()));
    if (!std::isfinite(v)) throw NumericError("reward model diverged");
    return v;
  };
  const double train = rmse(fit);
  model.set_rmse(train, val.empty() ? train : rmse(val));
  return model;
}

inline RewardModel train_reward_model(const Dataset& ds, std::span<const InteractionRecord> records,
                                      const RewardModelConfig& cfg) {
  return train_reward_model(records, ds.n_users, ds.n_items, ds.reward_min, ds.reward_max, cfg);
}

}  // namespace rl4rec::data
