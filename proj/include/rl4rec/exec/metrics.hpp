#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_set>
#include <vector>

#include "rl4rec/data/dataset.hpp"
#include "rl4rec/error.hpp"
#include "rl4rec/policy/transition.hpp"

namespace rl4rec::exec {

using policy::Trajectory;

struct EpisodeMetrics {
  double r_cumu = 0.0;  // undiscounted sum of rewards
  double r_avg = 0.0;   // r_cumu / length
  double length = 0.0;  // steps, including the terminating one

  friend bool operator==(const EpisodeMetrics&, const EpisodeMetrics&) = default;
};

struct RlMetrics {
  double r_cumu = 0.0, r_avg = 0.0, length = 0.0;  // means over episodes
  std::vector<EpisodeMetrics> per_episode;
};

inline EpisodeMetrics episode_metrics(const Trajectory& tr) {
  RL4REC_EXPECT(!tr.steps.empty(), "zero-length trajectory");
  EpisodeMetrics m;
  m.r_cumu = tr.reward_sum();
  m.length = static_cast<double>(tr.steps.size());
  m.r_avg = m.r_cumu / m.length;
  return m;
}

inline RlMetrics compute_rl_metrics(const std::vector<Trajectory>& trajectories) {
  RL4REC_EXPECT(!trajectories.empty(), "compute_rl_metrics: no trajectories");
  RlMetrics out;
  for (const auto& tr : trajectories) {
    out.per_episode.push_back(episode_metrics(tr));
    out.r_cumu += out.per_episode.back().r_cumu;
    out.r_avg += out.per_episode.back().r_avg;
    out.length += out.per_episode.back().length;
  }
  const double n = static_cast<double>(trajectories.size());
  out.r_cumu /= n;
  out.r_avg /= n;
  out.length /= n;
  return out;
}

struct ExposureMetrics {
  double coverage = 0.0;   // distinct recommended items / catalog size
  double diversity = 0.0;  // mean intra-episode category dissimilarity
  double novelty = 0.0;    // mean -log2 popularity of recommended items
};

/// Share of item pairs within one episode that fall in different categories;
/// 1 for episodes with fewer than two items.
inline double episode_diversity(const Trajectory& tr, const data::ItemCatalog& catalog) {
  const std::size_t L = tr.steps.size();
  if (L <= 1) return 1.0;
  std::map<int, std::size_t> per_category;
  for (const auto& s : tr.steps) ++per_category[catalog.category.at(s.action)];
  double same = 0.0;
  for (const auto& [c, n] : per_category) same += 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  return 1.0 - 2.0 * same / (static_cast<double>(L) * static_cast<double>(L - 1));
}

inline ExposureMetrics compute_exposure_metrics(const std::vector<Trajectory>& trajectories,
                                                const data::ItemCatalog& catalog) {
  RL4REC_EXPECT(catalog.n_items > 0, "compute_exposure_metrics: empty catalog");
  RL4REC_EXPECT(catalog.popularity.size() == catalog.n_items, "compute_exposure_metrics: popularity missing");
  ExposureMetrics out;
  if (trajectories.empty()) return out;
  std::unordered_set<data::ItemId> seen;
  const double floor = 1.0 / (2.0 * static_cast<double>(std::max<std::size_t>(catalog.train_size, 1)));
  double novelty = 0.0;
  std::size_t n_recs = 0;
  for (const auto& tr : trajectories) {
    out.diversity += episode_diversity(tr, catalog);
    for (const auto& s : tr.steps) {
      RL4REC_EXPECT(s.action < catalog.n_items, "compute_exposure_metrics: item outside catalog");
      seen.insert(s.action);
      novelty += -std::log2(std::max(catalog.popularity[s.action], floor));
      ++n_recs;
    }
  }
  out.coverage = static_cast<double>(seen.size()) / static_cast<double>(catalog.n_items);
  out.diversity /= static_cast<double>(trajectories.size());
  out.novelty = n_recs ? novelty / static_cast<double>(n_recs) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// User-model quality

struct ScoredPair {
  data::UserId user = 0;
  data::ItemId item = 0;
  double prediction = 0.0;
  double truth = 0.0;
};

struct UserModelReport {
  double mae = 0.0, mse = 0.0, rmse = 0.0;
  // Top-k ranking metrics, averaged over users with at least one relevant item.
  double recall = 0.0, precision = 0.0, ndcg = 0.0, hit_rate = 0.0, map = 0.0, mrr = 0.0;
  std::size_t k = 0;
  std::size_t ranked_users = 0;
};

/// Items whose truth reaches `relevant_at` are relevant, with gain equal to
/// their truth value. Each user's pairs are ranked by prediction, ties by item.
inline UserModelReport compute_user_model_metrics(const std::vector<ScoredPair>& pairs, std::size_t k,
                                                  double relevant_at) {
  RL4REC_EXPECT(!pairs.empty(), "compute_user_model_metrics: empty input");
  RL4REC_EXPECT(k >= 1, "compute_user_model_metrics: k must be at least 1");
  UserModelReport r;
  r.k = k;
  for (const auto& p : pairs) {
    const double e = p.prediction - p.truth;
    r.mae += std::abs(e);
    r.mse += e * e;
  }
  r.mae /= static_cast<double>(pairs.size());
  r.mse /= static_cast<double>(pairs.size());
  r.rmse = std::sqrt(r.mse);

  std::map<data::UserId, std::vector<const ScoredPair*>> by_user;
  for (const auto& p : pairs) by_user[p.user].push_back(&p);
  for (auto& [u, list] : by_user) {
    auto gain = [&](const ScoredPair* p) { return p->truth >= relevant_at ? p->truth : 0.0; };
    std::size_t n_rel = 0;
    for (const auto* p : list) n_rel += gain(p) > 0.0;
    if (n_rel == 0) continue;
    std::sort(list.begin(), list.end(), [](const ScoredPair* a, const ScoredPair* b) {
      return a->prediction != b->prediction ? a->prediction > b->prediction : a->item < b->item;
    });
    std::vector<double> ideal;
    for (const auto* p : list) ideal.push_back(gain(p));
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double dcg = 0.0, idcg = 0.0, ap = 0.0, rr = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(k, list.size()); ++i) {
      const double disc = 1.0 / std::log2(static_cast<double>(i) + 2.0);
      dcg += gain(list[i]) * disc;
      idcg += ideal[i] * disc;
      if (gain(list[i]) > 0.0) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(i + 1);
        if (rr == 0.0) rr = 1.0 / static_cast<double>(i + 1);
      }
    }
    r.recall += static_cast<double>(hits) / static_cast<double>(n_rel);
    r.precision += static_cast<double>(hits) / static_cast<double>(k);
    r.ndcg += idcg > 0.0 ? dcg / idcg : 0.0;
    r.hit_rate += hits > 0 ? 1.0 : 0.0;
    r.map += ap / static_cast<double>(std::min(n_rel, k));
    r.mrr += rr;
    ++r.ranked_users;
  }
  if (r.ranked_users) {
    const double n = static_cast<double>(r.ranked_users);
    r.recall /= n;
    r.precision /= n;
    r.ndcg /= n;
    r.hit_rate /= n;
    r.map /= n;
    r.mrr /= n;
  }
  return r;
}

}  // namespace rl4rec::exec
