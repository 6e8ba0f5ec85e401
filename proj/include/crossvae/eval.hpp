#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "crossvae/data.hpp"
#include "crossvae/errors.hpp"
#include "crossvae/model.hpp"

// Metrics: RMSE over observed held-out ratings, per-user Recall@N and NDCG@N
// on binarized relevance (rating > 3), and report serialization.

namespace crossvae::eval {

inline double rmse(const std::vector<double>& predictions, const std::vector<double>& targets) {
  if (predictions.size() != targets.size())
    throw DimensionError("rmse: length mismatch " + std::to_string(predictions.size()) + " vs " +
                         std::to_string(targets.size()));
  if (predictions.empty()) throw ContractError("rmse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - targets[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(predictions.size()));
}

namespace detail {

inline void check_no_duplicates(const std::vector<int>& ranked_items, const char* op) {
  std::set<int> seen;
  for (int it : ranked_items)
    if (!seen.insert(it).second)
      throw ContractError(std::string(op) + ": duplicate ranked item " + std::to_string(it));
}

}  // namespace detail

// DCG with binary gains 1/log2(rank+1), normalized by the ideal ordering.
inline double ndcg_at_n(const std::vector<int>& ranked_items, const std::set<int>& relevant,
                        int n) {
  detail::check_no_duplicates(ranked_items, "ndcg_at_n");
  if (relevant.empty()) throw ContractError("ndcg_at_n: empty relevant set");
  double dcg = 0.0;
  const std::size_t depth = std::min<std::size_t>(static_cast<std::size_t>(n), ranked_items.size());
  for (std::size_t i = 0; i < depth; ++i)
    if (relevant.count(ranked_items[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  double idcg = 0.0;
  const std::size_t ideal = std::min<std::size_t>(static_cast<std::size_t>(n), relevant.size());
  for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

// |top-N intersect relevant| / min(N, |relevant|).
inline double recall_at_n(const std::vector<int>& ranked_items, const std::set<int>& relevant,
                          int n) {
  detail::check_no_duplicates(ranked_items, "recall_at_n");
  if (relevant.empty()) throw ContractError("recall_at_n: empty relevant set");
  const std::size_t depth = std::min<std::size_t>(static_cast<std::size_t>(n), ranked_items.size());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < depth; ++i)
    if (relevant.count(ranked_items[i])) ++hit;
  return static_cast<double>(hit) /
         static_cast<double>(std::min<std::size_t>(static_cast<std::size_t>(n), relevant.size()));
}

// RMSE of posterior-mean predictions over the observed entries of a matrix.
inline double rmse_from_means(const model::FullPosterior& users, const model::FullPosterior& items,
                              const data::SparseRatingMatrix& target) {
  if (target.size() == 0) throw ContractError("rmse_from_means: empty target split");
  double acc = 0.0;
  for (const data::Rating& r : target.triples()) {
    double dot = 0.0;
    for (int k = 0; k < users.dim; ++k) dot += users.mean_at(r.user, k) * items.mean_at(r.item, k);
    const double d = dot - r.value;
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(target.size()));
}

enum class RankOver { kTest, kFull };

inline RankOver parse_rank_over(const std::string& s) {
  if (s == "test") return RankOver::kTest;
  if (s == "full") return RankOver::kFull;
  throw ParameterError("unknown rank-over mode '" + s + "'");
}

struct MetricsReport {
  std::string split;
  double rmse = 0.0;
  std::map<int, double> ndcg;    // N -> score
  std::map<int, double> recall;  // N -> score
  int n_users_evaluated = 0;
  std::string config_fingerprint;
};

// Threads for per-user metric loops: CROSSVAE_THREADS caps/overrides.
inline int evaluation_threads() {
  if (const char* env = std::getenv("CROSSVAE_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min(hw == 0 ? 1u : hw, 8u));
}

// Metrics of posterior-mean predictions against one split. Ranking candidates
// are the user's own held-out items by default (the holdout is triple-level),
// or the whole catalog with RankOver::kFull. Users enter the ranking averages
// only with >= 2 rated items in the split and >= 1 relevant one. Ties in
// scores break by ascending item index.
inline MetricsReport evaluate_means(const model::FullPosterior& users,
                                    const model::FullPosterior& items,
                                    const data::SparseRatingMatrix& target,
                                    const std::vector<int>& ns, RankOver rank_over,
                                    int threads = 0) {
  if (target.size() == 0) throw ContractError("evaluate: empty target split");
  MetricsReport report;
  report.rmse = rmse_from_means(users, items, target);

  const int n_users = target.n_users();
  struct UserScore {
    bool eligible = false;
    std::map<int, double> ndcg;
    std::map<int, double> recall;
  };
  std::vector<UserScore> per_user(static_cast<std::size_t>(n_users));

  const auto score_user = [&](int u) {
    const auto& rated = target.rated_by_user(u);
    if (rated.size() < 2) return;
    std::set<int> relevant;
    for (const auto& [item, value] : rated)
      if (value > 3.0) relevant.insert(item);
    if (relevant.empty()) return;

    std::vector<int> candidates;
    if (rank_over == RankOver::kTest) {
      candidates.reserve(rated.size());
      for (const auto& [item, value] : rated) {
        (void)value;
        candidates.push_back(item);
      }
    } else {
      candidates.resize(static_cast<std::size_t>(target.n_items()));
      for (int j = 0; j < target.n_items(); ++j) candidates[static_cast<std::size_t>(j)] = j;
    }
    std::vector<std::pair<double, int>> scored;
    scored.reserve(candidates.size());
    for (int item : candidates) {
      double dot = 0.0;
      for (int k = 0; k < users.dim; ++k) dot += users.mean_at(u, k) * items.mean_at(item, k);
      scored.emplace_back(dot, item);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<int> ranked;
    ranked.reserve(scored.size());
    for (const auto& [score, item] : scored) {
      (void)score;
      ranked.push_back(item);
    }
    auto& out = per_user[static_cast<std::size_t>(u)];
    out.eligible = true;
    for (int n : ns) {
      out.ndcg[n] = ndcg_at_n(ranked, relevant, n);
      out.recall[n] = recall_at_n(ranked, relevant, n);
    }
  };

  const int n_threads = std::max(1, std::min(threads > 0 ? threads : evaluation_threads(), n_users));
  if (n_threads == 1) {
    for (int u = 0; u < n_users; ++u) score_user(u);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) {
      pool.emplace_back([&, t] {
        for (int u = t; u < n_users; u += n_threads) score_user(u);
      });
    }
    for (auto& th : pool) th.join();
  }

  for (int n : ns) {
    report.ndcg[n] = 0.0;
    report.recall[n] = 0.0;
  }
  for (const auto& us : per_user) {
    if (!us.eligible) continue;
    ++report.n_users_evaluated;
    for (int n : ns) {
      report.ndcg[n] += us.ndcg.at(n);
      report.recall[n] += us.recall.at(n);
    }
  }
  if (report.n_users_evaluated > 0) {
    for (int n : ns) {
      report.ndcg[n] /= report.n_users_evaluated;
      report.recall[n] /= report.n_users_evaluated;
    }
  }
  return report;
}

// Full evaluation from a model state: recompute posterior means conditioned on
// the training ratings with the stored sample tables as latent inputs, then
// score the requested split.
inline MetricsReport evaluate(const model::ModelParams& params, const model::EmbeddingTable& users,
                              const model::EmbeddingTable& items,
                              const data::SparseRatingMatrix& conditioning,
                              const data::SparseRatingMatrix& target, const std::vector<int>& ns,
                              RankOver rank_over, int threads = 0) {
  const auto fb_items =
      params.hp.cross_feedback ? model::feedback_tensor(items) : ad::TensorPtr{};
  const auto fb_users =
      params.hp.cross_feedback ? model::feedback_tensor(users) : ad::TensorPtr{};
  const auto user_post = model::full_posterior(params.user_side, params.hp, conditioning,
                                               model::EntityKind::kUser, fb_items);
  const auto item_post = model::full_posterior(params.item_side, params.hp, conditioning,
                                               model::EntityKind::kItem, fb_users);
  return evaluate_means(user_post, item_post, target, ns, rank_over, threads);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string metrics_csv_header() {
  return "split,rmse,ndcg@20,ndcg@50,recall@20,recall@50,n_users";
}

inline std::string metrics_csv_row(const MetricsReport& r) {
  std::string out = r.split;
  out += "," + format_double(r.rmse);
  for (int n : {20, 50}) out += "," + format_double(r.ndcg.count(n) ? r.ndcg.at(n) : 0.0);
  for (int n : {20, 50}) out += "," + format_double(r.recall.count(n) ? r.recall.at(n) : 0.0);
  out += "," + std::to_string(r.n_users_evaluated);
  return out;
}

}  // namespace crossvae::eval
