#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "crossvae/data.hpp"
#include "crossvae/errors.hpp"
#include "crossvae/eval.hpp"
#include "crossvae/model.hpp"
#include "crossvae/rng.hpp"

// Training loop: nested user x item batch iteration with cross-feedback
// refresh, Adam updates on all encoder parameters and patience-based
// convergence on the validation RMSE.

namespace crossvae::train {

// Adam moments per named parameter plus the shared step counter.
struct AdamState {
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::map<std::string, Moments> moments;
  std::int64_t step = 0;
};

// Standard Adam update with bias correction over every (name, tensor) pair.
inline void optimizer_step(const std::vector<std::pair<std::string, ad::TensorPtr>>& params,
                           AdamState& state, double lr, double beta1, double beta2, double eps) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (const auto& [name, t] : params) {
    if (!t->has_grad())
      throw StateError("optimizer_step: parameter '" + name + "' has no gradient buffer");
    auto& mom = state.moments[name];
    if (mom.m.size() != t->size()) {
      mom.m.assign(t->size(), 0.0);
      mom.v.assign(t->size(), 0.0);
    }
    const std::size_t n = t->size();
    double* m = mom.m.data();
    double* v = mom.v.data();
    double* w = t->values.data();
    const double* g = t->grad.data();
    const double inv_bc1 = 1.0 / bc1, inv_bc2 = 1.0 / bc2;
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] * inv_bc1) / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

struct TrainState {
  model::ModelParams params;
  model::EmbeddingTable users;
  model::EmbeddingTable items;
  AdamState adam;
  std::mt19937_64 noise_engine;

  std::uint64_t master_seed = 0;
  int iteration = 0;
  double best_validation_rmse = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;

  // Batch partitions are sampled once, before the loop (Algorithm step 3),
  // and re-derived from the seed on resume.
  std::vector<std::vector<int>> user_batches;
  std::vector<std::vector<int>> item_batches;

  // Posterior parameters under the final weights of the last iteration; the
  // tables above are samples from these.
  model::FullPosterior user_posterior;
  model::FullPosterior item_posterior;

  // Diagnostics from the last outer iteration.
  double last_train_loss = 0.0;
  int last_attention_fallbacks = 0;
  std::map<std::string, bool> last_grad_touched;
  std::uint64_t last_feedback_fingerprint_items = 0;  // user-side latent input source
  std::uint64_t last_feedback_fingerprint_users = 0;  // item-side latent input source
};

inline std::uint64_t values_fingerprint(const std::vector<double>& v) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* p = reinterpret_cast<const unsigned char*>(v.data());
  for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline TrainState init_train_state(const data::SparseRatingMatrix& train,
                                   const model::Hyperparams& hp, std::uint64_t seed) {
  TrainState s;
  s.master_seed = seed;
  s.params = model::init_model(hp, train.n_users(), train.n_items(), seed);
  s.users = model::init_embeddings(model::EntityKind::kUser, train.n_users(), hp.k, hp.init_mu,
                                   hp.init_sigma, rng::derive_seed(seed, 0xE3B0));
  s.items = model::init_embeddings(model::EntityKind::kItem, train.n_items(), hp.k, hp.init_mu,
                                   hp.init_sigma, rng::derive_seed(seed, 0xE3B1));
  const int bu = hp.effective_batch_users(train.n_users(), train.n_items());
  const int bi = hp.effective_batch_items(train.n_users(), train.n_items());
  s.user_batches = data::make_batches(static_cast<std::size_t>(train.n_users()), bu,
                                      rng::derive_seed(seed, 0xBA7C0));
  s.item_batches = data::make_batches(static_cast<std::size_t>(train.n_items()), bi,
                                      rng::derive_seed(seed, 0xBA7C1));
  s.noise_engine.seed(rng::derive_seed(seed, 0x4015E));
  return s;
}

namespace detail {

// Observed train entries inside a (user rows x item rows) block: 0/1 mask,
// rating targets and per-row/per-column observed counts.
struct Block {
  ad::TensorPtr mask;
  ad::TensorPtr target;
  std::vector<double> user_counts;
  std::vector<double> item_counts;
  std::size_t observed = 0;
};

inline Block slice_block(const data::SparseRatingMatrix& train, const std::vector<int>& user_rows,
                         const std::vector<int>& item_rows, const std::vector<int>& item_slot) {
  Block b;
  b.mask = ad::make_tensor(user_rows.size(), item_rows.size(), false);
  b.target = ad::make_tensor(user_rows.size(), item_rows.size(), false);
  b.user_counts.assign(user_rows.size(), 0.0);
  b.item_counts.assign(item_rows.size(), 0.0);
  for (std::size_t r = 0; r < user_rows.size(); ++r) {
    for (const auto& [item, value] : train.rated_by_user(user_rows[r])) {
      const int slot = item_slot[static_cast<std::size_t>(item)];
      if (slot < 0) continue;
      b.mask->at(r, static_cast<std::size_t>(slot)) = 1.0;
      b.target->at(r, static_cast<std::size_t>(slot)) = value;
      b.user_counts[r] += 1.0;
      b.item_counts[static_cast<std::size_t>(slot)] += 1.0;
      ++b.observed;
    }
  }
  return b;
}

// KL weight per entity so that summing over every block of one outer
// iteration counts each entity's KL exactly once: (observed in block) /
// (total observed in training). Entities with no training ratings get 0.
inline std::vector<double> kl_weights(const std::vector<double>& block_counts,
                                      const std::vector<int>& rows,
                                      const std::vector<double>& total_counts) {
  std::vector<double> w(block_counts.size(), 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double total = total_counts[static_cast<std::size_t>(rows[r])];
    if (total > 0.0) w[r] = block_counts[r] / total;
  }
  return w;
}

inline std::vector<double> degree_counts(const data::SparseRatingMatrix& m,
                                         model::EntityKind side) {
  const int n = side == model::EntityKind::kUser ? m.n_users() : m.n_items();
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (int r = 0; r < n; ++r)
    out[static_cast<std::size_t>(r)] = static_cast<double>(
        side == model::EntityKind::kUser ? m.rated_by_user(r).size() : m.rated_by_item(r).size());
  return out;
}

inline void note_touched_grads(TrainState& s,
                               const std::vector<std::pair<std::string, ad::TensorPtr>>& params) {
  for (const auto& [name, t] : params) {
    if (!t->has_grad() || s.last_grad_touched.count(name)) continue;
    for (double g : t->grad) {
      if (g != 0.0) {
        s.last_grad_touched[name] = true;
        break;
      }
    }
  }
}

inline void zero_grads(const std::vector<std::pair<std::string, ad::TensorPtr>>& params) {
  for (const auto& [name, t] : params) {
    (void)name;
    t->zero_grad();
  }
}

inline std::vector<int> iota_rows(int n) {
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) all[static_cast<std::size_t>(j)] = j;
  return all;
}

}  // namespace detail

// One pass of Algorithm steps 6-15: refresh the cross-feedback views, sweep
// the nested (user batch x item batch) grid with a gradient step per block,
// then resample both embedding tables from the final parameters, still against
// the feedback views captured at the start of the iteration.
inline void run_outer_iteration(TrainState& s, const data::SparseRatingMatrix& train) {
  const model::Hyperparams& hp = s.params.hp;
  const auto params = s.params.named_tensors();
  const auto user_totals = detail::degree_counts(train, model::EntityKind::kUser);
  const auto item_totals = detail::degree_counts(train, model::EntityKind::kItem);

  // Step 6: latent inputs for this iteration come from the tables sampled at
  // the end of the previous one.
  const ad::TensorPtr feedback_items =
      hp.cross_feedback ? model::feedback_tensor(s.items) : nullptr;
  const ad::TensorPtr feedback_users =
      hp.cross_feedback ? model::feedback_tensor(s.users) : nullptr;
  s.last_feedback_fingerprint_items =
      feedback_items ? values_fingerprint(feedback_items->values) : 0;
  s.last_feedback_fingerprint_users =
      feedback_users ? values_fingerprint(feedback_users->values) : 0;

  s.last_train_loss = 0.0;
  s.last_attention_fallbacks = 0;
  s.last_grad_touched.clear();
  model::NoiseSpec noise{&s.noise_engine, nullptr};

  const auto block_step = [&](const std::vector<int>& user_rows, const ad::TensorPtr& user_slice,
                              const std::vector<int>& item_rows, const detail::Block& block,
                              const std::vector<std::pair<std::string, ad::TensorPtr>>& step_params,
                              bool update_user_kl, bool update_item_kl) {
    ad::Tape tape;
    auto user_post = model::encode_side(tape, user_rows, user_slice, feedback_items, train,
                                        model::EntityKind::kUser, s.params.user_side, hp, noise);
    const auto item_slice = model::ratings_slice(item_rows, train, model::EntityKind::kItem);
    auto item_post = model::encode_side(tape, item_rows, item_slice, feedback_users, train,
                                        model::EntityKind::kItem, s.params.item_side, hp, noise);
    auto pred = model::decode(tape, user_post.sample, item_post.sample);
    const auto w_u = detail::kl_weights(block.user_counts, user_rows, user_totals);
    const auto w_i = detail::kl_weights(block.item_counts, item_rows, item_totals);
    auto loss = model::elbo_loss(tape, pred, block.target, block.mask, user_post, item_post,
                                 update_user_kl ? hp.beta_u : 0.0,
                                 update_item_kl ? hp.beta_v : 0.0, &w_u, &w_i);
    if (!std::isfinite(loss->values[0]))
      throw NumericError("non-finite loss at iteration " + std::to_string(s.iteration) +
                         ", user batch starting " + std::to_string(user_rows.front()) +
                         ", item batch starting " + std::to_string(item_rows.front()) + " (" +
                         std::to_string(block.observed) + " observed entries)");
    s.last_train_loss += loss->values[0];
    s.last_attention_fallbacks += user_post.attention_fallbacks + item_post.attention_fallbacks;

    detail::zero_grads(params);
    tape.backward(loss);
    detail::note_touched_grads(s, step_params);
    optimizer_step(step_params, s.adam, hp.learning_rate, hp.adam_beta1, hp.adam_beta2,
                   hp.adam_eps);
  };

  std::vector<int> item_slot(static_cast<std::size_t>(train.n_items()), -1);

  if (!hp.sequential) {
    for (const auto& user_rows : s.user_batches) {
      const auto user_slice = model::ratings_slice(user_rows, train, model::EntityKind::kUser);
      for (const auto& item_rows : s.item_batches) {
        std::fill(item_slot.begin(), item_slot.end(), -1);
        for (std::size_t j = 0; j < item_rows.size(); ++j)
          item_slot[static_cast<std::size_t>(item_rows[j])] = static_cast<int>(j);
        const auto block = detail::slice_block(train, user_rows, item_rows, item_slot);
        if (block.observed == 0) continue;  // nothing observed in this block, no update
        block_step(user_rows, user_slice, item_rows, block, params, true, true);
      }
    }
  } else {
    // Sequential alternation: one side trains per pass while the other enters
    // the decoder as its fixed sampled table.
    std::vector<std::pair<std::string, ad::TensorPtr>> user_params, item_params;
    s.params.user_side.collect_named("user", user_params);
    s.params.item_side.collect_named("item", item_params);
    const auto fixed_items = model::feedback_tensor(s.items);
    const auto fixed_users = model::feedback_tensor(s.users);
    const auto all_items = detail::iota_rows(train.n_items());
    const auto all_users = detail::iota_rows(train.n_users());
    const auto item_ident = detail::iota_rows(train.n_items());
    const model::PosteriorBatch unused_post;

    const auto side_step = [&](model::EntityKind side, const std::vector<int>& rows) {
      const bool user_side = side == model::EntityKind::kUser;
      detail::Block block;
      if (user_side) {
        block = detail::slice_block(train, rows, all_items, item_ident);
      } else {
        std::fill(item_slot.begin(), item_slot.end(), -1);
        for (std::size_t j = 0; j < rows.size(); ++j)
          item_slot[static_cast<std::size_t>(rows[j])] = static_cast<int>(j);
        block = detail::slice_block(train, all_users, rows, item_slot);
      }
      if (block.observed == 0) return;

      ad::Tape tape;
      const auto slice = model::ratings_slice(rows, train, side);
      auto post = model::encode_side(tape, rows, slice, user_side ? feedback_items : feedback_users,
                                     train, side,
                                     user_side ? s.params.user_side : s.params.item_side, hp, noise);
      auto pred = user_side ? model::decode(tape, post.sample, fixed_items)
                            : model::decode(tape, fixed_users, post.sample);
      const auto w = detail::kl_weights(user_side ? block.user_counts : block.item_counts, rows,
                                        user_side ? user_totals : item_totals);
      auto loss = user_side ? model::elbo_loss(tape, pred, block.target, block.mask, post,
                                               unused_post, hp.beta_u, 0.0, &w, nullptr)
                            : model::elbo_loss(tape, pred, block.target, block.mask, unused_post,
                                               post, 0.0, hp.beta_v, nullptr, &w);
      if (!std::isfinite(loss->values[0]))
        throw NumericError("non-finite loss at iteration " + std::to_string(s.iteration) +
                           " (sequential " + (user_side ? "user" : "item") + " pass, batch starting " +
                           std::to_string(rows.front()) + ")");
      s.last_train_loss += loss->values[0];
      s.last_attention_fallbacks += post.attention_fallbacks;

      const auto& step_params = user_side ? user_params : item_params;
      detail::zero_grads(step_params);
      tape.backward(loss);
      detail::note_touched_grads(s, step_params);
      optimizer_step(step_params, s.adam, hp.learning_rate, hp.adam_beta1, hp.adam_beta2,
                     hp.adam_eps);
    };

    for (const auto& user_rows : s.user_batches) side_step(model::EntityKind::kUser, user_rows);
    for (const auto& item_rows : s.item_batches) side_step(model::EntityKind::kItem, item_rows);
  }

  // Step 15: resample both tables with the final parameters, still feeding the
  // views captured at the start of this iteration.
  s.user_posterior = model::full_posterior(s.params.user_side, hp, train,
                                           model::EntityKind::kUser, feedback_items);
  s.item_posterior = model::full_posterior(s.params.item_side, hp, train,
                                           model::EntityKind::kItem, feedback_users);
  s.users = model::resample_table(s.user_posterior, model::EntityKind::kUser, s.noise_engine);
  s.items = model::resample_table(s.item_posterior, model::EntityKind::kItem, s.noise_engine);
  ++s.iteration;
}

enum class ConvergeDecision { kContinue, kStop };

// Improvement = validation RMSE drop > 1e-4 against the best seen so far;
// patience counts consecutive non-improving iterations beyond which we stop.
inline ConvergeDecision check_convergence(TrainState& s, double validation_rmse) {
  if (validation_rmse < s.best_validation_rmse - 1e-4) {
    s.best_validation_rmse = validation_rmse;
    s.epochs_since_improvement = 0;
  } else {
    ++s.epochs_since_improvement;
  }
  if (s.iteration >= s.params.hp.max_iterations) return ConvergeDecision::kStop;
  if (s.epochs_since_improvement > s.params.hp.patience) return ConvergeDecision::kStop;
  return ConvergeDecision::kContinue;
}

struct IterationLog {
  int iteration = 0;
  double train_loss = 0.0;
  double validation_rmse = 0.0;
  double seconds = 0.0;
};

namespace detail {

// Deep snapshot of everything the optimizer and encoders own; used to restore
// the best-validation state at the end of a run.
struct StateSnapshot {
  std::vector<std::vector<double>> tensor_values;
  model::EmbeddingTable users, items;
  model::FullPosterior user_posterior, item_posterior;
  AdamState adam;
  std::mt19937_64 noise_engine;
  int iteration = 0;
};

inline StateSnapshot take_snapshot(const TrainState& s) {
  StateSnapshot snap;
  for (const auto& [name, t] : s.params.named_tensors()) {
    (void)name;
    snap.tensor_values.push_back(t->values);
  }
  snap.users = s.users;
  snap.items = s.items;
  snap.user_posterior = s.user_posterior;
  snap.item_posterior = s.item_posterior;
  snap.adam = s.adam;
  snap.noise_engine = s.noise_engine;
  snap.iteration = s.iteration;
  return snap;
}

inline void restore_snapshot(TrainState& s, const StateSnapshot& snap) {
  const auto named = s.params.named_tensors();
  for (std::size_t i = 0; i < named.size(); ++i) named[i].second->values = snap.tensor_values[i];
  s.users = snap.users;
  s.items = snap.items;
  s.user_posterior = snap.user_posterior;
  s.item_posterior = snap.item_posterior;
  s.adam = snap.adam;
  s.noise_engine = snap.noise_engine;
  s.iteration = snap.iteration;
  s.epochs_since_improvement = 0;
}

}  // namespace detail

// Full training run. The observer (optional) sees every finished iteration and
// can compute extra diagnostics from the state (e.g. test-RMSE curves). When
// the run stops, the state is restored to the best-validation iteration
// (model selection on the validation RMSE).
inline std::vector<IterationLog> fit(
    TrainState& s, const data::DataSplit& split,
    const std::function<void(const IterationLog&, const TrainState&)>& observer = nullptr) {
  std::vector<IterationLog> logs;
  detail::StateSnapshot best;
  bool have_best = false;
  for (;;) {
    const auto t0 = std::chrono::steady_clock::now();
    run_outer_iteration(s, split.train);
    // Model selection uses posterior means, not samples: deterministic.
    const double val_rmse =
        eval::rmse_from_means(s.user_posterior, s.item_posterior, split.validation);
    const auto t1 = std::chrono::steady_clock::now();
    IterationLog log;
    log.iteration = s.iteration;
    log.train_loss = s.last_train_loss;
    log.validation_rmse = val_rmse;
    log.seconds = std::chrono::duration<double>(t1 - t0).count();
    logs.push_back(log);
    if (observer) observer(log, s);
    const auto decision = check_convergence(s, val_rmse);
    if (s.epochs_since_improvement == 0) {
      best = detail::take_snapshot(s);
      have_best = true;
    }
    if (decision == ConvergeDecision::kStop) break;
  }
  if (have_best) detail::restore_snapshot(s, best);
  return logs;
}

// FNV-1a over the full numeric state; lets tests compare runs exactly.
inline std::uint64_t state_fingerprint(const TrainState& s) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto mix_bytes = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  const auto mix_vec = [&](const std::vector<double>& v) {
    mix_bytes(v.data(), v.size() * sizeof(double));
  };
  for (const auto& [name, t] : s.params.named_tensors()) {
    mix_bytes(name.data(), name.size());
    mix_vec(t->values);
  }
  mix_vec(s.users.values);
  mix_vec(s.items.values);
  for (const auto& [name, mom] : s.adam.moments) {
    mix_bytes(name.data(), name.size());
    mix_vec(mom.m);
    mix_vec(mom.v);
  }
  mix_bytes(&s.adam.step, sizeof(s.adam.step));
  mix_bytes(&s.iteration, sizeof(s.iteration));
  return h;
}

}  // namespace crossvae::train
