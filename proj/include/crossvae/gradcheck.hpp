#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "crossvae/model.hpp"
#include "crossvae/rng.hpp"
#include "crossvae/tensor.hpp"

// Central finite-difference verification of every backward rule, plus an
// end-to-end check of the full toy model. The release gate behind the
// `gradcheck` CLI command and acceptance criterion tests.

namespace crossvae::gradcheck {

inline constexpr double kStepSize = 1e-5;
inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool ok = false;
};

// Relative error scaled against max(1, |analytic|, |numeric|), so near-zero
// gradients are judged on absolute error.
inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

// Compare tape gradients of `build` against central differences for every
// entry of every parameter. `skip` may exclude entries (e.g. near ReLU kinks).
// With skip_nonsmooth, entries whose h and h/2 central differences disagree
// are excluded: the loss is only piecewise smooth (ReLU kinks, the attention
// normalization fallback), and finite differences are meaningless across a
// branch point. A wrong backward rule is still caught, since its numeric
// estimates agree with each other and not with the analytic value.
inline double max_grad_error(
    const std::function<ad::TensorPtr(ad::Tape&)>& build,
    const std::vector<ad::TensorPtr>& params,
    const std::function<bool(const ad::TensorPtr&, std::size_t)>& skip = nullptr,
    bool skip_nonsmooth = false) {
  for (const auto& p : params) p->zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    ad::Tape tape;
    auto loss = build(tape);
    tape.backward(loss);
    for (const auto& p : params) analytic.push_back(p->grad);
  }
  const auto eval_loss = [&build] {
    ad::Tape tape;
    return build(tape)->values[0];
  };
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p->size(); ++i) {
      if (skip && skip(p, i)) continue;
      const double saved = p->values[i];
      const auto central = [&](double h) {
        p->values[i] = saved + h;
        const double up = eval_loss();
        p->values[i] = saved - h;
        const double down = eval_loss();
        p->values[i] = saved;
        return (up - down) / (2.0 * h);
      };
      const double numeric = central(kStepSize);
      if (skip_nonsmooth) {
        const double half = central(kStepSize / 2.0);
        if (rel_err(numeric, half) > 1e-4) continue;
        // a kink centered exactly on the evaluation point fools the two-step
        // comparison; a forward difference disagrees with it by 2x there
        p->values[i] = saved + kStepSize;
        const double up = eval_loss();
        p->values[i] = saved;
        const double forward = (up - eval_loss()) / kStepSize;
        if (rel_err(numeric, forward) > 0.05) continue;
      }
      worst = std::max(worst, rel_err(analytic[pi][i], numeric));
    }
  }
  return worst;
}

namespace detail {

inline ad::TensorPtr random_tensor(std::mt19937_64& eng, std::size_t rows, std::size_t cols,
                                   bool requires_grad, double mu = 0.0, double sigma = 1.0) {
  auto t = ad::make_tensor(rows, cols, requires_grad);
  rng::fill_normal(eng, t->values, mu, sigma);
  return t;
}

// Scalar probe: sum(C .* x) with a random constant C makes dL/dx generic.
inline ad::TensorPtr probe(ad::Tape& tape, const ad::TensorPtr& x, const ad::TensorPtr& c) {
  return tape.sum_all(tape.mul(x, c));
}

struct OpCase {
  std::function<ad::TensorPtr(ad::Tape&)> build;
  std::vector<ad::TensorPtr> params;
  std::function<bool(const ad::TensorPtr&, std::size_t)> skip;
};

using CaseMaker = std::function<OpCase(std::mt19937_64&)>;

inline std::size_t dim(std::mt19937_64& eng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng::uniform_below(eng, hi - lo + 1));
}

// A deliberately wrong ReLU backward (scaled by 1.02); the harness self-test
// corrupts this op to prove a broken rule is caught and named.
inline ad::TensorPtr corrupted_relu(ad::Tape& tape, const ad::TensorPtr& a) {
  auto out = tape.make_output(a->rows, a->cols, a->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i)
    out->values[i] = a->values[i] > 0.0 ? a->values[i] : 0.0;
  if (out->requires_grad) {
    tape.record([a, out] {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->size(); ++i)
        if (a->values[i] > 0.0) a->grad[i] += 1.02 * out->grad[i];
    });
  }
  return out;
}

}  // namespace detail

// Finite-difference checks for every engine op, `instances` random cases per
// op. `corrupt_op` swaps in a known-broken backward rule for one op name
// (harness self-test).
inline std::vector<CheckResult> run_op_checks(std::uint64_t seed, int instances = 100,
                                              const std::string& corrupt_op = "") {
  std::mt19937_64 eng(rng::derive_seed(seed, 0x6C4DC4EC));
  using detail::dim;
  using detail::probe;
  using detail::random_tensor;

  std::vector<std::pair<std::string, detail::CaseMaker>> makers;

  makers.emplace_back("matmul", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), k = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, k, true);
    auto b = random_tensor(e, k, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a, b};
    c.build = [=](ad::Tape& t) { return probe(t, t.matmul(a, b), probe_c); };
    return c;
  });

  makers.emplace_back("matmul_nt", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), k = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, k, true);
    auto b = random_tensor(e, n, k, true);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a, b};
    c.build = [=](ad::Tape& t) { return probe(t, t.matmul_nt(a, b), probe_c); };
    return c;
  });

  makers.emplace_back("add", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto b = random_tensor(e, m, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a, b};
    c.build = [=](ad::Tape& t) { return probe(t, t.add(a, b), probe_c); };
    return c;
  });

  makers.emplace_back("sub", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto b = random_tensor(e, m, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a, b};
    c.build = [=](ad::Tape& t) { return probe(t, t.sub(a, b), probe_c); };
    return c;
  });

  makers.emplace_back("mul", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto b = random_tensor(e, m, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a, b};
    c.build = [=](ad::Tape& t) { return probe(t, t.mul(a, b), probe_c); };
    return c;
  });

  makers.emplace_back("scale", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    const double f = rng::normal(e, 0.0, 2.0);
    c.params = {a};
    c.build = [=](ad::Tape& t) { return probe(t, t.scale(a, f), probe_c); };
    return c;
  });

  makers.emplace_back("add_scalar", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    const double f = rng::normal(e, 0.0, 2.0);
    c.params = {a};
    c.build = [=](ad::Tape& t) { return probe(t, t.add_scalar(a, f), probe_c); };
    return c;
  });

  makers.emplace_back("add_row_bias", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto bias = random_tensor(e, 1, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a, bias};
    c.build = [=](ad::Tape& t) { return probe(t, t.add_row_bias(a, bias), probe_c); };
    return c;
  });

  makers.emplace_back("relu", [&corrupt_op](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a};
    const bool corrupt = corrupt_op == "relu";
    c.build = [=](ad::Tape& t) {
      return probe(t, corrupt ? detail::corrupted_relu(t, a) : t.relu(a), probe_c);
    };
    c.skip = [](const ad::TensorPtr& p, std::size_t i) {
      return std::abs(p->values[i]) <= 1e-3;  // finite differences straddle the kink
    };
    return c;
  });

  makers.emplace_back("sigmoid", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a};
    c.build = [=](ad::Tape& t) { return probe(t, t.sigmoid(a), probe_c); };
    return c;
  });

  makers.emplace_back("concat_cols", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), p = dim(e, 1, 4), q = dim(e, 1, 4);
    auto a = random_tensor(e, m, p, true);
    auto b = random_tensor(e, m, q, true);
    auto probe_c = random_tensor(e, m, p + q, false);
    c.params = {a, b};
    c.build = [=](ad::Tape& t) { return probe(t, t.concat_cols(a, b), probe_c); };
    return c;
  });

  makers.emplace_back("sum_rows", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto probe_c = random_tensor(e, m, 1, false);
    c.params = {a};
    c.build = [=](ad::Tape& t) { return probe(t, t.sum_rows(a), probe_c); };
    return c;
  });

  makers.emplace_back("sum_all", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    c.params = {a};
    c.build = [=](ad::Tape& t) { return t.sum_all(a); };
    return c;
  });

  makers.emplace_back("sqrt_floor", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true, 0.5, 0.12);  // comfortably above the floor
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a};
    c.build = [=](ad::Tape& t) { return probe(t, t.sqrt_floor(a, model::kVarianceFloor), probe_c); };
    c.skip = [](const ad::TensorPtr& p, std::size_t i) { return p->values[i] < 0.05; };
    return c;
  });

  makers.emplace_back("log_floor", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true, 0.5, 0.12);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a};
    c.build = [=](ad::Tape& t) { return probe(t, t.log_floor(a, model::kVarianceFloor), probe_c); };
    c.skip = [](const ad::TensorPtr& p, std::size_t i) { return p->values[i] < 0.05; };
    return c;
  });

  makers.emplace_back("clamp_min", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto a = random_tensor(e, m, n, true);
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {a};
    c.build = [=](ad::Tape& t) { return probe(t, t.clamp_min(a, 0.0), probe_c); };
    c.skip = [](const ad::TensorPtr& p, std::size_t i) { return std::abs(p->values[i]) <= 1e-3; };
    return c;
  });

  makers.emplace_back("masked_sq_error", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 5), n = dim(e, 1, 5);
    auto pred = random_tensor(e, m, n, true);
    auto target = random_tensor(e, m, n, false);
    auto mask = ad::make_tensor(m, n, false);
    for (auto& v : mask->values) v = rng::uniform_below(e, 2) ? 1.0 : 0.0;
    c.params = {pred};
    c.build = [=](ad::Tape& t) { return t.masked_sq_error(pred, target, mask); };
    return c;
  });

  makers.emplace_back("normalize_rows", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 4), n = dim(e, 2, 6);
    ad::TensorPtr scores, mask;
    // redraw until every row's denominator is far from the fallback branch
    for (;;) {
      scores = random_tensor(e, m, n, true);
      mask = ad::make_tensor(m, n, false);
      for (std::size_t i = 0; i < m; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
          mask->at(i, j) = rng::uniform_below(e, 2) ? 1.0 : 0.0;
          any = any || mask->at(i, j) > 0.0;
        }
        if (!any) mask->at(i, 0) = 1.0;
      }
      bool safe = true;
      for (std::size_t i = 0; i < m && safe; ++i) {
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) denom += mask->at(i, j) * scores->at(i, j);
        safe = std::abs(denom) > 1e-2;
      }
      if (safe) break;
    }
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {scores};
    c.build = [=](ad::Tape& t) { return probe(t, t.normalize_rows(scores, mask), probe_c); };
    return c;
  });

  makers.emplace_back("softmax_rows", [](std::mt19937_64& e) {
    detail::OpCase c;
    const auto m = dim(e, 1, 4), n = dim(e, 2, 6);
    auto scores = random_tensor(e, m, n, true);
    auto mask = ad::make_tensor(m, n, false);
    for (std::size_t i = 0; i < m; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < n; ++j) {
        mask->at(i, j) = rng::uniform_below(e, 2) ? 1.0 : 0.0;
        any = any || mask->at(i, j) > 0.0;
      }
      if (!any) mask->at(i, 0) = 1.0;
    }
    auto probe_c = random_tensor(e, m, n, false);
    c.params = {scores};
    c.build = [=](ad::Tape& t) { return probe(t, t.softmax_rows(scores, mask), probe_c); };
    return c;
  });

  std::vector<CheckResult> results;
  for (const auto& [name, maker] : makers) {
    CheckResult r;
    r.name = name;
    r.tolerance = kOpTolerance;
    for (int inst = 0; inst < instances; ++inst) {
      auto c = maker(eng);
      r.max_rel_err = std::max(r.max_rel_err, max_grad_error(c.build, c.params, c.skip));
    }
    r.ok = r.max_rel_err <= r.tolerance;
    results.push_back(r);
  }
  return results;
}

namespace detail {

// Toy fixture for the end-to-end check. A candidate is usable only when every
// attention denominator sits far from the signed-normalization fallback
// threshold: a finite-difference probe across that branch is meaningless.
struct EndToEndFixture {
  model::Hyperparams hp;
  data::SparseRatingMatrix ratings;
  model::ModelParams params;
  ad::TensorPtr fb_users, fb_items;
  model::NoiseSpec user_noise, item_noise;
  ad::TensorPtr mask, target;
  std::vector<int> user_rows{0, 1, 2};
  std::vector<int> item_rows{0, 1, 2, 3};
};

// Smallest attention denominator relative to its row's absolute score mass.
// A row whose signed scores nearly cancel sits close to the normalization
// singularity; finite differences there are garbage regardless of step size.
inline double min_attention_conditioning(const EndToEndFixture& f) {
  double lo = std::numeric_limits<double>::infinity();
  const auto side_min = [&](model::EntityKind side, const model::SideEncoderParams& p,
                            const ad::TensorPtr& counterpart, const std::vector<int>& rows) {
    ad::Tape tape;
    const auto slice = model::ratings_slice(rows, f.ratings, side);
    auto h = model::detail::run_stack(tape, slice, p.observed,
                                      model::detail::OutputActivation::kRelu);
    auto g = model::latent_path_forward(tape, rows, counterpart, f.ratings, side, p.latent);
    auto s = tape.concat_cols(h, g);
    auto mu = model::detail::run_stack(tape, s, p.fusion_mean,
                                       model::detail::OutputActivation::kLinear);
    auto var = model::detail::run_stack(tape, s, p.fusion_var,
                                        model::detail::OutputActivation::kSigmoid);
    const auto mask = model::attention_mask(rows, f.ratings, side, f.hp.attention);
    for (const auto& [head, weight] : {std::pair{mu, p.attn_mean}, std::pair{var, p.attn_var}}) {
      auto scores = tape.matmul_nt(tape.matmul(head, weight), counterpart);
      for (std::size_t i = 0; i < scores->rows; ++i) {
        double denom = 0.0, mass = 0.0;
        for (std::size_t j = 0; j < scores->cols; ++j) {
          denom += mask->at(i, j) * scores->at(i, j);
          mass += mask->at(i, j) * std::abs(scores->at(i, j));
        }
        lo = std::min(lo, std::abs(denom) / std::max(mass, 1e-12));
      }
    }
  };
  side_min(model::EntityKind::kUser, f.params.user_side, f.fb_items, f.user_rows);
  side_min(model::EntityKind::kItem, f.params.item_side, f.fb_users, f.item_rows);
  return lo;
}

inline EndToEndFixture make_end_to_end_fixture(std::uint64_t seed) {
  EndToEndFixture f;
  f.hp.k = 2;
  f.hp.k_prime = 2;
  f.hp.layers = 1;
  f.hp.layers_prime = 1;
  f.hp.widths = {4};
  f.hp.beta_u = 0.2;
  f.hp.beta_v = 0.3;
  f.hp.attention = model::AttentionMode::kLocal;

  const std::vector<data::Rating> triples = {
      {0, 0, 4.0}, {0, 1, 2.5}, {0, 3, 5.0}, {1, 1, 3.0}, {1, 2, 1.5},
      {2, 0, 2.0}, {2, 2, 4.5}, {2, 3, 3.5},
  };
  f.ratings = data::SparseRatingMatrix::from_triples(3, 4, triples);
  f.mask = ad::make_tensor(3, 4, false);
  f.target = ad::make_tensor(3, 4, false);
  for (const auto& r : triples) {
    f.mask->at(static_cast<std::size_t>(r.user), static_cast<std::size_t>(r.item)) = 1.0;
    f.target->at(static_cast<std::size_t>(r.user), static_cast<std::size_t>(r.item)) = r.value;
  }

  // deterministic retry until the instance is safely differentiable
  for (std::uint64_t attempt = 0;; ++attempt) {
    const std::uint64_t s = rng::derive_seed(seed, 0xE2E00 + attempt);
    std::mt19937_64 eng(s);
    f.params = model::init_model(f.hp, 3, 4, rng::derive_seed(s, 1));
    const auto users = model::init_embeddings(model::EntityKind::kUser, 3, f.hp.k, 0.0, 0.6,
                                              rng::derive_seed(s, 2));
    const auto items = model::init_embeddings(model::EntityKind::kItem, 4, f.hp.k, 0.0, 0.6,
                                              rng::derive_seed(s, 3));
    f.fb_users = model::feedback_tensor(users);
    f.fb_items = model::feedback_tensor(items);
    f.user_noise.fixed = random_tensor(eng, 3, static_cast<std::size_t>(f.hp.k), false);
    f.item_noise.fixed = random_tensor(eng, 4, static_cast<std::size_t>(f.hp.k), false);
    if (min_attention_conditioning(f) >= 0.2) return f;
    if (attempt > 100)
      throw NumericError("end-to-end gradcheck: no usable fixture after 100 attempts");
  }
}

}  // namespace detail

// End-to-end gradient check on a frozen toy instance: 3 users, 4 items, K=2,
// L=L'=1, attention on, cross-feedback on, fixed reparameterization noise.
// Every encoder parameter of both sides is perturbed.
inline CheckResult run_end_to_end_check(std::uint64_t seed) {
  auto f = detail::make_end_to_end_fixture(seed);

  const auto build = [&](ad::Tape& tape) {
    const auto user_slice = model::ratings_slice(f.user_rows, f.ratings, model::EntityKind::kUser);
    const auto item_slice = model::ratings_slice(f.item_rows, f.ratings, model::EntityKind::kItem);
    auto user_post = model::encode_side(tape, f.user_rows, user_slice, f.fb_items, f.ratings,
                                        model::EntityKind::kUser, f.params.user_side, f.hp,
                                        f.user_noise);
    auto item_post = model::encode_side(tape, f.item_rows, item_slice, f.fb_users, f.ratings,
                                        model::EntityKind::kItem, f.params.item_side, f.hp,
                                        f.item_noise);
    auto pred = model::decode(tape, user_post.sample, item_post.sample);
    return model::elbo_loss(tape, pred, f.target, f.mask, user_post, item_post, f.hp.beta_u,
                            f.hp.beta_v);
  };

  std::vector<ad::TensorPtr> tensors;
  for (const auto& [name, t] : f.params.named_tensors()) {
    (void)name;
    tensors.push_back(t);
  }

  CheckResult r;
  r.name = "end_to_end_toy_model";
  r.tolerance = kEndToEndTolerance;
  r.max_rel_err = max_grad_error(build, tensors, nullptr, /*skip_nonsmooth=*/true);
  r.ok = r.max_rel_err <= r.tolerance;
  return r;
}

inline std::vector<CheckResult> run_all(std::uint64_t seed, int instances = 100,
                                        const std::string& corrupt_op = "") {
  auto results = run_op_checks(seed, instances, corrupt_op);
  results.push_back(run_end_to_end_check(seed));
  return results;
}

}  // namespace crossvae::gradcheck
