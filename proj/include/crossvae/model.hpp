#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "crossvae/data.hpp"
#include "crossvae/errors.hpp"
#include "crossvae/rng.hpp"
#include "crossvae/tensor.hpp"

// The VAE-BMF network. Each side (user, item) owns a two-path encoder: an MLP
// over the observed rating slice and an MLP over the cross-fed counterpart
// embeddings, fused by column-wise concatenation into separate mean and
// variance heads (linear and Sigmoid outputs). Optional bilinear attention
// augments each head with a weighted average of counterpart embeddings. The
// decoder is the plain matrix-factorization product of the sampled embeddings.

namespace crossvae::model {

inline constexpr double kVarianceFloor = 1e-6;
inline constexpr double kAttentionDenomEps = 1e-8;

enum class EntityKind { kUser, kItem };
enum class AttentionMode { kOff, kLocal, kGlobal };

inline AttentionMode parse_attention_mode(const std::string& s) {
  if (s == "off") return AttentionMode::kOff;
  if (s == "local") return AttentionMode::kLocal;
  if (s == "global") return AttentionMode::kGlobal;
  throw ParameterError("unknown attention mode '" + s + "'");
}

inline const char* attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::kOff: return "off";
    case AttentionMode::kLocal: return "local";
    default: return "global";
  }
}

// Current posterior samples for all users or all items, refreshed once per
// outer iteration. Plain data: embeddings are never trained directly.
struct EmbeddingTable {
  EntityKind entity = EntityKind::kUser;
  int rows = 0;
  int dim = 0;
  std::vector<double> values;

  double at(int r, int k) const {
    return values[static_cast<std::size_t>(r) * static_cast<std::size_t>(dim) +
                  static_cast<std::size_t>(k)];
  }
};

// i.i.d. Normal(mu, sigma^2) entries, seeded.
inline EmbeddingTable init_embeddings(EntityKind entity, int n, int k, double mu, double sigma,
                                      std::uint64_t seed) {
  if (sigma <= 0.0) throw ParameterError("init_embeddings: sigma must be > 0");
  EmbeddingTable t;
  t.entity = entity;
  t.rows = n;
  t.dim = k;
  t.values.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(k), 0.0);
  std::mt19937_64 eng(seed);
  rng::fill_normal(eng, t.values, mu, sigma);
  return t;
}

// Counterpart table as a detached constant for one outer iteration.
inline ad::TensorPtr feedback_tensor(const EmbeddingTable& t) {
  return ad::constant(static_cast<std::size_t>(t.rows), static_cast<std::size_t>(t.dim), t.values);
}

struct Hyperparams {
  int k = 10;        // embedding dimension K
  int k_prime = 10;  // intermediate embedding dimension K'
  int layers = 0;        // hidden layers L in the fusion networks
  int layers_prime = 1;  // hidden layers L' in the observed/latent networks
  std::vector<int> widths = {50};  // hidden widths, indexed per hidden layer

  double beta_u = 1e-4;
  double beta_v = 1e-4;
  int batch_users = 0;  // 0 = size rule from the dataset
  int batch_items = 0;

  AttentionMode attention = AttentionMode::kLocal;
  bool attention_softmax = false;  // replace signed normalization with softmax
  bool cross_feedback = true;
  bool data_input = true;

  double init_mu = 0.0;
  double init_sigma = 0.1;

  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int max_iterations = 200;
  int patience = 10;
  bool sequential = false;  // alternate side updates instead of nesting

  void validate() const {
    if (k < 1 || k_prime < 1) throw ParameterError("k and k_prime must be >= 1");
    if (k > k_prime) throw ParameterError("k must be <= k_prime");
    if (layers < 0 || layers_prime < 0) throw ParameterError("layer counts must be >= 0");
    const int needed = std::max(layers, layers_prime);
    if (static_cast<int>(widths.size()) < needed)
      throw ParameterError("widths list shorter than max(layers, layers_prime)");
    for (int l = 0; l < needed; ++l) {
      if (widths[static_cast<std::size_t>(l)] < std::max(k, k_prime))
        throw ParameterError("every hidden width must be >= max(k, k_prime)");
    }
    if (beta_u < 0.0 || beta_v < 0.0) throw ParameterError("beta_u/beta_v must be >= 0");
    if (batch_users < 0 || batch_items < 0) throw ParameterError("batch sizes must be >= 0");
    if (init_sigma <= 0.0) throw ParameterError("init_sigma must be > 0");
    if (learning_rate <= 0.0) throw ParameterError("learning_rate must be > 0");
    if (max_iterations < 1) throw ParameterError("max_iterations must be >= 1");
    if (patience < 0) throw ParameterError("patience must be >= 0");
    if (!data_input && !cross_feedback)
      throw ParameterError("at least one of data_input / cross_feedback must be enabled");
    if (attention != AttentionMode::kOff && !cross_feedback)
      throw ParameterError("attention requires cross_feedback (it attends the cross-fed embeddings)");
  }

  // Batch-size rule: 100 for small catalogs, 1000 for large ones.
  int effective_batch_users(int n_users, int n_items) const {
    if (batch_users > 0) return batch_users;
    return std::min(n_users, n_items) <= 10000 ? 100 : 1000;
  }
  int effective_batch_items(int n_users, int n_items) const {
    if (batch_items > 0) return batch_items;
    return std::min(n_users, n_items) <= 10000 ? 100 : 1000;
  }
};

struct LinearLayer {
  ad::TensorPtr weight;  // in x out
  ad::TensorPtr bias;    // 1 x out
};

// Weights and biases of one side's encoder stacks plus its attention head.
// Paths that a configuration disables are left empty/null.
struct SideEncoderParams {
  std::vector<LinearLayer> observed;     // L'+1 layers over the rating slice
  std::vector<LinearLayer> latent;       // L'+1 layers over the cross-fed embeddings
  std::vector<LinearLayer> fusion_mean;  // L+1 layers, linear output of width K
  std::vector<LinearLayer> fusion_var;   // L+1 layers, Sigmoid output of width K
  ad::TensorPtr attn_mean;               // K x K bilinear weight for the mean head
  ad::TensorPtr attn_var;                // K x K bilinear weight for the variance head
  LinearLayer attn_proj_mean;            // 2K -> K after concatenating the attention vector
  LinearLayer attn_proj_var;

  void collect_named(const std::string& prefix,
                     std::vector<std::pair<std::string, ad::TensorPtr>>& out) const {
    const auto stack = [&](const char* name, const std::vector<LinearLayer>& layers) {
      for (std::size_t l = 0; l < layers.size(); ++l) {
        out.emplace_back(prefix + "." + name + "." + std::to_string(l) + ".w", layers[l].weight);
        out.emplace_back(prefix + "." + name + "." + std::to_string(l) + ".b", layers[l].bias);
      }
    };
    stack("obs", observed);
    stack("lat", latent);
    stack("fuse_mean", fusion_mean);
    stack("fuse_var", fusion_var);
    if (attn_mean) {
      out.emplace_back(prefix + ".attn.theta", attn_mean);
      out.emplace_back(prefix + ".attn.lambda", attn_var);
      out.emplace_back(prefix + ".attn.proj_mean.w", attn_proj_mean.weight);
      out.emplace_back(prefix + ".attn.proj_mean.b", attn_proj_mean.bias);
      out.emplace_back(prefix + ".attn.proj_var.w", attn_proj_var.weight);
      out.emplace_back(prefix + ".attn.proj_var.b", attn_proj_var.bias);
    }
  }
};

struct ModelParams {
  Hyperparams hp;
  int n_users = 0;
  int n_items = 0;
  SideEncoderParams user_side;
  SideEncoderParams item_side;

  std::vector<std::pair<std::string, ad::TensorPtr>> named_tensors() const {
    std::vector<std::pair<std::string, ad::TensorPtr>> out;
    user_side.collect_named("user", out);
    item_side.collect_named("item", out);
    return out;
  }
};

namespace detail {

inline LinearLayer init_linear(int in, int out, double weight_std, double bias_value,
                               std::mt19937_64& eng) {
  LinearLayer l;
  l.weight = ad::make_tensor(static_cast<std::size_t>(in), static_cast<std::size_t>(out), true);
  rng::fill_normal(eng, l.weight->values, 0.0, weight_std);
  l.bias = ad::make_tensor(1, static_cast<std::size_t>(out), true);
  for (auto& b : l.bias->values) b = bias_value;
  return l;
}

// in -> widths[0..n_hidden) -> out. ReLU-activated layers get a small positive
// bias so units behind an all-zero input row start alive rather than pinned at
// the kink.
inline std::vector<LinearLayer> init_stack(int in, const std::vector<int>& widths, int n_hidden,
                                           int out, bool relu_output, std::mt19937_64& eng) {
  std::vector<LinearLayer> layers;
  int cur = in;
  for (int l = 0; l < n_hidden; ++l) {
    const int w = widths[static_cast<std::size_t>(l)];
    layers.push_back(init_linear(cur, w, std::sqrt(2.0 / cur), 0.01, eng));
    cur = w;
  }
  layers.push_back(init_linear(cur, out, std::sqrt(2.0 / (cur + out)), relu_output ? 0.01 : 0.0,
                               eng));
  return layers;
}

// 2K -> K projection starting as identity on the first K inputs, so early
// training stays close to the attention-free head.
inline LinearLayer init_attention_projection(int k, std::mt19937_64& eng) {
  LinearLayer l;
  l.weight = ad::make_tensor(static_cast<std::size_t>(2 * k), static_cast<std::size_t>(k), true);
  rng::fill_normal(eng, l.weight->values, 0.0, 0.01);
  for (int i = 0; i < k; ++i)
    l.weight->at(static_cast<std::size_t>(i), static_cast<std::size_t>(i)) += 1.0;
  l.bias = ad::make_tensor(1, static_cast<std::size_t>(k), true);
  return l;
}

// Identity plus small noise: initial scores are near plain inner products,
// which keeps the signed normalization's row sums biased away from zero.
inline ad::TensorPtr init_bilinear(int k, std::mt19937_64& eng) {
  auto t = ad::make_tensor(static_cast<std::size_t>(k), static_cast<std::size_t>(k), true);
  rng::fill_normal(eng, t->values, 0.0, 0.05);
  for (int i = 0; i < k; ++i)
    t->at(static_cast<std::size_t>(i), static_cast<std::size_t>(i)) += 1.0;
  return t;
}

inline SideEncoderParams init_side(int observed_width, int counterpart_count,
                                   const Hyperparams& hp, std::mt19937_64& eng) {
  SideEncoderParams side;
  if (hp.data_input)
    side.observed = init_stack(observed_width, hp.widths, hp.layers_prime, hp.k_prime,
                               /*relu_output=*/true, eng);
  if (hp.cross_feedback)
    side.latent = init_stack(counterpart_count * hp.k, hp.widths, hp.layers_prime, hp.k_prime,
                             /*relu_output=*/true, eng);
  const int fusion_in = (hp.data_input ? hp.k_prime : 0) + (hp.cross_feedback ? hp.k_prime : 0);
  side.fusion_mean = init_stack(fusion_in, hp.widths, hp.layers, hp.k, /*relu_output=*/false, eng);
  side.fusion_var = init_stack(fusion_in, hp.widths, hp.layers, hp.k, /*relu_output=*/false, eng);
  // Start the Sigmoid head near sigmoid(-3) ~ 0.047: early reparameterization
  // noise stays small while the variances remain fully learnable.
  for (auto& b : side.fusion_var.back().bias->values) b = -3.0;
  if (hp.attention != AttentionMode::kOff) {
    side.attn_mean = init_bilinear(hp.k, eng);
    side.attn_var = init_bilinear(hp.k, eng);
    side.attn_proj_mean = init_attention_projection(hp.k, eng);
    side.attn_proj_var = init_attention_projection(hp.k, eng);
  }
  return side;
}

}  // namespace detail

inline ModelParams init_model(const Hyperparams& hp, int n_users, int n_items,
                              std::uint64_t seed) {
  hp.validate();
  ModelParams p;
  p.hp = hp;
  p.n_users = n_users;
  p.n_items = n_items;
  std::mt19937_64 eng(rng::derive_seed(seed, /*stream_tag=*/0xE4C0DE));
  p.user_side = detail::init_side(n_items, n_items, hp, eng);
  p.item_side = detail::init_side(n_users, n_users, hp, eng);
  return p;
}

// Dense slice of the rating matrix for one batch: row r holds the full rating
// vector of batch_rows[r] over the counterpart axis, unobserved entries 0.
inline ad::TensorPtr ratings_slice(const std::vector<int>& batch_rows,
                                   const data::SparseRatingMatrix& ratings, EntityKind side) {
  const std::size_t width = static_cast<std::size_t>(
      side == EntityKind::kUser ? ratings.n_items() : ratings.n_users());
  auto slice = ad::make_tensor(batch_rows.size(), width, false);
  for (std::size_t r = 0; r < batch_rows.size(); ++r) {
    const auto& rated = side == EntityKind::kUser ? ratings.rated_by_user(batch_rows[r])
                                                  : ratings.rated_by_item(batch_rows[r]);
    for (const auto& [idx, value] : rated)
      slice->at(r, static_cast<std::size_t>(idx)) = value;
  }
  return slice;
}

// First latent-path layer evaluated sparsely. Mathematically identical to
// concatenating all counterpart embeddings per row with unrated positions
// zeroed (a B x (J*K) input) and applying the dense layer: only the rated
// blocks of the weight matrix contribute, so
//   out[r,:] = bias + sum_{j in rated(r)} counterpart[j,:] * weight_block(j)
// The counterpart is a detached constant; gradients reach only weight/bias.
inline ad::TensorPtr latent_first_layer(ad::Tape& tape, const std::vector<int>& batch_rows,
                                        const ad::TensorPtr& counterpart,
                                        const data::SparseRatingMatrix& ratings, EntityKind side,
                                        const LinearLayer& layer) {
  const std::size_t k = counterpart->cols;
  const std::size_t m = layer.weight->cols;
  if (layer.weight->rows != counterpart->rows * k)
    throw DimensionError("latent_first_layer: weight rows " + std::to_string(layer.weight->rows) +
                         " != counterpart " + std::to_string(counterpart->rows) + "*" +
                         std::to_string(k));
  if (batch_rows.empty()) throw ContractError("latent_first_layer: empty batch");
  if (counterpart->requires_grad)
    throw ContractError("latent_first_layer: counterpart must be detached");

  auto out = tape.make_output(batch_rows.size(), m,
                              layer.weight->requires_grad || layer.bias->requires_grad);
  const data::SparseRatingMatrix* ratings_ptr = &ratings;
  for (std::size_t r = 0; r < batch_rows.size(); ++r) {
    double* out_row = out->values.data() + r * m;
    for (std::size_t j = 0; j < m; ++j) out_row[j] = layer.bias->values[j];
    const auto& rated = side == EntityKind::kUser ? ratings.rated_by_user(batch_rows[r])
                                                  : ratings.rated_by_item(batch_rows[r]);
    for (const auto& [idx, value] : rated) {
      (void)value;  // the latent input carries embeddings, not rating values
      const double* emb = counterpart->values.data() + static_cast<std::size_t>(idx) * k;
      const double* block = layer.weight->values.data() + static_cast<std::size_t>(idx) * k * m;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double e = emb[kk];
        if (e == 0.0) continue;
        const double* wrow = block + kk * m;
        for (std::size_t j = 0; j < m; ++j) out_row[j] += e * wrow[j];
      }
    }
  }
  if (out->requires_grad) {
    auto weight = layer.weight;
    auto bias = layer.bias;
    std::vector<int> rows_copy = batch_rows;
    tape.record([weight, bias, counterpart, out, ratings_ptr, side, rows_copy, k, m] {
      weight->ensure_grad();
      bias->ensure_grad();
      for (std::size_t r = 0; r < rows_copy.size(); ++r) {
        const double* g = out->grad.data() + r * m;
        for (std::size_t j = 0; j < m; ++j) bias->grad[j] += g[j];
        const auto& rated = side == EntityKind::kUser ? ratings_ptr->rated_by_user(rows_copy[r])
                                                      : ratings_ptr->rated_by_item(rows_copy[r]);
        for (const auto& [idx, value] : rated) {
          (void)value;
          const double* emb = counterpart->values.data() + static_cast<std::size_t>(idx) * k;
          double* gblock = weight->grad.data() + static_cast<std::size_t>(idx) * k * m;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double e = emb[kk];
            if (e == 0.0) continue;
            double* grow = gblock + kk * m;
            for (std::size_t j = 0; j < m; ++j) grow[j] += e * g[j];
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

enum class OutputActivation { kRelu, kLinear, kSigmoid };

inline ad::TensorPtr run_stack(ad::Tape& tape, ad::TensorPtr x,
                               const std::vector<LinearLayer>& layers, OutputActivation out_act,
                               std::size_t first_layer = 0) {
  for (std::size_t l = first_layer; l < layers.size(); ++l) {
    x = tape.add_row_bias(tape.matmul(x, layers[l].weight), layers[l].bias);
    const bool last = l + 1 == layers.size();
    if (!last || out_act == OutputActivation::kRelu)
      x = tape.relu(x);
    else if (out_act == OutputActivation::kSigmoid)
      x = tape.sigmoid(x);
  }
  return x;
}

}  // namespace detail

// Full latent path: sparse first layer, then the remaining dense layers. All
// activations are ReLU, matching the observed path.
inline ad::TensorPtr latent_path_forward(ad::Tape& tape, const std::vector<int>& batch_rows,
                                         const ad::TensorPtr& counterpart,
                                         const data::SparseRatingMatrix& ratings, EntityKind side,
                                         const std::vector<LinearLayer>& latent_layers) {
  auto x = tape.relu(
      latent_first_layer(tape, batch_rows, counterpart, ratings, side, latent_layers[0]));
  return detail::run_stack(tape, x, latent_layers, detail::OutputActivation::kRelu,
                           /*first_layer=*/1);
}

// Candidate indicator for attention: rated counterparts in local mode (rows
// with no rated counterpart fall back to the whole population), everyone in
// global mode. Returns the number of local-mode fallback rows.
inline ad::TensorPtr attention_mask(const std::vector<int>& batch_rows,
                                    const data::SparseRatingMatrix& ratings, EntityKind side,
                                    AttentionMode mode, int* empty_fallbacks = nullptr) {
  const std::size_t width = static_cast<std::size_t>(
      side == EntityKind::kUser ? ratings.n_items() : ratings.n_users());
  auto mask = ad::make_tensor(batch_rows.size(), width, false);
  int fallbacks = 0;
  for (std::size_t r = 0; r < batch_rows.size(); ++r) {
    if (mode == AttentionMode::kGlobal) {
      for (std::size_t j = 0; j < width; ++j) mask->at(r, j) = 1.0;
      continue;
    }
    const auto& rated = side == EntityKind::kUser ? ratings.rated_by_user(batch_rows[r])
                                                  : ratings.rated_by_item(batch_rows[r]);
    if (rated.empty()) {
      ++fallbacks;
      for (std::size_t j = 0; j < width; ++j) mask->at(r, j) = 1.0;
      continue;
    }
    for (const auto& [idx, value] : rated) {
      (void)value;
      mask->at(r, static_cast<std::size_t>(idx)) = 1.0;
    }
  }
  if (empty_fallbacks) *empty_fallbacks = fallbacks;
  return mask;
}

struct AttendResult {
  ad::TensorPtr output;   // B x K, projected [x; c]
  ad::TensorPtr weights;  // B x J attention weights (rows sum to 1)
};

// Bilinear attention of a posterior-parameter batch over the counterpart
// embeddings. Scores s_ij = x_i * W * v_j^T over the candidate mask; weights
// are the signed normalization of the scores (uniform fallback when the
// denominator vanishes) or a masked softmax; the attention vector is the
// weighted average of the candidate embeddings, concatenated to x and
// projected back to K dimensions.
inline AttendResult attend(ad::Tape& tape, const ad::TensorPtr& x,
                           const ad::TensorPtr& counterpart, const ad::TensorPtr& bilinear,
                           const ad::TensorPtr& mask, const LinearLayer& projection,
                           bool use_softmax) {
  if (counterpart->requires_grad) throw ContractError("attend: counterpart must be detached");
  auto scores = tape.matmul_nt(tape.matmul(x, bilinear), counterpart);
  auto weights = use_softmax ? tape.softmax_rows(scores, mask)
                             : tape.normalize_rows(scores, mask, kAttentionDenomEps);
  auto context = tape.matmul(weights, counterpart);
  auto projected = tape.add_row_bias(
      tape.matmul(tape.concat_cols(x, context), projection.weight), projection.bias);
  return {projected, weights};
}

// One posterior batch: means, (floored) variances and a reparameterized sample.
struct PosteriorBatch {
  ad::TensorPtr mu;      // B x K
  ad::TensorPtr var;     // B x K, entries >= kVarianceFloor
  ad::TensorPtr sample;  // B x K
  std::vector<int> rows;
  int attention_fallbacks = 0;  // local-attention rows with no rated counterpart
};

namespace detail {
inline void check_variance_positive(const ad::TensorPtr& var) {
  for (double v : var->values)
    if (!(v > 0.0)) throw NumericError("variance entries must be > 0, got " + std::to_string(v));
}
}  // namespace detail

// Reparameterized sample mu + sqrt(var) .* eps for a recorded noise constant.
inline ad::TensorPtr reparameterize(ad::Tape& tape, const ad::TensorPtr& mu,
                                    const ad::TensorPtr& var, const ad::TensorPtr& noise) {
  detail::check_variance_positive(var);
  if (noise->requires_grad) throw ContractError("reparameterize: noise must be a constant");
  return tape.add(mu, tape.mul(tape.sqrt_floor(var, kVarianceFloor), noise));
}

// Per-row KL[N(mu, diag(var)) || N(0, I)] = 0.5 * sum_k(var + mu^2 - 1 - ln var).
inline ad::TensorPtr kl_diag_gauss(ad::Tape& tape, const ad::TensorPtr& mu,
                                   const ad::TensorPtr& var) {
  detail::check_variance_positive(var);
  auto inner = tape.sub(tape.add_scalar(tape.add(var, tape.mul(mu, mu)), -1.0),
                        tape.log_floor(var, kVarianceFloor));
  return tape.scale(tape.sum_rows(inner), 0.5);
}

// Gaussian noise tensor for one batch, or a caller-fixed tensor (for gradient
// checks the noise must stay constant across perturbed forward passes).
struct NoiseSpec {
  std::mt19937_64* engine = nullptr;
  ad::TensorPtr fixed;

  ad::TensorPtr draw(std::size_t rows, std::size_t cols) const {
    if (fixed) {
      if (fixed->rows != rows || fixed->cols != cols)
        throw DimensionError("fixed noise tensor has the wrong shape");
      return fixed;
    }
    auto t = ad::make_tensor(rows, cols, false);
    rng::fill_normal(*engine, t->values, 0.0, 1.0);
    return t;
  }
};

// One side's full encoder pass over a batch. counterpart may be null when the
// configuration disables the latent path.
inline PosteriorBatch encode_side(ad::Tape& tape, const std::vector<int>& batch_rows,
                                  const ad::TensorPtr& slice, const ad::TensorPtr& counterpart,
                                  const data::SparseRatingMatrix& ratings, EntityKind side,
                                  const SideEncoderParams& params, const Hyperparams& hp,
                                  const NoiseSpec& noise) {
  if (batch_rows.empty()) throw ContractError("encode_side: empty batch");

  ad::TensorPtr fused;
  if (hp.data_input) {
    fused = detail::run_stack(tape, slice, params.observed, detail::OutputActivation::kRelu);
  }
  if (hp.cross_feedback) {
    auto g = latent_path_forward(tape, batch_rows, counterpart, ratings, side, params.latent);
    fused = fused ? tape.concat_cols(fused, g) : g;
  }

  auto mu = detail::run_stack(tape, fused, params.fusion_mean, detail::OutputActivation::kLinear);
  auto var = detail::run_stack(tape, fused, params.fusion_var, detail::OutputActivation::kSigmoid);

  PosteriorBatch post;
  post.rows = batch_rows;
  if (hp.attention != AttentionMode::kOff) {
    auto mask = attention_mask(batch_rows, ratings, side, hp.attention, &post.attention_fallbacks);
    mu = attend(tape, mu, counterpart, params.attn_mean, mask, params.attn_proj_mean,
                hp.attention_softmax)
             .output;
    var = attend(tape, var, counterpart, params.attn_var, mask, params.attn_proj_var,
                 hp.attention_softmax)
              .output;
  }
  // The Sigmoid head keeps var in (0,1); the attention projection may leave
  // that range, so the floor makes downstream sqrt/log well defined.
  var = tape.clamp_min(var, kVarianceFloor);

  post.mu = mu;
  post.var = var;
  post.sample = reparameterize(tape, mu, var, noise.draw(mu->rows, mu->cols));
  return post;
}

// Matrix-factorization decoder: u_batch * v_batch^T.
inline ad::TensorPtr decode(ad::Tape& tape, const ad::TensorPtr& u_batch,
                            const ad::TensorPtr& v_batch) {
  if (u_batch->cols != v_batch->cols)
    throw DimensionError("decode: embedding dims " + std::to_string(u_batch->cols) + " vs " +
                         std::to_string(v_batch->cols));
  return tape.matmul_nt(u_batch, v_batch);
}

// Negative ELBO over one block: masked squared reconstruction error plus the
// beta-weighted KL terms. Optional per-row KL weights let the trainer count
// each entity's KL exactly once across the blocks of an outer iteration.
inline ad::TensorPtr elbo_loss(ad::Tape& tape, const ad::TensorPtr& pred,
                               const ad::TensorPtr& target, const ad::TensorPtr& mask,
                               const PosteriorBatch& user_post, const PosteriorBatch& item_post,
                               double beta_u, double beta_v,
                               const std::vector<double>* user_kl_weights = nullptr,
                               const std::vector<double>* item_kl_weights = nullptr) {
  auto loss = tape.masked_sq_error(pred, target, mask);
  const auto weighted_kl = [&](const PosteriorBatch& post, const std::vector<double>* w) {
    auto kl = kl_diag_gauss(tape, post.mu, post.var);
    if (w) {
      if (w->size() != kl->rows) throw DimensionError("elbo_loss: KL weight length mismatch");
      kl = tape.mul(kl, ad::constant(kl->rows, 1, *w));
    }
    return tape.sum_all(kl);
  };
  if (beta_u != 0.0) loss = tape.add(loss, tape.scale(weighted_kl(user_post, user_kl_weights), beta_u));
  if (beta_v != 0.0) loss = tape.add(loss, tape.scale(weighted_kl(item_post, item_kl_weights), beta_v));
  return loss;
}

// Posterior parameters for every entity of one side, computed in fixed-size
// row chunks. Used for table resampling and for deterministic evaluation.
struct FullPosterior {
  int rows = 0;
  int dim = 0;
  std::vector<double> mean;
  std::vector<double> var;

  double mean_at(int r, int k) const {
    return mean[static_cast<std::size_t>(r) * static_cast<std::size_t>(dim) +
                static_cast<std::size_t>(k)];
  }
};

inline FullPosterior full_posterior(const SideEncoderParams& params, const Hyperparams& hp,
                                    const data::SparseRatingMatrix& ratings, EntityKind side,
                                    const ad::TensorPtr& counterpart, int chunk = 512) {
  const int n = side == EntityKind::kUser ? ratings.n_users() : ratings.n_items();
  FullPosterior out;
  out.rows = n;
  out.dim = hp.k;
  out.mean.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(hp.k), 0.0);
  out.var.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(hp.k), 0.0);
  for (int start = 0; start < n; start += chunk) {
    const int stop = std::min(n, start + chunk);
    std::vector<int> rows(static_cast<std::size_t>(stop - start));
    for (int r = start; r < stop; ++r) rows[static_cast<std::size_t>(r - start)] = r;
    ad::Tape tape;
    auto slice = ratings_slice(rows, ratings, side);
    // Mean evaluation only; noise is irrelevant, pass zeros.
    NoiseSpec zero_noise;
    zero_noise.fixed = ad::make_tensor(rows.size(), static_cast<std::size_t>(hp.k), false);
    auto post = encode_side(tape, rows, slice, counterpart, ratings, side, params, hp, zero_noise);
    std::copy(post.mu->values.begin(), post.mu->values.end(),
              out.mean.begin() + static_cast<std::ptrdiff_t>(
                                     static_cast<std::size_t>(start) * static_cast<std::size_t>(hp.k)));
    std::copy(post.var->values.begin(), post.var->values.end(),
              out.var.begin() + static_cast<std::ptrdiff_t>(
                                    static_cast<std::size_t>(start) * static_cast<std::size_t>(hp.k)));
  }
  return out;
}

// Resample a full embedding table from its current posterior (Algorithm step:
// refresh the cross-feedback sources once per outer iteration).
inline EmbeddingTable resample_table(const FullPosterior& post, EntityKind entity,
                                     std::mt19937_64& eng) {
  EmbeddingTable t;
  t.entity = entity;
  t.rows = post.rows;
  t.dim = post.dim;
  t.values.resize(post.mean.size());
  for (std::size_t i = 0; i < t.values.size(); ++i) {
    t.values[i] = post.mean[i] +
                  std::sqrt(std::max(post.var[i], kVarianceFloor)) * rng::gaussian(eng);
  }
  return t;
}

}  // namespace crossvae::model
