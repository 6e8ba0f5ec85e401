#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "crossvae/errors.hpp"

// Minimal dense 2-D float64 engine with reverse-mode autodiff.
//
// Define-by-run: a Tape records one forward pass and is traversed backwards
// exactly once. Parameters are long-lived Tensors shared across tapes; their
// grad buffers accumulate until zero_grad(). Operations never mutate their
// inputs' values.

namespace crossvae::ad {

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until a backward pass reaches this tensor

  std::size_t size() const { return rows * cols; }

  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double at_grad(std::size_t r, std::size_t c) const { return grad[r * cols + c]; }

  bool has_grad() const { return grad.size() == size() && size() > 0; }

  void ensure_grad() {
    if (grad.size() != size()) grad.assign(size(), 0.0);
  }

  void zero_grad() { grad.assign(size(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(std::size_t rows, std::size_t cols, bool requires_grad = false) {
  auto t = std::make_shared<Tensor>();
  t->rows = rows;
  t->cols = cols;
  t->values.assign(rows * cols, 0.0);
  t->requires_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

inline TensorPtr make_tensor(std::size_t rows, std::size_t cols, std::vector<double> values,
                             bool requires_grad = false) {
  if (values.size() != rows * cols)
    throw DimensionError("make_tensor: values length " + std::to_string(values.size()) +
                         " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  auto t = std::make_shared<Tensor>();
  t->rows = rows;
  t->cols = cols;
  t->values = std::move(values);
  t->requires_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

inline TensorPtr constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return make_tensor(rows, cols, std::move(values), false);
}

inline TensorPtr scalar(double v, bool requires_grad = false) {
  return make_tensor(1, 1, {v}, requires_grad);
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values)
    if (!std::isfinite(v)) return false;
  return true;
}

namespace detail {

// c += a * b            a: m x k, b: k x n, c: m x n
// Skips zero entries of a; encoder rating inputs are mostly zeros.
inline void gemm_nn_accum(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c += a * b^T          a: m x k, b: n x k, c: m x n
inline void gemm_nt_accum(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c += a^T * b          a: m x k, b: m x n, c: k x n
inline void gemm_tn_accum(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

inline double stable_sigmoid(double x) {
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    s = e / (1.0 + e);
  }
  // keep strictly inside (0,1); saturated doubles would otherwise hit 0 or 1 exactly
  const double lo = std::numeric_limits<double>::min();
  const double hi = 1.0 - std::numeric_limits<double>::epsilon();
  return std::clamp(s, lo, hi);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw DimensionError(std::string(op) + ": shapes " + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                         std::to_string(b.cols));
}

}  // namespace detail

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t recorded_ops() const { return records_.size(); }

  // Fresh output tensor for an op. Gradient buffer is zeroed up front so
  // backward rules can accumulate unconditionally.
  TensorPtr make_output(std::size_t rows, std::size_t cols, bool requires_grad) {
    auto t = make_tensor(rows, cols, requires_grad);
    return t;
  }

  // Register a backward rule. Rules run in reverse registration order, which
  // is a valid topological order because ops append as they execute.
  void record(std::function<void()> backward_rule) { records_.push_back(std::move(backward_rule)); }

  // --- ops -----------------------------------------------------------------

  TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->cols != b->rows)
      throw DimensionError("matmul: inner dimensions " + std::to_string(a->cols) + " vs " +
                           std::to_string(b->rows));
    auto out = make_output(a->rows, b->cols, a->requires_grad || b->requires_grad);
    detail::gemm_nn_accum(a->values.data(), b->values.data(), out->values.data(), a->rows, a->cols,
                          b->cols);
    if (out->requires_grad) {
      record([a, b, out] {
        const std::size_t m = a->rows, k = a->cols, n = b->cols;
        if (a->requires_grad) {
          a->ensure_grad();
          detail::gemm_nt_accum(out->grad.data(), b->values.data(), a->grad.data(), m, n, k);
        }
        if (b->requires_grad) {
          b->ensure_grad();
          detail::gemm_tn_accum(a->values.data(), out->grad.data(), b->grad.data(), m, k, n);
        }
      });
    }
    return out;
  }

  // a * b^T; saves an explicit transpose for decoders and attention scores.
  TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
    if (a->cols != b->cols)
      throw DimensionError("matmul_nt: inner dimensions " + std::to_string(a->cols) + " vs " +
                           std::to_string(b->cols));
    auto out = make_output(a->rows, b->rows, a->requires_grad || b->requires_grad);
    detail::gemm_nt_accum(a->values.data(), b->values.data(), out->values.data(), a->rows, a->cols,
                          b->rows);
    if (out->requires_grad) {
      record([a, b, out] {
        const std::size_t m = a->rows, k = a->cols, n = b->rows;
        if (a->requires_grad) {
          a->ensure_grad();
          detail::gemm_nn_accum(out->grad.data(), b->values.data(), a->grad.data(), m, n, k);
        }
        if (b->requires_grad) {
          b->ensure_grad();
          detail::gemm_tn_accum(out->grad.data(), a->values.data(), b->grad.data(), m, n, k);
        }
      });
    }
    return out;
  }

  TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape(*a, *b, "add");
    auto out = make_output(a->rows, a->cols, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i) out->values[i] = a->values[i] + b->values[i];
    if (out->requires_grad) {
      record([a, b, out] {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
        }
      });
    }
    return out;
  }

  TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape(*a, *b, "sub");
    auto out = make_output(a->rows, a->cols, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i) out->values[i] = a->values[i] - b->values[i];
    if (out->requires_grad) {
      record([a, b, out] {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] -= out->grad[i];
        }
      });
    }
    return out;
  }

  // Hadamard product.
  TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape(*a, *b, "mul");
    auto out = make_output(a->rows, a->cols, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i) out->values[i] = a->values[i] * b->values[i];
    if (out->requires_grad) {
      record([a, b, out] {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * b->values[i];
        }
        if (b->requires_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i] * a->values[i];
        }
      });
    }
    return out;
  }

  TensorPtr scale(const TensorPtr& a, double c) {
    auto out = make_output(a->rows, a->cols, a->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i) out->values[i] = a->values[i] * c;
    if (out->requires_grad) {
      record([a, out, c] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * c;
      });
    }
    return out;
  }

  TensorPtr add_scalar(const TensorPtr& a, double c) {
    auto out = make_output(a->rows, a->cols, a->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i) out->values[i] = a->values[i] + c;
    if (out->requires_grad) {
      record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
      });
    }
    return out;
  }

  // bias (1 x n) broadcast-added to every row of a (m x n).
  TensorPtr add_row_bias(const TensorPtr& a, const TensorPtr& bias) {
    if (bias->rows != 1 || bias->cols != a->cols)
      throw DimensionError("add_row_bias: bias " + std::to_string(bias->rows) + "x" +
                           std::to_string(bias->cols) + " against " + std::to_string(a->rows) +
                           "x" + std::to_string(a->cols));
    auto out = make_output(a->rows, a->cols, a->requires_grad || bias->requires_grad);
    for (std::size_t i = 0; i < a->rows; ++i)
      for (std::size_t j = 0; j < a->cols; ++j)
        out->at(i, j) = a->at(i, j) + bias->values[j];
    if (out->requires_grad) {
      record([a, bias, out] {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
        }
        if (bias->requires_grad) {
          bias->ensure_grad();
          for (std::size_t i = 0; i < out->rows; ++i)
            for (std::size_t j = 0; j < out->cols; ++j)
              bias->grad[j] += out->at_grad(i, j);
        }
      });
    }
    return out;
  }

  // max(0, x); subgradient at exactly 0 is 0.
  TensorPtr relu(const TensorPtr& a) {
    auto out = make_output(a->rows, a->cols, a->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i)
      out->values[i] = a->values[i] > 0.0 ? a->values[i] : 0.0;
    if (out->requires_grad) {
      record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i)
          if (a->values[i] > 0.0) a->grad[i] += out->grad[i];
      });
    }
    return out;
  }

  TensorPtr sigmoid(const TensorPtr& a) {
    auto out = make_output(a->rows, a->cols, a->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i)
      out->values[i] = detail::stable_sigmoid(a->values[i]);
    if (out->requires_grad) {
      record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) {
          const double s = out->values[i];
          a->grad[i] += out->grad[i] * s * (1.0 - s);
        }
      });
    }
    return out;
  }

  // sqrt(max(x, floor)); zero gradient below the floor.
  TensorPtr sqrt_floor(const TensorPtr& a, double floor) {
    auto out = make_output(a->rows, a->cols, a->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i)
      out->values[i] = std::sqrt(std::max(a->values[i], floor));
    if (out->requires_grad) {
      record([a, out, floor] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i)
          if (a->values[i] > floor) a->grad[i] += out->grad[i] * 0.5 / out->values[i];
      });
    }
    return out;
  }

  // max(x, floor) elementwise; zero gradient below the floor.
  TensorPtr clamp_min(const TensorPtr& a, double floor) {
    auto out = make_output(a->rows, a->cols, a->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i) out->values[i] = std::max(a->values[i], floor);
    if (out->requires_grad) {
      record([a, out, floor] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i)
          if (a->values[i] > floor) a->grad[i] += out->grad[i];
      });
    }
    return out;
  }

  // ln(max(x, floor)); zero gradient below the floor.
  TensorPtr log_floor(const TensorPtr& a, double floor) {
    if (floor <= 0.0) throw ParameterError("log_floor: floor must be positive");
    auto out = make_output(a->rows, a->cols, a->requires_grad);
    for (std::size_t i = 0; i < out->size(); ++i)
      out->values[i] = std::log(std::max(a->values[i], floor));
    if (out->requires_grad) {
      record([a, out, floor] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i)
          if (a->values[i] > floor) a->grad[i] += out->grad[i] / a->values[i];
      });
    }
    return out;
  }

  TensorPtr concat_cols(const TensorPtr& a, const TensorPtr& b) {
    if (a->rows != b->rows)
      throw DimensionError("concat_cols: row counts " + std::to_string(a->rows) + " vs " +
                           std::to_string(b->rows));
    auto out = make_output(a->rows, a->cols + b->cols, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->rows; ++i) {
      for (std::size_t j = 0; j < a->cols; ++j) out->at(i, j) = a->at(i, j);
      for (std::size_t j = 0; j < b->cols; ++j) out->at(i, a->cols + j) = b->at(i, j);
    }
    if (out->requires_grad) {
      record([a, b, out] {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < a->rows; ++i)
            for (std::size_t j = 0; j < a->cols; ++j)
              a->grad[i * a->cols + j] += out->at_grad(i, j);
        }
        if (b->requires_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < b->rows; ++i)
            for (std::size_t j = 0; j < b->cols; ++j)
              b->grad[i * b->cols + j] += out->at_grad(i, a->cols + j);
        }
      });
    }
    return out;
  }

  // m x n -> m x 1 row sums.
  TensorPtr sum_rows(const TensorPtr& a) {
    auto out = make_output(a->rows, 1, a->requires_grad);
    for (std::size_t i = 0; i < a->rows; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < a->cols; ++j) acc += a->at(i, j);
      out->values[i] = acc;
    }
    if (out->requires_grad) {
      record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->rows; ++i)
          for (std::size_t j = 0; j < a->cols; ++j)
            a->grad[i * a->cols + j] += out->grad[i];
      });
    }
    return out;
  }

  TensorPtr sum_all(const TensorPtr& a) {
    auto out = make_output(1, 1, a->requires_grad);
    double acc = 0.0;
    for (double v : a->values) acc += v;
    out->values[0] = acc;
    if (out->requires_grad) {
      record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0];
      });
    }
    return out;
  }

  // sum( mask .* (pred - target)^2 ) over all entries; gradient flows only
  // through the masked entries of pred. target and mask must be constants.
  TensorPtr masked_sq_error(const TensorPtr& pred, const TensorPtr& target, const TensorPtr& mask) {
    detail::check_same_shape(*pred, *target, "masked_sq_error");
    detail::check_same_shape(*pred, *mask, "masked_sq_error");
    if (target->requires_grad || mask->requires_grad)
      throw ContractError("masked_sq_error: target and mask must not require grad");
    for (double m : mask->values)
      if (m != 0.0 && m != 1.0) throw ContractError("masked_sq_error: mask entries must be 0 or 1");
    auto out = make_output(1, 1, pred->requires_grad);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred->size(); ++i) {
      const double d = pred->values[i] - target->values[i];
      acc += mask->values[i] * d * d;
    }
    out->values[0] = acc;
    if (out->requires_grad) {
      record([pred, target, mask, out] {
        pred->ensure_grad();
        const double g = out->grad[0];
        for (std::size_t i = 0; i < pred->size(); ++i)
          pred->grad[i] += g * 2.0 * mask->values[i] * (pred->values[i] - target->values[i]);
      });
    }
    return out;
  }

  // Row-wise signed normalization over a candidate mask:
  //   w_ij = mask_ij * s_ij / sum_j'(mask_ij' * s_ij')
  // When |denominator| <= eps the row falls back to uniform weights over the
  // mask (constant, no gradient). mask must be a 0/1 constant.
  TensorPtr normalize_rows(const TensorPtr& scores, const TensorPtr& mask, double eps = 1e-8) {
    detail::check_same_shape(*scores, *mask, "normalize_rows");
    if (mask->requires_grad) throw ContractError("normalize_rows: mask must not require grad");
    const std::size_t m = scores->rows, n = scores->cols;
    auto out = make_output(m, n, scores->requires_grad);
    std::vector<double> denoms(m, 0.0);
    std::vector<char> fallback(m, 0);
    for (std::size_t i = 0; i < m; ++i) {
      double denom = 0.0, count = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        denom += mask->at(i, j) * scores->at(i, j);
        count += mask->at(i, j);
      }
      denoms[i] = denom;
      if (std::abs(denom) > eps) {
        for (std::size_t j = 0; j < n; ++j)
          out->at(i, j) = mask->at(i, j) * scores->at(i, j) / denom;
      } else {
        fallback[i] = 1;
        if (count > 0.0)
          for (std::size_t j = 0; j < n; ++j) out->at(i, j) = mask->at(i, j) / count;
      }
    }
    if (out->requires_grad) {
      record([scores, mask, out, denoms = std::move(denoms), fallback = std::move(fallback)] {
        scores->ensure_grad();
        const std::size_t m = scores->rows, n = scores->cols;
        for (std::size_t i = 0; i < m; ++i) {
          if (fallback[i]) continue;  // uniform weights are constant w.r.t. scores
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += out->at_grad(i, j) * out->at(i, j);
          for (std::size_t j = 0; j < n; ++j)
            scores->grad[i * n + j] +=
                mask->at(i, j) * (out->at_grad(i, j) - dot) / denoms[i];
        }
      });
    }
    return out;
  }

  // Row-wise softmax over a candidate mask; excluded positions get weight 0.
  TensorPtr softmax_rows(const TensorPtr& scores, const TensorPtr& mask) {
    detail::check_same_shape(*scores, *mask, "softmax_rows");
    if (mask->requires_grad) throw ContractError("softmax_rows: mask must not require grad");
    const std::size_t m = scores->rows, n = scores->cols;
    auto out = make_output(m, n, scores->requires_grad);
    for (std::size_t i = 0; i < m; ++i) {
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (mask->at(i, j) != 0.0) hi = std::max(hi, scores->at(i, j));
      if (!std::isfinite(hi)) continue;  // empty candidate row -> all-zero weights
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (mask->at(i, j) != 0.0) {
          out->at(i, j) = std::exp(scores->at(i, j) - hi);
          z += out->at(i, j);
        }
      }
      for (std::size_t j = 0; j < n; ++j) out->at(i, j) /= z;
    }
    if (out->requires_grad) {
      record([scores, out] {
        scores->ensure_grad();
        const std::size_t m = scores->rows, n = scores->cols;
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += out->at_grad(i, j) * out->at(i, j);
          for (std::size_t j = 0; j < n; ++j)
            scores->grad[i * n + j] += out->at(i, j) * (out->at_grad(i, j) - dot);
        }
      });
    }
    return out;
  }

  // Reverse traversal from a scalar loss. One traversal per tape.
  void backward(const TensorPtr& loss) {
    if (loss->rows != 1 || loss->cols != 1)
      throw ContractError("backward: loss must be a 1x1 tensor, got " +
                          std::to_string(loss->rows) + "x" + std::to_string(loss->cols));
    if (backward_done_)
      throw StateError("backward: tape already traversed; run a new forward pass first");
    backward_done_ = true;
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> records_;
  bool backward_done_ = false;
};

}  // namespace crossvae::ad
