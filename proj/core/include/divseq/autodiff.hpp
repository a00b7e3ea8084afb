#pragma once

// Reverse-mode automatic differentiation over whole tensors. Operations
// execute eagerly; when a Tape is active and an input participates in
// differentiation, a backward closure is recorded. backward() replays the
// closures in reverse order and the tape is consumable exactly once.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "divseq/error.hpp"
#include "divseq/rng.hpp"
#include "divseq/tensor.hpp"

namespace divseq {

template <typename Real>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void run_backward(const TensorPtr<Real>& loss) {
    if (consumed_) throw ContractError("backward: tape already consumed for this forward pass");
    if (!loss || loss->size() != 1) {
      throw ContractError("backward: loss must be a scalar tensor");
    }
    if (!loss->requires_grad) {
      // Constant loss: every gradient is zero; nothing to propagate.
      consumed_ = true;
      return;
    }
    loss->ensure_grad();
    loss->grad()[0] = Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  static Tape*& active_slot() {
    thread_local Tape* active = nullptr;
    return active;
  }
  static Tape* active() { return active_slot(); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// Makes `tape` the recording target for the current thread.
template <typename Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& tape) : prev_(Tape<Real>::active_slot()) {
    Tape<Real>::active_slot() = &tape;
  }
  ~TapeScope() { Tape<Real>::active_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* prev_;
};

// Suspends recording (evaluation-mode forward passes).
template <typename Real>
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape<Real>::active_slot()) { Tape<Real>::active_slot() = nullptr; }
  ~NoGradScope() { Tape<Real>::active_slot() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<Real>* prev_;
};

// Populates gradients of every requires_grad tensor reachable from `loss`.
template <typename Real>
void backward(const TensorPtr<Real>& loss) {
  Tape<Real>* tape = Tape<Real>::active();
  if (!tape) throw ContractError("backward: no active tape");
  tape->run_backward(loss);
}

namespace detail {

// ---- raw kernels (all accumulate into the output) ----

template <typename Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    Real* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      if (av == Real(0)) continue;
      const Real* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <typename Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    Real* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const Real* brow = b + j * k;
      Real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      std::int64_t p = 0;
      for (; p + 4 <= k; p += 4) {
        s0 += arow[p] * brow[p];
        s1 += arow[p + 1] * brow[p + 1];
        s2 += arow[p + 2] * brow[p + 2];
        s3 += arow[p + 3] * brow[p + 3];
      }
      Real s = ((s0 + s1) + (s2 + s3));
      for (; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    const Real* brow = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      if (av == Real(0)) continue;
      Real* crow = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Real>
void softmax_row(const Real* x, Real* y, std::int64_t n) {
  Real mx = x[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  Real sum = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  const Real inv = Real(1) / sum;
  for (std::int64_t i = 0; i < n; ++i) y[i] *= inv;
}

// dx_j += y_j * (dy_j - sum_i y_i dy_i)
template <typename Real>
void softmax_row_backward(const Real* y, const Real* dy, Real* dx, std::int64_t n) {
  Real dot = 0;
  for (std::int64_t i = 0; i < n; ++i) dot += y[i] * dy[i];
  for (std::int64_t i = 0; i < n; ++i) dx[i] += y[i] * (dy[i] - dot);
}

}  // namespace detail

namespace ops {

template <typename Real>
bool recording(const TensorPtr<Real>& a) {
  return Tape<Real>::active() != nullptr && a->requires_grad;
}

template <typename Real>
bool recording(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  return Tape<Real>::active() != nullptr && (a->requires_grad || b->requires_grad);
}

// ---- matrix products ----

template <typename Real>
TensorPtr<Real> matmul(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->dim(1) != b->dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape()) + " and " +
                     shape_str(b->shape()));
  }
  const std::int64_t m = a->dim(0), k = a->dim(1), n = b->dim(1);
  auto out = make_tensor<Real>({m, n});
  detail::gemm_nn(a->data(), b->data(), out->data(), m, k, n);
  if (recording(a, b)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, b, out, m, k, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        detail::gemm_nt(out->grad(), b->data(), a->grad(), m, n, k);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        detail::gemm_tn(a->data(), out->grad(), b->grad(), m, k, n);
      }
    });
  }
  return out;
}

// a[m x k] * b[n x k]^T -> [m x n]
template <typename Real>
TensorPtr<Real> matmul_nt(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->dim(1) != b->dim(1)) {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a->shape()) + " and " +
                     shape_str(b->shape()));
  }
  const std::int64_t m = a->dim(0), k = a->dim(1), n = b->dim(0);
  auto out = make_tensor<Real>({m, n});
  detail::gemm_nt(a->data(), b->data(), out->data(), m, k, n);
  if (recording(a, b)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, b, out, m, k, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        detail::gemm_nn(out->grad(), b->data(), a->grad(), m, n, k);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        detail::gemm_tn(out->grad(), a->data(), b->grad(), m, n, k);
      }
    });
  }
  return out;
}

// Batched a[B x m x k] * b[B x k x n] -> [B x m x n]
template <typename Real>
TensorPtr<Real> bmm(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  if (a->rank() != 3 || b->rank() != 3 || a->dim(0) != b->dim(0) || a->dim(2) != b->dim(1)) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a->shape()) + " and " +
                     shape_str(b->shape()));
  }
  const std::int64_t bs = a->dim(0), m = a->dim(1), k = a->dim(2), n = b->dim(2);
  auto out = make_tensor<Real>({bs, m, n});
  for (std::int64_t i = 0; i < bs; ++i) {
    detail::gemm_nn(a->data() + i * m * k, b->data() + i * k * n, out->data() + i * m * n, m, k, n);
  }
  if (recording(a, b)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, b, out, bs, m, k, n] {
      for (std::int64_t i = 0; i < bs; ++i) {
        if (a->requires_grad) {
          a->ensure_grad();
          detail::gemm_nt(out->grad() + i * m * n, b->data() + i * k * n, a->grad() + i * m * k, m, n, k);
        }
        if (b->requires_grad) {
          b->ensure_grad();
          detail::gemm_tn(a->data() + i * m * k, out->grad() + i * m * n, b->grad() + i * k * n, m, k, n);
        }
      }
    });
  }
  return out;
}

// Batched a[B x m x k] * b[B x n x k]^T -> [B x m x n]
template <typename Real>
TensorPtr<Real> bmm_nt(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  if (a->rank() != 3 || b->rank() != 3 || a->dim(0) != b->dim(0) || a->dim(2) != b->dim(2)) {
    throw ShapeError("bmm_nt: incompatible shapes " + shape_str(a->shape()) + " and " +
                     shape_str(b->shape()));
  }
  const std::int64_t bs = a->dim(0), m = a->dim(1), k = a->dim(2), n = b->dim(1);
  auto out = make_tensor<Real>({bs, m, n});
  for (std::int64_t i = 0; i < bs; ++i) {
    detail::gemm_nt(a->data() + i * m * k, b->data() + i * n * k, out->data() + i * m * n, m, k, n);
  }
  if (recording(a, b)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, b, out, bs, m, k, n] {
      for (std::int64_t i = 0; i < bs; ++i) {
        if (a->requires_grad) {
          a->ensure_grad();
          detail::gemm_nn(out->grad() + i * m * n, b->data() + i * n * k, a->grad() + i * m * k, m, n, k);
        }
        if (b->requires_grad) {
          b->ensure_grad();
          detail::gemm_tn(out->grad() + i * m * n, a->data() + i * m * k, b->grad() + i * n * k, m, n, k);
        }
      }
    });
  }
  return out;
}

// Affine map over the last axis: x[... x in] -> [... x out], y = x W + b.
template <typename Real>
TensorPtr<Real> linear(const TensorPtr<Real>& x, const TensorPtr<Real>& w, const TensorPtr<Real>& b) {
  if (w->rank() != 2 || x->dim(x->rank() - 1) != w->dim(0)) {
    throw ShapeError("linear: input " + shape_str(x->shape()) + " incompatible with weight " +
                     shape_str(w->shape()));
  }
  const std::int64_t in = w->dim(0), out_dim = w->dim(1);
  if (b && b->size() != out_dim) throw ShapeError("linear: bias size mismatch");
  const std::int64_t rows = x->size() / in;
  Shape out_shape = x->shape();
  out_shape.back() = out_dim;
  auto out = make_tensor<Real>(out_shape);
  if (b) {
    for (std::int64_t r = 0; r < rows; ++r) {
      Real* orow = out->data() + r * out_dim;
      for (std::int64_t j = 0; j < out_dim; ++j) orow[j] = b->data()[j];
    }
  }
  detail::gemm_nn(x->data(), w->data(), out->data(), rows, in, out_dim);
  const bool rec = Tape<Real>::active() &&
                   (x->requires_grad || w->requires_grad || (b && b->requires_grad));
  if (rec) {
    out->requires_grad = true;
    Tape<Real>::active()->record([x, w, b, out, rows, in, out_dim] {
      if (x->requires_grad) {
        x->ensure_grad();
        detail::gemm_nt(out->grad(), w->data(), x->grad(), rows, out_dim, in);
      }
      if (w->requires_grad) {
        w->ensure_grad();
        detail::gemm_tn(x->data(), out->grad(), w->grad(), rows, in, out_dim);
      }
      if (b && b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const Real* grow = out->grad() + r * out_dim;
          for (std::int64_t j = 0; j < out_dim; ++j) b->grad()[j] += grow[j];
        }
      }
    });
  }
  return out;
}

// ---- elementwise ----

template <typename Real>
TensorPtr<Real> add(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  if (a->shape() != b->shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
  }
  auto out = make_tensor<Real>(a->shape());
  const std::int64_t n = a->size();
  for (std::int64_t i = 0; i < n; ++i) out->data()[i] = a->data()[i] + b->data()[i];
  if (recording(a, b)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, b, out, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) a->grad()[i] += out->grad()[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) b->grad()[i] += out->grad()[i];
      }
    });
  }
  return out;
}

// a + alpha * b (same shapes)
template <typename Real>
TensorPtr<Real> axpy(const TensorPtr<Real>& a, const TensorPtr<Real>& b, Real alpha) {
  if (a->shape() != b->shape()) {
    throw ShapeError("axpy: shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
  }
  auto out = make_tensor<Real>(a->shape());
  const std::int64_t n = a->size();
  for (std::int64_t i = 0; i < n; ++i) out->data()[i] = a->data()[i] + alpha * b->data()[i];
  if (recording(a, b)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, b, out, n, alpha] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) a->grad()[i] += out->grad()[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) b->grad()[i] += alpha * out->grad()[i];
      }
    });
  }
  return out;
}

// Adds a row vector over the last axis (bias / positional row).
template <typename Real>
TensorPtr<Real> add_row(const TensorPtr<Real>& x, const TensorPtr<Real>& row) {
  const std::int64_t d = x->dim(x->rank() - 1);
  if (row->size() != d) {
    throw ShapeError("add_row: row size " + shape_str(row->shape()) + " does not match last dim of " +
                     shape_str(x->shape()));
  }
  auto out = make_tensor<Real>(x->shape());
  const std::int64_t rows = x->size() / d;
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* xr = x->data() + r * d;
    Real* orow = out->data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) orow[j] = xr[j] + row->data()[j];
  }
  if (recording(x, row)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([x, row, out, rows, d] {
      if (x->requires_grad) {
        x->ensure_grad();
        for (std::int64_t i = 0; i < rows * d; ++i) x->grad()[i] += out->grad()[i];
      }
      if (row->requires_grad) {
        row->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const Real* grow = out->grad() + r * d;
          for (std::int64_t j = 0; j < d; ++j) row->grad()[j] += grow[j];
        }
      }
    });
  }
  return out;
}

// out[b, t, :] = x[b, t, :] + rows[t, :]. `rows` is a constant table (e.g.
// positional encodings) and receives no gradient.
template <typename Real>
TensorPtr<Real> add_time_rows(const TensorPtr<Real>& x, const Tensor<Real>& rows) {
  if (x->rank() != 3 || rows.rank() != 2 || x->dim(2) != rows.dim(1) || x->dim(1) > rows.dim(0)) {
    throw ShapeError("add_time_rows: " + shape_str(x->shape()) + " incompatible with table " +
                     shape_str(rows.shape()));
  }
  const std::int64_t B = x->dim(0), L = x->dim(1), d = x->dim(2);
  auto out = make_tensor<Real>(x->shape());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < L; ++t) {
      const Real* xr = x->data() + (b * L + t) * d;
      const Real* pr = rows.data() + t * d;
      Real* orow = out->data() + (b * L + t) * d;
      for (std::int64_t j = 0; j < d; ++j) orow[j] = xr[j] + pr[j];
    }
  if (recording(x)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([x, out] {
      x->ensure_grad();
      const std::int64_t n = x->size();
      for (std::int64_t i = 0; i < n; ++i) x->grad()[i] += out->grad()[i];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> scale(const TensorPtr<Real>& a, Real c) {
  auto out = make_tensor<Real>(a->shape());
  const std::int64_t n = a->size();
  for (std::int64_t i = 0; i < n; ++i) out->data()[i] = c * a->data()[i];
  if (recording(a)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, out, n, c] {
      a->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) a->grad()[i] += c * out->grad()[i];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> relu(const TensorPtr<Real>& a) {
  auto out = make_tensor<Real>(a->shape());
  const std::int64_t n = a->size();
  for (std::int64_t i = 0; i < n; ++i) out->data()[i] = a->data()[i] > Real(0) ? a->data()[i] : Real(0);
  if (recording(a)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, out, n] {
      a->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        if (a->data()[i] > Real(0)) a->grad()[i] += out->grad()[i];
      }
    });
  }
  return out;
}

// Inverted dropout; draws one uniform per element from `rng`.
template <typename Real>
TensorPtr<Real> dropout(const TensorPtr<Real>& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  const std::int64_t n = a->size();
  auto keep = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(n));
  const Real inv_keep = Real(1.0 / (1.0 - rate));
  auto out = make_tensor<Real>(a->shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const Real k = rng.uniform() >= rate ? inv_keep : Real(0);
    (*keep)[static_cast<std::size_t>(i)] = k;
    out->data()[i] = a->data()[i] * k;
  }
  if (recording(a)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, out, keep, n] {
      a->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) a->grad()[i] += (*keep)[static_cast<std::size_t>(i)] * out->grad()[i];
    });
  }
  return out;
}

// ---- shape movement ----

template <typename Real>
TensorPtr<Real> reshape(const TensorPtr<Real>& a, Shape shape) {
  if (shape_numel(shape) != a->size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a->shape()) + " as " + shape_str(shape));
  }
  auto out = make_tensor<Real>(std::move(shape), a->vec());
  if (recording(a)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([a, out] {
      a->ensure_grad();
      const std::int64_t n = a->size();
      for (std::int64_t i = 0; i < n; ++i) a->grad()[i] += out->grad()[i];
    });
  }
  return out;
}

// [A x B x C x D] -> [A x C x B x D] (swap middle axes; self-inverse)
template <typename Real>
TensorPtr<Real> permute0213(const TensorPtr<Real>& x) {
  if (x->rank() != 4) throw ShapeError("permute0213: expected rank-4, got " + shape_str(x->shape()));
  const std::int64_t A = x->dim(0), B = x->dim(1), C = x->dim(2), D = x->dim(3);
  auto out = make_tensor<Real>({A, C, B, D});
  for (std::int64_t a = 0; a < A; ++a)
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c) {
        const Real* src = x->data() + ((a * B + b) * C + c) * D;
        Real* dst = out->data() + ((a * C + c) * B + b) * D;
        for (std::int64_t d = 0; d < D; ++d) dst[d] = src[d];
      }
  if (recording(x)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([x, out, A, B, C, D] {
      x->ensure_grad();
      for (std::int64_t a = 0; a < A; ++a)
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t c = 0; c < C; ++c) {
            Real* dst = x->grad() + ((a * B + b) * C + c) * D;
            const Real* src = out->grad() + ((a * C + c) * B + b) * D;
            for (std::int64_t d = 0; d < D; ++d) dst[d] += src[d];
          }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> transpose2d(const TensorPtr<Real>& x) {
  if (x->rank() != 2) throw ShapeError("transpose2d: expected rank-2, got " + shape_str(x->shape()));
  const std::int64_t m = x->dim(0), n = x->dim(1);
  auto out = make_tensor<Real>({n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out->data()[j * m + i] = x->data()[i * n + j];
  if (recording(x)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([x, out, m, n] {
      x->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) x->grad()[i * n + j] += out->grad()[j * m + i];
    });
  }
  return out;
}

// x[B x L x d] -> [B x d], the state at time 0.
template <typename Real>
TensorPtr<Real> select_time0(const TensorPtr<Real>& x) {
  if (x->rank() != 3) throw ShapeError("select_time0: expected rank-3, got " + shape_str(x->shape()));
  const std::int64_t B = x->dim(0), L = x->dim(1), d = x->dim(2);
  auto out = make_tensor<Real>({B, d});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t j = 0; j < d; ++j) out->data()[b * d + j] = x->data()[(b * L) * d + j];
  if (recording(x)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([x, out, B, L, d] {
      x->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < d; ++j) x->grad()[(b * L) * d + j] += out->grad()[b * d + j];
    });
  }
  return out;
}

// Replaces x[:, 0, :] with e; x's own time-0 slice is ignored.
template <typename Real>
TensorPtr<Real> splice_time0(const TensorPtr<Real>& x, const TensorPtr<Real>& e) {
  if (x->rank() != 3 || e->rank() != 2 || x->dim(0) != e->dim(0) || x->dim(2) != e->dim(1)) {
    throw ShapeError("splice_time0: incompatible shapes " + shape_str(x->shape()) + " and " +
                     shape_str(e->shape()));
  }
  const std::int64_t B = x->dim(0), L = x->dim(1), d = x->dim(2);
  auto out = make_tensor<Real>(x->shape(), x->vec());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t j = 0; j < d; ++j) out->data()[(b * L) * d + j] = e->data()[b * d + j];
  if (recording(x, e)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([x, e, out, B, L, d] {
      if (e->requires_grad) {
        e->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t j = 0; j < d; ++j) e->grad()[b * d + j] += out->grad()[(b * L) * d + j];
      }
      if (x->requires_grad) {
        x->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t t = 1; t < L; ++t)
            for (std::int64_t j = 0; j < d; ++j)
              x->grad()[(b * L + t) * d + j] += out->grad()[(b * L + t) * d + j];
      }
    });
  }
  return out;
}

// ---- softmax family ----

// Numerically stable softmax along `axis`.
template <typename Real>
TensorPtr<Real> softmax(const TensorPtr<Real>& x, int axis) {
  if (axis < 0 || axis >= x->rank()) {
    throw ContractError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                        shape_str(x->shape()));
  }
  const std::int64_t n = x->dim(axis);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x->dim(i);
  for (int i = axis + 1; i < x->rank(); ++i) inner *= x->dim(i);
  auto out = make_tensor<Real>(x->shape());
  std::vector<Real> buf(static_cast<std::size_t>(n));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const Real* base = x->data() + o * n * inner + in;
      for (std::int64_t i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = base[i * inner];
      std::vector<Real> y(static_cast<std::size_t>(n));
      detail::softmax_row(buf.data(), y.data(), n);
      Real* obase = out->data() + o * n * inner + in;
      for (std::int64_t i = 0; i < n; ++i) obase[i * inner] = y[static_cast<std::size_t>(i)];
    }
  }
  if (recording(x)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([x, out, outer, inner, n] {
      x->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const Real* y = out->data() + o * n * inner + in;
          const Real* dy = out->grad() + o * n * inner + in;
          Real* dx = x->grad() + o * n * inner + in;
          Real dot = 0;
          for (std::int64_t i = 0; i < n; ++i) dot += y[i * inner] * dy[i * inner];
          for (std::int64_t i = 0; i < n; ++i) dx[i * inner] += y[i * inner] * (dy[i * inner] - dot);
        }
      }
    });
  }
  return out;
}

// Softmax over the key axis of attention scores [(B*H) x Lq x Lk] where only
// keys with key_mask true participate; masked keys get probability zero.
template <typename Real>
TensorPtr<Real> masked_softmax_keys(const TensorPtr<Real>& scores, const MaskMatrix& key_mask,
                                    std::int64_t heads) {
  if (scores->rank() != 3) throw ShapeError("masked_softmax_keys: expected rank-3 scores");
  const std::int64_t BH = scores->dim(0), Lq = scores->dim(1), Lk = scores->dim(2);
  if (BH != key_mask.rows * heads || Lk != key_mask.cols) {
    throw ShapeError("masked_softmax_keys: mask " + std::to_string(key_mask.rows) + "x" +
                     std::to_string(key_mask.cols) + " incompatible with scores " +
                     shape_str(scores->shape()));
  }
  auto out = make_tensor<Real>(scores->shape());
  for (std::int64_t bh = 0; bh < BH; ++bh) {
    const std::int64_t b = bh / heads;
    const std::uint8_t* mask = key_mask.on.data() + b * Lk;
    for (std::int64_t q = 0; q < Lq; ++q) {
      const Real* row = scores->data() + (bh * Lq + q) * Lk;
      Real* orow = out->data() + (bh * Lq + q) * Lk;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::int64_t j = 0; j < Lk; ++j)
        if (mask[j]) mx = std::max(mx, row[j]);
      Real sum = 0;
      for (std::int64_t j = 0; j < Lk; ++j) {
        if (mask[j]) {
          orow[j] = std::exp(row[j] - mx);
          sum += orow[j];
        } else {
          orow[j] = Real(0);
        }
      }
      const Real inv = Real(1) / sum;
      for (std::int64_t j = 0; j < Lk; ++j) orow[j] *= inv;
    }
  }
  if (recording(scores)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([scores, out, BH, Lq, Lk] {
      scores->ensure_grad();
      for (std::int64_t r = 0; r < BH * Lq; ++r) {
        detail::softmax_row_backward(out->data() + r * Lk, out->grad() + r * Lk,
                                     scores->grad() + r * Lk, Lk);
      }
    });
  }
  return out;
}

// Softmax over keys j <= q of causal self-attention scores [(B*H) x L x L].
template <typename Real>
TensorPtr<Real> causal_softmax(const TensorPtr<Real>& scores) {
  if (scores->rank() != 3 || scores->dim(1) != scores->dim(2)) {
    throw ShapeError("causal_softmax: expected square rank-3 scores, got " + shape_str(scores->shape()));
  }
  const std::int64_t BH = scores->dim(0), L = scores->dim(1);
  auto out = make_tensor<Real>(scores->shape());
  for (std::int64_t bh = 0; bh < BH; ++bh) {
    for (std::int64_t q = 0; q < L; ++q) {
      const Real* row = scores->data() + (bh * L + q) * L;
      Real* orow = out->data() + (bh * L + q) * L;
      detail::softmax_row(row, orow, q + 1);
      for (std::int64_t j = q + 1; j < L; ++j) orow[j] = Real(0);
    }
  }
  if (recording(scores)) {
    out->requires_grad = true;
    Tape<Real>::active()->record([scores, out, BH, L] {
      scores->ensure_grad();
      for (std::int64_t bh = 0; bh < BH; ++bh) {
        for (std::int64_t q = 0; q < L; ++q) {
          const std::int64_t off = (bh * L + q) * L;
          detail::softmax_row_backward(out->data() + off, out->grad() + off, scores->grad() + off, q + 1);
        }
      }
    });
  }
  return out;
}

// ---- normalization ----

template <typename Real>
TensorPtr<Real> layer_norm(const TensorPtr<Real>& x, const TensorPtr<Real>& gain,
                           const TensorPtr<Real>& bias, Real eps = Real(1e-5)) {
  const std::int64_t d = x->dim(x->rank() - 1);
  if (gain->size() != d || bias->size() != d) {
    throw ShapeError("layer_norm: gain/bias must have size of last dim " + std::to_string(d));
  }
  const std::int64_t rows = x->size() / d;
  auto out = make_tensor<Real>(x->shape());
  auto xhat = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(x->size()));
  auto inv_std = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* xr = x->data() + r * d;
    Real mean = 0;
    for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= Real(d);
    Real var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const Real c = xr[j] - mean;
      var += c * c;
    }
    var /= Real(d);
    const Real istd = Real(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = istd;
    Real* orow = out->data() + r * d;
    Real* hrow = xhat->data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) {
      hrow[j] = (xr[j] - mean) * istd;
      orow[j] = hrow[j] * gain->data()[j] + bias->data()[j];
    }
  }
  const bool rec = Tape<Real>::active() &&
                   (x->requires_grad || gain->requires_grad || bias->requires_grad);
  if (rec) {
    out->requires_grad = true;
    Tape<Real>::active()->record([x, gain, bias, out, xhat, inv_std, rows, d] {
      for (std::int64_t r = 0; r < rows; ++r) {
        const Real* dy = out->grad() + r * d;
        const Real* h = xhat->data() + r * d;
        if (gain->requires_grad) {
          gain->ensure_grad();
          for (std::int64_t j = 0; j < d; ++j) gain->grad()[j] += dy[j] * h[j];
        }
        if (bias->requires_grad) {
          bias->ensure_grad();
          for (std::int64_t j = 0; j < d; ++j) bias->grad()[j] += dy[j];
        }
        if (x->requires_grad) {
          x->ensure_grad();
          const Real istd = (*inv_std)[static_cast<std::size_t>(r)];
          Real sum_dh = 0, sum_dh_h = 0;
          for (std::int64_t j = 0; j < d; ++j) {
            const Real dh = dy[j] * gain->data()[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          Real* dx = x->grad() + r * d;
          for (std::int64_t j = 0; j < d; ++j) {
            const Real dh = dy[j] * gain->data()[j];
            dx[j] += istd * (dh - sum_dh / Real(d) - h[j] * sum_dh_h / Real(d));
          }
        }
      }
    });
  }
  return out;
}

// ---- embeddings ----

// Gathers rows of `table` [V x d] for each id -> [B x L x d].
template <typename Real>
TensorPtr<Real> embedding(const TensorPtr<Real>& table, const TokenMatrix& ids) {
  if (table->rank() != 2) throw ShapeError("embedding: table must be rank-2");
  const std::int64_t V = table->dim(0), d = table->dim(1);
  const std::int64_t B = ids.rows, L = ids.cols;
  auto out = make_tensor<Real>({B, L, d});
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < L; ++t) {
      const std::int32_t id = ids.at(b, t);
      if (id < 0 || id >= V) {
        throw IndexError("embedding: token id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(V) + ")");
      }
      const Real* src = table->data() + static_cast<std::int64_t>(id) * d;
      Real* dst = out->data() + (b * L + t) * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] = src[j];
    }
  }
  if (recording(table)) {
    out->requires_grad = true;
    auto ids_copy = std::make_shared<TokenMatrix>(ids);
    Tape<Real>::active()->record([table, out, ids_copy, B, L, d] {
      table->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t t = 0; t < L; ++t) {
          const std::int64_t id = ids_copy->at(b, t);
          const Real* src = out->grad() + (b * L + t) * d;
          Real* dst = table->grad() + id * d;
          for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

// ---- losses ----

// Mean over unmasked positions of -log softmax(logits)[target].
template <typename Real>
TensorPtr<Real> cross_entropy(const TensorPtr<Real>& logits, const TokenMatrix& targets,
                              const MaskMatrix& mask) {
  if (logits->rank() != 3) throw ShapeError("cross_entropy: logits must be [B x L x V]");
  const std::int64_t B = logits->dim(0), L = logits->dim(1), V = logits->dim(2);
  if (targets.rows != B || targets.cols != L || mask.rows != B || mask.cols != L) {
    throw ShapeError("cross_entropy: targets/mask must be " + std::to_string(B) + "x" + std::to_string(L));
  }
  const std::int64_t count = mask.count();
  if (count == 0) throw ContractError("cross_entropy: mask selects no positions");
  auto probs = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(logits->size()), Real(0));
  double total = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < L; ++t) {
      if (!mask.at(b, t)) continue;
      const std::int32_t tgt = targets.at(b, t);
      if (tgt < 0 || tgt >= V) {
        throw IndexError("cross_entropy: target id " + std::to_string(tgt) + " out of range [0, " +
                         std::to_string(V) + ")");
      }
      const Real* row = logits->data() + (b * L + t) * V;
      Real* prow = probs->data() + (b * L + t) * V;
      detail::softmax_row(row, prow, V);
      total -= std::log(static_cast<double>(prow[tgt]));
    }
  }
  auto out = make_scalar<Real>(static_cast<Real>(total / static_cast<double>(count)));
  if (recording(logits)) {
    out->requires_grad = true;
    auto tgt_copy = std::make_shared<TokenMatrix>(targets);
    auto mask_copy = std::make_shared<MaskMatrix>(mask);
    Tape<Real>::active()->record([logits, out, probs, tgt_copy, mask_copy, B, L, V, count] {
      logits->ensure_grad();
      const Real g = out->grad()[0] / static_cast<Real>(count);
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t t = 0; t < L; ++t) {
          if (!mask_copy->at(b, t)) continue;
          const std::int64_t tgt = tgt_copy->at(b, t);
          const Real* prow = probs->data() + (b * L + t) * V;
          Real* grow = logits->grad() + (b * L + t) * V;
          for (std::int64_t v = 0; v < V; ++v) grow[v] += g * prow[v];
          grow[tgt] -= g;
        }
      }
    });
  }
  return out;
}

// Scalar <w, x> against a constant weight vector (test scaffolding and
// reductions; the weights never receive gradient).
template <typename Real>
TensorPtr<Real> inner_const(const TensorPtr<Real>& x, std::vector<Real> w) {
  if (static_cast<std::int64_t>(w.size()) != x->size()) {
    throw ShapeError("inner_const: weight length mismatch");
  }
  double s = 0;
  for (std::int64_t i = 0; i < x->size(); ++i) s += static_cast<double>(w[static_cast<std::size_t>(i)]) * x->data()[i];
  auto out = make_scalar<Real>(static_cast<Real>(s));
  if (recording(x)) {
    out->requires_grad = true;
    auto wp = std::make_shared<std::vector<Real>>(std::move(w));
    Tape<Real>::active()->record([x, out, wp] {
      x->ensure_grad();
      const Real g = out->grad()[0];
      for (std::int64_t i = 0; i < x->size(); ++i) x->grad()[i] += g * (*wp)[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

// ---- non-differentiable helpers ----

// Detached copy (no recording, no requires_grad).
template <typename Real>
TensorPtr<Real> detach(const TensorPtr<Real>& a) {
  return make_tensor<Real>(a->shape(), a->vec());
}

// Argmax over the last axis; ties resolved to the lowest index.
template <typename Real>
std::vector<std::int64_t> argmax_last(const Tensor<Real>& x) {
  const std::int64_t n = x.dim(x.rank() - 1);
  const std::int64_t rows = x.size() / n;
  std::vector<std::int64_t> out(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* row = x.data() + r * n;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < n; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

}  // namespace ops
}  // namespace divseq
