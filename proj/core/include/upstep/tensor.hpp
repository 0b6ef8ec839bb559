#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "upstep/common.hpp"

namespace upstep {

namespace detail {
struct TensorImpl;
struct Access;
}  // namespace detail

// Dense row-major float64 tensor with optional gradient buffer. Copies are
// shallow (shared storage); use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t ndim() const;
  std::size_t numel() const;
  std::size_t rows() const;  // 2-d only
  std::size_t cols() const;  // 2-d only

  bool requires_grad() const;
  bool is_leaf() const;
  // Flipping requires_grad is only meaningful on leaves (parameters).
  void set_requires_grad(bool value);

  std::span<double> values();
  std::span<const double> values() const;
  double item() const;                              // numel == 1
  double at(std::initializer_list<std::size_t> idx) const;

  bool has_grad() const;
  std::span<const double> grad() const;  // ContractError if no gradient present
  void zero_grad();                      // drops the gradient buffer

  Tensor clone() const;   // deep copy; result is a leaf
  Tensor detach() const;  // deep value copy with requires_grad = false

  const void* data_ptr() const;  // identity/aliasing checks in tests

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend struct detail::Access;
};

// Records one backward closure per op, replayed in reverse creation order.
// Exactly one tape may be active at a time (per thread); ops record onto the
// innermost active tape unless grad recording is suspended.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and replays recorded closures in reverse.
  // Leaf gradients accumulate across repeated backward() calls; gradients of
  // interior nodes are reset at the start of each call.
  void backward(const Tensor& loss);

  std::size_t size() const;  // number of recorded entries

  static Tape* active();

 private:
  struct Entry;
  std::vector<Entry> entries_;
  friend struct detail::Access;
};

// Suspends gradient recording for the current scope (nestable).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_recording_enabled();

// ---- element-wise and linear-algebra ops -----------------------------------
// Binary ops accept equal shapes or a scalar (1-element) tensor on either
// side; anything else is a ShapeError naming both shapes.

Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K] x [K,N] -> [M,N]
Tensor transpose(const Tensor& a);                // 2-d only

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // NumericError on exact zero divisor

Tensor add(const Tensor& a, double c);
Tensor sub(const Tensor& a, double c);
Tensor sub(double c, const Tensor& a);
Tensor mul(const Tensor& a, double c);
Tensor div(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);        // NumericError on input <= 0
Tensor sqrt(const Tensor& a);       // NumericError on input < 0
Tensor abs(const Tensor& a);        // subgradient 0 at 0
Tensor relu(const Tensor& a);       // subgradient 0 at 0
Tensor clamp_min(const Tensor& a, double floor);

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a);            // scalar
Tensor sum(const Tensor& a, int axis);  // 2-d; axis 0 -> [cols], axis 1 -> [rows]
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis);
Tensor l2_norm(const Tensor& a);  // Frobenius norm, scalar; subgradient 0 at the origin

Tensor softmax_rows(const Tensor& a);     // max-shifted, rows sum to 1
Tensor logsumexp_rows(const Tensor& a);   // [rows]

// ---- structured ops used by the encoder stack -------------------------------

// y = x * w + b with x:[M,in], w:[in,out], b:[out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Per-row normalization with learned gain/bias, eps inside the sqrt.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& x);  // tanh approximation
// Multi-head self-attention over packed qkv:[batch*tokens, 3*dim]. If
// probs_out is non-null it receives detached attention probabilities, one
// [heads*tokens, tokens] tensor per batch element flattened into
// [batch*heads*tokens, tokens].
Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t tokens, std::size_t heads,
                 Tensor* probs_out = nullptr);

Tensor normalize_rows(const Tensor& x);              // NumericError on a zero row
Tensor center_cols(const Tensor& x);                 // y[i,j] = x[i,j] - mean_i x[i,j]
Tensor scale_cols(const Tensor& x, const Tensor& v);  // y[i,j] = x[i,j] * v[j]
Tensor tile_rows(const Tensor& x, std::size_t repeat);
// x:[blocks*n, d] plus row:[1, d] -> [blocks*(n+1), d]; prepends the row to
// every block (CLS token insertion).
Tensor prepend_row_per_block(const Tensor& x, const Tensor& row, std::size_t blocks);
// Picks row `offset` out of each length-`block_len` block -> [blocks, d].
Tensor take_block_rows(const Tensor& x, std::size_t blocks, std::size_t block_len,
                       std::size_t offset);
// Mean over each block's rows, skipping the first `skip_leading` -> [blocks, d].
Tensor block_mean_rows(const Tensor& x, std::size_t blocks, std::size_t block_len,
                       std::size_t skip_leading);

}  // namespace upstep
