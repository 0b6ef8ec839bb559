#pragma once

#include <cstdint>

#include "upstep/tensor.hpp"

namespace upstep {

// Fixed bank of unit-norm cluster prototypes on the hypersphere.
struct PrototypeBank {
  Tensor c;    // [k, dim], rows unit-norm, never trained
  Tensor c_t;  // [dim, k] transposed copy kept for row-major scoring

  std::size_t k() const { return c.rows(); }
  std::size_t dim() const { return c.cols(); }
};

// Gaussian directions normalized to the sphere; deterministic in seed.
// Requires k >= 2 and dim >= 2.
PrototypeBank make_prototypes(std::size_t k, std::size_t dim, std::uint64_t seed);

// Online assignment: softmax(cos(z_hat, c) / tau) with z_hat the row-normalized
// projection (normalize = false scores the raw projection instead).
// Differentiable. scores_out, if given, receives the raw score matrix [B, k]
// (detached).
Tensor online_assign(const Tensor& z, const PrototypeBank& bank, double tau,
                     Tensor* scores_out = nullptr, bool normalize = true);

// The score matrix the assignments are built from: (z_hat or z) * c^T.
Tensor prototype_scores(const Tensor& z, const PrototypeBank& bank, bool normalize = true);

struct SinkhornConfig {
  double epsilon = 0.3;
  int iterations = 3;
};

// Balanced soft targets via Sinkhorn-Knopp on exp(scores/epsilon): alternating
// column (uniform over prototypes) and row (uniform over batch) normalization,
// final rescale so each row sums to 1. Detached from any tape by construction.
// NumericError on non-finite scores; ContractError on bad epsilon/iterations.
Tensor sinkhorn_knopp(const Tensor& scores, const SinkhornConfig& cfg = {});

// Mean over the batch of -sum_k targets * log(max(probs, 1e-12)). targets must
// be grad-free (ContractError otherwise); shapes must match.
Tensor cluster_ce_loss(const Tensor& probs, const Tensor& targets);

}  // namespace upstep
