#include "upstep/ssl.hpp"

#include <cmath>
#include <random>

namespace upstep {

PrototypeBank make_prototypes(std::size_t k, std::size_t dim, std::uint64_t seed) {
  if (k < 2) throw ContractError("make_prototypes: need at least 2 prototypes");
  if (dim < 2) throw ContractError("make_prototypes: need dim >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor c = Tensor::zeros({k, dim});
  auto v = c.values();
  for (std::size_t i = 0; i < k; ++i) {
    double ss = 0.0;
    do {
      ss = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        v[i * dim + j] = dist(rng);
        ss += v[i * dim + j] * v[i * dim + j];
      }
    } while (ss == 0.0);  // vanishing draw is all but impossible; stay safe
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t j = 0; j < dim; ++j) v[i * dim + j] *= inv;
  }
  Tensor ct = Tensor::zeros({dim, k});
  auto tv = ct.values();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < dim; ++j) tv[j * k + i] = v[i * dim + j];
  return {std::move(c), std::move(ct)};
}

Tensor prototype_scores(const Tensor& z, const PrototypeBank& bank, bool normalize) {
  if (z.ndim() != 2 || z.cols() != bank.dim())
    throw ShapeError("prototype_scores: projections " + shape_str(z.shape()) +
                     " vs prototypes of dim " + std::to_string(bank.dim()));
  return matmul(normalize ? normalize_rows(z) : z, bank.c_t);
}

Tensor online_assign(const Tensor& z, const PrototypeBank& bank, double tau, Tensor* scores_out,
                     bool normalize) {
  if (tau <= 0.0) throw ContractError("online_assign: temperature must be positive");
  Tensor scores = prototype_scores(z, bank, normalize);
  if (scores_out) *scores_out = scores.detach();
  return softmax_rows(div(scores, tau));
}

Tensor sinkhorn_knopp(const Tensor& scores, const SinkhornConfig& cfg) {
  if (scores.ndim() != 2)
    throw ShapeError("sinkhorn_knopp: expected [batch, k] scores, got " +
                     shape_str(scores.shape()));
  if (cfg.epsilon <= 0.0)
    throw ContractError("sinkhorn_knopp: epsilon must be positive, got " +
                        std::to_string(cfg.epsilon));
  if (cfg.iterations < 1)
    throw ContractError("sinkhorn_knopp: need at least 1 iteration, got " +
                        std::to_string(cfg.iterations));
  const std::size_t b = scores.rows(), k = scores.cols();
  const auto in = scores.values();
  double mx = in[0];
  for (double v : in) {
    if (!std::isfinite(v)) throw NumericError("sinkhorn_knopp: non-finite score");
    mx = std::max(mx, v);
  }

  // Work detached from any tape: targets are constants for the loss.
  Tensor q = Tensor::zeros({b, k});
  auto qv = q.values();
  // Subtracting the global max keeps exp() in range and, unlike per-row
  // shifts, leaves the final transport plan exactly invariant.
  for (std::size_t i = 0; i < b * k; ++i) qv[i] = std::exp((in[i] - mx) / cfg.epsilon);

  std::vector<double> col(k);
  for (int it = 0; it < cfg.iterations; ++it) {
    // Columns to mass 1/k ...
    std::fill(col.begin(), col.end(), 0.0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < k; ++j) col[j] += qv[i * k + j];
    for (std::size_t j = 0; j < k; ++j) col[j] *= static_cast<double>(k);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < k; ++j) qv[i * k + j] /= col[j];
    // ... then rows to mass 1/b.
    for (std::size_t i = 0; i < b; ++i) {
      double rs = 0.0;
      for (std::size_t j = 0; j < k; ++j) rs += qv[i * k + j];
      rs *= static_cast<double>(b);
      for (std::size_t j = 0; j < k; ++j) qv[i * k + j] /= rs;
    }
  }
  // Scale so each row is a probability vector.
  for (std::size_t i = 0; i < b * k; ++i) qv[i] *= static_cast<double>(b);
  return q;
}

Tensor cluster_ce_loss(const Tensor& probs, const Tensor& targets) {
  if (probs.shape() != targets.shape())
    throw ShapeError("cluster_ce_loss: probs " + shape_str(probs.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  if (targets.requires_grad())
    throw ContractError("cluster_ce_loss: targets must be detached (stop-gradient)");
  const double inv_b = 1.0 / static_cast<double>(probs.rows());
  Tensor logp = log(clamp_min(probs, 1e-12));
  return scale(sum(mul(targets, logp)), -inv_b);
}

}  // namespace upstep
