#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "upstep/nn.hpp"

namespace upstep {

enum class AdapterVariant { Lora, Vera };
enum class AdapterPolicy { Qkv, QkvProj, QkvProjMlp };
enum class AdapterSite { Qkv, Proj, MlpIn, MlpOut };

std::string to_string(AdapterVariant v);
std::string to_string(AdapterPolicy p);
std::string to_string(AdapterSite s);
AdapterVariant adapter_variant_from_string(const std::string& s);  // ConfigError on unknown
AdapterPolicy adapter_policy_from_string(const std::string& s);

// Low-rank delta for one base matrix, stored pre-transposed relative to the
// usual rank-decomposition convention so the adapted forward is
// (x*a)*b without transposes: a:[d_in, r], b:[r, d_out].
//
// LoRA: a, b trainable; a ~ normal(0, 1/r), b = 0, delta scaled by alpha.
// VeRA: a, b frozen and shared across all sites of equal base shape;
//       trainables are d_vec:[r] (init 0.1) and b_vec:[d_out] (init 0), with
//       delta = (x*a) * diag(d_vec) * b * diag(b_vec).
struct AdapterDelta {
  AdapterVariant variant = AdapterVariant::Lora;
  Tensor a, b;
  Tensor d_vec, b_vec;  // VeRA only
  double alpha = 1.0;
  std::size_t rank = 0;

  std::size_t d_in() const { return a.rows(); }
  std::size_t d_out() const { return b.cols(); }
};

class AdapterSet {
 public:
  AdapterSet() = default;

  // Attaches fresh deltas to every site selected by the policy, across all
  // encoder blocks. Deterministic in seed.
  static AdapterSet make(AdapterVariant variant, AdapterPolicy policy, std::size_t rank,
                         double alpha, const EncoderModel& model, std::uint64_t seed);

  static std::vector<AdapterSite> sites_for(AdapterPolicy policy);

  const AdapterDelta* find(std::size_t layer, AdapterSite site) const;
  AdapterDelta* find(std::size_t layer, AdapterSite site);

  std::vector<NamedParam> named_params() const;  // trainables only, stable order
  std::vector<Tensor> trainable_params() const;
  std::size_t trainable_count() const;  // total trainable scalars

  AdapterVariant variant() const { return variant_; }
  AdapterPolicy policy() const { return policy_; }
  std::size_t rank() const { return rank_; }
  double alpha() const { return alpha_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t site_count() const { return deltas_.size(); }
  bool empty() const { return deltas_.empty(); }

  AdapterSet clone(bool trainable) const;  // deep copy of all delta tensors

 private:
  AdapterVariant variant_ = AdapterVariant::Lora;
  AdapterPolicy policy_ = AdapterPolicy::QkvProj;
  std::size_t rank_ = 0;
  double alpha_ = 1.0;
  std::uint64_t seed_ = 0;
  std::map<std::pair<std::size_t, AdapterSite>, AdapterDelta> deltas_;
};

// x*w + b plus the low-rank path; the dense update w + delta is never formed.
Tensor adapted_linear(const Tensor& x, const Tensor& w, const Tensor& b,
                      const AdapterDelta* delta);
// Just the low-rank path: alpha * (x*a)*b (LoRA) or the VeRA composition.
Tensor delta_forward(const Tensor& x, const AdapterDelta& delta);
// Densifies the update: returns w + delta_matrix (merge-to-base).
Tensor merged_weight(const Tensor& w, const AdapterDelta& delta);
// Encoder copy with every adapted site's weight merged; adapter-free forward
// on the result matches adapted forward on the original.
EncoderModel merge_adapters(const EncoderModel& model, const AdapterSet& adapters);

struct ParamReport {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t adapter_stored = 0;  // scalars an adapter checkpoint persists
  double trainable_fraction = 0.0;
  std::string variant, policy;
  std::size_t rank = 0;
};

// Counts by requires_grad over encoder + optional projector + optional
// adapters (VeRA's shared frozen a/b counted once per distinct shape).
ParamReport param_report(const EncoderModel& model, const Projector* projector,
                         const AdapterSet* adapters);

}  // namespace upstep
