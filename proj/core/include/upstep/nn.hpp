#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "upstep/tensor.hpp"

namespace upstep {

class AdapterSet;  // adapters.hpp

enum class Readout { Cls, MeanPool };

struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  Readout readout = Readout::Cls;
  double ln_eps = 1e-5;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_tokens() const { return grid() * grid(); }
  std::size_t tokens() const { return patch_tokens() + 1; }  // +1 for CLS
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  void validate() const;  // ConfigError on contradictions
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct EncoderBlock {
  Tensor ln1_g, ln1_b;
  Tensor qkv_w, qkv_b;    // [d, 3d], [3d] fused projection
  Tensor proj_w, proj_b;  // [d, d], [d]
  Tensor ln2_g, ln2_b;
  Tensor mlp_in_w, mlp_in_b;    // [d, ratio*d]
  Tensor mlp_out_w, mlp_out_b;  // [ratio*d, d]
};

// Optional per-forward diagnostics.
struct ForwardTrace {
  // One detached [heads*tokens, tokens] tensor per block, batches stacked
  // along rows.
  std::vector<Tensor> attention_probs;
};

// Pre-norm vision transformer over patch tokens plus a CLS token.
struct EncoderModel {
  EncoderConfig cfg;
  Tensor patch_w, patch_b;          // [patch_dim, d], [d]
  Tensor cls;                       // [1, d]
  Tensor pos;                       // [tokens, d]
  std::vector<EncoderBlock> blocks;
  Tensor final_ln_g, final_ln_b;

  // images: [B, 3, H, W]. Returns [B, d] features (CLS row or patch mean
  // after the final layer norm, per cfg.readout). Adapters, when given,
  // contribute low-rank deltas at their attached sites.
  Tensor forward(const Tensor& images, const AdapterSet* adapters = nullptr,
                 ForwardTrace* trace = nullptr) const;

  std::vector<NamedParam> named_params() const;  // stable order
  std::vector<Tensor> params() const;
  void set_trainable(bool trainable);
  EncoderModel clone() const;        // deep copy of all parameters
  std::uint64_t weight_hash() const;  // FNV-1a over parameter bytes
};

// Flattens [B, 3, H, W] images into per-patch rows [B*patch_tokens, patch_dim],
// channel-major within a patch. Plain data movement, not a tape op (images
// never carry gradients).
Tensor patchify(const Tensor& images, std::size_t patch_size);

struct ProjectorConfig {
  std::size_t in_dim = 64;
  std::size_t hidden = 2048;
  std::size_t out_dim = 128;
};

// Two-layer MLP head mapping encoder features to the clustering space.
struct Projector {
  ProjectorConfig cfg;
  Tensor w1, b1, w2, b2;

  Tensor forward(const Tensor& features) const;
  std::vector<NamedParam> named_params() const;
  std::vector<Tensor> params() const;
  void set_trainable(bool trainable);
  Projector clone() const;
};

struct InitBundle {
  EncoderModel encoder;
  Projector projector;
};

// Truncated-normal(0, 0.02) weights clipped at +-2 sigma (resampled), zero
// biases, unit layer-norm gains. Deterministic in seed.
InitBundle init_weights(const EncoderConfig&, const ProjectorConfig&, std::uint64_t seed);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. The learning rate is supplied per step so the
// caller can modulate it.
class Adam {
 public:
  Adam() = default;  // empty shell; assign a real instance before stepping
  explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {});

  // Applies one update using each parameter's accumulated gradient
  // (ContractError if any is missing). eta == 0 still advances the moments
  // but leaves parameter bytes untouched.
  void step(double eta);
  void zero_grads();

  std::uint64_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }
  // Fingerprint over moments and step count; parameter bytes are not included.
  std::uint64_t state_hash() const;

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
};

std::uint64_t params_hash(const std::vector<Tensor>& params);

}  // namespace upstep
