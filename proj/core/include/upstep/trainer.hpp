#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "upstep/adapters.hpp"
#include "upstep/checkpoint.hpp"
#include "upstep/cvr.hpp"
#include "upstep/data.hpp"
#include "upstep/nn.hpp"
#include "upstep/ssl.hpp"

namespace upstep {

// Ablation switches; everything on is the full method.
struct Toggles {
  bool cv_loss = true;
  bool cv_lr_reg = true;
  bool cv_gate = true;
  bool ensemble = true;  // consumed by evaluation, carried here for config parity
};

struct TrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 160;
  double eta0 = 0.03;
  double s_phi = 0.5;
  double lambda_cv = 1.0;
  double tau = 0.1;
  std::size_t prototypes = 300;  // desk-scale default; reference scale is 3000
  SinkhornConfig sinkhorn;
  double offline_momentum = 0.0;  // 0 = plain copy after accepted steps
  bool symmetric_loss = false;
  bool normalize_scores = true;  // L2-normalize projections before prototype scoring
  // Subtract the batch mean from both streams' features before the projector.
  // A randomly initialized encoder emits nearly identical vectors for every
  // image (patch statistics shared across images dominate the readout), which
  // parks the clustering objective at its uniform saddle point; removing the
  // batch mean deletes that shared component so only image-specific structure
  // reaches the prototypes, and it makes the clustering gradient mean-free in
  // feature space so the objective stops feeding the feature center.
  // Pretraining forces this on. Adaptation defaults it off: a pretrained base
  // is already spread out, and CVR supplies the anti-collapse pressure there.
  bool center_features = false;
  GateReference gate_reference = GateReference::PreviousBatch;
  std::uint64_t seed = 1;
  Toggles toggles;
  AdapterVariant adapter_variant = AdapterVariant::Lora;
  AdapterPolicy adapter_policy = AdapterPolicy::QkvProj;
  std::size_t adapter_rank = 16;
  double adapter_alpha = 1.0;
  std::size_t checkpoint_every_epochs = 0;  // 0 = final checkpoint only
  AugmentConfig augment;

  void validate() const;  // ConfigError on out-of-range values
};

struct StepReport {
  double loss_ce = 0.0;
  double loss_cv = 0.0;
  double cv_mag = 0.0;
  double eta = 0.0;
  bool updated = false;
};

struct MetricsRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  StepReport report;
};

// Online/offline two-stream state. The offline stream owns separate storage
// for whatever is trainable and shares frozen tensors with the online stream;
// it is refreshed (copy, or EMA under offline_momentum) only after accepted
// steps.
struct TrainState {
  EncoderModel online_encoder;
  Projector online_projector;
  std::optional<AdapterSet> online_adapters;

  EncoderModel offline_encoder;
  Projector offline_projector;
  std::optional<AdapterSet> offline_adapters;

  PrototypeBank bank;
  Adam optimizer;
  CvrState cvr;
  std::uint64_t step = 0;

  // (online, offline) tensor pairs the refresh copies across.
  std::vector<std::pair<Tensor, Tensor>> refresh_pairs;

  std::vector<Tensor> trainables() const { return optimizer.params(); }
};

// One two-view training step: online assignments vs Sinkhorn targets from the
// offline stream, center-vector loss, LR modulation, conditional update.
// A fresh tape lives and dies inside the call.
StepReport upstep_step(TrainState& state, const ViewPair& views, const TrainConfig& cfg);

// Copies trainable values online -> offline (EMA when momentum > 0).
void refresh_offline(TrainState& state, double momentum);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

// Self-supervised pre-training of the full encoder + projector on unlabeled
// source images (no adapters, CVR off, fixed eta0). epochs == 0 returns the
// initialization untouched.
Checkpoint pretrain_base(const UnlabeledView& source, const EncoderConfig& enc_cfg,
                         const ProjectorConfig& proj_cfg, const TrainConfig& cfg,
                         std::vector<MetricsRow>* metrics = nullptr);

struct RunResult {
  std::vector<MetricsRow> metrics;
  double skip_fraction = 0.0;
  std::filesystem::path checkpoint_dir;
  // epoch number -> checkpoint directory, when periodic checkpoints are on
  std::vector<std::pair<std::size_t, std::filesystem::path>> epoch_checkpoints;
};

// Source-free adaptation: freezes the base encoder, attaches adapters and a
// fresh projector/prototype bank, and runs the two-stream objective over the
// unlabeled target. Writes metrics.csv and checkpoints under run_dir.
RunResult run_upstep(const Checkpoint& base, const UnlabeledView& target, const TrainConfig& cfg,
                     const std::filesystem::path& run_dir);

}  // namespace upstep
