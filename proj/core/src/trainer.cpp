#include "upstep/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace upstep {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
  if (eta0 <= 0.0) throw ConfigError("train: eta0 must be positive");
  if (s_phi < 0.0 || s_phi > 1.0) throw ConfigError("train: s_phi must lie in [0, 1]");
  if (lambda_cv < 0.0) throw ConfigError("train: lambda_cv must be non-negative");
  if (tau <= 0.0) throw ConfigError("train: tau must be positive");
  if (prototypes < 2) throw ConfigError("train: need at least 2 prototypes");
  if (sinkhorn.epsilon <= 0.0) throw ConfigError("train: sinkhorn.epsilon must be positive");
  if (sinkhorn.iterations < 1) throw ConfigError("train: sinkhorn.iters must be at least 1");
  if (offline_momentum < 0.0 || offline_momentum >= 1.0)
    throw ConfigError("train: offline_momentum must lie in [0, 1)");
  if (adapter_rank == 0) throw ConfigError("train: adapter rank must be positive");
  if (adapter_alpha <= 0.0) throw ConfigError("train: adapter alpha must be positive");
  augment.validate();
}

namespace {

double vector_norm(std::span<const double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

// Builds the (online, offline) copy pairs for refresh_offline. Order must
// match between the two lists.
std::vector<std::pair<Tensor, Tensor>> pair_up(const std::vector<Tensor>& online,
                                               const std::vector<Tensor>& offline) {
  if (online.size() != offline.size())
    throw ContractError("refresh pairs: stream parameter counts differ");
  std::vector<std::pair<Tensor, Tensor>> out;
  out.reserve(online.size());
  for (std::size_t i = 0; i < online.size(); ++i) {
    if (online[i].shape() != offline[i].shape())
      throw ContractError("refresh pairs: shape mismatch at index " + std::to_string(i));
    out.emplace_back(online[i], offline[i]);
  }
  return out;
}

Tensor offline_targets(const TrainState& state, const Tensor& view, const TrainConfig& cfg) {
  NoGradGuard ng;
  const AdapterSet* ad = state.offline_adapters ? &*state.offline_adapters : nullptr;
  Tensor f = state.offline_encoder.forward(view, ad);
  Tensor z = state.offline_projector.forward(cfg.center_features ? center_cols(f) : f);
  return sinkhorn_knopp(prototype_scores(z, state.bank, cfg.normalize_scores), cfg.sinkhorn);
}

}  // namespace

void refresh_offline(TrainState& state, double momentum) {
  for (auto& [on, off] : state.refresh_pairs) {
    const auto src = std::as_const(on).values();
    auto dst = off.values();
    if (momentum == 0.0) {
      std::copy(src.begin(), src.end(), dst.begin());
    } else {
      for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] = momentum * dst[i] + (1.0 - momentum) * src[i];
    }
  }
}

StepReport upstep_step(TrainState& state, const ViewPair& views, const TrainConfig& cfg) {
  ++state.step;
  Tape tape;
  const AdapterSet* on_ad = state.online_adapters ? &*state.online_adapters : nullptr;

  // (1) online stream on the first view
  Tensor f_s = state.online_encoder.forward(views.a, on_ad);
  Tensor z_s = state.online_projector.forward(cfg.center_features ? center_cols(f_s) : f_s);
  Tensor p_s = online_assign(z_s, state.bank, cfg.tau, nullptr, cfg.normalize_scores);

  // (2) offline stream on the second view, stop-gradient targets
  Tensor p_t = offline_targets(state, views.b, cfg);

  // (3) center vector of the online features (first view only)
  Tensor s_vec = center_vector(f_s);
  const double s_mag = vector_norm(std::as_const(s_vec).values());
  Tensor loss_cv_t = cv_loss(s_vec, cfg.s_phi);

  Tensor loss_ce = cluster_ce_loss(p_s, p_t);
  if (cfg.symmetric_loss) {
    // Swap the stream/view roles and average the two CE terms.
    Tensor f_s2 = state.online_encoder.forward(views.b, on_ad);
    Tensor z_s2 = state.online_projector.forward(cfg.center_features ? center_cols(f_s2) : f_s2);
    Tensor p_s2 = online_assign(z_s2, state.bank, cfg.tau, nullptr, cfg.normalize_scores);
    Tensor p_t2 = offline_targets(state, views.a, cfg);
    loss_ce = scale(add(loss_ce, cluster_ce_loss(p_s2, p_t2)), 0.5);
  }
  Tensor loss =
      cfg.toggles.cv_loss ? add(loss_ce, scale(loss_cv_t, cfg.lambda_cv)) : loss_ce;

  StepReport rep;
  rep.loss_ce = loss_ce.item();
  rep.loss_cv = loss_cv_t.item();
  rep.cv_mag = s_mag;

  // (4) gate
  bool update = true;
  if (cfg.toggles.cv_gate)
    update = gate(state.cvr, s_mag).update;
  else
    gate_bypass(state.cvr, s_mag);
  rep.updated = update;
  rep.eta = cfg.toggles.cv_lr_reg ? regulated_lr(state.cvr, s_mag) : state.cvr.eta0;

  // (5) conditional backprop + refresh; a skipped step touches nothing
  if (update) {
    state.optimizer.zero_grads();
    tape.backward(loss);
    state.optimizer.step(rep.eta);
    state.optimizer.zero_grads();
    refresh_offline(state, cfg.offline_momentum);
  }
  return rep;
}

void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << "step,epoch,loss_ce,loss_cv,cv_mag,eta,updated\n";
  char buf[256];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.12g,%.12g,%.12g,%.12g,%d\n", row.step, row.epoch,
                  row.report.loss_ce, row.report.loss_cv, row.report.cv_mag, row.report.eta,
                  row.report.updated ? 1 : 0);
    out << buf;
  }
}

namespace {

// Shared epoch loop for pretrain and upstep.
void run_epochs(TrainState& state, const UnlabeledView& data, const TrainConfig& cfg,
                std::vector<MetricsRow>& metrics,
                const std::function<void(std::size_t)>& on_epoch_end) {
  UnlabeledBatchStream stream(data, cfg.batch_size, derive_seed(cfg.seed, "batches"));
  std::mt19937_64 aug_rng(derive_seed(cfg.seed, "augment"));
  if (stream.batches_per_epoch() == 0)
    throw ConfigError("train: dataset of " + std::to_string(data.size()) +
                      " images yields no full batch of " + std::to_string(cfg.batch_size));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < stream.batches_per_epoch(); ++i) {
      Tensor batch = stream.batch(epoch, i);
      ViewPair views = two_views(batch, cfg.augment, aug_rng);
      const std::uint64_t this_step = state.step + 1;
      try {
        StepReport rep = upstep_step(state, views, cfg);
        metrics.push_back({state.step, epoch, rep});
      } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(this_step) + " (epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(i) +
                           "): " + e.what());
      }
    }
    if (on_epoch_end) on_epoch_end(epoch);
  }
}

}  // namespace

Checkpoint pretrain_base(const UnlabeledView& source, const EncoderConfig& enc_cfg,
                         const ProjectorConfig& proj_cfg, const TrainConfig& cfg,
                         std::vector<MetricsRow>* metrics) {
  cfg.validate();
  enc_cfg.validate();

  InitBundle init = init_weights(enc_cfg, proj_cfg, derive_seed(cfg.seed, "init"));

  TrainState state;
  state.online_encoder = std::move(init.encoder);
  state.online_projector = std::move(init.projector);
  state.online_encoder.set_trainable(true);
  state.online_projector.set_trainable(true);
  state.offline_encoder = state.online_encoder.clone();
  state.offline_projector = state.online_projector.clone();
  state.offline_encoder.set_trainable(false);
  state.offline_projector.set_trainable(false);
  state.bank =
      make_prototypes(cfg.prototypes, proj_cfg.out_dim, derive_seed(cfg.seed, "prototypes"));

  std::vector<Tensor> online_params = state.online_encoder.params();
  for (auto& p : state.online_projector.params()) online_params.push_back(p);
  std::vector<Tensor> offline_params = state.offline_encoder.params();
  for (auto& p : state.offline_projector.params()) offline_params.push_back(p);
  state.refresh_pairs = pair_up(online_params, offline_params);
  state.optimizer = Adam(online_params);

  // Pretraining keeps the fixed learning rate and unconditional updates (no
  // LR modulation, no gate); the center-vector loss term stays available.
  // Batch-centered projections are forced on: from a random initialization
  // every image maps to nearly the same vector, and without removing that
  // shared component the clustering objective sits at its uniform saddle
  // point and never learns (see TrainConfig::center_features).
  TrainConfig pcfg = cfg;
  pcfg.toggles = {cfg.toggles.cv_loss, false, false, cfg.toggles.ensemble};
  pcfg.center_features = true;
  state.cvr.eta0 = pcfg.eta0;
  state.cvr.s_phi = pcfg.s_phi;
  state.cvr.lambda = pcfg.lambda_cv;

  std::vector<MetricsRow> local;
  run_epochs(state, source, pcfg, metrics ? *metrics : local, nullptr);

  Checkpoint ckpt;
  ckpt.kind = "pretrain";
  ckpt.seed = cfg.seed;
  ckpt.step = state.step;
  ckpt.encoder = std::move(state.online_encoder);
  ckpt.projector = std::move(state.online_projector);
  ckpt.encoder.set_trainable(false);
  ckpt.projector.set_trainable(false);
  ckpt.prototypes = std::move(state.bank);
  return ckpt;
}

RunResult run_upstep(const Checkpoint& base, const UnlabeledView& target, const TrainConfig& cfg,
                     const fs::path& run_dir) {
  cfg.validate();
  if (base.kind != "pretrain")
    throw ContractError("run_upstep: expected a pretrain checkpoint, got kind '" + base.kind +
                        "'");
  fs::create_directories(run_dir);

  TrainState state;
  // The online and offline streams share the frozen base tensors outright;
  // only adapters and projector get separate offline storage.
  state.online_encoder = base.encoder;
  state.online_encoder.set_trainable(false);
  state.offline_encoder = state.online_encoder;

  state.online_projector = base.projector.clone();
  state.online_projector.set_trainable(true);
  state.offline_projector = state.online_projector.clone();
  state.offline_projector.set_trainable(false);

  state.online_adapters =
      AdapterSet::make(cfg.adapter_variant, cfg.adapter_policy, cfg.adapter_rank,
                       cfg.adapter_alpha, state.online_encoder, derive_seed(cfg.seed, "adapter"));
  state.offline_adapters = state.online_adapters->clone(/*trainable=*/false);

  if (base.prototypes && base.prototypes->dim() == base.projector.cfg.out_dim &&
      base.prototypes->k() == cfg.prototypes) {
    state.bank = *base.prototypes;  // stay in the space the projector was trained against
  } else {
    state.bank = make_prototypes(cfg.prototypes, base.projector.cfg.out_dim,
                                 derive_seed(cfg.seed, "prototypes"));
  }

  std::vector<Tensor> online_params = state.online_adapters->trainable_params();
  for (auto& p : state.online_projector.params()) online_params.push_back(p);
  std::vector<Tensor> offline_params = state.offline_adapters->trainable_params();
  for (auto& p : state.offline_projector.params()) offline_params.push_back(p);
  state.refresh_pairs = pair_up(online_params, offline_params);
  state.optimizer = Adam(online_params);

  state.cvr.eta0 = cfg.eta0;
  state.cvr.s_phi = cfg.s_phi;
  state.cvr.lambda = cfg.lambda_cv;
  state.cvr.reference_mode = cfg.gate_reference;

  // An adapter checkpoint points at its base rather than duplicating the
  // encoder; if the base only exists in memory, persist it under the run dir.
  std::string base_ref = base.source_dir;
  if (base_ref.empty()) {
    const fs::path base_dir = run_dir / "base";
    save_checkpoint(base_dir, base);
    base_ref = fs::weakly_canonical(base_dir).string();
  }

  const std::uint64_t base_hash_before = state.online_encoder.weight_hash();

  RunResult result;
  auto make_ckpt = [&](std::uint64_t step) {
    Checkpoint ckpt;
    ckpt.kind = "upstep";
    ckpt.seed = cfg.seed;
    ckpt.step = step;
    ckpt.encoder = state.online_encoder;  // shared handles; not persisted for upstep kind
    ckpt.projector = state.online_projector;
    ckpt.adapters = state.online_adapters->clone(/*trainable=*/false);
    ckpt.prototypes = state.bank;
    ckpt.base_reference = base_ref;
    return ckpt;
  };

  run_epochs(state, target, cfg, result.metrics, [&](std::size_t epoch) {
    if (cfg.checkpoint_every_epochs && (epoch + 1) % cfg.checkpoint_every_epochs == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04zu", epoch + 1);
      const fs::path dir = run_dir / "checkpoints" / name;
      fs::create_directories(dir.parent_path());
      save_checkpoint(dir, make_ckpt(state.step));
      result.epoch_checkpoints.emplace_back(epoch + 1, dir);
    }
  });

  if (state.online_encoder.weight_hash() != base_hash_before)
    throw ContractError("run_upstep: frozen base encoder parameters changed during adaptation");

  result.skip_fraction = state.cvr.skip_fraction();
  result.checkpoint_dir = run_dir / "checkpoint";
  save_checkpoint(result.checkpoint_dir, make_ckpt(state.step));
  write_metrics_csv(run_dir / "metrics.csv", result.metrics);
  return result;
}

}  // namespace upstep
