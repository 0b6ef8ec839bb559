#include "upstep/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace upstep {

std::string to_string(AdapterVariant v) { return v == AdapterVariant::Lora ? "lora" : "vera"; }

std::string to_string(AdapterPolicy p) {
  switch (p) {
    case AdapterPolicy::Qkv: return "qkv";
    case AdapterPolicy::QkvProj: return "qkv_proj";
    case AdapterPolicy::QkvProjMlp: return "qkv_proj_mlp";
  }
  return "?";
}

std::string to_string(AdapterSite s) {
  switch (s) {
    case AdapterSite::Qkv: return "qkv";
    case AdapterSite::Proj: return "proj";
    case AdapterSite::MlpIn: return "mlp_in";
    case AdapterSite::MlpOut: return "mlp_out";
  }
  return "?";
}

AdapterVariant adapter_variant_from_string(const std::string& s) {
  if (s == "lora") return AdapterVariant::Lora;
  if (s == "vera") return AdapterVariant::Vera;
  throw ConfigError("unknown adapter variant '" + s + "' (expected lora|vera)");
}

AdapterPolicy adapter_policy_from_string(const std::string& s) {
  if (s == "qkv") return AdapterPolicy::Qkv;
  if (s == "qkv_proj") return AdapterPolicy::QkvProj;
  if (s == "qkv_proj_mlp") return AdapterPolicy::QkvProjMlp;
  throw ConfigError("unknown adapter policy '" + s + "' (expected qkv|qkv_proj|qkv_proj_mlp)");
}

std::vector<AdapterSite> AdapterSet::sites_for(AdapterPolicy policy) {
  switch (policy) {
    case AdapterPolicy::Qkv: return {AdapterSite::Qkv};
    case AdapterPolicy::QkvProj: return {AdapterSite::Qkv, AdapterSite::Proj};
    case AdapterPolicy::QkvProjMlp:
      return {AdapterSite::Qkv, AdapterSite::Proj, AdapterSite::MlpIn, AdapterSite::MlpOut};
  }
  return {};
}

namespace {

std::pair<std::size_t, std::size_t> site_shape(const EncoderConfig& cfg, AdapterSite site) {
  const std::size_t d = cfg.embed_dim;
  switch (site) {
    case AdapterSite::Qkv: return {d, 3 * d};
    case AdapterSite::Proj: return {d, d};
    case AdapterSite::MlpIn: return {d, cfg.mlp_ratio * d};
    case AdapterSite::MlpOut: return {cfg.mlp_ratio * d, d};
  }
  return {0, 0};
}

Tensor gaussian(std::vector<std::size_t> shape, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

AdapterSet AdapterSet::make(AdapterVariant variant, AdapterPolicy policy, std::size_t rank,
                            double alpha, const EncoderModel& model, std::uint64_t seed) {
  if (rank == 0) throw ConfigError("adapter rank must be positive");
  const std::size_t d = model.cfg.embed_dim;
  if (rank > d)
    throw ConfigError("adapter rank " + std::to_string(rank) + " exceeds embed_dim " +
                      std::to_string(d));
  AdapterSet set;
  set.variant_ = variant;
  set.policy_ = policy;
  set.rank_ = rank;
  set.alpha_ = alpha;
  set.seed_ = seed;

  std::mt19937_64 rng(seed);
  // VeRA shares one frozen (a, b) pair per distinct base shape, drawn up
  // front in a fixed site order so layer count doesn't perturb the draw.
  std::map<std::pair<std::size_t, std::size_t>, std::pair<Tensor, Tensor>> vera_pool;
  if (variant == AdapterVariant::Vera) {
    for (AdapterSite site : sites_for(policy)) {
      const auto [din, dout] = site_shape(model.cfg, site);
      if (vera_pool.count({din, dout})) continue;
      const double sigma = 1.0 / std::sqrt(static_cast<double>(din));
      Tensor a = gaussian({din, rank}, sigma, rng);
      Tensor b = gaussian({rank, dout}, sigma, rng);
      vera_pool.emplace(std::make_pair(din, dout), std::make_pair(a, b));
    }
  }

  for (std::size_t l = 0; l < model.cfg.depth; ++l) {
    for (AdapterSite site : sites_for(policy)) {
      const auto [din, dout] = site_shape(model.cfg, site);
      AdapterDelta delta;
      delta.variant = variant;
      delta.alpha = alpha;
      delta.rank = rank;
      if (variant == AdapterVariant::Lora) {
        delta.a = gaussian({din, rank}, 1.0 / static_cast<double>(rank), rng);
        delta.a.set_requires_grad(true);
        delta.b = Tensor::zeros({rank, dout}, /*requires_grad=*/true);
      } else {
        const auto& shared = vera_pool.at({din, dout});
        delta.a = shared.first;   // frozen, shared handle
        delta.b = shared.second;
        delta.d_vec = Tensor::full({rank}, 0.1, /*requires_grad=*/true);
        delta.b_vec = Tensor::zeros({dout}, /*requires_grad=*/true);
      }
      set.deltas_.emplace(std::make_pair(l, site), std::move(delta));
    }
  }
  return set;
}

const AdapterDelta* AdapterSet::find(std::size_t layer, AdapterSite site) const {
  auto it = deltas_.find({layer, site});
  return it == deltas_.end() ? nullptr : &it->second;
}

AdapterDelta* AdapterSet::find(std::size_t layer, AdapterSite site) {
  auto it = deltas_.find({layer, site});
  return it == deltas_.end() ? nullptr : &it->second;
}

std::vector<NamedParam> AdapterSet::named_params() const {
  std::vector<NamedParam> out;
  for (const auto& [key, delta] : deltas_) {
    const std::string p =
        "adapter.block" + std::to_string(key.first) + "." + to_string(key.second) + ".";
    if (delta.variant == AdapterVariant::Lora) {
      out.push_back({p + "a", delta.a});
      out.push_back({p + "b", delta.b});
    } else {
      out.push_back({p + "d_vec", delta.d_vec});
      out.push_back({p + "b_vec", delta.b_vec});
    }
  }
  return out;
}

std::vector<Tensor> AdapterSet::trainable_params() const {
  std::vector<Tensor> out;
  for (auto& np : named_params()) out.push_back(np.tensor);
  return out;
}

std::size_t AdapterSet::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : trainable_params()) n += p.numel();
  return n;
}

AdapterSet AdapterSet::clone(bool trainable) const {
  AdapterSet out;
  out.variant_ = variant_;
  out.policy_ = policy_;
  out.rank_ = rank_;
  out.alpha_ = alpha_;
  out.seed_ = seed_;
  // Preserve VeRA sharing in the copy: clone each distinct frozen tensor once.
  std::map<const void*, Tensor> cloned;
  auto clone_shared = [&cloned](const Tensor& t) {
    auto it = cloned.find(t.data_ptr());
    if (it == cloned.end()) it = cloned.emplace(t.data_ptr(), t.clone()).first;
    return it->second;
  };
  for (const auto& [key, delta] : deltas_) {
    AdapterDelta d;
    d.variant = delta.variant;
    d.alpha = delta.alpha;
    d.rank = delta.rank;
    if (delta.variant == AdapterVariant::Lora) {
      d.a = delta.a.clone();
      d.b = delta.b.clone();
      d.a.set_requires_grad(trainable);
      d.b.set_requires_grad(trainable);
    } else {
      d.a = clone_shared(delta.a);
      d.b = clone_shared(delta.b);
      d.d_vec = delta.d_vec.clone();
      d.b_vec = delta.b_vec.clone();
      d.d_vec.set_requires_grad(trainable);
      d.b_vec.set_requires_grad(trainable);
    }
    out.deltas_.emplace(key, std::move(d));
  }
  return out;
}

Tensor delta_forward(const Tensor& x, const AdapterDelta& delta) {
  if (x.cols() != delta.a.rows())
    throw ShapeError("adapter: input " + shape_str(x.shape()) + " does not match a " +
                     shape_str(delta.a.shape()));
  if (delta.variant == AdapterVariant::Lora)
    return scale(matmul(matmul(x, delta.a), delta.b), delta.alpha);
  // VeRA: x * a * diag(d_vec) * b * diag(b_vec)
  return scale_cols(matmul(scale_cols(matmul(x, delta.a), delta.d_vec), delta.b), delta.b_vec);
}

Tensor adapted_linear(const Tensor& x, const Tensor& w, const Tensor& b,
                      const AdapterDelta* delta) {
  Tensor y = linear(x, w, b);
  if (!delta) return y;
  return add(y, delta_forward(x, *delta));
}

Tensor merged_weight(const Tensor& w, const AdapterDelta& delta) {
  NoGradGuard ng;
  Tensor upd;
  if (delta.variant == AdapterVariant::Lora) {
    upd = scale(matmul(delta.a, delta.b), delta.alpha);
  } else {
    upd = scale_cols(matmul(scale_cols(delta.a, delta.d_vec), delta.b), delta.b_vec);
  }
  if (w.shape() != upd.shape())
    throw ShapeError("merged_weight: base " + shape_str(w.shape()) + " vs update " +
                     shape_str(upd.shape()));
  return add(w, upd).detach();
}

EncoderModel merge_adapters(const EncoderModel& model, const AdapterSet& adapters) {
  EncoderModel out = model.clone();
  for (std::size_t l = 0; l < out.blocks.size(); ++l) {
    auto& blk = out.blocks[l];
    if (const auto* d = adapters.find(l, AdapterSite::Qkv)) blk.qkv_w = merged_weight(blk.qkv_w, *d);
    if (const auto* d = adapters.find(l, AdapterSite::Proj))
      blk.proj_w = merged_weight(blk.proj_w, *d);
    if (const auto* d = adapters.find(l, AdapterSite::MlpIn))
      blk.mlp_in_w = merged_weight(blk.mlp_in_w, *d);
    if (const auto* d = adapters.find(l, AdapterSite::MlpOut))
      blk.mlp_out_w = merged_weight(blk.mlp_out_w, *d);
  }
  return out;
}

ParamReport param_report(const EncoderModel& model, const Projector* projector,
                         const AdapterSet* adapters) {
  ParamReport rep;
  auto count = [&rep](const Tensor& t) {
    if (t.requires_grad())
      rep.trainable += t.numel();
    else
      rep.frozen += t.numel();
  };
  for (const auto& p : model.params()) count(p);
  if (projector)
    for (const auto& p : projector->params()) count(p);
  if (adapters) {
    for (const auto& p : adapters->trainable_params()) {
      count(p);
      rep.adapter_stored += p.numel();
    }
    if (adapters->variant() == AdapterVariant::Vera) {
      // Shared frozen a/b: count each distinct tensor once.
      std::vector<const void*> seen;
      for (std::size_t l = 0; l < model.cfg.depth; ++l) {
        for (AdapterSite site : AdapterSet::sites_for(adapters->policy())) {
          const auto* d = adapters->find(l, site);
          if (!d) continue;
          for (const Tensor* t : {&d->a, &d->b}) {
            if (std::find(seen.begin(), seen.end(), t->data_ptr()) != seen.end()) continue;
            seen.push_back(t->data_ptr());
            count(*t);
          }
        }
      }
    }
    rep.variant = to_string(adapters->variant());
    rep.policy = to_string(adapters->policy());
    rep.rank = adapters->rank();
  }
  const std::size_t total = rep.trainable + rep.frozen;
  rep.trainable_fraction = total ? static_cast<double>(rep.trainable) / static_cast<double>(total)
                                 : 0.0;
  return rep;
}

}  // namespace upstep
