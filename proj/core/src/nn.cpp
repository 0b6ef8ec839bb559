#include "upstep/nn.hpp"

#include <cmath>
#include <random>

#include "upstep/adapters.hpp"

namespace upstep {

void EncoderConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
    throw ConfigError("encoder: image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " + std::to_string(patch_size));
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0)
    throw ConfigError("encoder: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by heads " + std::to_string(heads));
  if (depth == 0) throw ConfigError("encoder: depth must be positive");
  if (mlp_ratio == 0) throw ConfigError("encoder: mlp_ratio must be positive");
}

Tensor patchify(const Tensor& images, std::size_t patch_size) {
  if (images.ndim() != 4)
    throw ShapeError("patchify: expected [N, 3, H, W], got " + shape_str(images.shape()));
  const auto& s = images.shape();
  const std::size_t n = s[0], ch = s[1], h = s[2], w = s[3];
  if (ch != 3) throw ShapeError("patchify: expected 3 channels, got " + std::to_string(ch));
  if (h % patch_size != 0 || w % patch_size != 0)
    throw ShapeError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch " + std::to_string(patch_size));
  const std::size_t gy = h / patch_size, gx = w / patch_size;
  const std::size_t pdim = ch * patch_size * patch_size;
  Tensor out = Tensor::zeros({n * gy * gx, pdim});
  auto dst = out.values();
  const auto src = images.values();
  std::size_t row = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* img = src.data() + i * ch * h * w;
    for (std::size_t py = 0; py < gy; ++py) {
      for (std::size_t px = 0; px < gx; ++px, ++row) {
        double* r = dst.data() + row * pdim;
        std::size_t t = 0;
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t y = 0; y < patch_size; ++y)
            for (std::size_t x = 0; x < patch_size; ++x)
              r[t++] = img[c * h * w + (py * patch_size + y) * w + (px * patch_size + x)];
      }
    }
  }
  return out;
}

Tensor EncoderModel::forward(const Tensor& images, const AdapterSet* adapters,
                             ForwardTrace* trace) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size)
    throw ShapeError("encoder: expected [N, 3, " + std::to_string(cfg.image_size) + ", " +
                     std::to_string(cfg.image_size) + "] images, got " + shape_str(s));
  const std::size_t b = s[0];
  const std::size_t tokens = cfg.tokens();

  Tensor t = linear(patchify(images, cfg.patch_size), patch_w, patch_b);
  t = prepend_row_per_block(t, cls, b);
  t = add(t, tile_rows(pos, b));

  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& blk = blocks[l];
    Tensor h = layer_norm(t, blk.ln1_g, blk.ln1_b, cfg.ln_eps);
    Tensor qkv = adapted_linear(h, blk.qkv_w, blk.qkv_b,
                                adapters ? adapters->find(l, AdapterSite::Qkv) : nullptr);
    Tensor probs;
    Tensor att = attention(qkv, b, tokens, cfg.heads, trace ? &probs : nullptr);
    if (trace) trace->attention_probs.push_back(probs);
    att = adapted_linear(att, blk.proj_w, blk.proj_b,
                         adapters ? adapters->find(l, AdapterSite::Proj) : nullptr);
    t = add(t, att);

    Tensor h2 = layer_norm(t, blk.ln2_g, blk.ln2_b, cfg.ln_eps);
    Tensor m = adapted_linear(h2, blk.mlp_in_w, blk.mlp_in_b,
                              adapters ? adapters->find(l, AdapterSite::MlpIn) : nullptr);
    m = gelu(m);
    m = adapted_linear(m, blk.mlp_out_w, blk.mlp_out_b,
                       adapters ? adapters->find(l, AdapterSite::MlpOut) : nullptr);
    t = add(t, m);
  }

  t = layer_norm(t, final_ln_g, final_ln_b, cfg.ln_eps);
  if (cfg.readout == Readout::Cls) return take_block_rows(t, b, tokens, 0);
  return block_mean_rows(t, b, tokens, 1);  // mean over patch tokens, CLS skipped
}

std::vector<NamedParam> EncoderModel::named_params() const {
  std::vector<NamedParam> out;
  out.push_back({"patch.w", patch_w});
  out.push_back({"patch.b", patch_b});
  out.push_back({"cls", cls});
  out.push_back({"pos", pos});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& blk = blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    out.push_back({p + "ln1.g", blk.ln1_g});
    out.push_back({p + "ln1.b", blk.ln1_b});
    out.push_back({p + "qkv.w", blk.qkv_w});
    out.push_back({p + "qkv.b", blk.qkv_b});
    out.push_back({p + "proj.w", blk.proj_w});
    out.push_back({p + "proj.b", blk.proj_b});
    out.push_back({p + "ln2.g", blk.ln2_g});
    out.push_back({p + "ln2.b", blk.ln2_b});
    out.push_back({p + "mlp_in.w", blk.mlp_in_w});
    out.push_back({p + "mlp_in.b", blk.mlp_in_b});
    out.push_back({p + "mlp_out.w", blk.mlp_out_w});
    out.push_back({p + "mlp_out.b", blk.mlp_out_b});
  }
  out.push_back({"final_ln.g", final_ln_g});
  out.push_back({"final_ln.b", final_ln_b});
  return out;
}

std::vector<Tensor> EncoderModel::params() const {
  std::vector<Tensor> out;
  for (auto& np : named_params()) out.push_back(np.tensor);
  return out;
}

void EncoderModel::set_trainable(bool trainable) {
  for (auto& p : params()) {
    Tensor t = p;
    t.set_requires_grad(trainable);
  }
}

EncoderModel EncoderModel::clone() const {
  EncoderModel out;
  out.cfg = cfg;
  out.patch_w = patch_w.clone();
  out.patch_b = patch_b.clone();
  out.cls = cls.clone();
  out.pos = pos.clone();
  out.final_ln_g = final_ln_g.clone();
  out.final_ln_b = final_ln_b.clone();
  for (const auto& blk : blocks)
    out.blocks.push_back({blk.ln1_g.clone(), blk.ln1_b.clone(), blk.qkv_w.clone(),
                          blk.qkv_b.clone(), blk.proj_w.clone(), blk.proj_b.clone(),
                          blk.ln2_g.clone(), blk.ln2_b.clone(), blk.mlp_in_w.clone(),
                          blk.mlp_in_b.clone(), blk.mlp_out_w.clone(), blk.mlp_out_b.clone()});
  return out;
}

std::uint64_t EncoderModel::weight_hash() const { return params_hash(params()); }

std::uint64_t params_hash(const std::vector<Tensor>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params) {
    const auto v = p.values();
    h = fnv1a(v.data(), v.size() * sizeof(double), h);
  }
  return h;
}

Tensor Projector::forward(const Tensor& features) const {
  return linear(relu(linear(features, w1, b1)), w2, b2);
}

std::vector<NamedParam> Projector::named_params() const {
  return {{"proj.w1", w1}, {"proj.b1", b1}, {"proj.w2", w2}, {"proj.b2", b2}};
}

std::vector<Tensor> Projector::params() const { return {w1, b1, w2, b2}; }

void Projector::set_trainable(bool trainable) {
  for (auto& p : params()) {
    Tensor t = p;
    t.set_requires_grad(trainable);
  }
}

Projector Projector::clone() const {
  return {cfg, w1.clone(), b1.clone(), w2.clone(), b2.clone()};
}

namespace {

// Truncated normal: resample anything outside +-2 sigma.
Tensor trunc_normal(std::vector<std::size_t> shape, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) {
    double x = dist(rng);
    while (std::abs(x) > 2.0 * sigma) x = dist(rng);
    v = x;
  }
  return t;
}

}  // namespace

InitBundle init_weights(const EncoderConfig& enc_cfg, const ProjectorConfig& proj_cfg,
                        std::uint64_t seed) {
  enc_cfg.validate();
  if (proj_cfg.in_dim != enc_cfg.embed_dim)
    throw ConfigError("projector in_dim " + std::to_string(proj_cfg.in_dim) +
                      " does not match embed_dim " + std::to_string(enc_cfg.embed_dim));
  constexpr double kSigma = 0.02;
  std::mt19937_64 rng(seed);
  const std::size_t d = enc_cfg.embed_dim;

  EncoderModel enc;
  enc.cfg = enc_cfg;
  enc.patch_w = trunc_normal({enc_cfg.patch_dim(), d}, kSigma, rng);
  enc.patch_b = Tensor::zeros({d});
  // The class token starts at zero and the positional table starts with zero
  // column means: any shared nonzero component here becomes an identical
  // offset on every image's features, which swamps cosine geometry and parks
  // the batch feature center near norm 1 before training even starts. Zeroing
  // the shared part keeps per-token spatial information while letting image
  // content dominate the readout from step one.
  enc.cls = Tensor::zeros({1, d});
  enc.pos = trunc_normal({enc_cfg.tokens(), d}, kSigma, rng);
  {
    auto pv = enc.pos.values();
    const std::size_t tokens = enc_cfg.tokens();
    for (std::size_t j = 0; j < d; ++j) {
      double m = 0.0;
      for (std::size_t t = 0; t < tokens; ++t) m += pv[t * d + j];
      m /= static_cast<double>(tokens);
      for (std::size_t t = 0; t < tokens; ++t) pv[t * d + j] -= m;
    }
  }
  for (std::size_t l = 0; l < enc_cfg.depth; ++l) {
    EncoderBlock blk;
    blk.ln1_g = Tensor::full({d}, 1.0);
    blk.ln1_b = Tensor::zeros({d});
    blk.qkv_w = trunc_normal({d, 3 * d}, kSigma, rng);
    blk.qkv_b = Tensor::zeros({3 * d});
    blk.proj_w = trunc_normal({d, d}, kSigma, rng);
    blk.proj_b = Tensor::zeros({d});
    blk.ln2_g = Tensor::full({d}, 1.0);
    blk.ln2_b = Tensor::zeros({d});
    blk.mlp_in_w = trunc_normal({d, enc_cfg.mlp_ratio * d}, kSigma, rng);
    blk.mlp_in_b = Tensor::zeros({enc_cfg.mlp_ratio * d});
    blk.mlp_out_w = trunc_normal({enc_cfg.mlp_ratio * d, d}, kSigma, rng);
    blk.mlp_out_b = Tensor::zeros({d});
    enc.blocks.push_back(std::move(blk));
  }
  enc.final_ln_g = Tensor::full({d}, 1.0);
  enc.final_ln_b = Tensor::zeros({d});

  Projector proj;
  proj.cfg = proj_cfg;
  proj.w1 = trunc_normal({proj_cfg.in_dim, proj_cfg.hidden}, kSigma, rng);
  proj.b1 = Tensor::zeros({proj_cfg.hidden});
  proj.w2 = trunc_normal({proj_cfg.hidden, proj_cfg.out_dim}, kSigma, rng);
  proj.b2 = Tensor::zeros({proj_cfg.out_dim});

  return {std::move(enc), std::move(proj)};
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (params_.empty()) throw ContractError("adam: empty parameter list");
  for (const auto& p : params_) {
    if (!p.requires_grad())
      throw ContractError("adam: parameter without requires_grad handed to the optimizer");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double eta) {
  if (params_.empty()) throw ContractError("adam_step: optimizer holds no parameters");
  if (eta < 0.0) throw ContractError("adam_step: negative learning rate " + std::to_string(eta));
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad())
      throw ContractError("adam_step: missing gradient for parameter " + std::to_string(i));
    const auto g = p.grad();
    auto w = p.values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      if (eta != 0.0) {
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= eta * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }
}

void Adam::zero_grads() {
  for (auto& p : params_) p.zero_grad();
}

std::uint64_t Adam::state_hash() const {
  std::uint64_t h = fnv1a(&t_, sizeof t_);
  for (std::size_t i = 0; i < m_.size(); ++i) {
    h = fnv1a(m_[i].data(), m_[i].size() * sizeof(double), h);
    h = fnv1a(v_[i].data(), v_[i].size() * sizeof(double), h);
  }
  return h;
}

}  // namespace upstep
