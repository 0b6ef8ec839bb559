#include "upstep/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "upstep/common.hpp"
#include "upstep/tensor_io.hpp"

#include "json.hpp"

namespace upstep {

std::string to_string(Domain d) { return d == Domain::Source ? "source" : "target"; }

Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::Source;
  if (s == "target") return Domain::Target;
  throw ConfigError("unknown domain '" + s + "' (expected source|target)");
}

namespace {

// Class identity is pure stripe geometry: orientation and frequency are
// functions of the class id alone. Colors are a per-image nuisance drawn from
// a domain-specific palette, so nearest-neighbor lookup on raw pixel
// statistics stays near chance and only a geometry-sensitive representation
// separates the classes. The target domain shifts every image the same way:
// rotated palette hues, a global frequency offset, swapped fg/bg lightness
// roles. Orientation spacing stays below pi so no two classes collide, and
// frequency breaks the hflip ambiguity between theta and pi-theta.
struct ClassPattern {
  double theta, freq;
};

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1)      { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else             { r = c; b = x; }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

ClassPattern class_pattern(std::size_t cls, std::size_t classes, Domain domain) {
  ClassPattern p;
  const double frac = static_cast<double>(cls) / static_cast<double>(classes);
  p.theta = std::numbers::pi * frac;
  p.freq = 2.0 + 0.7 * static_cast<double>(cls);
  if (domain == Domain::Target) p.freq += 1.1;  // global frequency offset
  return p;
}

// Draws the per-image fg/bg colors. The source palette occupies a warm hue
// arc; the target palette is that arc rotated by 0.33 with the foreground and
// background lightness roles swapped (bright stripes on dark ground becomes
// dark stripes on bright ground).
struct ImageColors {
  double fg[3], bg[3];
};

ImageColors draw_colors(std::mt19937_64& rng, Domain domain) {
  std::uniform_real_distribution<double> uhue(0.0, 0.45);
  double fg_hue = uhue(rng);
  double fg_sat = 0.85, fg_val = 0.95;
  double bg_sat = 0.60, bg_val = 0.40;
  if (domain == Domain::Target) {
    fg_hue = std::fmod(fg_hue + 0.33, 1.0);  // global hue rotation
    std::swap(fg_sat, bg_sat);               // background swap
    std::swap(fg_val, bg_val);
  }
  const double bg_hue = std::fmod(fg_hue + 0.45, 1.0);
  ImageColors c;
  hsv_to_rgb(fg_hue, fg_sat, fg_val, c.fg);
  hsv_to_rgb(bg_hue, bg_sat, bg_val, c.bg);
  return c;
}

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Snap to the nearest f32 so the f32 on-disk round trip is exact.
inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

Dataset gen_synthetic(const DatasetSpec& spec) {
  if (spec.classes < 2) throw ConfigError("gen_synthetic: need at least 2 classes");
  if (spec.per_class == 0) throw ConfigError("gen_synthetic: per_class must be positive");
  if (spec.image_size < 8) throw ConfigError("gen_synthetic: image_size must be at least 8");

  const std::size_t s = spec.image_size;
  const std::size_t n = spec.classes * spec.per_class;
  Dataset ds;
  ds.images = Tensor::zeros({n, 3, s, s});
  ds.labels.resize(n);
  ds.classes = spec.classes;
  ds.domain = spec.domain;
  ds.seed = spec.seed;

  std::mt19937_64 rng(derive_seed(spec.seed, "gen", spec.domain == Domain::Target ? 1 : 0));
  std::uniform_real_distribution<double> uphase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> utheta(-0.06, 0.06);
  std::uniform_real_distribution<double> ufreq(-0.18, 0.18);
  std::uniform_real_distribution<double> ubright(0.88, 1.12);
  std::normal_distribution<double> unoise(0.0, 0.035);

  auto img = ds.images.values();
  std::size_t idx = 0;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const ClassPattern pat = class_pattern(c, spec.classes, spec.domain);
    for (std::size_t i = 0; i < spec.per_class; ++i, ++idx) {
      ds.labels[idx] = static_cast<std::int64_t>(c);
      const double phase = uphase(rng);
      const double theta = pat.theta + utheta(rng);
      const double freq = pat.freq + ufreq(rng);
      const double bright = ubright(rng);
      const ImageColors colors = draw_colors(rng, spec.domain);
      const double ct = std::cos(theta), st = std::sin(theta);
      double* base = img.data() + idx * 3 * s * s;
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) /
                           static_cast<double>(s);
          const double t =
              0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * freq * u + phase));
          for (std::size_t ch = 0; ch < 3; ++ch) {
            double v = t * colors.fg[ch] + (1.0 - t) * colors.bg[ch];
            v = v * bright + unoise(rng);
            base[ch * s * s + y * s + x] = quantize_f32(clamp01(v));
          }
        }
      }
    }
  }
  return ds;
}

// ---- persistence --------------------------------------------------------

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest{
      {"format_version", 1},
      {"n", ds.size()},
      {"classes", ds.classes},
      {"height", ds.image_size()},
      {"width", ds.image_size()},
      {"domain_tag", to_string(ds.domain)},
      {"seed", ds.seed},
  };
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw FormatError((dir / "manifest.json").string() + ": cannot open for writing");
  mf << manifest.dump(2) << '\n';
  save_tensor(dir / "images.uptn", ds.images, Dtype::F32);
  Tensor labels = Tensor::zeros({ds.labels.size()});
  auto lv = labels.values();
  for (std::size_t i = 0; i < ds.labels.size(); ++i) lv[i] = static_cast<double>(ds.labels[i]);
  save_tensor(dir / "labels.uptn", labels, Dtype::F32);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path mpath = dir / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw FormatError(mpath.string() + ": cannot open (not a dataset directory?)");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": invalid JSON: " + e.what());
  }
  auto need = [&](const char* key) -> const nlohmann::json& {
    if (!manifest.contains(key))
      throw FormatError(mpath.string() + ": missing key '" + key + "'");
    return manifest.at(key);
  };
  if (need("format_version").get<int>() != 1)
    throw FormatError(mpath.string() + ": unsupported format_version");

  Dataset ds;
  ds.classes = need("classes").get<std::size_t>();
  ds.domain = domain_from_string(need("domain_tag").get<std::string>());
  ds.seed = need("seed").get<std::uint64_t>();
  ds.images = load_tensor(dir / "images.uptn");
  const std::size_t count = need("n").get<std::size_t>();
  const std::size_t height = need("height").get<std::size_t>();
  const std::size_t width = need("width").get<std::size_t>();
  const auto& is = ds.images.shape();
  if (is.size() != 4 || is[0] != count || is[1] != 3 || is[2] != height || is[3] != width)
    throw FormatError((dir / "images.uptn").string() + ": shape " + shape_str(is) +
                      " disagrees with manifest [" + std::to_string(count) + " x 3 x " +
                      std::to_string(height) + " x " + std::to_string(width) + "]");

  Tensor labels = load_tensor(dir / "labels.uptn");
  if (labels.ndim() != 1 || labels.numel() != count)
    throw FormatError((dir / "labels.uptn").string() + ": expected [" + std::to_string(count) +
                      "] labels, got " + shape_str(labels.shape()));
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double v = labels.values()[i];
    if (v != std::floor(v) || v < 0.0 || v >= static_cast<double>(ds.classes))
      throw FormatError((dir / "labels.uptn").string() + ": label " + std::to_string(v) +
                        " at index " + std::to_string(i) + " outside 0.." +
                        std::to_string(ds.classes - 1));
    ds.labels[i] = static_cast<std::int64_t>(v);
  }
  return ds;
}

// ---- augmentation --------------------------------------------------------

void AugmentConfig::validate() const {
  if (!(crop_lo > 0.0) || crop_lo > crop_hi || crop_hi > 1.0)
    throw ConfigError("augment: crop range [" + std::to_string(crop_lo) + ", " +
                      std::to_string(crop_hi) + "] must satisfy 0 < lo <= hi <= 1");
  if (flip_prob < 0.0 || flip_prob > 1.0)
    throw ConfigError("augment: flip_prob must lie in [0, 1]");
  if (jitter < 0.0 || jitter >= 1.0) throw ConfigError("augment: jitter must lie in [0, 1)");
  if (noise_sigma < 0.0) throw ConfigError("augment: noise_sigma must be non-negative");
}

namespace {

// One augmented copy of a single [3, s, s] image into dst.
void augment_one(const double* src, double* dst, std::size_t s, const AugmentConfig& cfg,
                 std::mt19937_64& rng) {
  // Crop window (side fraction). A full-size window short-circuits to a copy
  // so the identity config is bit-exact.
  std::size_t cs = s;
  if (cfg.crop_lo < 1.0) {
    std::uniform_real_distribution<double> ufrac(cfg.crop_lo, cfg.crop_hi);
    cs = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(ufrac(rng) * static_cast<double>(s))), 4, s);
  }
  std::size_t ox = 0, oy = 0;
  if (cs < s) {
    std::uniform_int_distribution<std::size_t> uoff(0, s - cs);
    ox = uoff(rng);
    oy = uoff(rng);
  }
  bool flip = false;
  if (cfg.flip_prob > 0.0) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    flip = u01(rng) < cfg.flip_prob;
  }

  if (cs == s && !flip) {
    std::copy(src, src + 3 * s * s, dst);
  } else {
    // Bilinear resize of the crop window back to s x s.
    const double ratio = static_cast<double>(cs) / static_cast<double>(s);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double* plane = src + ch * s * s;
      double* out = dst + ch * s * s;
      for (std::size_t y = 0; y < s; ++y) {
        const double sy = (static_cast<double>(y) + 0.5) * ratio - 0.5 + static_cast<double>(oy);
        const double cy = std::clamp(sy, 0.0, static_cast<double>(s - 1));
        const std::size_t y0 = static_cast<std::size_t>(cy);
        const std::size_t y1 = std::min(y0 + 1, s - 1);
        const double fy = cy - static_cast<double>(y0);
        for (std::size_t x = 0; x < s; ++x) {
          const std::size_t xe = flip ? s - 1 - x : x;
          const double sx =
              (static_cast<double>(xe) + 0.5) * ratio - 0.5 + static_cast<double>(ox);
          const double cx = std::clamp(sx, 0.0, static_cast<double>(s - 1));
          const std::size_t x0 = static_cast<std::size_t>(cx);
          const std::size_t x1 = std::min(x0 + 1, s - 1);
          const double fx = cx - static_cast<double>(x0);
          const double top = plane[y0 * s + x0] * (1.0 - fx) + plane[y0 * s + x1] * fx;
          const double bot = plane[y1 * s + x0] * (1.0 - fx) + plane[y1 * s + x1] * fx;
          out[y * s + x] = top * (1.0 - fy) + bot * fy;
        }
      }
    }
  }

  if (cfg.jitter > 0.0) {
    std::uniform_real_distribution<double> uj(-cfg.jitter, cfg.jitter);
    const double bright = 1.0 + uj(rng);
    const double contrast = 1.0 + uj(rng);
    double mean = 0.0;
    for (std::size_t i = 0; i < 3 * s * s; ++i) mean += dst[i];
    mean /= static_cast<double>(3 * s * s);
    for (std::size_t i = 0; i < 3 * s * s; ++i)
      dst[i] = ((dst[i] - mean) * contrast + mean) * bright;
  }
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> un(0.0, cfg.noise_sigma);
    for (std::size_t i = 0; i < 3 * s * s; ++i) dst[i] += un(rng);
  }
  if (cfg.jitter > 0.0 || cfg.noise_sigma > 0.0)
    for (std::size_t i = 0; i < 3 * s * s; ++i) dst[i] = clamp01(dst[i]);
}

}  // namespace

ViewPair two_views(const Tensor& images, const AugmentConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const auto& sh = images.shape();
  if (sh.size() != 4 || sh[1] != 3 || sh[2] != sh[3])
    throw ShapeError("two_views: expected [N, 3, S, S] images, got " + shape_str(sh));
  const std::size_t n = sh[0], s = sh[2];
  ViewPair out{Tensor::zeros(sh), Tensor::zeros(sh)};
  const auto src = images.values();
  auto va = out.a.values();
  auto vb = out.b.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* img = src.data() + i * 3 * s * s;
    augment_one(img, va.data() + i * 3 * s * s, s, cfg, rng);
    augment_one(img, vb.data() + i * 3 * s * s, s, cfg, rng);
  }
  return out;
}

// ---- label-free access -----------------------------------------------------

Tensor UnlabeledView::gather(std::span<const std::size_t> indices) const {
  const auto& sh = images_->shape();
  const std::size_t stride = sh[1] * sh[2] * sh[3];
  Tensor out = Tensor::zeros({indices.size(), sh[1], sh[2], sh[3]});
  auto dst = out.values();
  const auto src = images_->values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n_)
      throw ContractError("gather: index " + std::to_string(indices[i]) + " out of range " +
                          std::to_string(n_));
    std::copy(src.data() + indices[i] * stride, src.data() + (indices[i] + 1) * stride,
              dst.data() + i * stride);
  }
  return out;
}

UnlabeledBatchStream::UnlabeledBatchStream(UnlabeledView view, std::size_t batch_size,
                                           std::uint64_t seed)
    : view_(view), batch_size_(batch_size), seed_(seed) {
  if (batch_size_ == 0) throw ContractError("batch stream: batch_size must be positive");
  if (batch_size_ > view_.size())
    throw ContractError("batch stream: batch_size " + std::to_string(batch_size_) +
                        " exceeds dataset size " + std::to_string(view_.size()));
}

Tensor UnlabeledBatchStream::batch(std::size_t epoch, std::size_t index) const {
  if (index >= batches_per_epoch())
    throw ContractError("batch stream: index " + std::to_string(index) + " out of range " +
                        std::to_string(batches_per_epoch()));
  if (perm_epoch_ != epoch) {
    perm_.resize(view_.size());
    for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
    std::mt19937_64 rng(derive_seed(seed_, "shuffle", epoch));
    std::shuffle(perm_.begin(), perm_.end(), rng);
    perm_epoch_ = epoch;
  }
  return view_.gather(
      std::span<const std::size_t>(perm_.data() + index * batch_size_, batch_size_));
}

}  // namespace upstep
