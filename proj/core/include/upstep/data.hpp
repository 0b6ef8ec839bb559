#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "upstep/tensor.hpp"

namespace upstep {

enum class Domain { Source, Target };
std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);  // ConfigError on unknown

struct DatasetSpec {
  std::size_t classes = 10;
  std::size_t per_class = 500;
  Domain domain = Domain::Source;
  std::uint64_t seed = 1;
  std::size_t image_size = 32;
};

struct Dataset {
  Tensor images;  // [N, 3, H, W], values in [0, 1], exactly f32-representable
  std::vector<std::int64_t> labels;
  std::size_t classes = 0;
  Domain domain = Domain::Source;
  std::uint64_t seed = 0;

  std::size_t size() const { return images.shape()[0]; }
  std::size_t image_size() const { return images.shape()[2]; }
};

// Striped-texture classes: each class id fixes an orientation, spatial
// frequency and fg/bg color pair (a function of class and domain only, never
// the seed). The target domain applies one global shift — hue rotation,
// frequency offset and fg/bg swap — to every class. Per-image phase, jitter
// and noise come from the seed.
Dataset gen_synthetic(const DatasetSpec& spec);

// Directory layout: manifest.json + images.uptn (f32) + labels.uptn (f32).
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);  // FormatError on mismatch

struct AugmentConfig {
  double crop_lo = 0.6;   // crop side fraction lower bound
  double crop_hi = 1.0;
  double flip_prob = 0.5;
  double jitter = 0.2;       // brightness/contrast amplitude
  double noise_sigma = 0.02;

  static AugmentConfig identity() { return {1.0, 1.0, 0.0, 0.0, 0.0}; }
  void validate() const;  // ConfigError on out-of-range fields
};

struct ViewPair {
  Tensor a, b;  // independently augmented copies, [B, 3, H, W]
};

// Two stochastic views of each image: random resized crop (bilinear), hflip,
// brightness/contrast jitter, additive Gaussian noise, clamp to [0, 1]. The
// identity config returns bit-identical copies of the input.
ViewPair two_views(const Tensor& images, const AugmentConfig& cfg, std::mt19937_64& rng);

// Label-free window onto a dataset; the only thing training code can reach.
class UnlabeledView {
 public:
  explicit UnlabeledView(const Dataset& ds)
      : images_(&ds.images), n_(ds.size()), image_size_(ds.image_size()) {}

  std::size_t size() const { return n_; }
  std::size_t image_size() const { return image_size_; }
  Tensor gather(std::span<const std::size_t> indices) const;  // [n, 3, H, W]

 private:
  const Tensor* images_;
  std::size_t n_;
  std::size_t image_size_;
};

// Epoch-shuffled fixed-size batches (last partial batch dropped). batch(e, i)
// is deterministic in (seed, e, i).
class UnlabeledBatchStream {
 public:
  UnlabeledBatchStream(UnlabeledView view, std::size_t batch_size, std::uint64_t seed);

  std::size_t batches_per_epoch() const { return view_.size() / batch_size_; }
  std::size_t batch_size() const { return batch_size_; }
  Tensor batch(std::size_t epoch, std::size_t index) const;

 private:
  UnlabeledView view_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  mutable std::vector<std::size_t> perm_;
  mutable std::size_t perm_epoch_ = static_cast<std::size_t>(-1);
};

}  // namespace upstep
