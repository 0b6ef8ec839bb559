#include <filesystem>
#include <fstream>

#include <upstep/checkpoint.hpp>
#include <upstep/tensor_io.hpp>

#include "doctest.h"

using namespace upstep;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("upstep_ckpt_") + tag);
  fs::remove_all(p);
  return p;
}

EncoderConfig micro_cfg() {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.embed_dim = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  return cfg;
}

Checkpoint make_pretrain(std::uint64_t seed) {
  ProjectorConfig pc{16, 32, 8};
  InitBundle init = init_weights(micro_cfg(), pc, seed);
  Checkpoint ckpt;
  ckpt.kind = "pretrain";
  ckpt.seed = seed;
  ckpt.step = 17;
  ckpt.encoder = std::move(init.encoder);
  ckpt.projector = std::move(init.projector);
  ckpt.prototypes = make_prototypes(12, 8, seed + 1);
  return ckpt;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto av = std::as_const(a).values(), bv = std::as_const(b).values();
  for (std::size_t i = 0; i < av.size(); ++i)
    if (av[i] != bv[i]) return false;
  return true;
}

}  // namespace

TEST_SUITE_BEGIN("checkpoint");

TEST_CASE("pretrain checkpoint round trips every weight bit-exactly") {
  Checkpoint ckpt = make_pretrain(7);
  const std::uint64_t enc_hash = ckpt.encoder.weight_hash();

  fs::path dir = temp_dir("pretrain_rt");
  save_checkpoint(dir, ckpt);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "patch_w.uptn"));
  CHECK(fs::exists(dir / "proj_w1.uptn"));
  CHECK(fs::exists(dir / "prototypes_c.uptn"));

  Checkpoint back = load_checkpoint(dir);
  CHECK(back.kind == "pretrain");
  CHECK(back.seed == 7);
  CHECK(back.step == 17);
  CHECK(back.encoder.weight_hash() == enc_hash);
  CHECK(back.encoder.cfg.depth == 2);
  CHECK(back.encoder.cfg.embed_dim == 16);
  REQUIRE(back.prototypes.has_value());
  CHECK(back.prototypes->k() == 12);
  CHECK(tensors_equal(back.prototypes->c, ckpt.prototypes->c));
  // c_t is rebuilt from c on load, not stored
  CHECK(tensors_equal(back.prototypes->c_t, transpose(ckpt.prototypes->c)));
  CHECK_FALSE(back.adapters.has_value());
  CHECK(back.base_reference.empty());
  CHECK(back.source_dir == fs::weakly_canonical(dir).string());

  auto pp = back.projector.named_params();
  auto op = ckpt.projector.named_params();
  REQUIRE(pp.size() == op.size());
  for (std::size_t i = 0; i < pp.size(); ++i) {
    CHECK(pp[i].name == op[i].name);
    CHECK(tensors_equal(pp[i].tensor, op[i].tensor));
  }
  fs::remove_all(dir);
}

TEST_CASE("loaded tensors come back inert: leaves without grad mode") {
  Checkpoint ckpt = make_pretrain(3);
  ckpt.encoder.set_trainable(true);
  fs::path dir = temp_dir("inert");
  save_checkpoint(dir, ckpt);
  Checkpoint back = load_checkpoint(dir);
  for (const auto& np : back.encoder.named_params()) {
    CHECK(np.tensor.is_leaf());
    CHECK_FALSE(np.tensor.requires_grad());
  }
  fs::remove_all(dir);
}

TEST_CASE("upstep checkpoint stores deltas only and chases its base on load") {
  fs::path root = temp_dir("upstep_rt");
  fs::path base_dir = root / "base";
  Checkpoint base = make_pretrain(11);
  save_checkpoint(base_dir, base);

  AdapterSet adapters =
      AdapterSet::make(AdapterVariant::Lora, AdapterPolicy::QkvProj, 4, 0.8, base.encoder, 21);
  // perturb the trainables so the round trip carries real content
  for (auto& np : adapters.named_params()) {
    auto v = np.tensor.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += 0.001 * static_cast<double>(i % 7);
  }

  Checkpoint up;
  up.kind = "upstep";
  up.seed = 5;
  up.step = 99;
  up.encoder = base.encoder;  // shared weights; not persisted for upstep kind
  up.projector = base.projector.clone();
  up.prototypes = base.prototypes;
  up.adapters = std::move(adapters);
  up.base_reference = "base";  // relative to the checkpoint's parent directory
  fs::path up_dir = root / "adapted";
  save_checkpoint(up_dir, up);

  // encoder payload must NOT be duplicated into the upstep directory
  CHECK_FALSE(fs::exists(up_dir / "patch_w.uptn"));
  CHECK(fs::exists(up_dir / "proj_w1.uptn"));

  Checkpoint back = load_checkpoint(up_dir);
  CHECK(back.kind == "upstep");
  CHECK(back.base_reference == "base");
  CHECK(back.encoder.weight_hash() == base.encoder.weight_hash());
  REQUIRE(back.adapters.has_value());
  auto on = up.adapters->named_params();
  auto bn = back.adapters->named_params();
  REQUIRE(on.size() == bn.size());
  for (std::size_t i = 0; i < on.size(); ++i) {
    CHECK(on[i].name == bn[i].name);
    CHECK(tensors_equal(on[i].tensor, bn[i].tensor));
  }
  fs::remove_all(root);
}

TEST_CASE("vera frozen pool regenerates from the recorded seed") {
  fs::path root = temp_dir("vera_rt");
  Checkpoint base = make_pretrain(31);
  save_checkpoint(root / "base", base);

  AdapterSet adapters =
      AdapterSet::make(AdapterVariant::Vera, AdapterPolicy::QkvProjMlp, 3, 1.0, base.encoder, 77);

  Checkpoint up;
  up.kind = "upstep";
  up.seed = 1;
  up.step = 1;
  up.encoder = base.encoder;
  up.projector = base.projector.clone();
  up.prototypes = base.prototypes;
  up.adapters = adapters.clone(false);
  up.base_reference = "base";
  save_checkpoint(root / "adapted", up);

  Checkpoint back = load_checkpoint(root / "adapted");
  REQUIRE(back.adapters.has_value());
  // frozen shared (a, b) never hit the disk; they come back from the seed
  const std::pair<std::size_t, AdapterSite> probes[] = {
      {0, AdapterSite::Qkv}, {1, AdapterSite::Qkv}, {0, AdapterSite::MlpIn}};
  for (const auto& [layer, site] : probes) {
    const AdapterDelta* orig = adapters.find(layer, site);
    const AdapterDelta* got = back.adapters->find(layer, site);
    REQUIRE(orig != nullptr);
    REQUIRE(got != nullptr);
    CHECK(tensors_equal(orig->a, got->a));
    CHECK(tensors_equal(orig->b, got->b));
    CHECK(tensors_equal(orig->d_vec, got->d_vec));
    CHECK(tensors_equal(orig->b_vec, got->b_vec));
  }

  // and the delta path agrees end to end
  Tensor x = Tensor::zeros({2, 16});
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) xv[i] = 0.05 * static_cast<double>(i + 1);
  const AdapterDelta* s1 = adapters.find(0, AdapterSite::Qkv);
  const AdapterDelta* s2 = back.adapters->find(0, AdapterSite::Qkv);
  CHECK(tensors_equal(delta_forward(x, *s1), delta_forward(x, *s2)));
  fs::remove_all(root);
}

TEST_CASE("save_checkpoint rejects inconsistent inputs") {
  Checkpoint ckpt = make_pretrain(2);
  fs::path dir = temp_dir("reject");

  SUBCASE("unknown kind") {
    ckpt.kind = "finetune";
    CHECK_THROWS_AS(save_checkpoint(dir, ckpt), ContractError);
  }
  SUBCASE("upstep without base reference") {
    ckpt.kind = "upstep";
    ckpt.base_reference.clear();
    CHECK_THROWS_AS(save_checkpoint(dir, ckpt), ContractError);
  }
  fs::remove_all(dir);
}

TEST_CASE("load_checkpoint surfaces corruption as FormatError") {
  Checkpoint ckpt = make_pretrain(13);
  fs::path dir = temp_dir("corrupt");
  save_checkpoint(dir, ckpt);

  SUBCASE("missing directory") {
    CHECK_THROWS_AS(load_checkpoint(dir / "nowhere"), FormatError);
  }
  SUBCASE("manifest is not json") {
    std::ofstream(dir / "manifest.json") << "not json {";
    CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  }
  SUBCASE("missing tensor file") {
    fs::remove(dir / "patch_w.uptn");
    CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  }
  SUBCASE("tensor shape drift") {
    save_tensor(dir / "patch_w.uptn", Tensor::zeros({3, 3}));
    CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  }
  SUBCASE("truncated tensor payload") {
    const fs::path f = dir / "cls.uptn";
    const auto full = fs::file_size(f);
    fs::resize_file(f, full - 8);
    CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  }
  SUBCASE("dangling base reference") {
    Checkpoint up;
    up.kind = "upstep";
    up.seed = 1;
    up.step = 1;
    InitBundle init = init_weights(micro_cfg(), ProjectorConfig{16, 32, 8}, 4);
    up.encoder = std::move(init.encoder);
    up.projector = std::move(init.projector);
    up.adapters =
        AdapterSet::make(AdapterVariant::Lora, AdapterPolicy::Qkv, 2, 1.0, up.encoder, 9);
    up.base_reference = "missing_base";
    fs::path up_dir = dir / "dangling";
    save_checkpoint(up_dir, up);
    CHECK_THROWS_AS(load_checkpoint(up_dir), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("overwriting a checkpoint fully replaces the old content") {
  Checkpoint ckpt = make_pretrain(19);
  fs::path dir = temp_dir("atomic");
  save_checkpoint(dir, ckpt);
  const auto count_before = std::distance(fs::directory_iterator(dir), fs::directory_iterator{});

  ckpt.step = 18;
  save_checkpoint(dir, ckpt);
  const auto count_after = std::distance(fs::directory_iterator(dir), fs::directory_iterator{});
  CHECK(count_before == count_after);
  CHECK(load_checkpoint(dir).step == 18);
  fs::remove_all(dir);
}

TEST_SUITE_END();
