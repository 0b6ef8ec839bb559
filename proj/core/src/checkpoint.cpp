#include "upstep/checkpoint.hpp"

#include <fstream>
#include <map>
#include <random>
#include <set>

#include "upstep/tensor_io.hpp"

#include "json.hpp"

namespace upstep {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string file_for(const std::string& param_name) {
  std::string f = param_name;
  for (char& c : f)
    if (c == '.') c = '_';
  return f + ".uptn";
}

std::string readout_str(Readout r) { return r == Readout::Cls ? "cls" : "mean"; }

Readout readout_from(const std::string& s) {
  if (s == "cls") return Readout::Cls;
  if (s == "mean") return Readout::MeanPool;
  throw FormatError("unknown readout '" + s + "' (expected cls|mean)");
}

[[noreturn]] void fail(const fs::path& where, const std::string& what) {
  throw FormatError(where.string() + ": " + what);
}

// All persisted tensors of a checkpoint, in manifest order.
std::vector<NamedParam> persisted_tensors(const Checkpoint& ckpt) {
  std::vector<NamedParam> out;
  if (ckpt.kind == "pretrain") {
    for (auto& np : ckpt.encoder.named_params()) out.push_back(np);
  }
  for (auto& np : ckpt.projector.named_params()) out.push_back(np);
  if (ckpt.adapters)
    for (auto& np : ckpt.adapters->named_params()) out.push_back(np);
  if (ckpt.prototypes) out.push_back({"prototypes.c", ckpt.prototypes->c});
  return out;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  if (ckpt.kind != "pretrain" && ckpt.kind != "upstep")
    throw ContractError("save_checkpoint: kind must be 'pretrain' or 'upstep', got '" +
                        ckpt.kind + "'");
  if (ckpt.kind == "upstep" && ckpt.base_reference.empty())
    throw ContractError("save_checkpoint: upstep checkpoint needs a base_reference");

  // Stage everything in a sibling temp directory, then rename into place so a
  // crash can't leave a half-written checkpoint behind.
  std::random_device rd;
  const fs::path tmp = dir.parent_path().empty()
                           ? fs::path(dir.string() + ".tmp" + std::to_string(rd()))
                           : dir.parent_path() / (dir.filename().string() + ".tmp" +
                                                  std::to_string(rd()));
  fs::create_directories(tmp);

  ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["kind"] = ckpt.kind;
  manifest["seed"] = ckpt.seed;
  manifest["step"] = ckpt.step;
  manifest["encoder_config"] = {
      {"image_size", ckpt.encoder.cfg.image_size}, {"patch_size", ckpt.encoder.cfg.patch_size},
      {"embed_dim", ckpt.encoder.cfg.embed_dim},   {"depth", ckpt.encoder.cfg.depth},
      {"heads", ckpt.encoder.cfg.heads},           {"mlp_ratio", ckpt.encoder.cfg.mlp_ratio},
      {"readout", readout_str(ckpt.encoder.cfg.readout)}, {"ln_eps", ckpt.encoder.cfg.ln_eps}};
  manifest["projector_config"] = {{"in_dim", ckpt.projector.cfg.in_dim},
                                  {"hidden", ckpt.projector.cfg.hidden},
                                  {"out_dim", ckpt.projector.cfg.out_dim}};
  if (ckpt.adapters) {
    manifest["adapter_config"] = {{"variant", to_string(ckpt.adapters->variant())},
                                  {"policy", to_string(ckpt.adapters->policy())},
                                  {"rank", ckpt.adapters->rank()},
                                  {"alpha", ckpt.adapters->alpha()},
                                  {"seed", ckpt.adapters->seed()}};
  }
  if (ckpt.prototypes)
    manifest["prototypes"] = {{"k", ckpt.prototypes->k()}, {"dim", ckpt.prototypes->dim()}};
  if (!ckpt.base_reference.empty()) manifest["base_reference"] = ckpt.base_reference;

  ordered_json tensors = ordered_json::array();
  for (const auto& np : persisted_tensors(ckpt)) {
    const std::string file = file_for(np.name);
    tensors.push_back({{"name", np.name}, {"file", file}, {"shape", np.tensor.shape()}});
    save_tensor(tmp / file, np.tensor, Dtype::F64);
  }
  manifest["tensors"] = std::move(tensors);

  {
    std::ofstream mf(tmp / "manifest.json");
    if (!mf) fail(tmp / "manifest.json", "cannot open for writing");
    mf << manifest.dump(2) << '\n';
  }

  if (fs::exists(dir)) fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) fail(mpath, "cannot open (not a checkpoint directory?)");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    fail(mpath, std::string("invalid JSON: ") + e.what());
  }
  auto need = [&](const char* key) -> const json& {
    if (!manifest.contains(key)) fail(mpath, std::string("missing key '") + key + "'");
    return manifest.at(key);
  };
  if (need("format_version").get<int>() != 1) fail(mpath, "unsupported format_version");

  Checkpoint ckpt;
  ckpt.kind = need("kind").get<std::string>();
  ckpt.seed = need("seed").get<std::uint64_t>();
  ckpt.step = need("step").get<std::uint64_t>();

  const json& ec = need("encoder_config");
  EncoderConfig enc_cfg;
  enc_cfg.image_size = ec.at("image_size").get<std::size_t>();
  enc_cfg.patch_size = ec.at("patch_size").get<std::size_t>();
  enc_cfg.embed_dim = ec.at("embed_dim").get<std::size_t>();
  enc_cfg.depth = ec.at("depth").get<std::size_t>();
  enc_cfg.heads = ec.at("heads").get<std::size_t>();
  enc_cfg.mlp_ratio = ec.at("mlp_ratio").get<std::size_t>();
  enc_cfg.readout = readout_from(ec.at("readout").get<std::string>());
  enc_cfg.ln_eps = ec.at("ln_eps").get<double>();

  const json& pc = need("projector_config");
  ProjectorConfig proj_cfg{pc.at("in_dim").get<std::size_t>(), pc.at("hidden").get<std::size_t>(),
                           pc.at("out_dim").get<std::size_t>()};

  if (ckpt.kind == "upstep") {
    // Adapter checkpoints carry no encoder weights; chase the base reference.
    ckpt.base_reference = need("base_reference").get<std::string>();
    fs::path base = ckpt.base_reference;
    if (!fs::exists(base / "manifest.json") && base.is_relative())
      base = dir.parent_path() / base;
    if (!fs::exists(base / "manifest.json"))
      fail(mpath, "base checkpoint reference '" + ckpt.base_reference + "' not found");
    Checkpoint base_ckpt = load_checkpoint(base);
    ckpt.encoder = std::move(base_ckpt.encoder);
  } else if (ckpt.kind == "pretrain") {
    InitBundle init = init_weights(enc_cfg, proj_cfg, 0);  // values overwritten below
    ckpt.encoder = std::move(init.encoder);
  } else {
    fail(mpath, "unknown checkpoint kind '" + ckpt.kind + "'");
  }

  // Fresh projector skeleton; values come from the tensor files.
  ckpt.projector.cfg = proj_cfg;
  ckpt.projector.w1 = Tensor::zeros({proj_cfg.in_dim, proj_cfg.hidden});
  ckpt.projector.b1 = Tensor::zeros({proj_cfg.hidden});
  ckpt.projector.w2 = Tensor::zeros({proj_cfg.hidden, proj_cfg.out_dim});
  ckpt.projector.b2 = Tensor::zeros({proj_cfg.out_dim});

  if (manifest.contains("adapter_config")) {
    const json& ac = manifest.at("adapter_config");
    ckpt.adapters = AdapterSet::make(
        adapter_variant_from_string(ac.at("variant").get<std::string>()),
        adapter_policy_from_string(ac.at("policy").get<std::string>()),
        ac.at("rank").get<std::size_t>(), ac.at("alpha").get<double>(), ckpt.encoder,
        ac.at("seed").get<std::uint64_t>());
  }
  if (manifest.contains("prototypes")) {
    const json& pr = manifest.at("prototypes");
    PrototypeBank bank;
    bank.c = Tensor::zeros({pr.at("k").get<std::size_t>(), pr.at("dim").get<std::size_t>()});
    bank.c_t = Tensor::zeros({pr.at("dim").get<std::size_t>(), pr.at("k").get<std::size_t>()});
    ckpt.prototypes = std::move(bank);
  }

  // Name -> slot map over everything this checkpoint owns.
  std::map<std::string, Tensor> slots;
  if (ckpt.kind == "pretrain")
    for (auto& np : ckpt.encoder.named_params()) slots.emplace(np.name, np.tensor);
  for (auto& np : ckpt.projector.named_params()) slots.emplace(np.name, np.tensor);
  if (ckpt.adapters)
    for (auto& np : ckpt.adapters->named_params()) slots.emplace(np.name, np.tensor);
  if (ckpt.prototypes) slots.emplace("prototypes.c", ckpt.prototypes->c);

  std::set<std::string> filled;
  for (const auto& entry : need("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string file = entry.at("file").get<std::string>();
    auto it = slots.find(name);
    if (it == slots.end()) fail(mpath, "tensor '" + name + "' does not belong to this model");
    Tensor loaded = load_tensor(dir / file);
    if (loaded.shape() != it->second.shape())
      fail(dir / file, "shape " + shape_str(loaded.shape()) + " for '" + name + "', expected " +
                           shape_str(it->second.shape()));
    auto dst = it->second.values();
    auto src = loaded.values();
    std::copy(src.begin(), src.end(), dst.begin());
    filled.insert(name);
  }
  if (filled.size() != slots.size())
    fail(mpath, "manifest lists " + std::to_string(filled.size()) + " tensors, model needs " +
                    std::to_string(slots.size()));

  if (ckpt.prototypes) {
    // Rebuild the transposed scoring copy from the loaded bank.
    const std::size_t k = ckpt.prototypes->k(), d = ckpt.prototypes->dim();
    auto cv = ckpt.prototypes->c.values();
    auto tv = ckpt.prototypes->c_t.values();
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < d; ++j) tv[j * k + i] = cv[i * d + j];
  }

  // Checkpoints load inert; callers opt parameters back into training.
  for (auto& [name, t] : slots) {
    Tensor tt = t;
    if (tt.is_leaf()) tt.set_requires_grad(false);
  }
  ckpt.source_dir = fs::weakly_canonical(dir).string();
  return ckpt;
}

}  // namespace upstep
