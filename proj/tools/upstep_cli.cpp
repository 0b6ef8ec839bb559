// upstep — command-line front end.
//
// Subcommands: gen-data, pretrain, upstep, eval, sweep, report.
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
//
// Configs are strict JSON: unknown keys are rejected and every violation is
// reported with its field path. The env var UPSTEP_RUNS_DIR overrides the
// root that relative output directories resolve against.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <upstep/checkpoint.hpp>
#include <upstep/eval.hpp>
#include <upstep/svg_plot.hpp>
#include <upstep/trainer.hpp>

using json = nlohmann::json;
using namespace upstep;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Config-level violation carrying the offending field path.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// strict JSON helpers

json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open config file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw SchemaError(path.string() + ": top level must be a JSON object");
  return j;
}

void reject_unknown_keys(const json& obj, const std::string& path,
                         std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : obj.items()) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end())
      throw SchemaError("unknown key: " + (path.empty() ? key : path + "." + key));
  }
}

std::string joined(const std::string& path, const char* key) {
  return path.empty() ? key : path + "." + key;
}

template <typename T>
T get_field(const json& obj, const std::string& path, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError("wrong type for field: " + joined(path, key));
  }
}

template <typename T>
T require_field(const json& obj, const std::string& path, const char* key) {
  if (!obj.contains(key)) throw SchemaError("missing required field: " + joined(path, key));
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError("wrong type for field: " + joined(path, key));
  }
}

const json& sub_object(const json& obj, const std::string& path, const char* key) {
  static const json empty = json::object();
  if (!obj.contains(key)) return empty;
  const json& s = obj.at(key);
  if (!s.is_object()) throw SchemaError("expected an object at: " + joined(path, key));
  return s;
}

// ---------------------------------------------------------------------------
// config schemas

TrainConfig parse_train_config(const json& t, const std::string& path) {
  reject_unknown_keys(t, path,
                      {"epochs", "batch_size", "eta0", "s_phi", "lambda_cv", "tau", "prototypes",
                       "sinkhorn", "offline_momentum", "symmetric_loss", "normalize_scores",
                       "center_features", "gate_reference", "seed", "toggles", "adapter",
                       "checkpoint_every_epochs", "augment"});
  TrainConfig cfg;
  cfg.epochs = get_field<std::size_t>(t, path, "epochs", cfg.epochs);
  cfg.batch_size = get_field<std::size_t>(t, path, "batch_size", cfg.batch_size);
  cfg.eta0 = get_field<double>(t, path, "eta0", cfg.eta0);
  cfg.s_phi = get_field<double>(t, path, "s_phi", cfg.s_phi);
  cfg.lambda_cv = get_field<double>(t, path, "lambda_cv", cfg.lambda_cv);
  cfg.tau = get_field<double>(t, path, "tau", cfg.tau);
  cfg.prototypes = get_field<std::size_t>(t, path, "prototypes", cfg.prototypes);
  cfg.offline_momentum = get_field<double>(t, path, "offline_momentum", cfg.offline_momentum);
  cfg.symmetric_loss = get_field<bool>(t, path, "symmetric_loss", cfg.symmetric_loss);
  cfg.normalize_scores = get_field<bool>(t, path, "normalize_scores", cfg.normalize_scores);
  cfg.seed = get_field<std::uint64_t>(t, path, "seed", cfg.seed);
  cfg.checkpoint_every_epochs =
      get_field<std::size_t>(t, path, "checkpoint_every_epochs", cfg.checkpoint_every_epochs);

  const json& sk = sub_object(t, path, "sinkhorn");
  reject_unknown_keys(sk, joined(path, "sinkhorn"), {"epsilon", "iterations"});
  cfg.sinkhorn.epsilon = get_field<double>(sk, joined(path, "sinkhorn"), "epsilon",
                                           cfg.sinkhorn.epsilon);
  cfg.sinkhorn.iterations = get_field<std::size_t>(sk, joined(path, "sinkhorn"), "iterations",
                                                   cfg.sinkhorn.iterations);

  const std::string gate =
      get_field<std::string>(t, path, "gate_reference", "previous_batch");
  if (gate == "previous_batch")
    cfg.gate_reference = GateReference::PreviousBatch;
  else if (gate == "last_accepted")
    cfg.gate_reference = GateReference::LastAccepted;
  else
    throw SchemaError("invalid value for " + joined(path, "gate_reference") +
                      " (want previous_batch|last_accepted)");

  const json& tg = sub_object(t, path, "toggles");
  reject_unknown_keys(tg, joined(path, "toggles"), {"cv_loss", "cv_lr_reg", "cv_gate", "ensemble"});
  cfg.toggles.cv_loss = get_field<bool>(tg, joined(path, "toggles"), "cv_loss", true);
  cfg.toggles.cv_lr_reg = get_field<bool>(tg, joined(path, "toggles"), "cv_lr_reg", true);
  cfg.toggles.cv_gate = get_field<bool>(tg, joined(path, "toggles"), "cv_gate", true);
  cfg.toggles.ensemble = get_field<bool>(tg, joined(path, "toggles"), "ensemble", true);

  const json& ad = sub_object(t, path, "adapter");
  reject_unknown_keys(ad, joined(path, "adapter"), {"variant", "policy", "rank", "alpha"});
  try {
    cfg.adapter_variant = adapter_variant_from_string(
        get_field<std::string>(ad, joined(path, "adapter"), "variant", "lora"));
    cfg.adapter_policy = adapter_policy_from_string(
        get_field<std::string>(ad, joined(path, "adapter"), "policy", "qkv_proj"));
  } catch (const ConfigError& e) {
    throw SchemaError(std::string(e.what()) + " at " + joined(path, "adapter"));
  }
  cfg.adapter_rank = get_field<std::size_t>(ad, joined(path, "adapter"), "rank", cfg.adapter_rank);
  cfg.adapter_alpha = get_field<double>(ad, joined(path, "adapter"), "alpha", cfg.adapter_alpha);

  const json& au = sub_object(t, path, "augment");
  reject_unknown_keys(au, joined(path, "augment"),
                      {"crop_lo", "crop_hi", "flip_prob", "jitter", "noise_sigma"});
  cfg.augment.crop_lo = get_field<double>(au, joined(path, "augment"), "crop_lo",
                                          cfg.augment.crop_lo);
  cfg.augment.crop_hi = get_field<double>(au, joined(path, "augment"), "crop_hi",
                                          cfg.augment.crop_hi);
  cfg.augment.flip_prob = get_field<double>(au, joined(path, "augment"), "flip_prob",
                                            cfg.augment.flip_prob);
  cfg.augment.jitter = get_field<double>(au, joined(path, "augment"), "jitter",
                                         cfg.augment.jitter);
  cfg.augment.noise_sigma = get_field<double>(au, joined(path, "augment"), "noise_sigma",
                                              cfg.augment.noise_sigma);

  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw SchemaError(std::string(e.what()) + " (under " + (path.empty() ? "train" : path) + ")");
  }
  return cfg;
}

EncoderConfig parse_encoder_config(const json& e, const std::string& path) {
  reject_unknown_keys(e, path, {"image_size", "patch_size", "embed_dim", "depth", "heads",
                                "mlp_ratio", "readout", "ln_eps"});
  EncoderConfig cfg;
  cfg.image_size = get_field<std::size_t>(e, path, "image_size", cfg.image_size);
  cfg.patch_size = get_field<std::size_t>(e, path, "patch_size", cfg.patch_size);
  cfg.embed_dim = get_field<std::size_t>(e, path, "embed_dim", cfg.embed_dim);
  cfg.depth = get_field<std::size_t>(e, path, "depth", cfg.depth);
  cfg.heads = get_field<std::size_t>(e, path, "heads", cfg.heads);
  cfg.mlp_ratio = get_field<std::size_t>(e, path, "mlp_ratio", cfg.mlp_ratio);
  cfg.ln_eps = get_field<double>(e, path, "ln_eps", cfg.ln_eps);
  const std::string readout = get_field<std::string>(e, path, "readout", "cls");
  if (readout == "cls")
    cfg.readout = Readout::Cls;
  else if (readout == "mean")
    cfg.readout = Readout::MeanPool;
  else
    throw SchemaError("invalid value for " + joined(path, "readout") + " (want cls|mean)");
  try {
    cfg.validate();
  } catch (const ConfigError& e2) {
    throw SchemaError(std::string(e2.what()) + " (under " + path + ")");
  }
  return cfg;
}

ProjectorConfig parse_projector_config(const json& p, const std::string& path,
                                       std::size_t embed_dim) {
  reject_unknown_keys(p, path, {"hidden", "out_dim"});
  ProjectorConfig cfg;
  cfg.in_dim = embed_dim;
  cfg.hidden = get_field<std::size_t>(p, path, "hidden", cfg.hidden);
  cfg.out_dim = get_field<std::size_t>(p, path, "out_dim", cfg.out_dim);
  return cfg;
}

// ---------------------------------------------------------------------------
// run directories

fs::path runs_root(const std::string& out_dir) {
  if (!out_dir.empty() && fs::path(out_dir).is_absolute()) return out_dir;
  if (const char* env = std::getenv("UPSTEP_RUNS_DIR"); env && *env) return fs::path(env);
  return out_dir.empty() ? fs::path("runs") : fs::path(out_dir);
}

fs::path make_run_dir(const std::string& out_dir, const std::string& run_name, bool overwrite) {
  const fs::path dir = runs_root(out_dir) / run_name;
  if (fs::exists(dir)) {
    if (!overwrite)
      throw SchemaError("run directory already exists: " + dir.string() +
                        " (set \"overwrite\": true to replace it)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  return dir;
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << content;
  if (!out) throw FormatError("failed while writing " + path.string());
}

void snapshot_config(const fs::path& run_dir, const json& cfg) {
  write_text_file(run_dir / "config.json", cfg.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// shared eval plumbing

struct EvalOptions {
  std::size_t knn_k = 20;
  bool run_knn = true;
  bool run_linear = false;
  ProbeConfig probe;
  bool ensemble = true;
  bool ensemble_normalize = true;
  KnnMetric metric = KnnMetric::Cosine;
};

EvalOptions parse_eval_options(const json& e, const std::string& path) {
  reject_unknown_keys(e, path, {"knn_k", "protocols", "linear", "ensemble", "ensemble_normalize",
                                "metric"});
  EvalOptions opt;
  opt.knn_k = get_field<std::size_t>(e, path, "knn_k", opt.knn_k);
  opt.ensemble = get_field<bool>(e, path, "ensemble", opt.ensemble);
  opt.ensemble_normalize = get_field<bool>(e, path, "ensemble_normalize", opt.ensemble_normalize);
  const std::string metric = get_field<std::string>(e, path, "metric", "cosine");
  if (metric == "cosine")
    opt.metric = KnnMetric::Cosine;
  else if (metric == "euclidean")
    opt.metric = KnnMetric::Euclidean;
  else
    throw SchemaError("invalid value for " + joined(path, "metric") + " (want cosine|euclidean)");
  if (e.contains("protocols")) {
    if (!e.at("protocols").is_array())
      throw SchemaError("expected an array at: " + joined(path, "protocols"));
    opt.run_knn = false;
    opt.run_linear = false;
    for (const auto& p : e.at("protocols")) {
      const std::string name = p.is_string() ? p.get<std::string>() : "";
      if (name == "knn")
        opt.run_knn = true;
      else if (name == "linear")
        opt.run_linear = true;
      else
        throw SchemaError("invalid protocol in " + joined(path, "protocols") +
                          " (want knn|linear)");
    }
  }
  const json& lin = sub_object(e, path, "linear");
  reject_unknown_keys(lin, joined(path, "linear"), {"steps", "lr", "weight_decay"});
  opt.probe.steps = get_field<std::size_t>(lin, joined(path, "linear"), "steps", opt.probe.steps);
  opt.probe.lr = get_field<double>(lin, joined(path, "linear"), "lr", opt.probe.lr);
  opt.probe.weight_decay =
      get_field<double>(lin, joined(path, "linear"), "weight_decay", opt.probe.weight_decay);
  return opt;
}

json entry_to_json(const EvalEntry& e) {
  return json{{"protocol", e.protocol},      {"k", e.k},
              {"accuracy", e.accuracy},      {"n_train", e.n_train},
              {"n_test", e.n_test},          {"feature_dim", e.feature_dim},
              {"model_tags", e.model_tags}};
}

EvalEntry make_entry(std::string protocol, std::size_t k, double acc, const FeatureBank& train,
                     const FeatureBank& test) {
  EvalEntry e;
  e.protocol = std::move(protocol);
  e.k = k;
  e.accuracy = acc;
  e.n_train = train.size();
  e.n_test = test.size();
  e.feature_dim = train.dim();
  e.model_tags = {train.model_tag};
  return e;
}

// Evaluates one checkpoint: adapted features alone, plus a base/adapted
// ensemble when the checkpoint carries adapters and ensembling is on.
std::vector<EvalEntry> evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& train_ds,
                                           const Dataset& test_ds, const EvalOptions& opt) {
  std::vector<EvalEntry> entries;
  const AdapterSet* adapters = ckpt.adapters ? &*ckpt.adapters : nullptr;
  const std::string tag = ckpt.kind == "upstep" ? "adapted" : "base";

  FeatureBank train = extract_features(ckpt.encoder, adapters, train_ds, 256, tag);
  FeatureBank test = extract_features(ckpt.encoder, adapters, test_ds, 256, tag);
  if (opt.run_knn)
    entries.push_back(make_entry("knn", opt.knn_k,
                                 knn_classify(train, test, opt.knn_k, nullptr, opt.metric), train,
                                 test));
  if (opt.run_linear)
    entries.push_back(make_entry("linear", 0, linear_probe(train, test, opt.probe), train, test));

  if (opt.ensemble && adapters) {
    FeatureBank base_train = extract_features(ckpt.encoder, nullptr, train_ds, 256, "base");
    FeatureBank base_test = extract_features(ckpt.encoder, nullptr, test_ds, 256, "base");
    FeatureBank ens_train = ensemble_concat(base_train, train, opt.ensemble_normalize);
    FeatureBank ens_test = ensemble_concat(base_test, test, opt.ensemble_normalize);
    if (opt.run_knn) {
      EvalEntry e = make_entry("knn", opt.knn_k,
                               knn_classify(ens_train, ens_test, opt.knn_k, nullptr, opt.metric),
                               ens_train, ens_test);
      e.model_tags = {"base", tag};
      entries.push_back(std::move(e));
    }
    if (opt.run_linear) {
      EvalEntry e =
          make_entry("linear", 0, linear_probe(ens_train, ens_test, opt.probe), ens_train,
                     ens_test);
      e.model_tags = {"base", tag};
      entries.push_back(std::move(e));
    }
  }
  return entries;
}

void write_results(const fs::path& run_dir, const std::vector<EvalEntry>& entries) {
  json arr = json::array();
  for (const auto& e : entries) arr.push_back(entry_to_json(e));
  write_text_file(run_dir / "results.json", arr.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// metrics.csv readback (for report/sweep summaries)

struct MetricsTable {
  std::vector<MetricsRow> rows;

  double final_cv_mag() const { return rows.empty() ? 0.0 : rows.back().report.cv_mag; }
  double skip_rate() const {
    if (rows.empty()) return 0.0;
    std::size_t skipped = 0;
    for (const auto& r : rows) skipped += r.report.updated ? 0 : 1;
    return static_cast<double>(skipped) / static_cast<double>(rows.size());
  }
};

MetricsTable read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("missing metrics file: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "step,epoch,loss_ce,loss_cv,cv_mag,eta,updated")
    throw FormatError("unrecognized metrics header in " + path.string());
  MetricsTable table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricsRow row;
    int updated = 0;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lg,%lg,%lg,%lg,%d", &row.step, &row.epoch,
                    &row.report.loss_ce, &row.report.loss_cv, &row.report.cv_mag,
                    &row.report.eta, &updated) != 7)
      throw FormatError("malformed metrics row in " + path.string() + ": " + line);
    row.report.updated = updated != 0;
    table.rows.push_back(row);
  }
  return table;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw NumericError("pearson: a series has zero variance");
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// subcommands

int cmd_gen_data(std::size_t classes, std::size_t per_class, const std::string& domain,
                 std::uint64_t seed, std::size_t image_size, const std::string& out) {
  DatasetSpec spec;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.domain = domain_from_string(domain);  // ConfigError -> usage error
  spec.seed = seed;
  spec.image_size = image_size;
  Dataset ds = gen_synthetic(spec);
  save_dataset(out, ds);
  std::printf("wrote %zu images (%zu classes, %s domain) to %s\n", ds.size(), ds.classes,
              to_string(ds.domain).c_str(), out.c_str());
  return kExitOk;
}

int cmd_pretrain(const fs::path& config_path) {
  const json cfg = load_json_file(config_path);
  reject_unknown_keys(cfg, "", {"run_name", "out_dir", "overwrite", "dataset", "encoder",
                                "projector", "train"});
  const std::string run_name = get_field<std::string>(cfg, "", "run_name", "pretrain");
  const std::string out_dir = get_field<std::string>(cfg, "", "out_dir", "");
  const bool overwrite = get_field<bool>(cfg, "", "overwrite", false);
  const std::string dataset = require_field<std::string>(cfg, "", "dataset");
  const EncoderConfig enc_cfg = parse_encoder_config(sub_object(cfg, "", "encoder"), "encoder");
  const ProjectorConfig proj_cfg =
      parse_projector_config(sub_object(cfg, "", "projector"), "projector", enc_cfg.embed_dim);
  const TrainConfig train = parse_train_config(sub_object(cfg, "", "train"), "train");

  Dataset ds = load_dataset(dataset);
  const fs::path run_dir = make_run_dir(out_dir, run_name, overwrite);
  snapshot_config(run_dir, cfg);

  std::vector<MetricsRow> metrics;
  Checkpoint ckpt = pretrain_base(UnlabeledView(ds), enc_cfg, proj_cfg, train, &metrics);
  write_metrics_csv(run_dir / "metrics.csv", metrics);
  save_checkpoint(run_dir / "checkpoint", ckpt);

  json summary{{"kind", "pretrain"},
               {"steps", metrics.size()},
               {"final_loss_ce", metrics.empty() ? 0.0 : metrics.back().report.loss_ce},
               {"final_cv_mag", metrics.empty() ? 0.0 : metrics.back().report.cv_mag},
               {"checkpoint", (run_dir / "checkpoint").string()}};
  write_text_file(run_dir / "results.json", summary.dump(2) + "\n");
  std::printf("pretrained %zu steps -> %s\n", metrics.size(), run_dir.string().c_str());
  return kExitOk;
}

int cmd_upstep(const fs::path& config_path) {
  const json cfg = load_json_file(config_path);
  reject_unknown_keys(cfg, "", {"run_name", "out_dir", "overwrite", "base", "dataset", "train"});
  const std::string run_name = get_field<std::string>(cfg, "", "run_name", "upstep");
  const std::string out_dir = get_field<std::string>(cfg, "", "out_dir", "");
  const bool overwrite = get_field<bool>(cfg, "", "overwrite", false);
  const std::string base_path = require_field<std::string>(cfg, "", "base");
  const std::string dataset = require_field<std::string>(cfg, "", "dataset");
  const TrainConfig train = parse_train_config(sub_object(cfg, "", "train"), "train");

  Checkpoint base = load_checkpoint(base_path);
  Dataset ds = load_dataset(dataset);
  const fs::path run_dir = make_run_dir(out_dir, run_name, overwrite);
  snapshot_config(run_dir, cfg);

  RunResult run = run_upstep(base, UnlabeledView(ds), train, run_dir);

  json summary{{"kind", "upstep"},
               {"steps", run.metrics.size()},
               {"skip_fraction", run.skip_fraction},
               {"final_loss_ce", run.metrics.empty() ? 0.0 : run.metrics.back().report.loss_ce},
               {"final_cv_mag", run.metrics.empty() ? 0.0 : run.metrics.back().report.cv_mag},
               {"checkpoint", run.checkpoint_dir.string()}};
  write_text_file(run_dir / "results.json", summary.dump(2) + "\n");
  std::printf("adapted %zu steps (skip fraction %.3f) -> %s\n", run.metrics.size(),
              run.skip_fraction, run_dir.string().c_str());
  return kExitOk;
}

int cmd_eval(const fs::path& config_path) {
  const json cfg = load_json_file(config_path);
  reject_unknown_keys(cfg, "",
                      {"run_name", "out_dir", "overwrite", "checkpoint", "train_dataset",
                       "test_dataset", "eval", "eval_epoch_checkpoints"});
  const std::string run_name = get_field<std::string>(cfg, "", "run_name", "eval");
  const std::string out_dir = get_field<std::string>(cfg, "", "out_dir", "");
  const bool overwrite = get_field<bool>(cfg, "", "overwrite", false);
  const std::string ckpt_path = require_field<std::string>(cfg, "", "checkpoint");
  const std::string train_path = require_field<std::string>(cfg, "", "train_dataset");
  const std::string test_path = require_field<std::string>(cfg, "", "test_dataset");
  const EvalOptions opt = parse_eval_options(sub_object(cfg, "", "eval"), "eval");
  const bool eval_epochs = get_field<bool>(cfg, "", "eval_epoch_checkpoints", false);

  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Dataset train_ds = load_dataset(train_path);
  Dataset test_ds = load_dataset(test_path);

  const fs::path run_dir = make_run_dir(out_dir, run_name, overwrite);
  snapshot_config(run_dir, cfg);

  std::vector<EvalEntry> entries = evaluate_checkpoint(ckpt, train_ds, test_ds, opt);
  write_results(run_dir, entries);
  for (const auto& e : entries) {
    std::string tags;
    for (const auto& t : e.model_tags) tags += (tags.empty() ? "" : "+") + t;
    std::printf("%-6s k=%-3zu %-14s accuracy %.4f\n", e.protocol.c_str(), e.k, tags.c_str(),
                e.accuracy);
  }

  // Optional per-epoch checkpoint sweep: pairs each epoch checkpoint's k-NN
  // accuracy with that epoch's mean center magnitude (for report's Pearson).
  if (eval_epochs) {
    const fs::path ckpt_dir = fs::path(ckpt_path);
    const fs::path parent_run = ckpt_dir.parent_path();
    const fs::path epochs_dir = parent_run / "checkpoints";
    if (!fs::exists(epochs_dir))
      throw FormatError("no epoch checkpoints under " + epochs_dir.string() +
                        " (train with checkpoint_every_epochs > 0)");
    MetricsTable metrics = read_metrics_csv(parent_run / "metrics.csv");

    std::vector<fs::path> epoch_dirs;
    for (const auto& entry : fs::directory_iterator(epochs_dir))
      if (entry.is_directory()) epoch_dirs.push_back(entry.path());
    std::sort(epoch_dirs.begin(), epoch_dirs.end());

    json evals = json::array();
    for (std::size_t ei = 0; ei < epoch_dirs.size(); ++ei) {
      Checkpoint epoch_ckpt = load_checkpoint(epoch_dirs[ei]);
      std::vector<EvalEntry> epoch_entries =
          evaluate_checkpoint(epoch_ckpt, train_ds, test_ds, opt);
      double knn_acc = 0.0;
      for (const auto& e : epoch_entries)
        if (e.protocol == "knn") knn_acc = e.accuracy;  // last entry wins: ensemble when present
      double mag_sum = 0.0;
      std::size_t mag_n = 0;
      for (const auto& r : metrics.rows)
        if (r.epoch == ei) {
          mag_sum += r.report.cv_mag;
          ++mag_n;
        }
      evals.push_back(json{{"checkpoint", epoch_dirs[ei].string()},
                           {"epoch", ei},
                           {"cv_mag", mag_n ? mag_sum / static_cast<double>(mag_n) : 0.0},
                           {"knn_acc", knn_acc}});
    }
    write_text_file(parent_run / "checkpoint_evals.json", evals.dump(2) + "\n");
    std::printf("wrote %zu checkpoint evals -> %s\n", evals.size(),
                (parent_run / "checkpoint_evals.json").string().c_str());
  }
  return kExitOk;
}

// Applies one swept value onto the shared config.
void apply_sweep_value(json& train, const std::string& parameter, const json& value) {
  if (parameter == "s_phi") {
    if (!value.is_number()) throw SchemaError("s_phi sweep values must be numbers");
    train["s_phi"] = value;
  } else if (parameter == "prototypes") {
    if (!value.is_number_unsigned()) throw SchemaError("prototypes sweep values must be integers");
    train["prototypes"] = value;
  } else if (parameter == "lora_rank") {
    if (!value.is_number_unsigned()) throw SchemaError("lora_rank sweep values must be integers");
    train["adapter"]["rank"] = value;
  } else if (parameter == "layer_policy") {
    if (!value.is_string()) throw SchemaError("layer_policy sweep values must be strings");
    train["adapter"]["policy"] = value;
  } else {
    throw SchemaError("unknown sweep parameter: " + parameter +
                      " (want s_phi|prototypes|lora_rank|layer_policy)");
  }
}

std::string value_slug(const json& value) {
  std::string s = value.is_string() ? value.get<std::string>() : value.dump();
  for (char& c : s)
    if (c == '.') c = '_';
  return s;
}

int cmd_sweep(const fs::path& spec_path) {
  const json spec = load_json_file(spec_path);
  reject_unknown_keys(spec, "", {"parameter", "values", "config"});
  const std::string parameter = require_field<std::string>(spec, "", "parameter");
  if (!spec.contains("values") || !spec.at("values").is_array() || spec.at("values").empty())
    throw SchemaError("missing or empty array: values");
  if (!spec.contains("config") || !spec.at("config").is_object())
    throw SchemaError("missing required object: config");

  json base_cfg = spec.at("config");
  reject_unknown_keys(base_cfg, "config",
                      {"run_name", "out_dir", "overwrite", "base", "dataset", "train",
                       "train_dataset", "test_dataset", "eval"});
  const std::string base_ckpt_path = require_field<std::string>(base_cfg, "config", "base");
  const std::string dataset = require_field<std::string>(base_cfg, "config", "dataset");
  const std::string train_path = require_field<std::string>(base_cfg, "config", "train_dataset");
  const std::string test_path = require_field<std::string>(base_cfg, "config", "test_dataset");
  const std::string out_dir = get_field<std::string>(base_cfg, "config", "out_dir", "");
  const std::string sweep_name =
      get_field<std::string>(base_cfg, "config", "run_name", "sweep_" + parameter);
  const bool overwrite = get_field<bool>(base_cfg, "config", "overwrite", false);
  const EvalOptions opt = parse_eval_options(sub_object(base_cfg, "config", "eval"),
                                             "config.eval");
  // Validate the shared train block once up front (value overrides re-check).
  parse_train_config(sub_object(base_cfg, "config", "train"), "config.train");

  Checkpoint base = load_checkpoint(base_ckpt_path);
  Dataset target = load_dataset(dataset);
  Dataset gallery = load_dataset(train_path);
  Dataset queries = load_dataset(test_path);

  const fs::path sweep_dir = make_run_dir(out_dir, sweep_name, overwrite);
  snapshot_config(sweep_dir, spec);

  struct SummaryRow {
    std::string value;
    double knn_acc = 0.0, linear_acc = 0.0, skip_rate = 0.0, final_cv_mag = 0.0;
    bool failed = false;
  };
  std::vector<SummaryRow> summary;
  json failures = json::object();

  for (const json& value : spec.at("values")) {
    SummaryRow row;
    row.value = value.is_string() ? value.get<std::string>() : value.dump();
    const fs::path run_dir = sweep_dir / value_slug(value);
    try {
      json cfg = base_cfg;
      json train_block = sub_object(cfg, "config", "train");
      apply_sweep_value(train_block, parameter, value);
      cfg["train"] = train_block;
      const TrainConfig train = parse_train_config(train_block, "config.train");

      fs::create_directories(run_dir);
      snapshot_config(run_dir, cfg);
      RunResult run = run_upstep(base, UnlabeledView(target), train, run_dir);

      Checkpoint adapted = load_checkpoint(run.checkpoint_dir);
      std::vector<EvalEntry> entries = evaluate_checkpoint(adapted, gallery, queries, opt);
      write_results(run_dir, entries);
      for (const auto& e : entries) {
        if (e.protocol == "knn") row.knn_acc = e.accuracy;  // ensemble entry overwrites plain
        if (e.protocol == "linear") row.linear_acc = e.accuracy;
      }
      row.skip_rate = run.skip_fraction;
      row.final_cv_mag =
          run.metrics.empty() ? 0.0 : run.metrics.back().report.cv_mag;
    } catch (const std::exception& e) {
      row.failed = true;
      failures[row.value] = e.what();
      std::fprintf(stderr, "sweep value %s failed: %s\n", row.value.c_str(), e.what());
    }
    summary.push_back(std::move(row));
  }

  // Summary CSV: one row per value, in sweep order.
  std::ostringstream csv;
  csv << "value,knn_acc,linear_acc,skip_rate,final_cv_mag\n";
  for (const auto& r : summary) {
    if (r.failed) {
      csv << r.value << ",nan,nan,nan,nan\n";
    } else {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f\n", r.value.c_str(), r.knn_acc,
                    r.linear_acc, r.skip_rate, r.final_cv_mag);
      csv << buf;
    }
  }
  write_text_file(sweep_dir / "summary.csv", csv.str());

  // Accuracy-vs-value plot over the successful runs (ordinal x for strings).
  Series knn{"knn", {}, {}};
  Series lin{"linear", {}, {}};
  for (std::size_t i = 0; i < summary.size(); ++i) {
    if (summary[i].failed) continue;
    double x = static_cast<double>(i);
    const json& v = spec.at("values")[i];
    if (v.is_number()) x = v.get<double>();
    knn.x.push_back(x);
    knn.y.push_back(summary[i].knn_acc);
    if (opt.run_linear) {
      lin.x.push_back(x);
      lin.y.push_back(summary[i].linear_acc);
    }
  }
  if (!knn.x.empty()) {
    std::vector<Series> series{knn};
    if (!lin.x.empty()) series.push_back(lin);
    write_svg(sweep_dir / ("accuracy_vs_" + parameter + ".svg"),
              render_line_svg("accuracy vs " + parameter, parameter, "accuracy", series));
  }
  if (!failures.empty()) write_text_file(sweep_dir / "failures.json", failures.dump(2) + "\n");

  std::printf("sweep over %s: %zu values, %zu failed -> %s\n", parameter.c_str(), summary.size(),
              failures.size(), sweep_dir.string().c_str());
  return failures.empty() ? kExitOk : kExitRuntime;
}

int cmd_report(const fs::path& run_dir) {
  const MetricsTable metrics = read_metrics_csv(run_dir / "metrics.csv");
  if (metrics.rows.empty()) throw FormatError("no metric rows in " + (run_dir / "metrics.csv").string());

  Series cv{"cv_mag", {}, {}};
  Series eta{"eta", {}, {}};
  Series skip{"cumulative skip rate", {}, {}};
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < metrics.rows.size(); ++i) {
    const MetricsRow& r = metrics.rows[i];
    const double step = static_cast<double>(r.step);
    cv.x.push_back(step);
    cv.y.push_back(r.report.cv_mag);
    eta.x.push_back(step);
    eta.y.push_back(r.report.eta);
    skipped += r.report.updated ? 0 : 1;
    skip.x.push_back(step);
    skip.y.push_back(static_cast<double>(skipped) / static_cast<double>(i + 1));
  }
  write_svg(run_dir / "cv_mag.svg",
            render_line_svg("center magnitude", "step", "||s||", {cv}));
  write_svg(run_dir / "eta.svg", render_line_svg("learning rate", "step", "eta", {eta}));
  write_svg(run_dir / "skip_rate.svg",
            render_line_svg("cumulative skip rate", "step", "skipped fraction", {skip}));
  std::printf("wrote cv_mag.svg, eta.svg, skip_rate.svg under %s\n", run_dir.string().c_str());

  const fs::path evals_path = run_dir / "checkpoint_evals.json";
  if (fs::exists(evals_path)) {
    std::ifstream in(evals_path);
    json evals;
    try {
      in >> evals;
    } catch (const json::parse_error& e) {
      throw FormatError(evals_path.string() + ": " + e.what());
    }
    if (!evals.is_array()) throw FormatError(evals_path.string() + ": expected a JSON array");
    std::vector<double> mags, accs;
    for (const auto& e : evals) {
      mags.push_back(e.at("cv_mag").get<double>());
      accs.push_back(e.at("knn_acc").get<double>());
    }
    if (mags.size() >= 2) {
      std::printf("pearson(cv_mag, knn_acc) over %zu checkpoints: %.6f\n", mags.size(),
                  pearson(mags, accs));
    } else {
      std::printf("checkpoint evals present but fewer than 2 entries; no correlation\n");
    }
  } else {
    std::printf("no checkpoint_evals.json; run eval with \"eval_epoch_checkpoints\": true for "
                "the cv_mag/accuracy correlation\n");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UpStep: source-free parameter-efficient adaptation workbench"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic striped-texture dataset");
  std::size_t classes = 10, per_class = 500, image_size = 32;
  std::uint64_t seed = 1;
  std::string domain = "source", out;
  gen->add_option("--classes", classes, "number of classes");
  gen->add_option("--per-class", per_class, "images per class");
  gen->add_option("--domain", domain, "source|target");
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--image-size", image_size, "square image size in pixels");
  gen->add_option("--out", out, "output directory")->required();

  // config-driven commands
  std::string pretrain_cfg, upstep_cfg, eval_cfg, sweep_spec, report_run;
  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining on unlabeled images");
  pre->add_option("--config", pretrain_cfg, "JSON config")->required();
  auto* up = app.add_subcommand("upstep", "source-free adaptation of a pretrained checkpoint");
  up->add_option("--config", upstep_cfg, "JSON config")->required();
  auto* ev = app.add_subcommand("eval", "k-NN / linear-probe evaluation of a checkpoint");
  ev->add_option("--config", eval_cfg, "JSON config")->required();
  auto* sw = app.add_subcommand("sweep", "run one adaptation per swept value and summarize");
  sw->add_option("--spec", sweep_spec, "JSON sweep spec")->required();
  auto* rp = app.add_subcommand("report", "emit SVG plots and correlations for a finished run");
  rp->add_option("--run", report_run, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(classes, per_class, domain, seed, image_size, out);
    if (pre->parsed()) return cmd_pretrain(pretrain_cfg);
    if (up->parsed()) return cmd_upstep(upstep_cfg);
    if (ev->parsed()) return cmd_eval(eval_cfg);
    if (sw->parsed()) return cmd_sweep(sweep_spec);
    if (rp->parsed()) return cmd_report(report_run);
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
