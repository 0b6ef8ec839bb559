// Acceptance gate: one PASS/FAIL line per criterion, exit 1 if any fail.
//
// Criteria 4b, 6, 7 and 8 share one synthetic-benchmark run (3 seeds of
// pretrain -> adapt -> evaluate); everything else is self-contained.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <upstep/checkpoint.hpp>
#include <upstep/cvr.hpp>
#include <upstep/eval.hpp>
#include <upstep/ssl.hpp>
#include <upstep/trainer.hpp>

#include "gradcheck.hpp"

using namespace upstep;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

bool g_all_pass = true;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

void report(int id, bool pass, const std::string& detail, double secs) {
  if (!pass) g_all_pass = false;
  std::printf("%s criterion %d: %s (%.1f s)\n", pass ? "PASS" : "FAIL", id, detail.c_str(), secs);
  std::fflush(stdout);
}

void note(const std::string& line) {
  std::printf("       %s\n", line.c_str());
  std::fflush(stdout);
}

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -2.0,
                     double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::zeros({r, c});
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// ---- criterion 1: gradient integrity ---------------------------------------

void criterion_1() {
  const auto t0 = clock_type::now();
  const int instances = 20;
  double worst = 0.0;
  std::size_t total_checked = 0;

  for (int inst = 0; inst < instances; ++inst) {
    const std::uint64_t seed = 100 + static_cast<std::uint64_t>(inst);
    EncoderConfig ecfg;
    ecfg.image_size = 8;
    ecfg.patch_size = 4;
    ecfg.embed_dim = 8;
    ecfg.depth = 1;
    ecfg.heads = 2;
    ecfg.mlp_ratio = 2;
    ecfg.readout = inst % 4 == 3 ? Readout::MeanPool : Readout::Cls;
    ProjectorConfig pcfg{8, 12, 8};
    InitBundle init = init_weights(ecfg, pcfg, seed);
    init.encoder.set_trainable(true);
    init.projector.set_trainable(true);

    std::optional<AdapterSet> adapters;
    if (inst % 3 == 1)
      adapters = AdapterSet::make(AdapterVariant::Lora, AdapterPolicy::QkvProj, 2, 0.7,
                                  init.encoder, seed + 1);
    if (inst % 3 == 2)
      adapters = AdapterSet::make(AdapterVariant::Vera, AdapterPolicy::QkvProjMlp, 2, 1.0,
                                  init.encoder, seed + 1);
    if (adapters) {
      // randomize the trainable vectors so VeRA's b_vec != 0 and LoRA's b != 0
      std::mt19937_64 arng(seed + 2);
      std::uniform_real_distribution<double> adist(-0.3, 0.3);
      for (auto& np : adapters->named_params())
        for (auto& v : np.tensor.values()) v = adist(arng);
    }

    const std::size_t batch = 3;
    std::mt19937_64 rng(seed + 3);
    std::uniform_real_distribution<double> upix(0.0, 1.0);
    Tensor images = Tensor::zeros({batch, 3, 8, 8});
    for (auto& v : images.values()) v = upix(rng);

    PrototypeBank bank = make_prototypes(6, pcfg.out_dim, seed + 4);
    Tensor targets = sinkhorn_knopp(random_matrix(batch, 6, seed + 5), {0.3, 3});

    std::vector<Tensor> inputs = init.encoder.params();
    for (auto& p : init.projector.params()) inputs.push_back(p);
    if (adapters)
      for (auto& p : adapters->trainable_params()) inputs.push_back(p);

    auto loss_fn = [&](const std::vector<Tensor>&) {
      const AdapterSet* ad = adapters ? &*adapters : nullptr;
      Tensor f = init.encoder.forward(images, ad);
      Tensor z = init.projector.forward(f);
      Tensor p = online_assign(z, bank, 0.4);
      Tensor ce = cluster_ce_loss(p, targets);
      Tensor cv = cv_loss(center_vector(f), 0.5);
      return add(ce, scale(cv, 1.0));
    };

    gradcheck::Result res = gradcheck::check(loss_fn, inputs, 1e-5);
    worst = std::max(worst, res.max_rel_err);
    total_checked += res.checked;
  }

  const bool pass = worst < 1e-4;
  report(1, pass,
         "gradient integrity: " + std::to_string(instances) + " micro-models, " +
             std::to_string(total_checked) + " parameter scalars vs central differences, max rel err " +
             fmt("%.3g", worst) + " (tolerance 1e-4)",
         seconds_since(t0));
}

// ---- criterion 2: sinkhorn contract ----------------------------------------

void criterion_2() {
  const auto t0 = clock_type::now();
  const std::size_t B = 16, K = 8;
  int row_ok = 0, col_ok = 0, var_wins = 0;
  double worst_row = 0.0, worst_col = 0.0;

  auto col_sums = [&](const Tensor& m) {
    std::vector<double> cs(K, 0.0);
    const auto v = std::as_const(m).values();
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < K; ++j) cs[j] += v[i * K + j];
    return cs;
  };
  auto variance = [&](const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return var / static_cast<double>(xs.size());
  };

  for (int trial = 0; trial < 100; ++trial) {
    Tensor scores = random_matrix(B, K, 7000 + static_cast<std::uint64_t>(trial));

    // (a) rows of the standard 3-iteration output are probability vectors
    Tensor q3 = sinkhorn_knopp(scores, {0.3, 3});
    double row_err = 0.0;
    const auto qv = std::as_const(q3).values();
    for (std::size_t i = 0; i < B; ++i) {
      double rs = 0.0;
      for (std::size_t j = 0; j < K; ++j) rs += qv[i * K + j];
      row_err = std::max(row_err, std::abs(rs - 1.0));
    }
    worst_row = std::max(worst_row, row_err);
    if (row_err < 1e-9) ++row_ok;

    // (b) 200 iterations equalize column mass to B/K
    Tensor q200 = sinkhorn_knopp(scores, {0.3, 200});
    double col_err = 0.0;
    for (double cs : col_sums(q200))
      col_err = std::max(col_err, std::abs(cs - static_cast<double>(B) / static_cast<double>(K)));
    worst_col = std::max(worst_col, col_err);
    if (col_err < 1e-6) ++col_ok;

    // (c) 3 iterations at eps 0.3 beat the matched-temperature softmax on
    // column-sum variance
    Tensor soft = softmax_rows(div(scores, 0.3));
    if (variance(col_sums(q3)) < variance(col_sums(soft))) ++var_wins;
  }

  const bool pass = row_ok == 100 && col_ok == 100 && var_wins >= 95;
  report(2, pass,
         "sinkhorn contract: rows-sum-1 " + std::to_string(row_ok) + "/100 (worst " +
             fmt("%.2g", worst_row) + "), 200-iter col sums " + std::to_string(col_ok) +
             "/100 within 1e-6 of B/K (worst " + fmt("%.2g", worst_col) +
             "), variance reduction in " + std::to_string(var_wins) + "/100 (need >= 95)",
         seconds_since(t0));
}

// ---- criterion 3: center-vector statistics ---------------------------------

void criterion_3() {
  const auto t0 = clock_type::now();
  const std::size_t batches = 1000, B = 160, d = 64;
  std::mt19937_64 rng(9001);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double total = 0.0;
  Tensor f = Tensor::zeros({B, d});
  for (std::size_t t = 0; t < batches; ++t) {
    auto fv = f.values();
    for (std::size_t i = 0; i < B * d; ++i) fv[i] = gauss(rng);
    total += l2_norm(center_vector(f)).item();
  }
  const double mean_mag = total / static_cast<double>(batches);
  const double expect = 1.0 / std::sqrt(static_cast<double>(B));
  const double rel = std::abs(mean_mag - expect) / expect;
  report(3, rel < 0.10,
         "center-vector statistics: MC mean ||s|| = " + fmt("%.5f", mean_mag) + " vs 1/sqrt(160) = " +
             fmt("%.5f", expect) + ", rel dev " + fmt("%.2f%%", rel * 100.0) + " (tolerance 10%)",
         seconds_since(t0));
}

// ---- shared synthetic benchmark for criteria 4b / 6 / 7 / 8 ----------------

struct SeedOutcome {
  std::uint64_t seed = 0;
  double base_acc = 0.0;      // un-adapted encoder, target k-NN
  double adapted_acc = 0.0;   // encoder + trained adapters, target k-NN
  double ensemble_acc = 0.0;  // concatenated features, target k-NN
  double skip_fraction = 0.0;
  double first_epoch_mag = 0.0;
  double final_epoch_mag = 0.0;
};

struct BenchmarkResult {
  std::vector<SeedOutcome> seeds;
  std::string error;  // non-empty if the run failed

  double mean(double SeedOutcome::* field) const {
    double s = 0.0;
    for (const auto& o : seeds) s += o.*field;
    return s / static_cast<double>(seeds.size());
  }
};

SeedOutcome run_benchmark_seed(std::uint64_t seed, const fs::path& workdir) {
  // Synthetic benchmark scale: 10 classes x 500 per domain, 16x16 images.
  DatasetSpec sspec;
  sspec.classes = 10;
  sspec.per_class = 500;
  sspec.image_size = 16;
  sspec.domain = Domain::Source;
  sspec.seed = seed * 1000 + 1;
  Dataset source = gen_synthetic(sspec);

  DatasetSpec tspec = sspec;
  tspec.domain = Domain::Target;
  tspec.seed = seed * 1000 + 2;
  Dataset target_train = gen_synthetic(tspec);

  DatasetSpec qspec = tspec;
  qspec.per_class = 100;
  qspec.seed = seed * 1000 + 3;
  Dataset target_test = gen_synthetic(qspec);

  EncoderConfig ecfg;
  ecfg.image_size = 16;
  ecfg.patch_size = 4;
  ecfg.embed_dim = 64;
  ecfg.depth = 4;
  ecfg.heads = 4;
  ecfg.mlp_ratio = 4;
  ProjectorConfig pcfg{64, 512, 128};

  TrainConfig pre;
  pre.epochs = 4;
  pre.batch_size = 160;
  pre.eta0 = 0.03;
  pre.tau = 0.1;
  pre.prototypes = 300;
  pre.seed = seed;

  Checkpoint base = pretrain_base(UnlabeledView(source), ecfg, pcfg, pre);

  TrainConfig up = pre;
  up.epochs = 3;
  up.s_phi = 0.5;
  up.lambda_cv = 1.0;
  up.adapter_variant = AdapterVariant::Lora;
  up.adapter_policy = AdapterPolicy::QkvProj;
  up.adapter_rank = 16;
  up.adapter_alpha = 1.0;
  up.seed = seed + 50;

  const fs::path run_dir = workdir / ("seed_" + std::to_string(seed));
  RunResult run = run_upstep(base, UnlabeledView(target_train), up, run_dir);
  Checkpoint adapted = load_checkpoint(run.checkpoint_dir);

  // Target-domain k-NN (k=20): gallery = adaptation images with labels
  // revealed only now, queries = the held-out target split.
  const AdapterSet* ad = &*adapted.adapters;
  FeatureBank base_train = extract_features(base.encoder, nullptr, target_train, 256, "base");
  FeatureBank base_test = extract_features(base.encoder, nullptr, target_test, 256, "base");
  FeatureBank ad_train = extract_features(adapted.encoder, ad, target_train, 256, "adapted");
  FeatureBank ad_test = extract_features(adapted.encoder, ad, target_test, 256, "adapted");
  FeatureBank ens_train = ensemble_concat(base_train, ad_train, true);
  FeatureBank ens_test = ensemble_concat(base_test, ad_test, true);

  SeedOutcome out;
  out.seed = seed;
  out.base_acc = knn_classify(base_train, base_test, 20);
  out.adapted_acc = knn_classify(ad_train, ad_test, 20);
  out.ensemble_acc = knn_classify(ens_train, ens_test, 20);
  out.skip_fraction = run.skip_fraction;

  // First- and final-epoch mean center magnitude from the recorded metrics.
  std::size_t max_epoch = 0;
  for (const auto& row : run.metrics) max_epoch = std::max(max_epoch, row.epoch);
  double first_sum = 0.0, final_sum = 0.0;
  std::size_t first_n = 0, final_n = 0;
  for (const auto& row : run.metrics) {
    if (row.epoch == 0) {
      first_sum += row.report.cv_mag;
      ++first_n;
    }
    if (row.epoch == max_epoch) {
      final_sum += row.report.cv_mag;
      ++final_n;
    }
  }
  out.first_epoch_mag = first_sum / static_cast<double>(first_n);
  out.final_epoch_mag = final_sum / static_cast<double>(final_n);
  return out;
}

BenchmarkResult run_benchmark() {
  BenchmarkResult result;
  const fs::path workdir = fs::temp_directory_path() / "upstep_acceptance_bench";
  fs::remove_all(workdir);
  try {
    for (std::uint64_t seed : {1, 2, 3}) {
      result.seeds.push_back(run_benchmark_seed(seed, workdir));
      const SeedOutcome& o = result.seeds.back();
      note("benchmark seed " + std::to_string(seed) + ": base " + fmt("%.1f", o.base_acc * 100) +
           "%, adapted " + fmt("%.1f", o.adapted_acc * 100) + "%, ensemble " +
           fmt("%.1f", o.ensemble_acc * 100) + "%, skip " + fmt("%.2f", o.skip_fraction) +
           ", ||s|| " + fmt("%.3f", o.first_epoch_mag) + " -> " + fmt("%.3f", o.final_epoch_mag));
    }
  } catch (const std::exception& e) {
    result.error = e.what();
  }
  fs::remove_all(workdir);
  return result;
}

// ---- criterion 4: gate skip rate --------------------------------------------

void criterion_4(const BenchmarkResult& bench) {
  const auto t0 = clock_type::now();
  std::mt19937_64 rng(4242);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  CvrState st;
  const int n = 10000;
  for (int i = 0; i < n; ++i) gate(st, dist(rng));
  const double iid_skip = st.skip_fraction();
  const bool iid_ok = iid_skip >= 0.48 && iid_skip <= 0.52;

  bool bench_ok = false;
  std::string bench_detail;
  if (!bench.error.empty()) {
    bench_detail = "benchmark run failed: " + bench.error;
  } else {
    const double mean_skip = bench.mean(&SeedOutcome::skip_fraction);
    bench_ok = mean_skip >= 0.35 && mean_skip <= 0.65;
    bench_detail = "benchmark mean skip " + fmt("%.3f", mean_skip) + " (need [0.35, 0.65])";
  }

  report(4, iid_ok && bench_ok,
         "gate skip rate: iid skip " + fmt("%.4f", iid_skip) + " (need 0.50 +- 0.02); " +
             bench_detail,
         seconds_since(t0));
}

// ---- criterion 5: adapter correctness ---------------------------------------

void criterion_5() {
  const auto t0 = clock_type::now();
  EncoderConfig ecfg;
  ecfg.image_size = 8;
  ecfg.patch_size = 4;
  ecfg.embed_dim = 16;
  ecfg.depth = 2;
  ecfg.heads = 2;
  ecfg.mlp_ratio = 2;

  double worst_merge = 0.0;
  double worst_zero = 0.0;
  const AdapterPolicy policies[] = {AdapterPolicy::Qkv, AdapterPolicy::QkvProj,
                                    AdapterPolicy::QkvProjMlp};

  for (int variant_i = 0; variant_i < 2; ++variant_i) {
    const AdapterVariant variant = variant_i == 0 ? AdapterVariant::Lora : AdapterVariant::Vera;
    for (int inst = 0; inst < 50; ++inst) {
      const std::uint64_t seed = 500 + static_cast<std::uint64_t>(variant_i * 100 + inst);
      InitBundle init = init_weights(ecfg, ProjectorConfig{16, 24, 8}, seed);

      std::mt19937_64 rng(seed + 1);
      std::uniform_real_distribution<double> upix(0.0, 1.0);
      Tensor images = Tensor::zeros({4, 3, 8, 8});
      for (auto& v : images.values()) v = upix(rng);

      AdapterSet adapters = AdapterSet::make(variant, policies[inst % 3], 1 + inst % 4,
                                             0.25 + 0.5 * (inst % 3), init.encoder, seed + 2);

      // zero-init (fresh) adapters must not perturb features at all
      Tensor plain = init.encoder.forward(images);
      Tensor with_zero = init.encoder.forward(images, &adapters);
      const auto pv = std::as_const(plain).values(), zv = std::as_const(with_zero).values();
      for (std::size_t i = 0; i < pv.size(); ++i)
        worst_zero = std::max(worst_zero, std::abs(pv[i] - zv[i]));

      // randomize the trainables, then check adapted forward == merged forward
      std::uniform_real_distribution<double> adist(-0.4, 0.4);
      for (auto& np : adapters.named_params())
        for (auto& v : np.tensor.values()) v = adist(rng);

      Tensor adapted_out = init.encoder.forward(images, &adapters);
      EncoderModel merged = merge_adapters(init.encoder, adapters);
      Tensor merged_out = merged.forward(images);
      const auto av = std::as_const(adapted_out).values(),
                 mv = std::as_const(merged_out).values();
      for (std::size_t i = 0; i < av.size(); ++i)
        worst_merge = std::max(worst_merge, std::abs(av[i] - mv[i]));
    }
  }

  // closed-form parameter count: d=64, L=4, r=4, QKV+PROJ -> exactly 6144
  EncoderConfig ref;
  ref.image_size = 32;
  ref.patch_size = 8;
  ref.embed_dim = 64;
  ref.depth = 4;
  ref.heads = 4;
  ref.mlp_ratio = 4;
  InitBundle ref_init = init_weights(ref, ProjectorConfig{64, 128, 64}, 1);
  AdapterSet ref_adapters =
      AdapterSet::make(AdapterVariant::Lora, AdapterPolicy::QkvProj, 4, 1.0, ref_init.encoder, 2);
  const std::size_t count = ref_adapters.trainable_count();
  ParamReport rep = param_report(ref_init.encoder, nullptr, &ref_adapters);
  const bool count_ok = count == 6144 && rep.trainable == 6144 &&
                        rep.adapter_stored == 6144 &&
                        rep.trainable_fraction ==
                            static_cast<double>(rep.trainable) /
                                static_cast<double>(rep.trainable + rep.frozen);

  const bool pass = worst_merge < 1e-9 && worst_zero == 0.0 && count_ok;
  report(5, pass,
         "adapter correctness: merge-equivalence worst |diff| " + fmt("%.3g", worst_merge) +
             " over 50 LoRA + 50 VeRA instances (need < 1e-9), zero-init worst |diff| " +
             fmt("%.3g", worst_zero) + " (need 0), d=64/L=4/r=4 QKV+PROJ count " +
             std::to_string(count) + " (need 6144)",
         seconds_since(t0));
}

// ---- criteria 6-8: benchmark-driven ------------------------------------------

void criterion_6(const BenchmarkResult& bench) {
  const auto t0 = clock_type::now();
  if (!bench.error.empty()) {
    report(6, false, "end-to-end adaptation: benchmark run failed: " + bench.error,
           seconds_since(t0));
    return;
  }
  const double base = bench.mean(&SeedOutcome::base_acc) * 100.0;
  const double adapted = bench.mean(&SeedOutcome::adapted_acc) * 100.0;
  const double ensemble = bench.mean(&SeedOutcome::ensemble_acc) * 100.0;
  const bool gain_ok = adapted - base >= 5.0;
  const bool ens_ok = ensemble >= adapted - 2.0;
  report(6, gain_ok && ens_ok,
         "end-to-end adaptation: target k-NN base " + fmt("%.1f", base) + "%, adapted " +
             fmt("%.1f", adapted) + "% (gain " + fmt("%+.1f", adapted - base) +
             " pts, need >= +5), ensemble " + fmt("%.1f", ensemble) + "% (need >= adapted - 2)",
         seconds_since(t0));
}

void criterion_7(const BenchmarkResult& bench) {
  const auto t0 = clock_type::now();
  if (!bench.error.empty()) {
    report(7, false, "ablation sanity: benchmark run failed: " + bench.error, seconds_since(t0));
    return;
  }
  for (const auto& o : bench.seeds)
    note("seed " + std::to_string(o.seed) + ": full (CVR + ensemble) " +
         fmt("%.1f", o.ensemble_acc * 100) + "% vs base-only " + fmt("%.1f", o.base_acc * 100) +
         "%");
  const double full = bench.mean(&SeedOutcome::ensemble_acc);
  const double base_only = bench.mean(&SeedOutcome::base_acc);
  report(7, full >= base_only,
         "ablation sanity: full method " + fmt("%.1f", full * 100) + "% vs base-only " +
             fmt("%.1f", base_only * 100) + "% target k-NN, averaged over 3 seeds",
         seconds_since(t0));
}

void criterion_8(const BenchmarkResult& bench) {
  const auto t0 = clock_type::now();
  if (!bench.error.empty()) {
    report(8, false, "CVR effect on ||s||: benchmark run failed: " + bench.error,
           seconds_since(t0));
    return;
  }
  for (const auto& o : bench.seeds)
    note("seed " + std::to_string(o.seed) + ": epoch-mean ||s|| " + fmt("%.4f", o.first_epoch_mag) +
         " (first) -> " + fmt("%.4f", o.final_epoch_mag) + " (final), set point 0.5");
  const double first = bench.mean(&SeedOutcome::first_epoch_mag);
  const double final_m = bench.mean(&SeedOutcome::final_epoch_mag);
  const bool pass = std::abs(final_m - 0.5) < std::abs(first - 0.5);
  report(8, pass,
         "CVR effect on ||s||: |final - 0.5| = " + fmt("%.4f", std::abs(final_m - 0.5)) +
             " vs |first - 0.5| = " + fmt("%.4f", std::abs(first - 0.5)) +
             " (final epoch must sit strictly closer to the set point)",
         seconds_since(t0));
}

// ---- criterion 9: k-NN oracle equivalence -----------------------------------

// Exhaustive reference classifier, written independently of eval.cpp.
std::int64_t brute_predict(const FeatureBank& train, const double* q, std::size_t d,
                           std::size_t k) {
  const auto tv = std::as_const(train.features).values();
  const std::size_t n = train.size();
  std::vector<std::pair<double, std::size_t>> scored(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* t = tv.data() + i * d;
    double dot = 0.0, nq = 0.0, nt = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += q[j] * t[j];
      nq += q[j] * q[j];
      nt += t[j] * t[j];
    }
    scored[i] = {dot / ((nq > 0 ? std::sqrt(nq) : 1.0) * (nt > 0 ? std::sqrt(nt) : 1.0)), i};
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::map<std::int64_t, std::pair<std::size_t, double>> votes;
  for (std::size_t i = 0; i < std::min(k, n); ++i) {
    auto& v = votes[train.labels[scored[i].second]];
    v.first += 1;
    v.second += scored[i].first;
  }
  std::int64_t best = -1;
  std::size_t bc = 0;
  double bs = -1e300;
  for (const auto& [cls, v] : votes)
    if (v.first > bc || (v.first == bc && v.second > bs)) {
      best = cls;
      bc = v.first;
      bs = v.second;
    }
  return best;
}

void criterion_9() {
  const auto t0 = clock_type::now();
  int agreements = 0, total = 0;
  std::mt19937_64 rng(1234);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (int inst = 0; inst < 25; ++inst) {
    const std::size_t n = 50, m = 20, d = 8;
    FeatureBank train, test;
    train.features = Tensor::zeros({n, d});
    for (auto& v : train.features.values()) v = dist(rng);
    train.labels.resize(n);
    for (auto& l : train.labels) l = static_cast<std::int64_t>(rng() % 4);
    test.features = Tensor::zeros({m, d});
    for (auto& v : test.features.values()) v = dist(rng);
    test.labels.assign(m, 0);

    std::vector<std::int64_t> got;
    knn_classify(train, test, 20, &got);
    const auto qv = std::as_const(test.features).values();
    for (std::size_t i = 0; i < m; ++i) {
      ++total;
      if (got[i] == brute_predict(train, qv.data() + i * d, d, 20)) ++agreements;
    }
  }
  report(9, agreements == total,
         "k-NN oracle equivalence: " + std::to_string(agreements) + "/" + std::to_string(total) +
             " predictions match the exhaustive reference exactly over 25 instances",
         seconds_since(t0));
}

// ---- criterion 10: skip-step purity -----------------------------------------

void criterion_10() {
  const auto t0 = clock_type::now();

  EncoderConfig ecfg;
  ecfg.image_size = 8;
  ecfg.patch_size = 4;
  ecfg.embed_dim = 16;
  ecfg.depth = 2;
  ecfg.heads = 2;
  ecfg.mlp_ratio = 2;
  ProjectorConfig pcfg{16, 32, 8};
  InitBundle init = init_weights(ecfg, pcfg, 77);

  TrainState state;
  state.online_encoder = std::move(init.encoder);
  state.online_projector = std::move(init.projector);
  state.online_encoder.set_trainable(true);
  state.online_projector.set_trainable(true);
  state.offline_encoder = state.online_encoder.clone();
  state.offline_projector = state.online_projector.clone();
  state.offline_encoder.set_trainable(false);
  state.offline_projector.set_trainable(false);
  state.bank = make_prototypes(16, pcfg.out_dim, 78);
  std::vector<Tensor> online = state.online_encoder.params();
  for (auto& p : state.online_projector.params()) online.push_back(p);
  std::vector<Tensor> offline = state.offline_encoder.params();
  for (auto& p : state.offline_projector.params()) offline.push_back(p);
  for (std::size_t i = 0; i < online.size(); ++i)
    state.refresh_pairs.emplace_back(online[i], offline[i]);
  state.optimizer = Adam(online);

  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.prototypes = 16;
  cfg.seed = 5;

  DatasetSpec spec;
  spec.classes = 4;
  spec.per_class = 16;
  spec.image_size = 8;
  spec.seed = 70;
  Dataset ds = gen_synthetic(spec);
  UnlabeledBatchStream stream(UnlabeledView(ds), cfg.batch_size, 71);
  std::mt19937_64 aug_rng(72);

  std::size_t skipped_checked = 0, updated_seen = 0, violations = 0;
  const std::size_t steps = 48;
  for (std::size_t s = 0; s < steps; ++s) {
    if (s % 8 == 7) state.cvr.prev_mag = 0.0;  // guarantee some skips get exercised
    Tensor batch = stream.batch(s / stream.batches_per_epoch() % 4,
                                s % stream.batches_per_epoch());
    ViewPair views = two_views(batch, cfg.augment, aug_rng);
    const std::uint64_t before = params_hash(state.trainables());
    StepReport rep = upstep_step(state, views, cfg);
    const std::uint64_t after = params_hash(state.trainables());
    if (!rep.updated) {
      ++skipped_checked;
      if (after != before) ++violations;
    } else {
      ++updated_seen;
    }
  }

  const bool pass = violations == 0 && skipped_checked > 0;
  report(10, pass,
         "skip-step purity: " + std::to_string(skipped_checked) + " skipped and " +
             std::to_string(updated_seen) + " updated steps over " + std::to_string(steps) +
             " recorded steps, " + std::to_string(violations) +
             " parameter-hash violations on skipped steps",
         seconds_since(t0));
}

}  // namespace

int main() {
  const auto t0 = clock_type::now();
  std::printf("UpStep acceptance gate\n");

  criterion_1();
  criterion_2();
  criterion_3();

  std::printf("running the shared synthetic benchmark (3 seeds) for criteria 4b/6/7/8...\n");
  std::fflush(stdout);
  const BenchmarkResult bench = run_benchmark();

  criterion_4(bench);
  criterion_5();
  criterion_6(bench);
  criterion_7(bench);
  criterion_8(bench);
  criterion_9();
  criterion_10();

  std::printf("%s (total %.1f s)\n", g_all_pass ? "ALL CRITERIA PASS" : "SOME CRITERIA FAILED",
              seconds_since(t0));
  return g_all_pass ? 0 : 1;
}
