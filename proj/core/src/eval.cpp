#include "upstep/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace upstep {

FeatureBank extract_features(const EncoderModel& model, const AdapterSet* adapters,
                             const Dataset& ds, std::size_t batch_size, std::string model_tag) {
  if (batch_size == 0) throw ContractError("extract_features: batch_size must be positive");
  NoGradGuard ng;
  const std::size_t n = ds.size();
  const std::size_t d = model.cfg.embed_dim;
  FeatureBank bank;
  bank.features = Tensor::zeros({n, d});
  bank.labels = ds.labels;
  bank.model_tag = std::move(model_tag);

  UnlabeledView view(ds);
  std::vector<std::size_t> idx;
  auto out = bank.features.values();
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor f = model.forward(view.gather(idx), adapters);
    const auto fv = std::as_const(f).values();
    std::copy(fv.begin(), fv.end(), out.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return bank;
}

FeatureBank ensemble_concat(const FeatureBank& a, const FeatureBank& b, bool normalize_each) {
  if (a.size() != b.size())
    throw ContractError("ensemble_concat: banks cover " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + " examples");
  if (a.labels != b.labels)
    throw ContractError("ensemble_concat: banks disagree on example labels");

  const std::size_t n = a.size(), da = a.dim(), db = b.dim();
  FeatureBank out;
  out.features = Tensor::zeros({n, da + db});
  out.labels = a.labels;
  out.model_tag = a.model_tag + "+" + b.model_tag;

  auto dst = out.features.values();
  const auto va = std::as_const(a.features).values();
  const auto vb = std::as_const(b.features).values();
  auto copy_row = [&](std::span<const double> src, std::size_t i, std::size_t width,
                      std::size_t offset) {
    double inv = 1.0;
    if (normalize_each) {
      double ss = 0.0;
      for (std::size_t j = 0; j < width; ++j) ss += src[i * width + j] * src[i * width + j];
      // A zero row stays zero rather than poisoning the concat with NaNs.
      inv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;
    }
    for (std::size_t j = 0; j < width; ++j)
      dst[i * (da + db) + offset + j] = src[i * width + j] * inv;
  };
  for (std::size_t i = 0; i < n; ++i) {
    copy_row(va, i, da, 0);
    copy_row(vb, i, db, da);
  }
  return out;
}

namespace {

struct Neighbor {
  double sim;
  std::size_t index;
};

}  // namespace

double knn_classify(const FeatureBank& train, const FeatureBank& test, std::size_t k,
                    std::vector<std::int64_t>* predictions, KnnMetric metric) {
  if (train.size() == 0 || test.size() == 0)
    throw ContractError("knn_classify: empty feature bank");
  if (train.dim() != test.dim())
    throw ContractError("knn_classify: feature dims differ: " + std::to_string(train.dim()) +
                        " vs " + std::to_string(test.dim()));
  if (k == 0) throw ContractError("knn_classify: k must be positive");
  if (train.labels.size() != train.size() || test.labels.size() != test.size())
    throw ContractError("knn_classify: label count does not match bank size");
  k = std::min(k, train.size());

  const std::size_t d = train.dim(), n_train = train.size(), n_test = test.size();
  const auto tr = std::as_const(train.features).values();
  const auto te = std::as_const(test.features).values();

  // Cosine needs unit rows; precompute train norms once.
  std::vector<double> tr_norm(n_train, 1.0);
  if (metric == KnnMetric::Cosine) {
    for (std::size_t i = 0; i < n_train; ++i) {
      double ss = 0.0;
      for (std::size_t j = 0; j < d; ++j) ss += tr[i * d + j] * tr[i * d + j];
      tr_norm[i] = ss > 0.0 ? std::sqrt(ss) : 1.0;
    }
  }

  std::int64_t max_label = 0;
  for (auto l : train.labels) max_label = std::max(max_label, l);
  const std::size_t n_classes = static_cast<std::size_t>(max_label) + 1;

  if (predictions) predictions->assign(n_test, -1);
  std::size_t correct = 0;
  std::vector<Neighbor> nb(n_train);
  std::vector<double> votes(n_classes), sims(n_classes);

  for (std::size_t q = 0; q < n_test; ++q) {
    double q_norm = 1.0;
    if (metric == KnnMetric::Cosine) {
      double ss = 0.0;
      for (std::size_t j = 0; j < d; ++j) ss += te[q * d + j] * te[q * d + j];
      q_norm = ss > 0.0 ? std::sqrt(ss) : 1.0;
    }
    for (std::size_t i = 0; i < n_train; ++i) {
      double s;
      if (metric == KnnMetric::Cosine) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += te[q * d + j] * tr[i * d + j];
        s = dot / (q_norm * tr_norm[i]);
      } else {
        double dist = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = te[q * d + j] - tr[i * d + j];
          dist += diff * diff;
        }
        s = -dist;  // larger is closer, matching the cosine ordering
      }
      nb[i] = {s, i};
    }
    std::partial_sort(nb.begin(), nb.begin() + static_cast<std::ptrdiff_t>(k), nb.end(),
                      [](const Neighbor& a, const Neighbor& b) {
                        if (a.sim != b.sim) return a.sim > b.sim;
                        return a.index < b.index;
                      });

    std::fill(votes.begin(), votes.end(), 0.0);
    std::fill(sims.begin(), sims.end(), 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      const auto cls = static_cast<std::size_t>(train.labels[nb[i].index]);
      votes[cls] += 1.0;
      sims[cls] += nb[i].sim;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < n_classes; ++c) {
      if (votes[c] > votes[best] || (votes[c] == votes[best] && sims[c] > sims[best])) best = c;
    }
    const auto pred = static_cast<std::int64_t>(best);
    if (predictions) (*predictions)[q] = pred;
    if (pred == test.labels[q]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_test);
}

double linear_probe(const FeatureBank& train, const FeatureBank& test, const ProbeConfig& cfg) {
  if (train.size() == 0 || test.size() == 0) throw ContractError("linear_probe: empty bank");
  if (train.dim() != test.dim()) throw ContractError("linear_probe: feature dims differ");

  std::int64_t max_label = 0;
  for (auto l : train.labels) max_label = std::max(max_label, l);
  const std::size_t n_classes = static_cast<std::size_t>(max_label) + 1;
  const std::size_t n = train.size(), d = train.dim();
  if (n_classes < 2) throw ContractError("linear_probe: need at least 2 classes");

  const auto x = std::as_const(train.features).values();
  std::vector<double> w(d * n_classes, 0.0), b(n_classes, 0.0);
  std::vector<double> logits(n_classes), gw(d * n_classes), gb(n_classes);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < n_classes; ++c) {
        double z = b[c];
        for (std::size_t j = 0; j < d; ++j) z += x[i * d + j] * w[j * n_classes + c];
        logits[c] = z;
      }
      const double zmax = *std::max_element(logits.begin(), logits.end());
      double zsum = 0.0;
      for (double& z : logits) {
        z = std::exp(z - zmax);
        zsum += z;
      }
      const auto y = static_cast<std::size_t>(train.labels[i]);
      loss -= std::log(std::max(logits[y] / zsum, 1e-300));
      for (std::size_t c = 0; c < n_classes; ++c) {
        const double g = logits[c] / zsum - (c == y ? 1.0 : 0.0);
        gb[c] += g;
        for (std::size_t j = 0; j < d; ++j) gw[j * n_classes + c] += g * x[i * d + j];
      }
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss))
      throw NumericError("linear_probe: loss diverged at step " + std::to_string(step));
    const double scl = cfg.lr / static_cast<double>(n);
    for (std::size_t t = 0; t < w.size(); ++t)
      w[t] -= scl * gw[t] + cfg.lr * cfg.weight_decay * w[t];
    for (std::size_t c = 0; c < n_classes; ++c) gb[c] *= scl, b[c] -= gb[c];
  }

  const auto xt = std::as_const(test.features).values();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t best = 0;
    double best_z = -1e300;
    for (std::size_t c = 0; c < n_classes; ++c) {
      double z = b[c];
      for (std::size_t j = 0; j < d; ++j) z += xt[i * d + j] * w[j * n_classes + c];
      if (z > best_z) best_z = z, best = c;
    }
    if (static_cast<std::int64_t>(best) == test.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

ForgettingReport forgetting_report(const EncoderModel& base, const EncoderModel& adapted_model,
                                   const AdapterSet* adapters, const EvalSplit& source,
                                   const EvalSplit& target, std::size_t k,
                                   bool ensemble_normalize) {
  if (!source.train || !source.test || !target.train || !target.test)
    throw ContractError("forgetting_report: all four dataset splits are required");

  auto eval_domain = [&](const EvalSplit& split, double& acc_base, double& acc_adapted,
                         double& acc_ensemble) {
    FeatureBank base_tr = extract_features(base, nullptr, *split.train, 256, "base");
    FeatureBank base_te = extract_features(base, nullptr, *split.test, 256, "base");
    FeatureBank ad_tr = extract_features(adapted_model, adapters, *split.train, 256, "adapted");
    FeatureBank ad_te = extract_features(adapted_model, adapters, *split.test, 256, "adapted");
    acc_base = knn_classify(base_tr, base_te, k);
    acc_adapted = knn_classify(ad_tr, ad_te, k);
    FeatureBank ens_tr = ensemble_concat(base_tr, ad_tr, ensemble_normalize);
    FeatureBank ens_te = ensemble_concat(base_te, ad_te, ensemble_normalize);
    acc_ensemble = knn_classify(ens_tr, ens_te, k);
  };

  ForgettingReport rep;
  eval_domain(source, rep.source_acc_base, rep.source_acc_adapted, rep.source_acc_ensemble);
  eval_domain(target, rep.target_acc_base, rep.target_acc_adapted, rep.target_acc_ensemble);
  rep.source_ensemble_gap = rep.source_acc_ensemble - rep.source_acc_adapted;
  rep.target_ensemble_gap = rep.target_acc_ensemble - rep.target_acc_adapted;
  return rep;
}

}  // namespace upstep
