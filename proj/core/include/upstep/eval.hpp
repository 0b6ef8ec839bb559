#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "upstep/adapters.hpp"
#include "upstep/data.hpp"
#include "upstep/nn.hpp"

namespace upstep {

struct FeatureBank {
  Tensor features;  // [N, D]
  std::vector<std::int64_t> labels;
  std::string model_tag;

  std::size_t size() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
};

// Gradient-free batched encoding of a labeled dataset.
FeatureBank extract_features(const EncoderModel& model, const AdapterSet* adapters,
                             const Dataset& ds, std::size_t batch_size = 256,
                             std::string model_tag = "");

// Column-wise concatenation of two banks over the same examples. When
// normalize_each is set, each bank's rows are L2-normalized first so neither
// feature scale dominates.
FeatureBank ensemble_concat(const FeatureBank& a, const FeatureBank& b,
                            bool normalize_each = true);

enum class KnnMetric { Cosine, Euclidean };

// k-NN majority vote, cosine similarity by default. Ties break by summed
// neighbor similarity, then by the lowest class id; neighbor order is
// (similarity desc, train index asc), so results are deterministic. Returns
// accuracy in [0, 1]; per-example predictions are written to `predictions`
// when non-null.
double knn_classify(const FeatureBank& train, const FeatureBank& test, std::size_t k = 20,
                    std::vector<std::int64_t>* predictions = nullptr,
                    KnnMetric metric = KnnMetric::Cosine);

struct ProbeConfig {
  std::size_t steps = 500;
  double lr = 0.1;
  double weight_decay = 1e-4;
};

// Multinomial logistic regression on frozen features, full-batch gradient
// descent from a zero init. Deterministic; NumericError if the loss diverges.
double linear_probe(const FeatureBank& train, const FeatureBank& test,
                    const ProbeConfig& cfg = {});

struct EvalEntry {
  std::string protocol;  // "knn" | "linear"
  std::size_t k = 0;     // 0 for linear
  double accuracy = 0.0;
  std::size_t n_train = 0, n_test = 0, feature_dim = 0;
  std::vector<std::string> model_tags;
};

struct EvalSplit {
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;
};

struct ForgettingReport {
  double source_acc_base = 0.0, source_acc_adapted = 0.0, source_acc_ensemble = 0.0;
  double target_acc_base = 0.0, target_acc_adapted = 0.0, target_acc_ensemble = 0.0;
  // Ensemble minus un-ensembled adapted accuracy, per domain.
  double source_ensemble_gap = 0.0;
  double target_ensemble_gap = 0.0;
};

// k-NN accuracies of base, adapted and concatenated features on both domains,
// plus the ensemble-vs-adapted gaps.
ForgettingReport forgetting_report(const EncoderModel& base, const EncoderModel& adapted_model,
                                   const AdapterSet* adapters, const EvalSplit& source,
                                   const EvalSplit& target, std::size_t k,
                                   bool ensemble_normalize);

}  // namespace upstep
