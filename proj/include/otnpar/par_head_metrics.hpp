#pragma once

#include <string>
#include <vector>

#include "otnpar/graph.hpp"

namespace otnpar::par {

using ad::Mat;
using LabelMatrix = Eigen::MatrixXi;  // N_samples x M_attr, entries in {0,1}
using BinaryMatrix = Eigen::MatrixXi;

struct AttributePrediction {
  Mat logits;         // rows x M_attr
  Mat probabilities;  // sigmoid(logits)
  BinaryMatrix binary;  // thresholded at 0.5, ties count positive
};

/// Per-attribute positive ratios with the sample-conditional exponential
/// weighting: positive samples weigh exp(1 - r_j), negatives exp(r_j).
struct AttributeWeights {
  Eigen::VectorXd positive_ratio;  // r_j
  Mat pos_w;                       // 1 x M, exp(1 - r_j)
  Mat neg_w;                       // 1 x M, exp(r_j)
};

struct ConfusionCounts {
  std::vector<int64_t> tp, tn, fp, fn;  // per attribute
  int64_t pooled_tp() const;
  int64_t pooled_tn() const;
  int64_t pooled_fp() const;
  int64_t pooled_fn() const;
  int attributes() const { return static_cast<int>(tp.size()); }
};

struct Metrics {
  double mA = 0, acc = 0, prec = 0, recall = 0, f1 = 0;
};

/// Mean-pool tokens, apply the linear head, sigmoid, threshold at 0.5.
AttributePrediction classify(const Mat& fused_tokens, const Mat& head_weights,
                             const Mat& head_bias);

AttributeWeights attribute_weights(const LabelMatrix& labels);

/// -(1/N) sum_ij w_j(y_ij) [y log p + (1-y) log(1-p)], probabilities clipped
/// to [1e-7, 1-1e-7].
double wce_loss(const Mat& probabilities, const LabelMatrix& labels, const AttributeWeights& w);

ConfusionCounts confusion(const BinaryMatrix& predictions, const LabelMatrix& labels);

/// Pooled accuracy/precision/recall/F1 plus label-based mean accuracy
/// (per-attribute mean of (TPR+TNR)/2). Zero denominators yield 0.
Metrics compute_metrics(const ConfusionCounts& counts);

/// {"mA":..,"acc":..,"prec":..,"recall":..,"f1":..,"per_attribute":[...]},
/// values rounded to 5 decimals. Serialized deterministically.
std::string metrics_json(const ConfusionCounts& counts, const std::vector<std::string>& attribute_names);

double round5(double v);

}  // namespace otnpar::par
