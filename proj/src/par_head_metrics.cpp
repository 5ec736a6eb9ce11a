#include "otnpar/par_head_metrics.hpp"

#include <cmath>
#include <numeric>

#include <json.hpp>

namespace otnpar::par {

namespace {
constexpr double kClip = 1e-7;

double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }
}  // namespace

int64_t ConfusionCounts::pooled_tp() const { return std::accumulate(tp.begin(), tp.end(), int64_t{0}); }
int64_t ConfusionCounts::pooled_tn() const { return std::accumulate(tn.begin(), tn.end(), int64_t{0}); }
int64_t ConfusionCounts::pooled_fp() const { return std::accumulate(fp.begin(), fp.end(), int64_t{0}); }
int64_t ConfusionCounts::pooled_fn() const { return std::accumulate(fn.begin(), fn.end(), int64_t{0}); }

AttributePrediction classify(const Mat& fused_tokens, const Mat& head_weights,
                             const Mat& head_bias) {
  if (fused_tokens.cols() != head_weights.rows())
    throw ShapeError("classify: token channels do not match head weights");
  if (head_bias.rows() != 1 || head_bias.cols() != head_weights.cols())
    throw ShapeError("classify: head bias must be 1xM");
  AttributePrediction pred;
  Mat pooled = fused_tokens.colwise().mean();
  pred.logits = pooled * head_weights + head_bias;
  pred.probabilities = pred.logits.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  pred.binary.resize(pred.logits.rows(), pred.logits.cols());
  for (Eigen::Index i = 0; i < pred.logits.rows(); ++i)
    for (Eigen::Index j = 0; j < pred.logits.cols(); ++j)
      pred.binary(i, j) = pred.probabilities(i, j) >= 0.5 ? 1 : 0;
  return pred;
}

AttributeWeights attribute_weights(const LabelMatrix& labels) {
  if (labels.rows() < 1) throw ShapeError("attribute_weights: need at least one sample");
  AttributeWeights w;
  const Eigen::Index m = labels.cols();
  w.positive_ratio.resize(m);
  w.pos_w.resize(1, m);
  w.neg_w.resize(1, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    double r = labels.col(j).cast<double>().mean();
    w.positive_ratio(j) = r;
    w.pos_w(0, j) = std::exp(1.0 - r);
    w.neg_w(0, j) = std::exp(r);
  }
  return w;
}

double wce_loss(const Mat& probabilities, const LabelMatrix& labels, const AttributeWeights& w) {
  if (probabilities.rows() != labels.rows() || probabilities.cols() != labels.cols())
    throw ShapeError("wce_loss: probabilities and labels shapes disagree");
  if (w.pos_w.cols() != probabilities.cols())
    throw ShapeError("wce_loss: weight count does not match attribute count");
  double total = 0.0;
  for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
    for (Eigen::Index j = 0; j < probabilities.cols(); ++j) {
      double p = std::min(1.0 - kClip, std::max(kClip, probabilities(i, j)));
      if (labels(i, j) == 1)
        total += w.pos_w(0, j) * std::log(p);
      else
        total += w.neg_w(0, j) * std::log(1.0 - p);
    }
  }
  return -total / static_cast<double>(probabilities.rows());
}

ConfusionCounts confusion(const BinaryMatrix& predictions, const LabelMatrix& labels) {
  if (predictions.rows() != labels.rows() || predictions.cols() != labels.cols())
    throw ShapeError("confusion: predictions and labels shapes disagree");
  const Eigen::Index m = labels.cols();
  ConfusionCounts counts;
  counts.tp.assign(m, 0);
  counts.tn.assign(m, 0);
  counts.fp.assign(m, 0);
  counts.fn.assign(m, 0);
  for (Eigen::Index i = 0; i < labels.rows(); ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      if (labels(i, j) == 1) {
        if (predictions(i, j) == 1)
          ++counts.tp[j];
        else
          ++counts.fn[j];
      } else {
        if (predictions(i, j) == 1)
          ++counts.fp[j];
        else
          ++counts.tn[j];
      }
    }
  }
  return counts;
}

Metrics compute_metrics(const ConfusionCounts& counts) {
  const double tp = static_cast<double>(counts.pooled_tp());
  const double tn = static_cast<double>(counts.pooled_tn());
  const double fp = static_cast<double>(counts.pooled_fp());
  const double fn = static_cast<double>(counts.pooled_fn());
  if (tp + tn + fp + fn == 0.0) throw DataError("empty evaluation: no samples");
  Metrics m;
  m.acc = safe_div(tp + tn, fp + fn + tp + tn);
  m.prec = safe_div(tp, fp + tp);
  m.recall = safe_div(tp, tp + fn);
  m.f1 = safe_div(2.0 * m.recall * m.prec, m.recall + m.prec);
  double ma_total = 0.0;
  for (int j = 0; j < counts.attributes(); ++j) {
    double tpr = safe_div(static_cast<double>(counts.tp[j]),
                          static_cast<double>(counts.tp[j] + counts.fn[j]));
    double tnr = safe_div(static_cast<double>(counts.tn[j]),
                          static_cast<double>(counts.tn[j] + counts.fp[j]));
    ma_total += 0.5 * (tpr + tnr);
  }
  m.mA = counts.attributes() > 0 ? ma_total / counts.attributes() : 0.0;
  return m;
}

double round5(double v) { return std::round(v * 1e5) / 1e5; }

std::string metrics_json(const ConfusionCounts& counts,
                         const std::vector<std::string>& attribute_names) {
  Metrics m = compute_metrics(counts);
  nlohmann::ordered_json j;
  j["mA"] = round5(m.mA);
  j["acc"] = round5(m.acc);
  j["prec"] = round5(m.prec);
  j["recall"] = round5(m.recall);
  j["f1"] = round5(m.f1);
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (int a = 0; a < counts.attributes(); ++a) {
    nlohmann::ordered_json entry;
    entry["name"] = a < static_cast<int>(attribute_names.size()) ? attribute_names[a]
                                                                 : "attr_" + std::to_string(a);
    entry["tp"] = counts.tp[a];
    entry["tn"] = counts.tn[a];
    entry["fp"] = counts.fp[a];
    entry["fn"] = counts.fn[a];
    double tpr = safe_div(static_cast<double>(counts.tp[a]),
                          static_cast<double>(counts.tp[a] + counts.fn[a]));
    double tnr = safe_div(static_cast<double>(counts.tn[a]),
                          static_cast<double>(counts.tn[a] + counts.fp[a]));
    entry["tpr"] = round5(tpr);
    entry["tnr"] = round5(tnr);
    entry["mean_acc"] = round5(0.5 * (tpr + tnr));
    per.push_back(entry);
  }
  j["per_attribute"] = per;
  return j.dump(2);
}

}  // namespace otnpar::par
