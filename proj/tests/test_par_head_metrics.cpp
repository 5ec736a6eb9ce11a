#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include "otnpar/par_head_metrics.hpp"
#include "testing.hpp"

using namespace otnpar;
using namespace otnpar::par;
using ad::Mat;

TEST_CASE("classification head pools, projects and thresholds") {
  Rng rng(31);

  SUBCASE("zero weights give 0.5 probabilities and positive tie-break") {
    Mat tokens = oracle::random_matrix(6, 4, rng);
    AttributePrediction pred = classify(tokens, Mat::Zero(4, 3), Mat::Zero(1, 3));
    for (int j = 0; j < 3; ++j) {
      CHECK(pred.probabilities(0, j) == 0.5);
      CHECK(pred.binary(0, j) == 1);  // p = 0.5 counts positive
    }
  }

  SUBCASE("single token with identity head gives sigmoid of the token") {
    Mat token = oracle::random_matrix(1, 4, rng);
    AttributePrediction pred = classify(token, Mat::Identity(4, 4), Mat::Zero(1, 4));
    for (int j = 0; j < 4; ++j)
      CHECK(pred.probabilities(0, j) ==
            doctest::Approx(1.0 / (1.0 + std::exp(-token(0, j)))).epsilon(1e-12));
  }

  SUBCASE("random instance equals mean-then-affine") {
    Mat tokens = oracle::random_matrix(5, 4, rng);
    Mat w = oracle::random_matrix(4, 3, rng);
    Mat b = oracle::random_matrix(1, 3, rng);
    AttributePrediction pred = classify(tokens, w, b);
    Mat expected = tokens.colwise().mean() * w + b;
    CHECK(pred.logits.isApprox(expected, 1e-12));
  }
}

TEST_CASE("attribute weights follow the exponential imbalance rule") {
  SUBCASE("balanced attribute weighs both classes equally") {
    LabelMatrix labels(4, 1);
    labels << 1, 1, 0, 0;
    AttributeWeights w = attribute_weights(labels);
    CHECK(w.positive_ratio(0) == doctest::Approx(0.5));
    CHECK(w.pos_w(0, 0) == doctest::Approx(std::exp(0.5)).epsilon(1e-12));
    CHECK(w.neg_w(0, 0) == doctest::Approx(std::exp(0.5)).epsilon(1e-12));
  }

  SUBCASE("a never-positive attribute boosts the positive case to e") {
    LabelMatrix labels = LabelMatrix::Zero(5, 1);
    AttributeWeights w = attribute_weights(labels);
    CHECK(w.pos_w(0, 0) == doctest::Approx(std::exp(1.0)));
    CHECK(w.neg_w(0, 0) == doctest::Approx(1.0));
  }
}

TEST_CASE("weighted cross-entropy") {
  SUBCASE("perfect predictions give near-zero loss") {
    LabelMatrix labels(2, 3);
    labels << 1, 0, 1, 0, 1, 0;
    Mat probs(2, 3);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) probs(i, j) = labels(i, j) == 1 ? 1.0 : 0.0;
    AttributeWeights w = attribute_weights(labels);
    const double loss = wce_loss(probs, labels, w);
    CHECK(loss >= 0.0);
    CHECK(loss < 3 * 1e-6 * std::exp(1.0));
  }

  SUBCASE("p = 0.5 against a positive label costs ln 2") {
    LabelMatrix labels(1, 1);
    labels << 1;
    Mat probs(1, 1);
    probs << 0.5;
    AttributeWeights w;
    w.positive_ratio = Eigen::VectorXd::Zero(1);
    w.pos_w = Mat::Ones(1, 1);
    w.neg_w = Mat::Ones(1, 1);
    CHECK(wce_loss(probs, labels, w) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("random instance matches the direct double sum") {
    Rng rng(32);
    LabelMatrix labels(2, 3);
    Mat probs(2, 3);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) {
        labels(i, j) = rng.bernoulli(0.5) ? 1 : 0;
        probs(i, j) = rng.uniform(0.05, 0.95);
      }
    AttributeWeights w = attribute_weights(labels);
    double expected = 0.0;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j)
        expected -= labels(i, j) == 1 ? w.pos_w(0, j) * std::log(probs(i, j))
                                      : w.neg_w(0, j) * std::log(1.0 - probs(i, j));
    expected /= 2.0;
    CHECK(wce_loss(probs, labels, w) == doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("loss strictly decreases as a probability moves toward its label") {
    LabelMatrix labels(1, 2);
    labels << 1, 0;
    AttributeWeights w = attribute_weights(labels);
    double prev = 1e18;
    for (double p : {0.2, 0.4, 0.6, 0.8, 0.95}) {
      Mat probs(1, 2);
      probs << p, 1.0 - p;
      const double loss = wce_loss(probs, labels, w);
      CHECK(loss < prev);
      prev = loss;
    }
  }
}

TEST_CASE("confusion tallies") {
  SUBCASE("perfect predictions have no false counts") {
    LabelMatrix labels(3, 2);
    labels << 1, 0, 0, 1, 1, 1;
    ConfusionCounts counts = confusion(labels, labels);
    CHECK(counts.pooled_fp() == 0);
    CHECK(counts.pooled_fn() == 0);
    CHECK(counts.pooled_tp() == 4);
    CHECK(counts.pooled_tn() == 2);
  }

  SUBCASE("complemented predictions have no true counts") {
    LabelMatrix labels(3, 2);
    labels << 1, 0, 0, 1, 1, 1;
    BinaryMatrix preds = BinaryMatrix::Ones(3, 2) - labels;
    ConfusionCounts counts = confusion(preds, labels);
    CHECK(counts.pooled_tp() == 0);
    CHECK(counts.pooled_tn() == 0);
  }

  SUBCASE("crafted 4x2 instance matches the hand count") {
    LabelMatrix labels(4, 2);
    labels << 1, 0, 1, 1, 0, 0, 0, 1;
    BinaryMatrix preds(4, 2);
    preds << 1, 1, 0, 1, 0, 0, 1, 0;
    ConfusionCounts counts = confusion(preds, labels);
    CHECK(counts.tp[0] == 1);
    CHECK(counts.fn[0] == 1);
    CHECK(counts.tn[0] == 1);
    CHECK(counts.fp[0] == 1);
    CHECK(counts.tp[1] == 1);
    CHECK(counts.fp[1] == 1);
    CHECK(counts.fn[1] == 1);
    CHECK(counts.tn[1] == 1);
    // Per-attribute counts sum to the pooled tallies exactly.
    CHECK(counts.pooled_tp() == counts.tp[0] + counts.tp[1]);
    CHECK(counts.pooled_tp() + counts.pooled_tn() + counts.pooled_fp() + counts.pooled_fn() ==
          4 * 2);
  }
}

TEST_CASE("metric formulas") {
  SUBCASE("hand-tallied pooled counts give the known values") {
    ConfusionCounts counts;
    counts.tp = {3};
    counts.tn = {2};
    counts.fp = {1};
    counts.fn = {2};
    Metrics m = compute_metrics(counts);
    CHECK(round5(m.acc) == 0.625);
    CHECK(round5(m.prec) == 0.75);
    CHECK(round5(m.recall) == 0.6);
    CHECK(round5(m.f1) == 0.66667);
  }

  SUBCASE("all-correct predictions score 1.0 on every metric") {
    LabelMatrix labels(4, 3);
    labels << 1, 0, 1, 0, 1, 0, 1, 1, 0, 0, 0, 1;
    Metrics m = compute_metrics(confusion(labels, labels));
    CHECK(m.mA == 1.0);
    CHECK(m.acc == 1.0);
    CHECK(m.prec == 1.0);
    CHECK(m.recall == 1.0);
    CHECK(m.f1 == 1.0);
  }

  SUBCASE("an always-positive attribute on balanced labels contributes 0.5 to mA") {
    LabelMatrix labels(4, 1);
    labels << 1, 1, 0, 0;
    BinaryMatrix preds = BinaryMatrix::Ones(4, 1);
    Metrics m = compute_metrics(confusion(preds, labels));
    CHECK(m.mA == doctest::Approx(0.5));
  }

  SUBCASE("F1 lies between precision and recall") {
    Rng rng(33);
    for (int trial = 0; trial < 20; ++trial) {
      LabelMatrix labels(10, 4);
      BinaryMatrix preds(10, 4);
      for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 4; ++j) {
          labels(i, j) = rng.bernoulli(0.5) ? 1 : 0;
          preds(i, j) = rng.bernoulli(0.5) ? 1 : 0;
        }
      Metrics m = compute_metrics(confusion(preds, labels));
      CHECK(m.f1 >= std::min(m.prec, m.recall) - 1e-12);
      CHECK(m.f1 <= std::max(m.prec, m.recall) + 1e-12);
    }
  }

  SUBCASE("sample order does not change metrics or loss") {
    Rng rng(34);
    const int n = 12, m_attr = 3;
    LabelMatrix labels(n, m_attr);
    BinaryMatrix preds(n, m_attr);
    Mat probs(n, m_attr);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m_attr; ++j) {
        labels(i, j) = rng.bernoulli(0.4) ? 1 : 0;
        preds(i, j) = rng.bernoulli(0.5) ? 1 : 0;
        probs(i, j) = rng.uniform(0.05, 0.95);
      }
    AttributeWeights w = attribute_weights(labels);
    Metrics base = compute_metrics(confusion(preds, labels));
    const double base_loss = wce_loss(probs, labels, w);

    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    for (int trial = 0; trial < 5; ++trial) {
      for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
      LabelMatrix lp(n, m_attr);
      BinaryMatrix pp(n, m_attr);
      Mat qp(n, m_attr);
      for (int i = 0; i < n; ++i) {
        lp.row(i) = labels.row(perm[i]);
        pp.row(i) = preds.row(perm[i]);
        qp.row(i) = probs.row(perm[i]);
      }
      Metrics shuffled = compute_metrics(confusion(pp, lp));
      CHECK(shuffled.mA == doctest::Approx(base.mA).epsilon(1e-15));
      CHECK(shuffled.acc == doctest::Approx(base.acc).epsilon(1e-15));
      CHECK(shuffled.f1 == doctest::Approx(base.f1).epsilon(1e-15));
      CHECK(wce_loss(qp, lp, w) == doctest::Approx(base_loss).epsilon(1e-12));
    }
  }

  SUBCASE("empty evaluation is rejected") {
    ConfusionCounts counts;
    CHECK_THROWS_AS(compute_metrics(counts), DataError);
  }
}

TEST_CASE("metrics JSON carries rounded pooled values and a per-attribute block") {
  ConfusionCounts counts;
  counts.tp = {3, 1};
  counts.tn = {2, 2};
  counts.fp = {1, 0};
  counts.fn = {2, 1};
  const std::string text = metrics_json(counts, {"hat", "bag"});
  auto j = nlohmann::json::parse(text);
  CHECK(j["acc"].get<double>() == doctest::Approx((3 + 1 + 2 + 2) / 12.0).epsilon(1e-9));
  CHECK(j["per_attribute"].size() == 2);
  CHECK(j["per_attribute"][0]["name"] == "hat");
  CHECK(j["per_attribute"][1]["tp"] == 1);
  // Deterministic serialization.
  CHECK(metrics_json(counts, {"hat", "bag"}) == text);
}
