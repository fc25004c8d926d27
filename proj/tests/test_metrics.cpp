#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>

#include "checks.hpp"
#include "lungct/io.hpp"
#include "lungct/metrics.hpp"

namespace fs = std::filesystem;
using lungct::ConfusionMatrix;
using lungct::EvalReport;
using lungct::Tensor;

namespace {

// The figure's prose fixes eight cells of the SVM confusion matrix; the
// remaining normal->malignant cell is forced to 1 by the malignant precision
// 113/114 = 0.99. Solved here independently from the row/column constraints.
ConfusionMatrix svm_paper_matrix() {
  std::vector<int> y_true, y_pred;
  auto add = [&](int t, int p, int count) {
    for (int i = 0; i < count; ++i) {
      y_true.push_back(t);
      y_pred.push_back(p);
    }
  };
  add(0, 0, 21);   // benign correct
  add(0, 2, 3);    // benign -> normal
  add(1, 1, 113);  // malignant correct
  add(2, 2, 81);   // normal correct
  add(2, 0, 1);    // normal -> benign
  // benign support is 24 = 21 + 0 + 3, so benign->malignant is 0;
  // normal support 83 leaves 83 - 81 - 1 = 1 for normal->malignant, which is
  // exactly what malignant precision 113/(113+1) = 0.99 requires.
  add(2, 1, 1);
  return lungct::make_confusion_matrix(y_true, y_pred, 3, {"Benign", "Malignant", "Normal"});
}

// Pairwise concordance oracle: P(positive outranks negative), ties half.
double auc_oracle(const std::vector<int>& y, const Tensor& scores, int cls) {
  double num = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != cls) continue;
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (y[j] == cls) continue;
      double sp = scores.at(static_cast<int>(i), cls);
      double sn = scores.at(static_cast<int>(j), cls);
      num += sp > sn ? 1.0 : (sp == sn ? 0.5 : 0.0);
      ++pairs;
    }
  }
  return num / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("confusion matrix: perfect predictions are diagonal") {
  std::vector<int> y = {0, 1, 2, 1, 1, 2, 0};
  ConfusionMatrix cm = lungct::make_confusion_matrix(y, y, 3);
  CHECK(cm.counts[0][0] == 2);
  CHECK(cm.counts[1][1] == 3);
  CHECK(cm.counts[2][2] == 2);
  CHECK(cm.trace() == cm.total());
}

TEST_CASE("confusion matrix: figure-derived SVM matrix") {
  ConfusionMatrix cm = svm_paper_matrix();
  CHECK(cm.counts[0] == std::vector<long>{21, 0, 3});
  CHECK(cm.counts[1] == std::vector<long>{0, 113, 0});
  CHECK(cm.counts[2] == std::vector<long>{1, 1, 81});
  auto rows = cm.row_sums();
  CHECK(rows == std::vector<long>{24, 113, 83});
  CHECK(cm.total() == 220);
}

TEST_CASE("confusion matrix: empty inputs and range checks") {
  ConfusionMatrix cm = lungct::make_confusion_matrix({}, {}, 3);
  CHECK(cm.total() == 0);
  CHECK(cm.k() == 3);
  CHECK_THROWS_AS(lungct::make_confusion_matrix({3}, {0}, 3), std::invalid_argument);
  CHECK_THROWS_AS(lungct::make_confusion_matrix({0, 1}, {0}, 3), std::invalid_argument);
}

TEST_CASE("classification report reproduces every Table-5 value at 2 decimals") {
  EvalReport r = lungct::classification_report(svm_paper_matrix());
  using lungct::round2;
  CHECK(round2(r.per_class[0].precision) == 0.95);
  CHECK(round2(r.per_class[0].recall) == 0.88);
  CHECK(round2(r.per_class[0].f1) == 0.91);
  CHECK(r.per_class[0].support == 24);
  CHECK(round2(r.per_class[1].precision) == 0.99);
  CHECK(round2(r.per_class[1].recall) == 1.00);
  CHECK(round2(r.per_class[1].f1) == 1.00);
  CHECK(r.per_class[1].support == 113);
  CHECK(round2(r.per_class[2].precision) == 0.96);
  CHECK(round2(r.per_class[2].recall) == 0.98);
  CHECK(round2(r.per_class[2].f1) == 0.97);
  CHECK(r.per_class[2].support == 83);
  CHECK(round2(r.accuracy) == 0.98);
  // internal values keep full precision
  CHECK(r.per_class[0].precision == doctest::Approx(21.0 / 22.0).epsilon(1e-15));
  CHECK(r.accuracy == doctest::Approx(215.0 / 220.0).epsilon(1e-15));
}

TEST_CASE("classification report: identity and uniform matrices") {
  std::vector<int> y_true, y_pred;
  for (int c = 0; c < 3; ++c) {
    int support[] = {24, 113, 83};
    for (int i = 0; i < support[c]; ++i) {
      y_true.push_back(c);
      y_pred.push_back(c);
    }
  }
  EvalReport perfect =
      lungct::classification_report(lungct::make_confusion_matrix(y_true, y_pred, 3));
  for (const auto& m : perfect.per_class) {
    CHECK(m.precision == 1.0);
    CHECK(m.recall == 1.0);
    CHECK(m.f1 == 1.0);
  }
  CHECK(perfect.accuracy == 1.0);

  ConfusionMatrix half;
  half.counts = {{1, 1}, {1, 1}};
  half.class_names = {"a", "b"};
  EvalReport r = lungct::classification_report(half);
  for (const auto& m : r.per_class) {
    CHECK(m.precision == 0.5);
    CHECK(m.recall == 0.5);
    CHECK(m.f1 == 0.5);
  }
  CHECK(r.accuracy == 0.5);
}

TEST_CASE("classification report: zero column flagged, all-zero matrix fatal") {
  ConfusionMatrix cm;
  cm.counts = {{2, 0}, {1, 0}};  // nothing predicted as class 1
  cm.class_names = {"a", "b"};
  EvalReport r = lungct::classification_report(cm);
  CHECK(r.per_class[1].zero_division);
  CHECK(r.per_class[1].precision == 0.0);

  ConfusionMatrix zero;
  zero.counts = {{0, 0}, {0, 0}};
  zero.class_names = {"a", "b"};
  CHECK_THROWS_AS(lungct::classification_report(zero), std::invalid_argument);
}

TEST_CASE("accuracy equals the support-weighted mean recall") {
  std::mt19937 rng(71);
  std::uniform_int_distribution<int> cell(0, 30);
  for (int trial = 0; trial < 30; ++trial) {
    int k = 2 + trial % 4;
    ConfusionMatrix cm;
    cm.counts.assign(k, std::vector<long>(k, 0));
    long total = 0;
    for (auto& row : cm.counts) {
      for (auto& v : row) {
        v = cell(rng);
        total += v;
      }
    }
    if (total == 0) continue;
    for (int c = 0; c < k; ++c) cm.class_names.push_back("c" + std::to_string(c));
    EvalReport r = lungct::classification_report(cm);
    double weighted = 0.0;
    for (const auto& m : r.per_class) {
      weighted += m.recall * static_cast<double>(m.support);
    }
    weighted /= static_cast<double>(total);
    CHECK(std::abs(weighted - r.accuracy) < 1e-12);
  }
}

TEST_CASE("roc: separation, all-ties, and the four-pair hand case") {
  // perfectly separated
  std::vector<int> y = {0, 0, 1, 1};
  Tensor s({4, 2});
  s.at(0, 0) = 0.9;
  s.at(1, 0) = 0.8;
  s.at(2, 0) = 0.2;
  s.at(3, 0) = 0.1;
  CHECK(lungct::roc_auc_ovr(y, s, 0).auc == 1.0);

  // all-equal scores
  Tensor flat({4, 2}, 0.5);
  CHECK(lungct::roc_auc_ovr(y, flat, 0).auc == 0.5);

  // pos {0.9, 0.6}, neg {0.7, 0.1}: concordant 3 of 4 pairs
  Tensor hand({4, 2});
  hand.at(0, 0) = 0.9;
  hand.at(1, 0) = 0.6;
  hand.at(2, 0) = 0.7;
  hand.at(3, 0) = 0.1;
  CHECK(lungct::roc_auc_ovr(y, hand, 0).auc == 0.75);

  // undefined when one side is missing
  std::vector<int> ones = {1, 1, 1};
  Tensor s3({3, 2}, 0.3);
  CHECK_FALSE(lungct::roc_auc_ovr(ones, s3, 0).defined);
}

TEST_CASE("roc: threshold sweep equals the concordance oracle exactly, 100 sets") {
  std::mt19937 rng(72);
  std::uniform_int_distribution<int> n_dist(4, 50), lab(0, 1);
  std::uniform_int_distribution<int> quant(0, 9);  // quantized scores force ties
  for (int trial = 0; trial < 100; ++trial) {
    int n = n_dist(rng);
    std::vector<int> y;
    Tensor scores({n, 2});
    int pos = 0;
    for (int i = 0; i < n; ++i) {
      y.push_back(lab(rng));
      pos += y.back() == 0;
      scores.at(i, 0) = quant(rng) / 10.0;
      scores.at(i, 1) = quant(rng) / 10.0;
    }
    if (pos == 0 || pos == n) continue;
    auto r = lungct::roc_auc_ovr(y, scores, 0);
    REQUIRE(r.defined);
    CHECK(r.auc == auc_oracle(y, scores, 0));  // exact, both are integer ratios
    CHECK(r.points.front() == std::pair<double, double>(0.0, 0.0));
    CHECK(r.points.back() == std::pair<double, double>(1.0, 1.0));
  }
}

TEST_CASE("report content is invariant under class relabeling") {
  ConfusionMatrix cm = svm_paper_matrix();
  EvalReport base = lungct::classification_report(cm);
  // permute class order 0,1,2 -> 2,0,1
  int perm[3] = {2, 0, 1};
  ConfusionMatrix shuffled;
  shuffled.counts.assign(3, std::vector<long>(3, 0));
  shuffled.class_names = {"", "", ""};
  for (int i = 0; i < 3; ++i) {
    shuffled.class_names[perm[i]] = cm.class_names[i];
    for (int j = 0; j < 3; ++j) shuffled.counts[perm[i]][perm[j]] = cm.counts[i][j];
  }
  EvalReport permuted = lungct::classification_report(shuffled);
  CHECK(permuted.accuracy == base.accuracy);
  for (int i = 0; i < 3; ++i) {
    const auto& a = base.per_class[i];
    const auto& b = permuted.per_class[perm[i]];
    CHECK(a.name == b.name);
    CHECK(a.precision == b.precision);
    CHECK(a.recall == b.recall);
    CHECK(a.f1 == b.f1);
    CHECK(a.support == b.support);
  }
}

TEST_CASE("emit_report: files, JSON round trip, markdown row, null AUC") {
  EvalReport r = lungct::classification_report(svm_paper_matrix());
  r.model_id = "svm-test";
  r.manifest_hash = "deadbeef";
  // scores that make class 0 AUC defined but leave class 2 undefined
  std::vector<int> y = {0, 1, 1};
  Tensor scores({3, 3});
  scores.at(0, 0) = 0.9;
  scores.at(1, 0) = 0.2;
  scores.at(2, 0) = 0.4;
  lungct::add_roc_curves(r, y, scores);
  CHECK(r.per_class[0].auc_defined);
  CHECK_FALSE(r.per_class[2].auc_defined);

  fs::path dir = fs::temp_directory_path() / "lungct_test_report";
  fs::remove_all(dir);
  lungct::emit_report(r, dir);
  CHECK(fs::exists(dir / "metrics.json"));
  CHECK(fs::exists(dir / "confusion.csv"));
  CHECK(fs::exists(dir / "report.md"));
  CHECK(fs::exists(dir / "roc_class_0.png"));
  CHECK_FALSE(fs::exists(dir / "roc_class_2.png"));

  std::string json_text = lungct::read_file(dir / "metrics.json");
  EvalReport back = lungct::report_from_json(json_text);
  CHECK(back.accuracy == r.accuracy);
  CHECK(back.confusion.counts == r.confusion.counts);
  CHECK(back.per_class[0].precision == r.per_class[0].precision);
  CHECK(back.per_class[0].auc == r.per_class[0].auc);
  CHECK_FALSE(back.per_class[2].auc_defined);
  CHECK(json_text.find("null") != std::string::npos);  // undefined AUC serialized as null

  std::string md = lungct::read_file(dir / "report.md");
  CHECK(md.find("| Benign | 0.95 | 0.88 | 0.91 | 24 |") != std::string::npos);
  CHECK(md.find("| Malignant | 0.99 | 1.00 | 1.00 | 113 |") != std::string::npos);
  CHECK(md.find("0.98") != std::string::npos);
  fs::remove_all(dir);
}
