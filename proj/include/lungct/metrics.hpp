#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "lungct/tensor.hpp"

namespace lungct {

// Convention: rows = true class, columns = predicted class.
struct ConfusionMatrix {
  std::vector<std::vector<long>> counts;
  std::vector<std::string> class_names;

  int k() const { return static_cast<int>(counts.size()); }
  long total() const;
  long trace() const;
  std::vector<long> row_sums() const;
  std::vector<long> col_sums() const;
};

ConfusionMatrix make_confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                      int k, std::vector<std::string> class_names = {});

struct ClassMetrics {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  long support = 0;
  bool zero_division = false;  // no predictions for this class; precision reported as 0
  double auc = std::numeric_limits<double>::quiet_NaN();
  bool auc_defined = false;
};

struct EvalReport {
  ConfusionMatrix confusion;
  std::vector<ClassMetrics> per_class;
  double accuracy = 0.0;
  std::string model_id;
  std::string manifest_hash;
  // (FPR,TPR) points per class when ROC was computed
  std::vector<std::vector<std::pair<double, double>>> roc_curves;
};

// Per-class precision/recall/F1 and overall accuracy from the matrix; values
// kept at full precision, rounding happens only at presentation.
EvalReport classification_report(const ConfusionMatrix& cm);

struct RocResult {
  double auc = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
  std::vector<std::pair<double, double>> points;  // (FPR,TPR), threshold sweep
};

// One-vs-rest: positives are rows with y_true == class_idx, scored by column
// class_idx. Ties count one half (Mann-Whitney form).
RocResult roc_auc_ovr(const std::vector<int>& y_true, const Tensor& scores, int class_idx);

// Attach per-class ROC/AUC to a report.
void add_roc_curves(EvalReport& report, const std::vector<int>& y_true, const Tensor& scores);

// Presentation rounding: half away from zero at 2 decimals.
double round2(double v);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
std::string report_to_markdown(const EvalReport& report);

// Writes metrics.json, confusion.csv, report.md and roc_class_<k>.png files.
void emit_report(const EvalReport& report, const std::filesystem::path& out_dir);

}  // namespace lungct
