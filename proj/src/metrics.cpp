#include "lungct/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <stdexcept>

#include "lungct/errors.hpp"
#include "lungct/io.hpp"
#include "lungct/plot.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lungct {

long ConfusionMatrix::total() const {
  long t = 0;
  for (const auto& row : counts) {
    for (long v : row) t += v;
  }
  return t;
}

long ConfusionMatrix::trace() const {
  long t = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) t += counts[i][i];
  return t;
}

std::vector<long> ConfusionMatrix::row_sums() const {
  std::vector<long> out(counts.size(), 0);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    for (long v : counts[i]) out[i] += v;
  }
  return out;
}

std::vector<long> ConfusionMatrix::col_sums() const {
  std::vector<long> out(counts.size(), 0);
  for (const auto& row : counts) {
    for (std::size_t j = 0; j < row.size(); ++j) out[j] += row[j];
  }
  return out;
}

ConfusionMatrix make_confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                      int k, std::vector<std::string> class_names) {
  if (y_true.size() != y_pred.size()) {
    throw std::invalid_argument("confusion matrix needs equal-length label vectors");
  }
  if (k <= 0) throw std::invalid_argument("confusion matrix needs k > 0");
  ConfusionMatrix cm;
  cm.counts.assign(static_cast<std::size_t>(k), std::vector<long>(static_cast<std::size_t>(k), 0));
  if (class_names.empty()) {
    for (int c = 0; c < k; ++c) class_names.push_back("class_" + std::to_string(c));
  }
  if (static_cast<int>(class_names.size()) != k) {
    throw std::invalid_argument("class name count does not match k");
  }
  cm.class_names = std::move(class_names);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    int t = y_true[i], p = y_pred[i];
    if (t < 0 || t >= k || p < 0 || p >= k) {
      throw std::invalid_argument("label out of range in confusion matrix");
    }
    cm.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]++;
  }
  return cm;
}

EvalReport classification_report(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("cannot report on an all-zero confusion matrix");
  EvalReport report;
  report.confusion = cm;
  auto rows = cm.row_sums();
  auto cols = cm.col_sums();
  for (int c = 0; c < cm.k(); ++c) {
    ClassMetrics m;
    m.name = cm.class_names[static_cast<std::size_t>(c)];
    m.support = rows[static_cast<std::size_t>(c)];
    long tp = cm.counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    if (cols[static_cast<std::size_t>(c)] == 0) {
      m.precision = 0.0;
      m.zero_division = true;
    } else {
      m.precision = static_cast<double>(tp) / static_cast<double>(cols[static_cast<std::size_t>(c)]);
    }
    m.recall = m.support == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(m.support);
    m.f1 = (m.precision + m.recall) == 0.0
               ? 0.0
               : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    report.per_class.push_back(std::move(m));
  }
  report.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
  return report;
}

RocResult roc_auc_ovr(const std::vector<int>& y_true, const Tensor& scores, int class_idx) {
  if (scores.ndim() != 2 || static_cast<std::size_t>(scores.dim(0)) != y_true.size()) {
    throw std::invalid_argument("roc expects (N,K) scores matching N labels");
  }
  if (class_idx < 0 || class_idx >= scores.dim(1)) {
    throw std::invalid_argument("roc class index out of range");
  }
  if (!scores.all_finite()) throw std::invalid_argument("roc scores must be finite");

  struct Row {
    double score;
    bool positive;
  };
  std::vector<Row> rows;
  long p = 0, n = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    bool positive = y_true[i] == class_idx;
    rows.push_back({scores.at(static_cast<int>(i), class_idx), positive});
    (positive ? p : n)++;
  }
  RocResult out;
  if (p == 0 || n == 0) {
    out.defined = false;  // AUC undefined without both positives and negatives
    return out;
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.score > b.score; });

  out.points.emplace_back(0.0, 0.0);
  long tp = 0, fp = 0;
  long twice_area = 0;  // 2 * concordant + ties, accumulated per tie group
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i;
    long gp = 0, gn = 0;
    while (j < rows.size() && rows[j].score == rows[i].score) {
      (rows[j].positive ? gp : gn)++;
      ++j;
    }
    twice_area += gn * (2 * tp + gp);
    tp += gp;
    fp += gn;
    out.points.emplace_back(static_cast<double>(fp) / n, static_cast<double>(tp) / p);
    i = j;
  }
  out.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(p) * static_cast<double>(n));
  out.defined = true;
  return out;
}

void add_roc_curves(EvalReport& report, const std::vector<int>& y_true, const Tensor& scores) {
  report.roc_curves.clear();
  for (int c = 0; c < report.confusion.k(); ++c) {
    RocResult r = roc_auc_ovr(y_true, scores, c);
    report.per_class[static_cast<std::size_t>(c)].auc = r.auc;
    report.per_class[static_cast<std::size_t>(c)].auc_defined = r.defined;
    report.roc_curves.push_back(std::move(r.points));
  }
}

double round2(double v) {
  return (v >= 0 ? std::floor(v * 100.0 + 0.5) : std::ceil(v * 100.0 - 0.5)) / 100.0;
}

// ---------------------------------------------------------------------------
// serialization

std::string report_to_json(const EvalReport& report) {
  json j;
  j["schema_version"] = 1;
  j["model_id"] = report.model_id;
  j["manifest_hash"] = report.manifest_hash;
  j["class_names"] = report.confusion.class_names;
  j["confusion"] = report.confusion.counts;
  j["accuracy"] = report.accuracy;
  j["per_class"] = json::array();
  json notes = json::array();
  for (const auto& m : report.per_class) {
    json c;
    c["name"] = m.name;
    c["precision"] = m.precision;
    c["recall"] = m.recall;
    c["f1"] = m.f1;
    c["support"] = m.support;
    c["zero_division"] = m.zero_division;
    if (m.auc_defined) {
      c["auc"] = m.auc;
    } else {
      c["auc"] = nullptr;
      notes.push_back("auc undefined for class " + m.name +
                      " (needs both positives and negatives)");
    }
    j["per_class"].push_back(std::move(c));
  }
  j["notes"] = std::move(notes);
  j["roc_curves"] = json::array();
  for (const auto& curve : report.roc_curves) {
    json pts = json::array();
    for (const auto& [fpr, tpr] : curve) pts.push_back({fpr, tpr});
    j["roc_curves"].push_back(std::move(pts));
  }
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.at("schema_version") != 1) throw DataError("unsupported metrics schema version");
  EvalReport r;
  r.model_id = j.at("model_id");
  r.manifest_hash = j.at("manifest_hash");
  r.confusion.class_names = j.at("class_names").get<std::vector<std::string>>();
  r.confusion.counts = j.at("confusion").get<std::vector<std::vector<long>>>();
  r.accuracy = j.at("accuracy");
  for (const auto& c : j.at("per_class")) {
    ClassMetrics m;
    m.name = c.at("name");
    m.precision = c.at("precision");
    m.recall = c.at("recall");
    m.f1 = c.at("f1");
    m.support = c.at("support");
    m.zero_division = c.at("zero_division");
    if (!c.at("auc").is_null()) {
      m.auc = c.at("auc");
      m.auc_defined = true;
    }
    r.per_class.push_back(std::move(m));
  }
  for (const auto& curve : j.at("roc_curves")) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& pt : curve) pts.emplace_back(pt[0], pt[1]);
    r.roc_curves.push_back(std::move(pts));
  }
  return r;
}

namespace {

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", round2(v));
  return buf;
}

}  // namespace

std::string report_to_markdown(const EvalReport& report) {
  std::string md = "# Evaluation report\n\n";
  if (!report.model_id.empty()) md += "Model: `" + report.model_id + "`\n\n";
  md += "| Class | Precision | Recall | F1-Score | Support |\n";
  md += "|---|---|---|---|---|\n";
  for (const auto& m : report.per_class) {
    md += "| " + m.name + " | " + fixed2(m.precision) + " | " + fixed2(m.recall) + " | " +
          fixed2(m.f1) + " | " + std::to_string(m.support) + " |\n";
  }
  md += "| Overall | Accuracy | " + fixed2(report.accuracy) + " | | " +
        std::to_string(report.confusion.total()) + " |\n\n";
  bool any_auc = false;
  for (const auto& m : report.per_class) any_auc = any_auc || m.auc_defined;
  if (any_auc) {
    md += "Per-class AUC (one-vs-rest):\n\n";
    for (const auto& m : report.per_class) {
      md += "- " + m.name + ": " + (m.auc_defined ? fixed2(m.auc) : std::string("undefined")) + "\n";
    }
    md += "\n";
  }
  md += "Confusion matrix (rows = true, columns = predicted):\n\n```\n";
  for (const auto& row : report.confusion.counts) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      md += (j ? " " : "") + std::to_string(row[j]);
    }
    md += "\n";
  }
  md += "```\n";
  return md;
}

void emit_report(const EvalReport& report, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw ComputeError("cannot create report directory " + out_dir.string());
  atomic_write(out_dir / "metrics.json", report_to_json(report));

  // confusion.csv: header row carries the predicted class names
  std::string csv = "true\\pred";
  for (const auto& name : report.confusion.class_names) csv += "," + name;
  csv += "\n";
  for (int i = 0; i < report.confusion.k(); ++i) {
    csv += report.confusion.class_names[static_cast<std::size_t>(i)];
    for (long v : report.confusion.counts[static_cast<std::size_t>(i)]) {
      csv += "," + std::to_string(v);
    }
    csv += "\n";
  }
  atomic_write(out_dir / "confusion.csv", csv);

  atomic_write(out_dir / "report.md", report_to_markdown(report));

  for (std::size_t c = 0; c < report.roc_curves.size(); ++c) {
    if (!report.per_class[c].auc_defined) continue;
    plot_roc_png(out_dir / ("roc_class_" + std::to_string(c) + ".png"), report.roc_curves[c],
                 report.confusion.class_names[c], report.per_class[c].auc);
  }
}

}  // namespace lungct
