#include "lungct/svm.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <random>
#include <set>
#include <stdexcept>

#include "lungct/errors.hpp"
#include "lungct/io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lungct {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapMat = Eigen::Map<const RowMat>;

// ---------------------------------------------------------------------------
// scaler

ScalerStats fit_scaler(const Tensor& x) {
  if (x.ndim() != 2 || x.dim(0) < 2) {
    throw std::invalid_argument("scaler needs a (N>=2, D) matrix");
  }
  const int n = x.dim(0), d = x.dim(1);
  ScalerStats s;
  s.mean = Tensor({d});
  s.std = Tensor({d});
  s.zero_variance.assign(static_cast<std::size_t>(d), 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) s.mean[j] += x.at(i, j);
  }
  for (int j = 0; j < d; ++j) s.mean[j] /= n;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      double diff = x.at(i, j) - s.mean[j];
      s.std[j] += diff * diff;
    }
  }
  for (int j = 0; j < d; ++j) {
    s.std[j] = std::sqrt(s.std[j] / n);  // population std
    if (s.std[j] == 0.0) {
      s.std[j] = 1.0;  // passthrough, keeps D stable for attribution indexing
      s.zero_variance[static_cast<std::size_t>(j)] = 1;
    }
  }
  return s;
}

Tensor apply_scaler(const Tensor& x, const ScalerStats& stats) {
  if (x.ndim() != 2 || x.dim(1) != stats.mean.dim(0)) {
    throw std::invalid_argument("scaler dimension mismatch");
  }
  Tensor out(x.shape());
  const int n = x.dim(0), d = x.dim(1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out.at(i, j) = (x.at(i, j) - stats.mean[j]) / stats.std[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// kernels

KernelKind kernel_kind_from_string(const std::string& s) {
  if (s == "linear") return KernelKind::Linear;
  if (s == "rbf") return KernelKind::Rbf;
  throw ConfigError("unknown kernel: " + s);
}

std::string to_string(KernelKind k) { return k == KernelKind::Linear ? "linear" : "rbf"; }

double kernel_eval(const KernelSpec& spec, const double* a, const double* b, int d) {
  if (spec.kind == KernelKind::Linear) {
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += a[j] * b[j];
    return dot;
  }
  double sq = 0.0;
  for (int j = 0; j < d; ++j) {
    double diff = a[j] - b[j];
    sq += diff * diff;
  }
  return std::exp(-spec.gamma * sq);
}

namespace {

double resolve_gamma(const KernelSpec& spec, const Tensor& x) {
  if (spec.kind != KernelKind::Rbf || spec.gamma > 0.0) return spec.gamma;
  double mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mean += x[i];
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(x.size());
  if (var <= 0.0) var = 1.0;
  return 1.0 / (static_cast<double>(x.dim(1)) * var);
}

RowMat kernel_matrix(const KernelSpec& spec, const Tensor& a, const Tensor& b) {
  CMapMat am(a.data(), a.dim(0), a.dim(1));
  CMapMat bm(b.data(), b.dim(0), b.dim(1));
  RowMat dots = am * bm.transpose();
  if (spec.kind == KernelKind::Linear) return dots;
  Eigen::VectorXd an = am.rowwise().squaredNorm();
  Eigen::VectorXd bn = bm.rowwise().squaredNorm();
  for (Eigen::Index i = 0; i < dots.rows(); ++i) {
    for (Eigen::Index j = 0; j < dots.cols(); ++j) {
      double sq = an(i) + bn(j) - 2.0 * dots(i, j);
      dots(i, j) = std::exp(-spec.gamma * std::max(0.0, sq));
    }
  }
  return dots;
}

struct BinarySolution {
  std::vector<double> alpha;
  double bias = 0.0;
  double gap = 0.0;
};

// SMO on min 1/2 a^T Q a - e^T a, 0 <= a <= C, y^T a = 0, with
// maximal-violating-pair selection over the gradient G = Qa - e.
BinarySolution solve_binary(const RowMat& k, const std::vector<double>& y, double c, double tol,
                            long max_iter) {
  const int n = static_cast<int>(y.size());
  BinarySolution sol;
  sol.alpha.assign(static_cast<std::size_t>(n), 0.0);
  std::vector<double> grad(static_cast<std::size_t>(n), -1.0);

  for (long iter = 0; iter < max_iter; ++iter) {
    double m_up = -std::numeric_limits<double>::infinity();
    double m_low = std::numeric_limits<double>::infinity();
    int i = -1, j = -1;
    for (int t = 0; t < n; ++t) {
      double v = -y[static_cast<std::size_t>(t)] * grad[static_cast<std::size_t>(t)];
      bool in_up = (y[static_cast<std::size_t>(t)] > 0 && sol.alpha[static_cast<std::size_t>(t)] < c) ||
                   (y[static_cast<std::size_t>(t)] < 0 && sol.alpha[static_cast<std::size_t>(t)] > 0);
      bool in_low = (y[static_cast<std::size_t>(t)] > 0 && sol.alpha[static_cast<std::size_t>(t)] > 0) ||
                    (y[static_cast<std::size_t>(t)] < 0 && sol.alpha[static_cast<std::size_t>(t)] < c);
      if (in_up && v > m_up) {
        m_up = v;
        i = t;
      }
      if (in_low && v < m_low) {
        m_low = v;
        j = t;
      }
    }
    sol.gap = m_up - m_low;
    if (i < 0 || j < 0 || sol.gap < tol) break;

    double eta = k(i, i) + k(j, j) - 2.0 * k(i, j);
    if (eta < 1e-12) eta = 1e-12;
    double step = sol.gap / eta;
    double yi = y[static_cast<std::size_t>(i)], yj = y[static_cast<std::size_t>(j)];
    double room_i = yi > 0 ? c - sol.alpha[static_cast<std::size_t>(i)] : sol.alpha[static_cast<std::size_t>(i)];
    double room_j = yj > 0 ? sol.alpha[static_cast<std::size_t>(j)] : c - sol.alpha[static_cast<std::size_t>(j)];
    step = std::min(step, std::min(room_i, room_j));
    // move along the feasible pair direction step * (y_i e_i - y_j e_j)
    sol.alpha[static_cast<std::size_t>(i)] += yi * step;
    sol.alpha[static_cast<std::size_t>(j)] -= yj * step;
    for (int t = 0; t < n; ++t) {
      grad[static_cast<std::size_t>(t)] += step * y[static_cast<std::size_t>(t)] * (k(t, i) - k(t, j));
    }
  }

  // bias from free vectors; fall back to the violating-pair midpoint
  double sum = 0.0;
  int free_count = 0;
  for (int t = 0; t < n; ++t) {
    double a = sol.alpha[static_cast<std::size_t>(t)];
    if (a > 1e-12 && a < c - 1e-12) {
      sum += -y[static_cast<std::size_t>(t)] * grad[static_cast<std::size_t>(t)];
      ++free_count;
    }
  }
  if (free_count > 0) {
    sol.bias = sum / free_count;
  } else {
    double m_up = -std::numeric_limits<double>::infinity();
    double m_low = std::numeric_limits<double>::infinity();
    for (int t = 0; t < n; ++t) {
      double v = -y[static_cast<std::size_t>(t)] * grad[static_cast<std::size_t>(t)];
      bool in_up = (y[static_cast<std::size_t>(t)] > 0 && sol.alpha[static_cast<std::size_t>(t)] < c) ||
                   (y[static_cast<std::size_t>(t)] < 0 && sol.alpha[static_cast<std::size_t>(t)] > 0);
      bool in_low = (y[static_cast<std::size_t>(t)] > 0 && sol.alpha[static_cast<std::size_t>(t)] > 0) ||
                    (y[static_cast<std::size_t>(t)] < 0 && sol.alpha[static_cast<std::size_t>(t)] < c);
      if (in_up) m_up = std::max(m_up, v);
      if (in_low) m_low = std::min(m_low, v);
    }
    sol.bias = (m_up + m_low) / 2.0;
  }
  return sol;
}

}  // namespace

SvmModel svm_train(const Tensor& x, const std::vector<int>& y, const SvmTrainOptions& opts) {
  if (x.ndim() != 2 || static_cast<std::size_t>(x.dim(0)) != y.size()) {
    throw std::invalid_argument("svm_train expects (N,D) features with N labels");
  }
  if (!x.all_finite()) throw std::invalid_argument("svm_train features must be finite");
  if (opts.c <= 0.0) throw std::invalid_argument("svm C must be positive");
  std::set<int> distinct(y.begin(), y.end());
  if (distinct.size() < 2) throw std::invalid_argument("svm_train needs at least two classes");
  const int n = x.dim(0), d = x.dim(1);
  const int k_classes = *std::max_element(y.begin(), y.end()) + 1;
  for (int c = 0; c < k_classes; ++c) {
    if (std::count(y.begin(), y.end(), c) == 0) {
      throw std::invalid_argument("class " + std::to_string(c) + " has no samples");
    }
  }

  SvmModel model;
  model.kernel = opts.kernel;
  model.kernel.gamma = resolve_gamma(opts.kernel, x);
  model.c = opts.c;
  model.dims = d;

  RowMat gram = kernel_matrix(model.kernel, x, x);
  for (int cls = 0; cls < k_classes; ++cls) {
    std::vector<double> ybin(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) ybin[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] == cls ? 1.0 : -1.0;
    BinarySolution sol = solve_binary(gram, ybin, opts.c, opts.tol, opts.max_iter);
    SvmBinaryHead head;
    std::vector<int> sv_idx;
    for (int i = 0; i < n; ++i) {
      if (sol.alpha[static_cast<std::size_t>(i)] > 1e-12) sv_idx.push_back(i);
    }
    head.support_vectors = Tensor({static_cast<int>(sv_idx.size()), d});
    head.dual_coef = Tensor({static_cast<int>(sv_idx.size())});
    for (std::size_t s = 0; s < sv_idx.size(); ++s) {
      int i = sv_idx[s];
      std::copy(x.data() + static_cast<std::size_t>(i) * d, x.data() + static_cast<std::size_t>(i + 1) * d,
                head.support_vectors.data() + s * static_cast<std::size_t>(d));
      head.dual_coef[s] = sol.alpha[static_cast<std::size_t>(i)] * ybin[static_cast<std::size_t>(i)];
    }
    head.bias = sol.bias;
    head.kkt_gap = sol.gap;
    model.heads.push_back(std::move(head));
  }
  return model;
}

Tensor svm_decision(const SvmModel& model, const Tensor& x) {
  if (x.ndim() != 2 || x.dim(1) != model.dims) {
    throw std::invalid_argument("svm_decision feature width mismatch: got " +
                                std::to_string(x.ndim() == 2 ? x.dim(1) : -1) + ", expected " +
                                std::to_string(model.dims));
  }
  const int m = x.dim(0), k = model.num_classes();
  Tensor scores({m, k});
  for (int cls = 0; cls < k; ++cls) {
    const SvmBinaryHead& head = model.heads[static_cast<std::size_t>(cls)];
    if (head.support_vectors.dim(0) == 0) {
      for (int i = 0; i < m; ++i) scores.at(i, cls) = head.bias;
      continue;
    }
    RowMat cross = kernel_matrix(model.kernel, x, head.support_vectors);  // (m, n_sv)
    CMapMat coef(head.dual_coef.data(), head.dual_coef.dim(0), 1);
    Eigen::VectorXd s = cross * coef.col(0);
    for (int i = 0; i < m; ++i) scores.at(i, cls) = s(i) + head.bias;
  }
  return scores;
}

std::vector<int> svm_predict(const SvmModel& model, const Tensor& x) {
  Tensor scores = svm_decision(model, x);
  std::vector<int> out(static_cast<std::size_t>(scores.dim(0)));
  for (int i = 0; i < scores.dim(0); ++i) {
    int best = 0;
    for (int c = 1; c < scores.dim(1); ++c) {
      if (scores.at(i, c) > scores.at(i, best)) best = c;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// grid search

GridSearchResult hyperparam_search(const Tensor& x, const std::vector<int>& y,
                                   const std::vector<KernelKind>& kernels,
                                   const std::vector<double>& c_values, int folds,
                                   std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("grid search needs folds >= 2");
  if (kernels.empty() || c_values.empty()) throw std::invalid_argument("grid must be non-empty");
  const int n = x.dim(0);
  const int k_classes = *std::max_element(y.begin(), y.end()) + 1;
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(k_classes));
  for (int i = 0; i < n; ++i) by_class[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])].push_back(i);
  for (const auto& members : by_class) {
    if (static_cast<int>(members.size()) < folds) {
      throw std::invalid_argument("fold count exceeds the smallest class size");
    }
  }
  // stratified fold assignment
  std::vector<int> fold_of(static_cast<std::size_t>(n), 0);
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  for (auto members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t p = 0; p < members.size(); ++p) {
      fold_of[static_cast<std::size_t>(members[p])] = static_cast<int>(p % static_cast<std::size_t>(folds));
    }
  }

  GridSearchResult result;
  result.best_accuracy = -1.0;
  for (KernelKind kernel : kernels) {
    for (double c : c_values) {
      double acc_sum = 0.0;
      for (int f = 0; f < folds; ++f) {
        std::vector<int> train_rows, test_rows;
        for (int i = 0; i < n; ++i) {
          (fold_of[static_cast<std::size_t>(i)] == f ? test_rows : train_rows).push_back(i);
        }
        Tensor xt({static_cast<int>(train_rows.size()), x.dim(1)});
        std::vector<int> yt;
        for (std::size_t r = 0; r < train_rows.size(); ++r) {
          std::copy(x.data() + static_cast<std::size_t>(train_rows[r]) * x.dim(1),
                    x.data() + static_cast<std::size_t>(train_rows[r] + 1) * x.dim(1),
                    xt.data() + r * static_cast<std::size_t>(x.dim(1)));
          yt.push_back(y[static_cast<std::size_t>(train_rows[r])]);
        }
        Tensor xv({static_cast<int>(test_rows.size()), x.dim(1)});
        std::vector<int> yv;
        for (std::size_t r = 0; r < test_rows.size(); ++r) {
          std::copy(x.data() + static_cast<std::size_t>(test_rows[r]) * x.dim(1),
                    x.data() + static_cast<std::size_t>(test_rows[r] + 1) * x.dim(1),
                    xv.data() + r * static_cast<std::size_t>(x.dim(1)));
          yv.push_back(y[static_cast<std::size_t>(test_rows[r])]);
        }
        SvmTrainOptions opts;
        opts.kernel.kind = kernel;
        opts.c = c;
        SvmModel model = svm_train(xt, yt, opts);
        auto pred = svm_predict(model, xv);
        int correct = 0;
        for (std::size_t r = 0; r < yv.size(); ++r) {
          if (pred[r] == yv[r]) ++correct;
        }
        acc_sum += static_cast<double>(correct) / static_cast<double>(yv.size());
      }
      double mean_acc = acc_sum / folds;
      result.table.push_back({kernel, c, mean_acc});
      // strict > keeps the earliest cell on ties: linear first, then smaller C
      if (mean_acc > result.best_accuracy) {
        result.best_accuracy = mean_acc;
        result.kernel.kind = kernel;
        result.c = c;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// pipeline persistence

void SvmPipeline::check_fingerprint(const FeatureMatrix& fm) const {
  if (fm.fingerprint != fingerprint) {
    throw DataError("feature matrix fingerprint " + to_hex(fm.fingerprint) +
                    " does not match the pipeline extractor " + to_hex(fingerprint));
  }
}

Tensor SvmPipeline::decide_features(const FeatureMatrix& fm) const {
  check_fingerprint(fm);
  return svm_decision(svm, apply_scaler(fm.values, scaler));
}

Tensor SvmPipeline::decide_images(const Tensor& images) {
  FeatureMatrix fm = extract_features(images, *extractor);
  return decide_features(fm);
}

std::vector<int> SvmPipeline::predict_images(const Tensor& images) {
  Tensor scores = decide_images(images);
  std::vector<int> out(static_cast<std::size_t>(scores.dim(0)));
  for (int i = 0; i < scores.dim(0); ++i) {
    int best = 0;
    for (int c = 1; c < scores.dim(1); ++c) {
      if (scores.at(i, c) > scores.at(i, best)) best = c;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

void save_svm_pipeline(SvmPipeline& pipeline, const fs::path& dir) {
  fs::create_directories(dir);
  json j;
  j["schema_version"] = 1;
  j["kind"] = "svm";
  j["class_names"] = pipeline.class_names;
  j["kernel"] = to_string(pipeline.svm.kernel.kind);
  j["gamma"] = pipeline.svm.kernel.gamma;
  j["c"] = pipeline.svm.c;
  j["dims"] = pipeline.svm.dims;
  j["num_heads"] = pipeline.svm.num_classes();
  j["fingerprint"] = to_hex(pipeline.fingerprint);
  const auto& ec = pipeline.extractor->config();
  j["extractor"] = {{"input_h", ec.input_h},
                    {"input_w", ec.input_w},
                    {"final_channels", ec.final_channels},
                    {"final_spatial", ec.final_spatial},
                    {"seed", ec.seed}};
  atomic_write(dir / "svm.json", j.dump(2) + "\n");

  std::vector<TensorFileEntry> entries;
  entries.push_back({"scaler_mean", pipeline.scaler.mean, false});
  entries.push_back({"scaler_std", pipeline.scaler.std, false});
  Tensor zv({static_cast<int>(pipeline.scaler.zero_variance.size())});
  for (std::size_t i = 0; i < pipeline.scaler.zero_variance.size(); ++i) {
    zv[i] = pipeline.scaler.zero_variance[i] ? 1.0 : 0.0;
  }
  entries.push_back({"scaler_zero_variance", zv, false});
  for (int h = 0; h < pipeline.svm.num_classes(); ++h) {
    const auto& head = pipeline.svm.heads[static_cast<std::size_t>(h)];
    std::string tag = "head" + std::to_string(h);
    entries.push_back({tag + "_sv", head.support_vectors, false});
    entries.push_back({tag + "_coef", head.dual_coef, false});
    entries.push_back({tag + "_bias", Tensor({1}, head.bias), false});
  }
  write_tensor_file(dir / "svm.bin", "LSVM", 1, entries);

  std::vector<TensorFileEntry> ext_entries;
  for (auto& [name, t] : pipeline.extractor->state()) ext_entries.push_back({name, *t, false});
  write_tensor_file(dir / "extractor.bin", "LCTW", 1, ext_entries);
}

SvmPipeline load_svm_pipeline(const fs::path& dir) {
  if (!fs::exists(dir / "svm.json")) {
    throw DataError("svm artifact missing svm.json: " + dir.string());
  }
  json j = json::parse(read_file(dir / "svm.json"));
  if (j.at("schema_version") != 1) {
    throw DataError("unsupported svm artifact version: " + j.at("schema_version").dump());
  }
  if (j.at("kind") != "svm") throw DataError("artifact is not an svm pipeline");
  SvmPipeline p;
  p.class_names = j.at("class_names").get<std::vector<std::string>>();
  p.svm.kernel.kind = kernel_kind_from_string(j.at("kernel"));
  p.svm.kernel.gamma = j.at("gamma");
  p.svm.c = j.at("c");
  p.svm.dims = j.at("dims");

  ExtractorConfig ec;
  ec.input_h = j.at("extractor").at("input_h");
  ec.input_w = j.at("extractor").at("input_w");
  ec.final_channels = j.at("extractor").at("final_channels");
  ec.final_spatial = j.at("extractor").at("final_spatial");
  ec.seed = j.at("extractor").at("seed");
  p.extractor = std::make_unique<FeatureExtractor>(ec);
  auto ext_entries = read_tensor_file(dir / "extractor.bin", "LCTW", 1);
  for (auto& [name, t] : p.extractor->state()) {
    bool found = false;
    for (auto& e : ext_entries) {
      if (e.name == name) {
        if (!t->same_shape(e.tensor)) throw DataError("extractor weight shape mismatch: " + name);
        *t = e.tensor;
        found = true;
        break;
      }
    }
    if (!found) throw DataError("extractor.bin missing tensor " + name);
  }
  p.fingerprint = p.extractor->fingerprint();
  std::string stored = j.at("fingerprint");
  if (to_hex(p.fingerprint) != stored) {
    throw DataError("stored fingerprint " + stored + " does not match extractor weights " +
                    to_hex(p.fingerprint));
  }

  auto entries = read_tensor_file(dir / "svm.bin", "LSVM", 1);
  auto find = [&](const std::string& name) -> Tensor& {
    for (auto& e : entries) {
      if (e.name == name) return e.tensor;
    }
    throw DataError("svm.bin missing tensor " + name);
  };
  p.scaler.mean = find("scaler_mean");
  p.scaler.std = find("scaler_std");
  Tensor zv = find("scaler_zero_variance");
  p.scaler.zero_variance.assign(zv.size(), 0);
  for (std::size_t i = 0; i < zv.size(); ++i) p.scaler.zero_variance[i] = zv[i] != 0.0 ? 1 : 0;
  int heads = j.at("num_heads");
  for (int h = 0; h < heads; ++h) {
    std::string tag = "head" + std::to_string(h);
    SvmBinaryHead head;
    head.support_vectors = find(tag + "_sv");
    head.dual_coef = find(tag + "_coef");
    head.bias = find(tag + "_bias")[0];
    p.svm.heads.push_back(std::move(head));
  }
  return p;
}

}  // namespace lungct
