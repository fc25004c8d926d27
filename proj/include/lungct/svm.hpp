#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "lungct/features.hpp"
#include "lungct/tensor.hpp"

namespace lungct {

// ---------------------------------------------------------------------------
// Standard scaling fitted on training rows only.

struct ScalerStats {
  Tensor mean;                      // (D)
  Tensor std;                       // (D); zero-variance dims forced to 1 and flagged
  std::vector<char> zero_variance;  // (D)
};

ScalerStats fit_scaler(const Tensor& x);
Tensor apply_scaler(const Tensor& x, const ScalerStats& stats);

// ---------------------------------------------------------------------------
// Kernel C-SVC, one-vs-rest multiclass, solved by sequential minimal
// optimization with maximal-violating-pair selection.

enum class KernelKind { Linear, Rbf };

struct KernelSpec {
  KernelKind kind = KernelKind::Linear;
  double gamma = 0.0;  // <= 0 resolves to 1/(D * var(x)) when fitting
};

KernelKind kernel_kind_from_string(const std::string& s);
std::string to_string(KernelKind k);
double kernel_eval(const KernelSpec& spec, const double* a, const double* b, int d);

struct SvmBinaryHead {
  Tensor support_vectors;  // (n_sv, D)
  Tensor dual_coef;        // (n_sv) = alpha_i * y_i
  double bias = 0.0;
  double kkt_gap = 0.0;  // final max-violation gap at termination
};

struct SvmModel {
  KernelSpec kernel;  // gamma resolved
  double c = 1.0;
  int dims = 0;
  std::vector<SvmBinaryHead> heads;  // one per class, index = class

  int num_classes() const { return static_cast<int>(heads.size()); }
};

struct SvmTrainOptions {
  KernelSpec kernel;
  double c = 1.0;
  double tol = 1e-3;
  long max_iter = 10'000'000;
  std::uint64_t seed = 0;
};

// Throws when fewer than two classes are present or x is not finite.
SvmModel svm_train(const Tensor& x, const std::vector<int>& y, const SvmTrainOptions& opts);

// Per-class decision scores f_k(x) = sum_i dual_i K(sv_i, x) + b_k, (M,K).
Tensor svm_decision(const SvmModel& model, const Tensor& x);
// argmax of the scores, ties toward the lowest class index.
std::vector<int> svm_predict(const SvmModel& model, const Tensor& x);

// ---------------------------------------------------------------------------
// Grid search over kernel x C with stratified k-fold cross-validation.
// Ties prefer the linear kernel, then the smaller C.

struct GridCell {
  KernelKind kernel;
  double c;
  double mean_accuracy;
};

struct GridSearchResult {
  KernelSpec kernel;
  double c = 1.0;
  double best_accuracy = 0.0;
  std::vector<GridCell> table;
};

GridSearchResult hyperparam_search(const Tensor& x, const std::vector<int>& y,
                                   const std::vector<KernelKind>& kernels,
                                   const std::vector<double>& c_values, int folds,
                                   std::uint64_t seed);

// ---------------------------------------------------------------------------
// Persisted pipeline: extractor + scaler + SVM + class names, fingerprinted.

struct SvmPipeline {
  std::unique_ptr<FeatureExtractor> extractor;
  ScalerStats scaler;
  SvmModel svm;
  std::vector<std::string> class_names;
  std::uint64_t fingerprint = 0;

  // Throws DataError when the matrix was produced by a different extractor.
  void check_fingerprint(const FeatureMatrix& fm) const;
  Tensor decide_features(const FeatureMatrix& fm) const;  // scale + decision scores
  Tensor decide_images(const Tensor& images);             // extract + scale + scores
  std::vector<int> predict_images(const Tensor& images);
};

void save_svm_pipeline(SvmPipeline& pipeline, const std::filesystem::path& dir);
SvmPipeline load_svm_pipeline(const std::filesystem::path& dir);

}  // namespace lungct
