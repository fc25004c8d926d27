#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lungct/cam.hpp"
#include "lungct/svm.hpp"
#include "lungct/tensor.hpp"

namespace lungct {

// ---------------------------------------------------------------------------
// Grad-CAM

struct Heatmap {
  Tensor values;  // (H',W'), max-scaled to [0,1]
  std::string layer_id;
  int class_idx = 0;
  bool all_zero = false;  // no positive gradient-weighted signal at this layer
};

// The four steps: (1) gradients of the class score wrt the layer's feature
// maps, (2) global-average-pool the gradients into channel weights,
// (3) weighted channel sum + ReLU, (4) max-normalize.
Heatmap grad_cam(CamModel& model, const Tensor& image, int class_idx, const std::string& layer_id);

// Steps 2-4 over a precomputed (activation, gradient) pair.
Heatmap grad_cam_from(const Tensor& activation, const Tensor& gradient, const std::string& layer_id,
                      int class_idx);

// SVM branch: the class score is the linear one-vs-rest decision composed with
// the scaler and the extractor's pooled features, which is differentiable in
// the feature map. RBF models are rejected (use SHAP instead).
Heatmap grad_cam_svm(SvmPipeline& pipeline, const Tensor& image, int class_idx);

// Heatmap bilinearly resized to the image, colorized, alpha-blended.
// opacity 0 returns the image, 1 the colorized map.
Tensor overlay(const Heatmap& heatmap, const Tensor& image, double opacity);

// ---------------------------------------------------------------------------
// Kernel SHAP

struct ShapExplanation {
  double base_value = 0.0;  // expected model output over the background
  std::vector<double> phi;  // attributions, one per feature
  double fx = 0.0;          // model output at the explained point
  int class_idx = 0;
};

using PredictFn = std::function<double(const std::vector<double>&)>;

// Weighted least squares over coalition samples with the Shapley kernel;
// masked features take background values; additivity phi0 + sum(phi) = f(x)
// holds by the regression constraint. n_samples >= 2^D - 2 (or <= 0 with
// D <= 15) enumerates every coalition and reproduces exact Shapley values.
ShapExplanation kernel_shap(const PredictFn& f, const std::vector<double>& x,
                            const Tensor& background, int n_samples, std::uint64_t seed,
                            int class_idx = 0);

// Brute-force Shapley by full coalition enumeration with background
// imputation; D <= 15.
ShapExplanation shap_exact(const PredictFn& f, const std::vector<double>& x,
                           const Tensor& background, int class_idx = 0);

// k-means summary of feature rows into at most k background rows.
Tensor summarize_background(const Tensor& rows, int k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Plot data

struct PlotDataResult {
  std::filesystem::path summary_json;
  std::filesystem::path force_json;
  bool all_zero = false;  // every attribution was zero; ranking left empty
};

// summary: features ranked by mean |phi| across the explanations;
// force: per-instance base value, signed contributions sorted by magnitude,
// and f(x). JSON plus PNG renderings under out_dir.
PlotDataResult write_plot_data(const std::vector<ShapExplanation>& explanations,
                               const std::filesystem::path& out_dir);

}  // namespace lungct
