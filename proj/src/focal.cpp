#include "lungct/focal.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace lungct {

namespace {

void check_inputs(const Tensor& p, const Tensor& y, const FocalLossConfig& cfg) {
  if (p.ndim() != 2 || !p.same_shape(y)) {
    throw std::invalid_argument("focal loss shape mismatch: p " + p.shape_str() + " vs y " +
                                y.shape_str());
  }
  if (cfg.gamma < 0.0) throw std::invalid_argument("focal gamma must be >= 0");
  const int k = p.dim(1);
  if (!(cfg.alpha.size() == 1 || static_cast<int>(cfg.alpha.size()) == k)) {
    throw std::invalid_argument("focal alpha length must be 1 or K");
  }
  for (double a : cfg.alpha) {
    if (a <= 0.0) throw std::invalid_argument("focal alpha entries must be positive");
  }
  for (int i = 0; i < p.dim(0); ++i) {
    double row_sum = 0.0;
    for (int c = 0; c < k; ++c) row_sum += p.at(i, c);
    if (std::abs(row_sum - 1.0) > 1e-6) {
      throw std::invalid_argument("focal loss probability row " + std::to_string(i) +
                                  " does not sum to 1 (got " + std::to_string(row_sum) + ")");
    }
  }
}

double alpha_for(const FocalLossConfig& cfg, int c) {
  return cfg.alpha.size() == 1 ? cfg.alpha[0] : cfg.alpha[static_cast<std::size_t>(c)];
}

}  // namespace

double focal_loss(const Tensor& p, const Tensor& y_onehot, const FocalLossConfig& cfg) {
  check_inputs(p, y_onehot, cfg);
  const int n = p.dim(0), k = p.dim(1);
  const double eps = cfg.prob_clip;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < k; ++c) {
      double t = y_onehot.at(i, c);
      if (t == 0.0) continue;
      double pc = std::clamp(p.at(i, c), eps, 1.0 - eps);
      total += t * (-alpha_for(cfg, c) * std::pow(1.0 - pc, cfg.gamma) * std::log(pc));
    }
  }
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

Tensor focal_loss_grad(const Tensor& p, const Tensor& y_onehot, const FocalLossConfig& cfg) {
  check_inputs(p, y_onehot, cfg);
  const int n = p.dim(0), k = p.dim(1);
  const double eps = cfg.prob_clip;
  const double g = cfg.gamma;
  Tensor grad(p.shape());
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < k; ++c) {
      double t = y_onehot.at(i, c);
      if (t == 0.0) continue;
      double raw = p.at(i, c);
      if (raw < eps || raw > 1.0 - eps) continue;  // clipped region: flat
      double a = alpha_for(cfg, c);
      // d/dp [-a (1-p)^g log p] = a*g*(1-p)^(g-1)*log p - a*(1-p)^g / p
      double focus = std::pow(1.0 - raw, g);
      double dfocus = (g == 0.0) ? 0.0 : g * std::pow(1.0 - raw, g - 1.0);
      grad.at(i, c) = t * (a * dfocus * std::log(raw) - a * focus / raw) / static_cast<double>(n);
    }
  }
  return grad;
}

std::vector<double> inverse_frequency_alpha(const std::vector<int>& class_counts) {
  std::vector<double> alpha(class_counts.size(), 1.0);
  double sum = 0.0;
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    if (class_counts[c] <= 0) throw std::invalid_argument("class count must be positive");
    alpha[c] = 1.0 / static_cast<double>(class_counts[c]);
    sum += alpha[c];
  }
  double scale = static_cast<double>(alpha.size()) / sum;
  for (double& a : alpha) a *= scale;
  return alpha;
}

}  // namespace lungct
