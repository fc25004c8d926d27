#pragma once

#include <vector>

#include "lungct/tensor.hpp"

namespace lungct {

// Per-class weighted focusing loss over predicted probabilities:
//   loss = mean_i [ -alpha_c (1 - p_ic)^gamma * log(p_ic) ]  at true class c.
// gamma = 0 with uniform alpha reduces to categorical cross-entropy.
struct FocalLossConfig {
  std::vector<double> alpha;  // length K; a single element broadcasts
  double gamma = 2.0;
  double prob_clip = 1e-7;  // probabilities clipped into [eps, 1-eps] before log
};

// p: (N,K) rows summing to 1 within 1e-6; y_onehot: (N,K).
double focal_loss(const Tensor& p, const Tensor& y_onehot, const FocalLossConfig& cfg);

// dLoss/dp, same shape as p. Zero outside the clip interval and off the true class.
Tensor focal_loss_grad(const Tensor& p, const Tensor& y_onehot, const FocalLossConfig& cfg);

// Inverse-class-frequency weights normalized to mean 1.
std::vector<double> inverse_frequency_alpha(const std::vector<int>& class_counts);

}  // namespace lungct
