#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lungct/tensor.hpp"

namespace lungct {

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

// A differentiable tensor transform. forward() caches whatever backward()
// needs; one forward per backward. Layers own their parameters and gradient
// accumulators.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  // Returns the gradient wrt the last forward input; accumulates into param grads.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out) { (void)prefix, (void)out; }
  // Params plus buffers (running stats), for serialization.
  virtual void collect_state(const std::string& prefix,
                             std::vector<std::pair<std::string, Tensor*>>& out) {
    (void)prefix, (void)out;
  }
  virtual std::string kind() const = 0;
};

// 2-D convolution on (N,H,W,C). Weights stored as a (kh*kw*in_ch, out_ch)
// matrix matching the im2col column layout (dy, dx, c_in).
class Conv2d : public Layer {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool use_bias, std::mt19937& rng);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;
  std::string kind() const override { return "conv2d"; }

  Tensor& weights() { return w_; }
  Tensor& bias() { return b_; }
  int out_channels() const { return out_ch_; }

 private:
  void im2col(const double* x, int h, int w, int oh, int ow, double* col) const;
  void col2im(const double* col, int h, int w, int oh, int ow, double* dx) const;

  int in_ch_, out_ch_, k_, stride_, pad_;
  bool use_bias_;
  Tensor w_, b_, gw_, gb_;
  Tensor input_;
};

// Per-channel batch normalization on (N,H,W,C).
class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;
  std::string kind() const override { return "batchnorm2d"; }

  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }

 private:
  int channels_;
  double eps_, momentum_;
  Tensor gamma_, beta_, ggamma_, gbeta_;
  Tensor running_mean_, running_var_;
  // backward caches (training mode)
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool trained_forward_ = false;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string kind() const override { return "relu"; }

 private:
  std::vector<char> mask_;
  std::vector<int> in_shape_;
};

class MaxPool2d : public Layer {
 public:
  MaxPool2d(int kernel, int stride, int pad);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string kind() const override { return "maxpool2d"; }

 private:
  int k_, stride_, pad_;
  std::vector<std::size_t> argmax_;
  std::vector<int> in_shape_;
};

// Average pooling with border-clipped windows; ceil_mode covers odd inputs
// (7 -> 4 with kernel/stride 2).
class AvgPool2d : public Layer {
 public:
  AvgPool2d(int kernel, int stride, bool ceil_mode = false);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string kind() const override { return "avgpool2d"; }

 private:
  int k_, stride_;
  bool ceil_mode_;
  std::vector<int> in_shape_;
};

// Nearest-neighbor x2 spatial upsampling.
class Upsample2x : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string kind() const override { return "upsample2x"; }

 private:
  std::vector<int> in_shape_;
};

// (N,H,W,C) -> (N,C)
class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string kind() const override { return "gap"; }

 private:
  std::vector<int> in_shape_;
};

// Fully connected (N,D) -> (N,M).
class Dense : public Layer {
 public:
  Dense(int in_dim, int out_dim, bool use_bias, std::mt19937& rng);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;
  std::string kind() const override { return "dense"; }

  Tensor& weights() { return w_; }
  Tensor& bias() { return b_; }

 private:
  int in_dim_, out_dim_;
  bool use_bias_;
  Tensor w_, b_, gw_, gb_;
  Tensor input_;
};

// Named chain of layers with per-layer output caching (taps for Grad-CAM).
class Sequential : public Layer {
 public:
  void add(std::string name, std::unique_ptr<Layer> layer);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  // Gradient of the seeded scalar wrt the output of layer `idx` (backward runs
  // through layers idx+1..end only).
  Tensor backward_to(int idx, const Tensor& grad_top);
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;
  std::string kind() const override { return "sequential"; }

  int find(const std::string& name) const;  // -1 if absent
  const Tensor& output_of(int idx) const { return outputs_[static_cast<std::size_t>(idx)]; }
  std::size_t size() const { return layers_.size(); }
  Layer* layer(int idx) { return layers_[static_cast<std::size_t>(idx)].get(); }
  const std::string& name_of(int idx) const { return names_[static_cast<std::size_t>(idx)]; }

 private:
  std::vector<std::string> names_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<Tensor> outputs_;
};

// Row-wise softmax on (N,K).
Tensor softmax_rows(const Tensor& logits);
Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs);

double sigmoid(double z);

void he_normal_init(Tensor& w, int fan_in, std::mt19937& rng);

// Adaptive-moment gradient descent.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void attach(std::vector<ParamRef> params);
  void zero_grad();
  void step();

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<ParamRef> params_;
  std::vector<Tensor> m_, v_;
};

// Serialize/restore every named state tensor of a layer tree.
void save_layer_state(Layer& root, const std::string& prefix, std::vector<std::pair<std::string, Tensor>>& out);
void load_layer_state(Layer& root, const std::string& prefix,
                      const std::vector<std::pair<std::string, Tensor>>& entries);

}  // namespace lungct
