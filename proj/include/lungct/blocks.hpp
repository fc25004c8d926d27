#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "lungct/nn.hpp"
#include "lungct/tensor.hpp"

namespace lungct {

// ---------------------------------------------------------------------------
// Squeeze-and-Excitation: y = x * sigmoid(W2 relu(W1 gap(x))), gates per channel.
// Both fully connected stages are bias-free.

class SeBlock : public Layer {
 public:
  // Throws if ratio does not divide channels.
  SeBlock(int channels, int ratio, std::mt19937& rng);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;
  std::string kind() const override { return "se"; }

  int channels() const { return channels_; }
  Tensor& w1() { return w1_; }  // (C, C/r), squeeze -> reduced
  Tensor& w2() { return w2_; }  // (C/r, C), reduced -> gates
  // Gate vector g from the last forward, shape (N, C).
  const Tensor& last_gates() const { return gates_; }

 private:
  int channels_, reduced_;
  Tensor w1_, w2_, gw1_, gw2_;
  Tensor input_, squeezed_, hidden_, gates_;
};

// Spec-level wrapper; accepts (H,W,C) or (N,H,W,C).
Tensor se_block(SeBlock& block, const Tensor& x);

// ---------------------------------------------------------------------------
// Dense connectivity: layer l consumes the channel concatenation of the block
// input and every previous layer's output; each layer appends growth_rate
// channels. Output channels = input_channels + num_layers * growth_rate.

struct DenseBlockSpec {
  int input_channels = 0;
  int growth_rate = 12;
  int num_layers = 2;
  // H_l = [conv1x1(4k) -> BN -> ReLU ->] conv3x3(k) -> BN -> ReLU
  bool bottleneck = false;
};

class DenseBlock : public Layer {
 public:
  DenseBlock(DenseBlockSpec spec, std::mt19937& rng);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_state(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor*>>& out) override;
  std::string kind() const override { return "dense_block"; }

  const DenseBlockSpec& spec() const { return spec_; }
  int output_channels() const { return spec_.input_channels + spec_.num_layers * spec_.growth_rate; }

  // Forward pass that zeroes the output of inner layer `ablate` before it is
  // concatenated; records the concatenated input seen by every layer in
  // `layer_inputs` when non-null. Test instrumentation for the connectivity
  // contract.
  Tensor forward_instrumented(const Tensor& x, int ablate, std::vector<Tensor>* layer_inputs);

  Sequential& layer_transform(int l) { return *transforms_[static_cast<std::size_t>(l)]; }

 private:
  DenseBlockSpec spec_;
  std::vector<std::unique_ptr<Sequential>> transforms_;
  std::vector<int> input_channel_counts_;  // channels fed to each layer, cached by forward
  std::vector<int> in_shape_;
};

// Spec-level wrapper; accepts (H,W,C) or (N,H,W,C); throws on channel mismatch.
Tensor dense_block_forward(DenseBlock& block, const Tensor& x);

// Channel concatenation of equal-spatial maps.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Feature pyramid fusion over levels ordered coarse -> fine:
//   out[0] = conv3x3(lateral[0](F[0]))
//   out[i] = conv3x3(lateral[i](F[i]) + upsample2x(out[i-1]))
// Laterals are 1x1 convs onto pyramid_channels; all convs bias-free. Adjacent
// levels must satisfy coarse = ceil(fine / 2); upsampled maps are cropped by
// one row/column when the finer level is odd (the 7x7 case).

struct FpnSpec {
  int pyramid_channels = 256;
  int num_levels = 1;
};

class FpnFuse {
 public:
  FpnFuse(FpnSpec spec, std::vector<int> input_channels, std::mt19937& rng);

  std::vector<Tensor> forward(const std::vector<Tensor>& levels, bool training);
  // grad_outputs aligned with forward outputs; returns grads wrt input levels.
  std::vector<Tensor> backward(const std::vector<Tensor>& grad_outputs);

  void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
  void collect_state(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out);

  const FpnSpec& spec() const { return spec_; }
  Conv2d& lateral(int i) { return *laterals_[static_cast<std::size_t>(i)]; }
  Conv2d& output_conv(int i) { return *outputs_[static_cast<std::size_t>(i)]; }

  static Tensor upsample_nearest2x(const Tensor& x);
  static Tensor downsample_sum2x(const Tensor& g);

 private:
  FpnSpec spec_;
  std::vector<int> input_channels_;
  std::vector<std::unique_ptr<Conv2d>> laterals_;
  std::vector<std::unique_ptr<Conv2d>> outputs_;
  std::vector<std::vector<int>> level_shapes_;  // from last forward
};

// Spec-level wrapper; accepts (H,W,C) or (N,H,W,C) levels, coarse -> fine.
std::vector<Tensor> fpn_fuse(FpnFuse& fpn, const std::vector<Tensor>& levels);

}  // namespace lungct
