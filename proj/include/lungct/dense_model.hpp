#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "lungct/blocks.hpp"
#include "lungct/cam.hpp"
#include "lungct/focal.hpp"
#include "lungct/nn.hpp"
#include "lungct/tensor.hpp"

namespace lungct {

enum class BackboneKind { Toy, DenseNet169 };

BackboneKind backbone_kind_from_string(const std::string& s);
std::string to_string(BackboneKind kind);

struct OptimizerSpec {
  double learning_rate = 1e-4;
  int epochs = 30;
  int batch_size = 16;
};

struct DenseBranchConfig {
  int input_h = 224;
  int input_w = 224;
  BackboneKind backbone = BackboneKind::DenseNet169;
  bool freeze_backbone = true;
  int num_classes = 3;
  int se_ratio = 16;
  int pyramid_channels = 256;
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;
  // toy backbone knobs
  int toy_width = 16;
  int toy_growth = 8;
  int toy_layers = 2;
  // optional pretrained backbone weights (named-tensor container)
  std::string backbone_weights;
};

struct TrainHistory {
  std::vector<double> train_loss, train_acc, val_loss, val_acc;
  std::uint64_t seed = 0;
  int best_epoch = -1;
};

// Backbone -> SE -> FPN (final map + one pooled coarser level) -> GAP -> softmax head.
class DenseBranchModel : public CamModel {
 public:
  explicit DenseBranchModel(const DenseBranchConfig& cfg);

  const DenseBranchConfig& config() const { return cfg_; }
  int backbone_channels() const { return backbone_channels_; }
  int backbone_stride() const { return backbone_stride_; }

  // (N,H,W,3) -> (N,K) probabilities; rows sum to 1.
  Tensor forward(const Tensor& images, bool training);
  // Eval-mode forward with shape checks; ties in downstream argmax go to the
  // lowest index by the prediction helpers.
  Tensor predict(const Tensor& images);

  // Backprop from the softmax logits; optionally returns d(loss)/d(images).
  Tensor backward_from_logits(const Tensor& grad_logits, bool need_input_grad = false);

  std::vector<ParamRef> trainable_params();  // excludes a frozen backbone
  std::vector<std::pair<std::string, Tensor*>> state();

  // CamModel
  Tensor cam_activation_and_grad(const Tensor& image, const std::string& layer_id, int class_idx,
                                 Tensor* grad) override;
  int num_classes() const override { return cfg_.num_classes; }
  static std::vector<std::string> cam_layers() { return {"backbone_out", "se_out", "fpn_out"}; }

 private:
  DenseBranchConfig cfg_;
  Sequential backbone_;
  int backbone_channels_ = 0;
  int backbone_stride_ = 1;
  std::unique_ptr<SeBlock> se_;
  AvgPool2d coarse_pool_{2, 2, /*ceil_mode=*/true};
  std::unique_ptr<FpnFuse> fpn_;
  GlobalAvgPool gap_;
  std::unique_ptr<Dense> head_;
  // forward caches
  Tensor backbone_out_, se_out_, coarse_out_, fine_out_, logits_, probs_;
};

int argmax_row(const Tensor& matrix, int row);  // ties -> lowest index
std::vector<int> argmax_rows(const Tensor& matrix);
double accuracy_of(const Tensor& probs, const Tensor& y_onehot);

// Deterministic given seed; retains the weights of the best-validation-accuracy
// epoch (ties broken by lower validation loss). Throws ComputeError on NaN loss.
TrainHistory train_dense(DenseBranchModel& model, const Tensor& x_train, const Tensor& y_train,
                         const Tensor& x_val, const Tensor& y_val, const FocalLossConfig& loss_cfg,
                         const OptimizerSpec& opt, std::uint64_t seed);

// Model artifact: directory with config.json, weights.bin and history.json.
void save_dense_model(DenseBranchModel& model, const std::vector<std::string>& class_names,
                      const TrainHistory& history, const std::filesystem::path& dir);

struct LoadedDenseModel {
  std::unique_ptr<DenseBranchModel> model;
  std::vector<std::string> class_names;
  TrainHistory history;
};
LoadedDenseModel load_dense_model(const std::filesystem::path& dir);

}  // namespace lungct
