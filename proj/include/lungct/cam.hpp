#pragma once

#include <string>

#include "lungct/tensor.hpp"

namespace lungct {

// Forward + gradient access needed by Grad-CAM: a model exposes named
// convolutional feature maps and the gradient of a class score wrt them.
class CamModel {
 public:
  virtual ~CamModel() = default;
  // Runs `image` (H,W,C) through the model, returns the activation (H',W',C')
  // at `layer_id` and writes d(score[class_idx])/d(activation) into *grad.
  // Throws std::invalid_argument when layer_id has no gradient path.
  virtual Tensor cam_activation_and_grad(const Tensor& image, const std::string& layer_id,
                                         int class_idx, Tensor* grad) = 0;
  virtual int num_classes() const = 0;
};

}  // namespace lungct
