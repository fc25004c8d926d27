#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lungct/nn.hpp"
#include "lungct/tensor.hpp"

namespace lungct {

// Convolutional feature extractor ending in a (s,s,final_channels) map whose
// global average becomes the SVM feature vector. Stride-2 stages take the
// input down to final_spatial; a 1x1 conv expands to the final width.
struct ExtractorConfig {
  int input_h = 256;
  int input_w = 256;
  int final_channels = 1280;
  int final_spatial = 8;
  std::uint64_t seed = 0;

  std::string to_string() const;
};

class FeatureExtractor {
 public:
  explicit FeatureExtractor(const ExtractorConfig& cfg);

  const ExtractorConfig& config() const { return cfg_; }
  int feature_dim() const { return cfg_.final_channels; }

  // (N,H,W,3) -> final feature map (N,s,s,C), eval mode. Throws on size mismatch.
  Tensor forward_map(const Tensor& images);

  // Hash over the architecture string and every weight byte; identifies the
  // extractor a feature matrix came from.
  std::uint64_t fingerprint();

  std::vector<std::pair<std::string, Tensor*>> state() {
    std::vector<std::pair<std::string, Tensor*>> out;
    net_.collect_state("extractor", out);
    return out;
  }

 private:
  ExtractorConfig cfg_;
  Sequential net_;
};

struct FeatureMatrix {
  Tensor values;  // (N,D)
  std::uint64_t fingerprint = 0;
};

// One row per image: the global average of the extractor's final map.
FeatureMatrix extract_features(const Tensor& images, FeatureExtractor& extractor);

}  // namespace lungct
