#include "lungct/features.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "lungct/errors.hpp"
#include "lungct/io.hpp"

namespace lungct {

std::string ExtractorConfig::to_string() const {
  return "extractor(input=" + std::to_string(input_h) + "x" + std::to_string(input_w) +
         ",final_channels=" + std::to_string(final_channels) +
         ",final_spatial=" + std::to_string(final_spatial) + ",seed=" + std::to_string(seed) + ")";
}

FeatureExtractor::FeatureExtractor(const ExtractorConfig& cfg) : cfg_(cfg) {
  if (cfg_.input_h != cfg_.input_w) throw ConfigError("extractor input must be square");
  if (cfg_.final_spatial <= 0 || cfg_.input_h % cfg_.final_spatial != 0) {
    throw ConfigError("extractor input must be a multiple of its final spatial size");
  }
  int ratio = cfg_.input_h / cfg_.final_spatial;
  int stages = 0;
  while (ratio > 1) {
    if (ratio % 2 != 0) throw ConfigError("extractor input/final_spatial ratio must be a power of 2");
    ratio /= 2;
    ++stages;
  }
  if (stages < 1) throw ConfigError("extractor needs at least one stride-2 stage");

  std::mt19937 rng(static_cast<std::uint32_t>(cfg_.seed));
  int in_ch = 3;
  for (int s = 0; s < stages; ++s) {
    int out_ch = std::min(128, 32 << s);
    std::string tag = "stage" + std::to_string(s);
    net_.add(tag + "_conv", std::make_unique<Conv2d>(in_ch, out_ch, 3, 2, 1, false, rng));
    net_.add(tag + "_bn", std::make_unique<BatchNorm2d>(out_ch));
    net_.add(tag + "_relu", std::make_unique<ReLU>());
    in_ch = out_ch;
  }
  net_.add("proj_conv", std::make_unique<Conv2d>(in_ch, cfg_.final_channels, 1, 1, 0, false, rng));
  net_.add("proj_bn", std::make_unique<BatchNorm2d>(cfg_.final_channels));
  net_.add("proj_relu", std::make_unique<ReLU>());
}

Tensor FeatureExtractor::forward_map(const Tensor& images) {
  if (images.ndim() != 4 || images.dim(1) != cfg_.input_h || images.dim(2) != cfg_.input_w ||
      images.dim(3) != 3) {
    throw std::invalid_argument("extractor expects (N," + std::to_string(cfg_.input_h) + "," +
                                std::to_string(cfg_.input_w) + ",3), got " + images.shape_str());
  }
  return net_.forward(images, false);
}

std::uint64_t FeatureExtractor::fingerprint() {
  std::string arch = cfg_.to_string();
  std::uint64_t h = fnv1a64(arch.data(), arch.size());
  for (auto& [name, t] : state()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t->data(), t->size() * sizeof(double), h);
  }
  return h;
}

FeatureMatrix extract_features(const Tensor& images, FeatureExtractor& extractor) {
  Tensor map = extractor.forward_map(images);
  const int n = map.dim(0), h = map.dim(1), w = map.dim(2), c = map.dim(3);
  FeatureMatrix fm;
  fm.values = Tensor({n, c});
  const double inv = 1.0 / static_cast<double>(h * w);
  for (int i = 0; i < n; ++i) {
    const double* src = map.data() + static_cast<std::size_t>(i) * h * w * c;
    double* dst = fm.values.data() + static_cast<std::size_t>(i) * c;
    for (int p = 0; p < h * w; ++p) {
      for (int ch = 0; ch < c; ++ch) dst[ch] += src[static_cast<std::size_t>(p) * c + ch];
    }
    for (int ch = 0; ch < c; ++ch) dst[ch] *= inv;
  }
  fm.fingerprint = extractor.fingerprint();
  return fm;
}

}  // namespace lungct
