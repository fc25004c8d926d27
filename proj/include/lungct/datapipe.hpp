#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lungct/tensor.hpp"

namespace lungct {

struct Sample {
  Tensor image;  // (H,W,C) in [0,1]
  int label = 0;
  std::string source_path;
  std::string class_name;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<int> labels() const;
  std::vector<int> class_counts() const;
};

struct LoadReport {
  std::vector<std::pair<std::string, int>> class_counts;
  std::vector<std::string> skipped;
  int total = 0;

  std::string to_json() const;
};

struct PreprocessConfig {
  int target_h = 256;
  int target_w = 256;
  bool replicate_channels = true;
  double gray_r = 0.299, gray_g = 0.587, gray_b = 0.114;

  void validate() const;  // positive target, weights sum to 1 within 1e-9
};

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  bool stratified = true;
};

struct SmoteConfig {
  int k_neighbors = 5;
  std::uint64_t seed = 0;
};

struct SyntheticSpec {
  int num_classes = 3;
  int per_class = 100;
  int height = 64;
  int width = 64;
  double separability = 0.9;  // 0 disables the class patterns entirely
  std::uint64_t seed = 7;
};

// Loads <root>/<class_name>/*.{png,jpg,jpeg,bmp}. Class indices follow the
// lexicographic order of the subdirectory names. Undecodable files are
// skipped and recorded in the report; a class with no decodable image is
// fatal.
Dataset load_dataset(const std::filesystem::path& root, LoadReport* report = nullptr);

// Gray conversion (luminance weights), resize, replication to 3 channels, and
// [0,1] clamping. Idempotent bitwise on already-conforming tensors.
Tensor preprocess(const Tensor& raw_image, const PreprocessConfig& cfg);

// Per-class split preserving proportions within one sample; deterministic for a
// fixed seed. Throws when a class has fewer than 2 samples.
std::pair<std::vector<int>, std::vector<int>> split_indices(const std::vector<int>& labels,
                                                            const SplitSpec& spec);
std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, const SplitSpec& spec);

struct SmoteResult {
  Tensor x;  // original rows verbatim, synthetic rows appended
  std::vector<int> y;
  bool single_class_noop = false;
};

// Oversamples every minority class up to the majority count by interpolating
// between a minority row and one of its k nearest same-class neighbors.
SmoteResult smote_balance(const Tensor& x, const std::vector<int>& y, const SmoteConfig& cfg);

// Image-level wrapper: flattens (H,W,C), balances, reshapes back.
Dataset smote_balance_images(const Dataset& ds, const SmoteConfig& cfg);

Tensor one_hot(const std::vector<int>& y, int num_classes);

Dataset make_synthetic_dataset(const SyntheticSpec& spec);

// Stacks equally-shaped sample images into (N,H,W,C).
Tensor stack_images(const Dataset& ds);

// CSV manifest: header path,label,split.
void write_split_manifest(const std::filesystem::path& path, const Dataset& train,
                          const Dataset& test);
std::uint64_t manifest_hash(const std::filesystem::path& path);

}  // namespace lungct
