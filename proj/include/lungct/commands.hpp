#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lungct/config.hpp"
#include "lungct/tensor.hpp"

namespace lungct {

// Timestamped, never-overwritten run directory under root.
std::filesystem::path make_run_dir(const std::filesystem::path& root, const std::string& command);

struct PreparedData {
  Tensor train_x, test_x;  // (N,H,W,3)
  std::vector<int> train_y, test_y;
  std::vector<std::string> class_names;
  std::string manifest_hash_hex;
};

PreparedData load_prepared(const std::filesystem::path& data_dir);

// Each command validates its inputs, then writes all outputs (plus the
// effective config) under the returned run directory.
std::filesystem::path cmd_prepare(const RunConfig& cfg);
std::filesystem::path cmd_train(const RunConfig& cfg, const std::string& branch,
                                const std::filesystem::path& data_dir);
std::filesystem::path cmd_evaluate(const RunConfig& cfg, const std::filesystem::path& model_dir,
                                   const std::filesystem::path& data_dir);
std::filesystem::path cmd_explain(const RunConfig& cfg, const std::filesystem::path& model_dir,
                                  const std::filesystem::path& data_dir, const std::string& method,
                                  int index, const std::string& image_path, int class_idx);
std::filesystem::path cmd_report(const RunConfig& cfg,
                                 const std::vector<std::filesystem::path>& eval_dirs);

}  // namespace lungct
