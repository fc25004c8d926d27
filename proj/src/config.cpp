#include "lungct/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "lungct/errors.hpp"

namespace lungct {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  auto& v = cfg.values_;
  v["seed"] = "7";
  v["out.root"] = "runs";

  v["data.root"] = "";
  v["data.synthetic"] = "false";
  v["synthetic.classes"] = "3";
  v["synthetic.per_class"] = "100";
  v["synthetic.height"] = "64";
  v["synthetic.width"] = "64";
  v["synthetic.separability"] = "0.9";

  v["preprocess.height"] = "256";
  v["preprocess.width"] = "256";
  v["preprocess.replicate_channels"] = "true";
  v["preprocess.gray_r"] = "0.299";
  v["preprocess.gray_g"] = "0.587";
  v["preprocess.gray_b"] = "0.114";

  v["split.train_fraction"] = "0.8";
  v["split.stratified"] = "true";

  v["smote.k_neighbors"] = "5";
  v["smote.dense"] = "true";
  v["smote.svm"] = "true";

  v["dense.backbone"] = "densenet169";
  v["dense.input_h"] = "224";
  v["dense.input_w"] = "224";
  v["dense.freeze_backbone"] = "true";
  v["dense.se_ratio"] = "16";
  v["dense.pyramid_channels"] = "256";
  v["dense.learning_rate"] = "1e-4";
  v["dense.epochs"] = "30";
  v["dense.batch_size"] = "16";
  v["dense.toy_width"] = "16";
  v["dense.toy_growth"] = "8";
  v["dense.toy_layers"] = "2";
  v["dense.backbone_weights"] = "";

  v["focal.gamma"] = "2.0";
  v["focal.alpha"] = "auto";

  v["svm.kernel"] = "grid";
  v["svm.c"] = "1.0";
  v["svm.grid_c"] = "0.01,0.1,1,10,100";
  v["svm.folds"] = "3";
  v["svm.gamma"] = "scale";
  v["svm.extractor_input"] = "256";
  v["svm.extractor_channels"] = "1280";
  v["svm.extractor_spatial"] = "8";

  v["explain.layer"] = "fpn_out";
  v["explain.background"] = "50";
  v["explain.samples"] = "2048";
  v["explain.opacity"] = "0.5";

  v["eval.split"] = "test";
  return cfg;
}

void RunConfig::set_checked(const std::string& key, const std::string& value,
                            const std::string& origin) {
  auto it = values_.find(key);
  if (it == values_.end()) {
    throw ConfigError("unknown config key '" + key + "' (" + origin + ")");
  }
  it->second = value;
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("malformed config line " + std::to_string(line_no) + " in " +
                        path.string() + ": expected key = value");
    }
    set_checked(trim(line.substr(0, eq)), trim(line.substr(eq + 1)),
                path.string() + ":" + std::to_string(line_no));
  }
}

void RunConfig::apply_override(const std::string& key, const std::string& value) {
  set_checked(key, value, "command line");
}

void RunConfig::apply_assignment(const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  apply_override(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string RunConfig::get_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const {
  try {
    return std::stoi(get_string(key));
  } catch (const std::logic_error&) {
    throw ConfigError("config key '" + key + "' is not an integer: " + get_string(key));
  }
}

double RunConfig::get_double(const std::string& key) const {
  try {
    return std::stod(get_string(key));
  } catch (const std::logic_error&) {
    throw ConfigError("config key '" + key + "' is not a number: " + get_string(key));
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  std::string v = get_string(key);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: " + get_string(key));
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  try {
    return std::stoull(get_string(key));
  } catch (const std::logic_error&) {
    throw ConfigError("config key '" + key + "' is not an unsigned integer: " + get_string(key));
  }
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
  std::vector<double> out;
  std::stringstream ss(get_string(key));
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    try {
      out.push_back(std::stod(part));
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "' has a non-numeric entry: " + part);
    }
  }
  if (out.empty()) throw ConfigError("config key '" + key + "' has no entries");
  return out;
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& [key, value] : values_) {
    out += key + " = " + value + "\n";
  }
  return out;
}

}  // namespace lungct
