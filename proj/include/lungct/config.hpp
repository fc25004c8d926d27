#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lungct {

// Flat key-value run configuration with dotted sections. Precedence:
// defaults < config file < command-line overrides. Unknown keys are rejected.
class RunConfig {
 public:
  static RunConfig defaults();

  // "key = value" lines, '#' comments, blank lines ignored.
  void apply_file(const std::filesystem::path& path);
  void apply_override(const std::string& key, const std::string& value);
  // "key=value" form used by --set flags.
  void apply_assignment(const std::string& assignment);

  std::string get_string(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;

  // Sorted "key = value" lines; re-parsable by apply_file.
  std::string serialize() const;

 private:
  void set_checked(const std::string& key, const std::string& value, const std::string& origin);

  std::map<std::string, std::string> values_;
};

}  // namespace lungct
