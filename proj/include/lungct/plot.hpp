#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace lungct {

// Minimal chart rendering for report artifacts.

void plot_roc_png(const std::filesystem::path& path,
                  const std::vector<std::pair<double, double>>& points, const std::string& label,
                  double auc);

// Horizontal bar chart; negative values extend left of the axis.
void plot_bars_png(const std::filesystem::path& path,
                   const std::vector<std::pair<std::string, double>>& bars,
                   const std::string& title);

// Training curves: one line per named series over epochs.
void plot_lines_png(const std::filesystem::path& path,
                    const std::vector<std::pair<std::string, std::vector<double>>>& series,
                    const std::string& title);

}  // namespace lungct
