#include "lungct/plot.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

#include "lungct/errors.hpp"
#include "lungct/io.hpp"

namespace fs = std::filesystem;

namespace lungct {

namespace {

const cv::Scalar kBg(255, 255, 255);
const cv::Scalar kAxis(40, 40, 40);
const cv::Scalar kSeries[4] = {cv::Scalar(180, 90, 30), cv::Scalar(30, 90, 200),
                               cv::Scalar(60, 160, 60), cv::Scalar(150, 60, 150)};

void write_png(const fs::path& path, const cv::Mat& canvas) {
  std::vector<unsigned char> buf;
  if (!cv::imencode(".png", canvas, buf)) {
    throw ComputeError("failed to encode plot " + path.string());
  }
  atomic_write(path, std::string(buf.begin(), buf.end()));
}

}  // namespace

void plot_roc_png(const fs::path& path, const std::vector<std::pair<double, double>>& points,
                  const std::string& label, double auc) {
  const int w = 560, h = 560, m = 60;
  cv::Mat canvas(h, w, CV_8UC3, kBg);
  auto px = [&](double fpr, double tpr) {
    return cv::Point(m + static_cast<int>(fpr * (w - 2 * m)),
                     h - m - static_cast<int>(tpr * (h - 2 * m)));
  };
  cv::rectangle(canvas, px(0, 1), px(1, 0), kAxis, 1);
  cv::line(canvas, px(0, 0), px(1, 1), cv::Scalar(180, 180, 180), 1, cv::LINE_AA);
  for (std::size_t i = 1; i < points.size(); ++i) {
    cv::line(canvas, px(points[i - 1].first, points[i - 1].second),
             px(points[i].first, points[i].second), kSeries[0], 2, cv::LINE_AA);
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "ROC %s (AUC = %.2f)", label.c_str(), auc);
  cv::putText(canvas, buf, cv::Point(m, m - 20), cv::FONT_HERSHEY_SIMPLEX, 0.6, kAxis, 1,
              cv::LINE_AA);
  cv::putText(canvas, "FPR", cv::Point(w / 2, h - 18), cv::FONT_HERSHEY_SIMPLEX, 0.5, kAxis, 1);
  cv::putText(canvas, "TPR", cv::Point(8, h / 2), cv::FONT_HERSHEY_SIMPLEX, 0.5, kAxis, 1);
  write_png(path, canvas);
}

void plot_bars_png(const fs::path& path, const std::vector<std::pair<std::string, double>>& bars,
                   const std::string& title) {
  const int row_h = 26, m = 50;
  const int w = 720;
  const int h = std::max(200, m * 2 + row_h * static_cast<int>(bars.size()));
  cv::Mat canvas(h, w, CV_8UC3, kBg);
  double max_abs = 1e-12;
  for (const auto& [name, v] : bars) max_abs = std::max(max_abs, std::abs(v));
  const int zero_x = 240;
  const int span = w - zero_x - m;
  cv::putText(canvas, title, cv::Point(m / 2, 30), cv::FONT_HERSHEY_SIMPLEX, 0.6, kAxis, 1,
              cv::LINE_AA);
  cv::line(canvas, cv::Point(zero_x, m), cv::Point(zero_x, h - m / 2), kAxis, 1);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    int y = m + static_cast<int>(i) * row_h;
    double frac = bars[i].second / max_abs;
    int x1 = zero_x + static_cast<int>(frac * span * 0.5);
    cv::Scalar color = bars[i].second >= 0 ? kSeries[2] : kSeries[1];
    cv::rectangle(canvas, cv::Point(std::min(zero_x, x1), y + 4),
                  cv::Point(std::max(zero_x, x1), y + row_h - 6), color, cv::FILLED);
    char buf[120];
    std::snprintf(buf, sizeof(buf), "%s  %.4g", bars[i].first.c_str(), bars[i].second);
    cv::putText(canvas, buf, cv::Point(8, y + row_h - 10), cv::FONT_HERSHEY_SIMPLEX, 0.45, kAxis, 1,
                cv::LINE_AA);
  }
  write_png(path, canvas);
}

void plot_lines_png(const fs::path& path,
                    const std::vector<std::pair<std::string, std::vector<double>>>& series,
                    const std::string& title) {
  const int w = 640, h = 420, m = 50;
  cv::Mat canvas(h, w, CV_8UC3, kBg);
  double lo = 0.0, hi = 1e-12;
  std::size_t n = 1;
  for (const auto& [name, vals] : series) {
    for (double v : vals) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    n = std::max(n, vals.size());
  }
  if (hi <= lo) hi = lo + 1.0;
  auto px = [&](std::size_t i, double v) {
    double fx = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
    double fy = (v - lo) / (hi - lo);
    return cv::Point(m + static_cast<int>(fx * (w - 2 * m)),
                     h - m - static_cast<int>(fy * (h - 2 * m)));
  };
  cv::rectangle(canvas, cv::Point(m, m), cv::Point(w - m, h - m), kAxis, 1);
  cv::putText(canvas, title, cv::Point(m, m - 16), cv::FONT_HERSHEY_SIMPLEX, 0.6, kAxis, 1,
              cv::LINE_AA);
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& vals = series[s].second;
    for (std::size_t i = 1; i < vals.size(); ++i) {
      cv::line(canvas, px(i - 1, vals[i - 1]), px(i, vals[i]), kSeries[s % 4], 2, cv::LINE_AA);
    }
    cv::putText(canvas, series[s].first, cv::Point(w - m - 120, m + 20 + 18 * static_cast<int>(s)),
                cv::FONT_HERSHEY_SIMPLEX, 0.45, kSeries[s % 4], 1, cv::LINE_AA);
  }
  write_png(path, canvas);
}

}  // namespace lungct
