#include "lungct/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <stdexcept>

#include "lungct/errors.hpp"
#include "lungct/io.hpp"

namespace lungct {

namespace {

Tensor mat_to_tensor(const cv::Mat& mat, const std::string& origin) {
  if (mat.empty()) throw DataError("cannot decode image: " + origin);
  cv::Mat m = mat;
  double scale = 1.0;
  switch (m.depth()) {
    case CV_8U:
      scale = 1.0 / 255.0;
      break;
    case CV_16U:
      scale = 1.0 / 65535.0;
      break;
    case CV_32F:
    case CV_64F:
      scale = 1.0;
      break;
    default:
      throw DataError("unsupported image depth in " + origin);
  }
  const int h = m.rows, w = m.cols, c = m.channels();
  if (c != 1 && c != 3 && c != 4) {
    throw DataError("unsupported channel count " + std::to_string(c) + " in " + origin);
  }
  cv::Mat f;
  m.convertTo(f, CV_64F, scale);
  Tensor out({h, w, c});
  // OpenCV decodes color as BGR(A); store RGB(A)
  for (int y = 0; y < h; ++y) {
    const double* row = f.ptr<double>(y);
    for (int x = 0; x < w; ++x) {
      if (c == 1) {
        out.at(y, x, 0) = row[x];
      } else {
        out.at(y, x, 0) = row[x * c + 2];
        out.at(y, x, 1) = row[x * c + 1];
        out.at(y, x, 2) = row[x * c + 0];
        if (c == 4) out.at(y, x, 3) = row[x * c + 3];
      }
    }
  }
  return out;
}

}  // namespace

Tensor decode_image_file(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  return mat_to_tensor(m, path.string());
}

Tensor decode_image_bytes(const std::string& bytes) {
  std::vector<unsigned char> buf(bytes.begin(), bytes.end());
  cv::Mat m = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  return mat_to_tensor(m, "<memory>");
}

void save_image_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.ndim() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
    throw std::invalid_argument("save_image_png expects (H,W,1) or (H,W,3)");
  }
  const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
  cv::Mat m(h, w, c == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < h; ++y) {
    unsigned char* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < w; ++x) {
      if (c == 1) {
        row[x] = cv::saturate_cast<unsigned char>(image.at(y, x, 0) * 255.0);
      } else {
        // back to BGR for OpenCV
        row[x * 3 + 0] = cv::saturate_cast<unsigned char>(image.at(y, x, 2) * 255.0);
        row[x * 3 + 1] = cv::saturate_cast<unsigned char>(image.at(y, x, 1) * 255.0);
        row[x * 3 + 2] = cv::saturate_cast<unsigned char>(image.at(y, x, 0) * 255.0);
      }
    }
  }
  std::vector<unsigned char> buf;
  if (!cv::imencode(".png", m, buf)) throw ComputeError("failed to encode " + path.string());
  atomic_write(path, std::string(buf.begin(), buf.end()));
}

Tensor resize_image(const Tensor& image, int out_h, int out_w) {
  if (image.ndim() != 3) throw std::invalid_argument("resize_image expects (H,W,C)");
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize target must be positive");
  const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (h == out_h && w == out_w) return image;
  Tensor out({out_h, out_w, c});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
      for (int ch = 0; ch < c; ++ch) {
        double top = image.at(y0c, x0c, ch) * (1.0 - wx) + image.at(y0c, x1c, ch) * wx;
        double bot = image.at(y1c, x0c, ch) * (1.0 - wx) + image.at(y1c, x1c, ch) * wx;
        out.at(oy, ox, ch) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Tensor resize_batch(const Tensor& images, int out_h, int out_w) {
  if (images.ndim() != 4) throw std::invalid_argument("resize_batch expects (N,H,W,C)");
  const int n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (h == out_h && w == out_w) return images;
  Tensor out({n, out_h, out_w, c});
  for (int i = 0; i < n; ++i) {
    Tensor img({h, w, c});
    std::copy(images.data() + static_cast<std::size_t>(i) * h * w * c,
              images.data() + static_cast<std::size_t>(i + 1) * h * w * c, img.data());
    Tensor r = resize_image(img, out_h, out_w);
    std::copy(r.data(), r.data() + r.size(),
              out.data() + static_cast<std::size_t>(i) * out_h * out_w * c);
  }
  return out;
}

Tensor apply_colormap(const Tensor& gray) {
  if (gray.ndim() != 2) throw std::invalid_argument("apply_colormap expects (H,W)");
  const int h = gray.dim(0), w = gray.dim(1);
  cv::Mat g8(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      g8.at<unsigned char>(y, x) =
          cv::saturate_cast<unsigned char>(std::clamp(gray.at(y, x), 0.0, 1.0) * 255.0);
    }
  }
  cv::Mat colored;
  cv::applyColorMap(g8, colored, cv::COLORMAP_VIRIDIS);
  Tensor out({h, w, 3});
  for (int y = 0; y < h; ++y) {
    const cv::Vec3b* row = colored.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      out.at(y, x, 0) = row[x][2] / 255.0;
      out.at(y, x, 1) = row[x][1] / 255.0;
      out.at(y, x, 2) = row[x][0] / 255.0;
    }
  }
  return out;
}

}  // namespace lungct
