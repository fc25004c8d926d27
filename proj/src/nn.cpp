#include "lungct/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "lungct/errors.hpp"

namespace lungct {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int conv_out_dim(int in, int k, int stride, int pad) {
  int out = (in + 2 * pad - k) / stride + 1;
  require(out >= 1, "conv/pool output dimension collapsed to zero");
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool use_bias,
               std::mt19937& rng)
    : in_ch_(in_ch),
      out_ch_(out_ch),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      use_bias_(use_bias),
      w_({kernel * kernel * in_ch, out_ch}),
      b_({out_ch}),
      gw_({kernel * kernel * in_ch, out_ch}),
      gb_({out_ch}) {
  he_normal_init(w_, kernel * kernel * in_ch, rng);
}

void Conv2d::im2col(const double* x, int h, int w, int oh, int ow, double* col) const {
  const int K = k_ * k_ * in_ch_;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* row = col + (static_cast<std::size_t>(oy) * ow + ox) * K;
      int iy0 = oy * stride_ - pad_;
      int ix0 = ox * stride_ - pad_;
      for (int dy = 0; dy < k_; ++dy) {
        int iy = iy0 + dy;
        for (int dx = 0; dx < k_; ++dx) {
          int ix = ix0 + dx;
          double* dst = row + (dy * k_ + dx) * in_ch_;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
            std::memcpy(dst, x + (static_cast<std::size_t>(iy) * w + ix) * in_ch_,
                        sizeof(double) * in_ch_);
          } else {
            std::memset(dst, 0, sizeof(double) * in_ch_);
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const double* col, int h, int w, int oh, int ow, double* dx) const {
  const int K = k_ * k_ * in_ch_;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* row = col + (static_cast<std::size_t>(oy) * ow + ox) * K;
      int iy0 = oy * stride_ - pad_;
      int ix0 = ox * stride_ - pad_;
      for (int dy = 0; dy < k_; ++dy) {
        int iy = iy0 + dy;
        if (iy < 0 || iy >= h) continue;
        for (int dx_ = 0; dx_ < k_; ++dx_) {
          int ix = ix0 + dx_;
          if (ix < 0 || ix >= w) continue;
          const double* src = row + (dy * k_ + dx_) * in_ch_;
          double* dst = dx + (static_cast<std::size_t>(iy) * w + ix) * in_ch_;
          for (int c = 0; c < in_ch_; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x, bool) {
  require(x.ndim() == 4, "conv2d expects (N,H,W,C)");
  require(x.dim(3) == in_ch_, "conv2d channel mismatch: got " + std::to_string(x.dim(3)) +
                                  ", expected " + std::to_string(in_ch_));
  input_ = x;
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = conv_out_dim(h, k_, stride_, pad_);
  const int ow = conv_out_dim(w, k_, stride_, pad_);
  const int K = k_ * k_ * in_ch_;
  Tensor y({n, oh, ow, out_ch_});
  std::vector<double> col(static_cast<std::size_t>(oh) * ow * K);
  CMapMat wm(w_.data(), K, out_ch_);
  for (int i = 0; i < n; ++i) {
    im2col(x.data() + static_cast<std::size_t>(i) * h * w * in_ch_, h, w, oh, ow, col.data());
    CMapMat cm(col.data(), static_cast<Eigen::Index>(oh) * ow, K);
    MapMat ym(y.data() + static_cast<std::size_t>(i) * oh * ow * out_ch_,
              static_cast<Eigen::Index>(oh) * ow, out_ch_);
    ym.noalias() = cm * wm;
    if (use_bias_) {
      CMapMat bm(b_.data(), 1, out_ch_);
      ym.rowwise() += bm.row(0);
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const int n = input_.dim(0), h = input_.dim(1), w = input_.dim(2);
  const int oh = grad_out.dim(1), ow = grad_out.dim(2);
  const int K = k_ * k_ * in_ch_;
  Tensor dx(input_.shape());
  std::vector<double> col(static_cast<std::size_t>(oh) * ow * K);
  std::vector<double> dcol(col.size());
  CMapMat wm(w_.data(), K, out_ch_);
  MapMat gwm(gw_.data(), K, out_ch_);
  for (int i = 0; i < n; ++i) {
    im2col(input_.data() + static_cast<std::size_t>(i) * h * w * in_ch_, h, w, oh, ow, col.data());
    CMapMat cm(col.data(), static_cast<Eigen::Index>(oh) * ow, K);
    CMapMat gym(grad_out.data() + static_cast<std::size_t>(i) * oh * ow * out_ch_,
                static_cast<Eigen::Index>(oh) * ow, out_ch_);
    gwm.noalias() += cm.transpose() * gym;
    if (use_bias_) {
      MapMat gbm(gb_.data(), 1, out_ch_);
      gbm.row(0) += gym.colwise().sum();
    }
    MapMat dcm(dcol.data(), static_cast<Eigen::Index>(oh) * ow, K);
    dcm.noalias() = gym * wm.transpose();
    col2im(dcol.data(), h, w, oh, ow, dx.data() + static_cast<std::size_t>(i) * h * w * in_ch_);
  }
  return dx;
}

void Conv2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + "/w", &w_, &gw_});
  if (use_bias_) out.push_back({prefix + "/b", &b_, &gb_});
}

void Conv2d::collect_state(const std::string& prefix,
                           std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + "/w", &w_);
  if (use_bias_) out.emplace_back(prefix + "/b", &b_);
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, double eps, double momentum)
    : channels_(channels),
      eps_(eps),
      momentum_(momentum),
      gamma_({channels}, 1.0),
      beta_({channels}),
      ggamma_({channels}),
      gbeta_({channels}),
      running_mean_({channels}),
      running_var_({channels}, 1.0) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  require(x.ndim() == 4 && x.dim(3) == channels_, "batchnorm2d shape mismatch");
  const std::size_t m = x.size() / static_cast<std::size_t>(channels_);
  Tensor y(x.shape());
  xhat_ = Tensor(x.shape());
  inv_std_.assign(static_cast<std::size_t>(channels_), 0.0);
  trained_forward_ = training;

  std::vector<double> mean(channels_, 0.0), var(channels_, 0.0);
  if (training) {
    const double* px = x.data();
    for (std::size_t i = 0; i < x.size(); i += channels_) {
      for (int c = 0; c < channels_; ++c) mean[c] += px[i + c];
    }
    for (int c = 0; c < channels_; ++c) mean[c] /= static_cast<double>(m);
    for (std::size_t i = 0; i < x.size(); i += channels_) {
      for (int c = 0; c < channels_; ++c) {
        double d = px[i + c] - mean[c];
        var[c] += d * d;
      }
    }
    for (int c = 0; c < channels_; ++c) var[c] /= static_cast<double>(m);
    for (int c = 0; c < channels_; ++c) {
      running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean[c];
      running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * var[c];
    }
  } else {
    for (int c = 0; c < channels_; ++c) {
      mean[c] = running_mean_[c];
      var[c] = running_var_[c];
    }
  }
  for (int c = 0; c < channels_; ++c) inv_std_[c] = 1.0 / std::sqrt(var[c] + eps_);

  const double* px = x.data();
  double* ph = xhat_.data();
  double* py = y.data();
  for (std::size_t i = 0; i < x.size(); i += channels_) {
    for (int c = 0; c < channels_; ++c) {
      double h = (px[i + c] - mean[c]) * inv_std_[c];
      ph[i + c] = h;
      py[i + c] = gamma_[c] * h + beta_[c];
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  const std::size_t total = grad_out.size();
  const std::size_t m = total / static_cast<std::size_t>(channels_);
  Tensor dx(grad_out.shape());
  std::vector<double> sum_dy(channels_, 0.0), sum_dy_xhat(channels_, 0.0);
  const double* gy = grad_out.data();
  const double* ph = xhat_.data();
  for (std::size_t i = 0; i < total; i += channels_) {
    for (int c = 0; c < channels_; ++c) {
      sum_dy[c] += gy[i + c];
      sum_dy_xhat[c] += gy[i + c] * ph[i + c];
    }
  }
  for (int c = 0; c < channels_; ++c) {
    gbeta_[c] += sum_dy[c];
    ggamma_[c] += sum_dy_xhat[c];
  }
  double* pdx = dx.data();
  if (trained_forward_) {
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < total; i += channels_) {
      for (int c = 0; c < channels_; ++c) {
        double dxhat = gy[i + c] * gamma_[c];
        pdx[i + c] = inv_std_[c] * (dxhat - inv_m * gamma_[c] * sum_dy[c] -
                                    ph[i + c] * inv_m * gamma_[c] * sum_dy_xhat[c]);
      }
    }
  } else {
    // Eval mode is a fixed per-channel affine map.
    for (std::size_t i = 0; i < total; i += channels_) {
      for (int c = 0; c < channels_; ++c) {
        pdx[i + c] = gy[i + c] * gamma_[c] * inv_std_[c];
      }
    }
  }
  return dx;
}

void BatchNorm2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + "/gamma", &gamma_, &ggamma_});
  out.push_back({prefix + "/beta", &beta_, &gbeta_});
}

void BatchNorm2d::collect_state(const std::string& prefix,
                                std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + "/gamma", &gamma_);
  out.emplace_back(prefix + "/beta", &beta_);
  out.emplace_back(prefix + "/running_mean", &running_mean_);
  out.emplace_back(prefix + "/running_var", &running_var_);
}

// ---------------------------------------------------------------------------
// ReLU

Tensor ReLU::forward(const Tensor& x, bool) {
  in_shape_ = x.shape();
  mask_.assign(x.size(), 0);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0) {
      y[i] = x[i];
      mask_[i] = 1;
    }
  }
  return y;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    dx[i] = mask_[i] ? grad_out[i] : 0.0;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// MaxPool2d

MaxPool2d::MaxPool2d(int kernel, int stride, int pad) : k_(kernel), stride_(stride), pad_(pad) {}

Tensor MaxPool2d::forward(const Tensor& x, bool) {
  require(x.ndim() == 4, "maxpool2d expects (N,H,W,C)");
  in_shape_ = x.shape();
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int oh = conv_out_dim(h, k_, stride_, pad_);
  const int ow = conv_out_dim(w, k_, stride_, pad_);
  Tensor y({n, oh, ow, c});
  argmax_.assign(y.size(), 0);
  for (int i = 0; i < n; ++i) {
    const double* xin = x.data() + static_cast<std::size_t>(i) * h * w * c;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        for (int ch = 0; ch < c; ++ch) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int dy = 0; dy < k_; ++dy) {
            int iy = oy * stride_ - pad_ + dy;
            if (iy < 0 || iy >= h) continue;
            for (int dx = 0; dx < k_; ++dx) {
              int ix = ox * stride_ - pad_ + dx;
              if (ix < 0 || ix >= w) continue;
              std::size_t idx = (static_cast<std::size_t>(iy) * w + ix) * c + ch;
              if (xin[idx] > best) {
                best = xin[idx];
                best_idx = idx;
              }
            }
          }
          std::size_t out_idx =
              ((static_cast<std::size_t>(i) * oh + oy) * ow + ox) * c + ch;
          y[out_idx] = best;
          argmax_[out_idx] = static_cast<std::size_t>(i) * h * w * c + best_idx;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    dx[argmax_[i]] += grad_out[i];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// AvgPool2d

AvgPool2d::AvgPool2d(int kernel, int stride, bool ceil_mode)
    : k_(kernel), stride_(stride), ceil_mode_(ceil_mode) {}

Tensor AvgPool2d::forward(const Tensor& x, bool) {
  require(x.ndim() == 4, "avgpool2d expects (N,H,W,C)");
  in_shape_ = x.shape();
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int oh = ceil_mode_ ? (h - k_ + stride_ - 1) / stride_ + 1 : (h - k_) / stride_ + 1;
  const int ow = ceil_mode_ ? (w - k_ + stride_ - 1) / stride_ + 1 : (w - k_) / stride_ + 1;
  require(oh >= 1 && ow >= 1, "avgpool2d output collapsed");
  Tensor y({n, oh, ow, c});
  for (int i = 0; i < n; ++i) {
    const double* xin = x.data() + static_cast<std::size_t>(i) * h * w * c;
    double* yout = y.data() + static_cast<std::size_t>(i) * oh * ow * c;
    for (int oy = 0; oy < oh; ++oy) {
      int y0 = oy * stride_, y1 = std::min(y0 + k_, h);
      for (int ox = 0; ox < ow; ++ox) {
        int x0 = ox * stride_, x1 = std::min(x0 + k_, w);
        double inv_count = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
        double* out = yout + (static_cast<std::size_t>(oy) * ow + ox) * c;
        for (int ch = 0; ch < c; ++ch) out[ch] = 0.0;
        for (int iy = y0; iy < y1; ++iy) {
          for (int ix = x0; ix < x1; ++ix) {
            const double* src = xin + (static_cast<std::size_t>(iy) * w + ix) * c;
            for (int ch = 0; ch < c; ++ch) out[ch] += src[ch];
          }
        }
        for (int ch = 0; ch < c; ++ch) out[ch] *= inv_count;
      }
    }
  }
  return y;
}

Tensor AvgPool2d::backward(const Tensor& grad_out) {
  const int n = in_shape_[0], h = in_shape_[1], w = in_shape_[2], c = in_shape_[3];
  const int oh = grad_out.dim(1), ow = grad_out.dim(2);
  Tensor dx(in_shape_);
  for (int i = 0; i < n; ++i) {
    const double* gy = grad_out.data() + static_cast<std::size_t>(i) * oh * ow * c;
    double* gx = dx.data() + static_cast<std::size_t>(i) * h * w * c;
    for (int oy = 0; oy < oh; ++oy) {
      int y0 = oy * stride_, y1 = std::min(y0 + k_, h);
      for (int ox = 0; ox < ow; ++ox) {
        int x0 = ox * stride_, x1 = std::min(x0 + k_, w);
        double inv_count = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
        const double* g = gy + (static_cast<std::size_t>(oy) * ow + ox) * c;
        for (int iy = y0; iy < y1; ++iy) {
          for (int ix = x0; ix < x1; ++ix) {
            double* dst = gx + (static_cast<std::size_t>(iy) * w + ix) * c;
            for (int ch = 0; ch < c; ++ch) dst[ch] += g[ch] * inv_count;
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Upsample2x

Tensor Upsample2x::forward(const Tensor& x, bool) {
  require(x.ndim() == 4, "upsample2x expects (N,H,W,C)");
  in_shape_ = x.shape();
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor y({n, 2 * h, 2 * w, c});
  for (int i = 0; i < n; ++i) {
    for (int iy = 0; iy < 2 * h; ++iy) {
      for (int ix = 0; ix < 2 * w; ++ix) {
        const double* src =
            x.data() + ((static_cast<std::size_t>(i) * h + iy / 2) * w + ix / 2) * c;
        double* dst =
            y.data() + ((static_cast<std::size_t>(i) * 2 * h + iy) * 2 * w + ix) * c;
        std::memcpy(dst, src, sizeof(double) * c);
      }
    }
  }
  return y;
}

Tensor Upsample2x::backward(const Tensor& grad_out) {
  const int n = in_shape_[0], h = in_shape_[1], w = in_shape_[2], c = in_shape_[3];
  Tensor dx(in_shape_);
  for (int i = 0; i < n; ++i) {
    for (int iy = 0; iy < 2 * h; ++iy) {
      for (int ix = 0; ix < 2 * w; ++ix) {
        const double* src =
            grad_out.data() + ((static_cast<std::size_t>(i) * 2 * h + iy) * 2 * w + ix) * c;
        double* dst = dx.data() + ((static_cast<std::size_t>(i) * h + iy / 2) * w + ix / 2) * c;
        for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// GlobalAvgPool

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
  require(x.ndim() == 4, "gap expects (N,H,W,C)");
  in_shape_ = x.shape();
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor y({n, c});
  const double inv = 1.0 / static_cast<double>(h * w);
  for (int i = 0; i < n; ++i) {
    const double* xin = x.data() + static_cast<std::size_t>(i) * h * w * c;
    double* out = y.data() + static_cast<std::size_t>(i) * c;
    for (int p = 0; p < h * w; ++p) {
      for (int ch = 0; ch < c; ++ch) out[ch] += xin[static_cast<std::size_t>(p) * c + ch];
    }
    for (int ch = 0; ch < c; ++ch) out[ch] *= inv;
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  const int n = in_shape_[0], h = in_shape_[1], w = in_shape_[2], c = in_shape_[3];
  Tensor dx(in_shape_);
  const double inv = 1.0 / static_cast<double>(h * w);
  for (int i = 0; i < n; ++i) {
    const double* g = grad_out.data() + static_cast<std::size_t>(i) * c;
    double* gx = dx.data() + static_cast<std::size_t>(i) * h * w * c;
    for (int p = 0; p < h * w; ++p) {
      for (int ch = 0; ch < c; ++ch) gx[static_cast<std::size_t>(p) * c + ch] = g[ch] * inv;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Dense

Dense::Dense(int in_dim, int out_dim, bool use_bias, std::mt19937& rng)
    : in_dim_(in_dim),
      out_dim_(out_dim),
      use_bias_(use_bias),
      w_({in_dim, out_dim}),
      b_({out_dim}),
      gw_({in_dim, out_dim}),
      gb_({out_dim}) {
  he_normal_init(w_, in_dim, rng);
}

Tensor Dense::forward(const Tensor& x, bool) {
  require(x.ndim() == 2 && x.dim(1) == in_dim_, "dense input shape mismatch");
  input_ = x;
  const int n = x.dim(0);
  Tensor y({n, out_dim_});
  CMapMat xm(x.data(), n, in_dim_);
  CMapMat wm(w_.data(), in_dim_, out_dim_);
  MapMat ym(y.data(), n, out_dim_);
  ym.noalias() = xm * wm;
  if (use_bias_) {
    CMapMat bm(b_.data(), 1, out_dim_);
    ym.rowwise() += bm.row(0);
  }
  return y;
}

Tensor Dense::backward(const Tensor& grad_out) {
  const int n = input_.dim(0);
  Tensor dx(input_.shape());
  CMapMat xm(input_.data(), n, in_dim_);
  CMapMat gym(grad_out.data(), n, out_dim_);
  CMapMat wm(w_.data(), in_dim_, out_dim_);
  MapMat gwm(gw_.data(), in_dim_, out_dim_);
  gwm.noalias() += xm.transpose() * gym;
  if (use_bias_) {
    MapMat gbm(gb_.data(), 1, out_dim_);
    gbm.row(0) += gym.colwise().sum();
  }
  MapMat dxm(dx.data(), n, in_dim_);
  dxm.noalias() = gym * wm.transpose();
  return dx;
}

void Dense::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + "/w", &w_, &gw_});
  if (use_bias_) out.push_back({prefix + "/b", &b_, &gb_});
}

void Dense::collect_state(const std::string& prefix,
                          std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + "/w", &w_);
  if (use_bias_) out.emplace_back(prefix + "/b", &b_);
}

// ---------------------------------------------------------------------------
// Sequential

void Sequential::add(std::string name, std::unique_ptr<Layer> layer) {
  names_.push_back(std::move(name));
  layers_.push_back(std::move(layer));
}

Tensor Sequential::forward(const Tensor& x, bool training) {
  outputs_.clear();
  outputs_.reserve(layers_.size());
  Tensor cur = x;
  for (auto& l : layers_) {
    cur = l->forward(cur, training);
    outputs_.push_back(cur);
  }
  return cur;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    g = (*it)->backward(g);
  }
  return g;
}

Tensor Sequential::backward_to(int idx, const Tensor& grad_top) {
  Tensor g = grad_top;
  for (int i = static_cast<int>(layers_.size()) - 1; i > idx; --i) {
    g = layers_[static_cast<std::size_t>(i)]->backward(g);
  }
  return g;
}

void Sequential::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->collect_params(prefix + "/" + names_[i], out);
  }
}

void Sequential::collect_state(const std::string& prefix,
                               std::vector<std::pair<std::string, Tensor*>>& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->collect_state(prefix + "/" + names_[i], out);
  }
}

int Sequential::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return static_cast<int>(i);
  }
  return -1;
}

// ---------------------------------------------------------------------------
// Softmax and misc

Tensor softmax_rows(const Tensor& logits) {
  require(logits.ndim() == 2, "softmax expects (N,K)");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor p(logits.shape());
  for (int i = 0; i < n; ++i) {
    const double* z = logits.data() + static_cast<std::size_t>(i) * k;
    double* out = p.data() + static_cast<std::size_t>(i) * k;
    double mx = z[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      out[j] = std::exp(z[j] - mx);
      sum += out[j];
    }
    for (int j = 0; j < k; ++j) out[j] /= sum;
  }
  return p;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs) {
  const int n = probs.dim(0), k = probs.dim(1);
  Tensor dz(probs.shape());
  for (int i = 0; i < n; ++i) {
    const double* p = probs.data() + static_cast<std::size_t>(i) * k;
    const double* gp = grad_probs.data() + static_cast<std::size_t>(i) * k;
    double dot = 0.0;
    for (int j = 0; j < k; ++j) dot += gp[j] * p[j];
    double* out = dz.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) out[j] = p[j] * (gp[j] - dot);
  }
  return dz;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void he_normal_init(Tensor& w, int fan_in, std::mt19937& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(1, fan_in)));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = dist(rng);
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::attach(std::vector<ParamRef> params) {
  params_ = std::move(params);
  m_.clear();
  v_.clear();
  for (const auto& p : params_) {
    m_.emplace_back(p.value->shape());
    v_.emplace_back(p.value->shape());
  }
  t_ = 0;
}

void Adam::zero_grad() {
  for (auto& p : params_) p.grad->zero();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& w = *params_[pi].value;
    Tensor& g = *params_[pi].grad;
    Tensor& m = m_[pi];
    Tensor& v = v_[pi];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// State (de)serialization

void save_layer_state(Layer& root, const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor>>& out) {
  std::vector<std::pair<std::string, Tensor*>> refs;
  root.collect_state(prefix, refs);
  for (auto& [name, t] : refs) out.emplace_back(name, *t);
}

void load_layer_state(Layer& root, const std::string& prefix,
                      const std::vector<std::pair<std::string, Tensor>>& entries) {
  std::vector<std::pair<std::string, Tensor*>> refs;
  root.collect_state(prefix, refs);
  for (auto& [name, t] : refs) {
    bool found = false;
    for (const auto& [ename, etensor] : entries) {
      if (ename == name) {
        if (!t->same_shape(etensor)) {
          throw DataError("state shape mismatch for " + name + ": stored " + etensor.shape_str() +
                          " vs model " + t->shape_str());
        }
        *t = etensor;
        found = true;
        break;
      }
    }
    if (!found) throw DataError("missing state tensor: " + name);
  }
}

}  // namespace lungct
