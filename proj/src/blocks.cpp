#include "lungct/blocks.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace lungct {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Tensor unsqueeze_if_3d(const Tensor& x, bool* was_3d) {
  if (x.ndim() == 3) {
    *was_3d = true;
    return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  }
  require(x.ndim() == 4, "expected (H,W,C) or (N,H,W,C)");
  *was_3d = false;
  return x;
}

Tensor squeeze_if(const Tensor& y, bool was_3d) {
  if (!was_3d) return y;
  return y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
}

Tensor crop_spatial(const Tensor& x, int h, int w) {
  if (x.dim(1) == h && x.dim(2) == w) return x;
  const int n = x.dim(0), c = x.dim(3);
  Tensor y({n, h, w, c});
  for (int i = 0; i < n; ++i) {
    for (int iy = 0; iy < h; ++iy) {
      const double* src = x.data() + ((static_cast<std::size_t>(i) * x.dim(1) + iy) * x.dim(2)) * c;
      double* dst = y.data() + ((static_cast<std::size_t>(i) * h + iy) * w) * c;
      std::memcpy(dst, src, sizeof(double) * static_cast<std::size_t>(w) * c);
    }
  }
  return y;
}

Tensor pad_spatial(const Tensor& g, int h, int w) {
  if (g.dim(1) == h && g.dim(2) == w) return g;
  const int n = g.dim(0), c = g.dim(3);
  Tensor y({n, h, w, c});
  for (int i = 0; i < n; ++i) {
    for (int iy = 0; iy < g.dim(1); ++iy) {
      const double* src = g.data() + ((static_cast<std::size_t>(i) * g.dim(1) + iy) * g.dim(2)) * c;
      double* dst = y.data() + ((static_cast<std::size_t>(i) * h + iy) * w) * c;
      std::memcpy(dst, src, sizeof(double) * static_cast<std::size_t>(g.dim(2)) * c);
    }
  }
  return y;
}

}  // namespace

// ---------------------------------------------------------------------------
// SeBlock

SeBlock::SeBlock(int channels, int ratio, std::mt19937& rng)
    : channels_(channels),
      reduced_(ratio > 0 ? channels / ratio : 0),
      w1_({channels, channels / std::max(1, ratio)}),
      w2_({channels / std::max(1, ratio), channels}),
      gw1_(w1_.shape()),
      gw2_(w2_.shape()) {
  if (ratio <= 0 || channels % ratio != 0) {
    throw std::invalid_argument("SE reduction ratio " + std::to_string(ratio) +
                                " must divide channel count " + std::to_string(channels));
  }
  he_normal_init(w1_, channels, rng);
  he_normal_init(w2_, reduced_, rng);
}

Tensor SeBlock::forward(const Tensor& x, bool) {
  require(x.ndim() == 4 && x.dim(3) == channels_, "se_block channel mismatch");
  input_ = x;
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = channels_;
  // squeeze: per-channel global average
  squeezed_ = Tensor({n, c});
  const double inv = 1.0 / static_cast<double>(h * w);
  for (int i = 0; i < n; ++i) {
    const double* xin = x.data() + static_cast<std::size_t>(i) * h * w * c;
    double* s = squeezed_.data() + static_cast<std::size_t>(i) * c;
    for (int p = 0; p < h * w; ++p) {
      for (int ch = 0; ch < c; ++ch) s[ch] += xin[static_cast<std::size_t>(p) * c + ch];
    }
    for (int ch = 0; ch < c; ++ch) s[ch] *= inv;
  }
  // excitation
  hidden_ = Tensor({n, reduced_});
  {
    CMapMat sm(squeezed_.data(), n, c);
    CMapMat w1m(w1_.data(), c, reduced_);
    MapMat hm(hidden_.data(), n, reduced_);
    hm.noalias() = sm * w1m;
  }
  for (std::size_t i = 0; i < hidden_.size(); ++i) {
    if (hidden_[i] < 0.0) hidden_[i] = 0.0;
  }
  gates_ = Tensor({n, c});
  {
    CMapMat hm(hidden_.data(), n, reduced_);
    CMapMat w2m(w2_.data(), reduced_, c);
    MapMat gm(gates_.data(), n, c);
    gm.noalias() = hm * w2m;
  }
  for (std::size_t i = 0; i < gates_.size(); ++i) gates_[i] = sigmoid(gates_[i]);
  // scale
  Tensor y(x.shape());
  for (int i = 0; i < n; ++i) {
    const double* xin = x.data() + static_cast<std::size_t>(i) * h * w * c;
    const double* g = gates_.data() + static_cast<std::size_t>(i) * c;
    double* out = y.data() + static_cast<std::size_t>(i) * h * w * c;
    for (int p = 0; p < h * w; ++p) {
      for (int ch = 0; ch < c; ++ch) {
        out[static_cast<std::size_t>(p) * c + ch] = xin[static_cast<std::size_t>(p) * c + ch] * g[ch];
      }
    }
  }
  return y;
}

Tensor SeBlock::backward(const Tensor& grad_out) {
  const int n = input_.dim(0), h = input_.dim(1), w = input_.dim(2), c = channels_;
  Tensor dx(input_.shape());
  Tensor dgates({n, c});
  // gate path: dx += dy * g; dgate = sum_hw dy * x
  for (int i = 0; i < n; ++i) {
    const double* gy = grad_out.data() + static_cast<std::size_t>(i) * h * w * c;
    const double* xin = input_.data() + static_cast<std::size_t>(i) * h * w * c;
    const double* g = gates_.data() + static_cast<std::size_t>(i) * c;
    double* dg = dgates.data() + static_cast<std::size_t>(i) * c;
    double* gx = dx.data() + static_cast<std::size_t>(i) * h * w * c;
    for (int p = 0; p < h * w; ++p) {
      for (int ch = 0; ch < c; ++ch) {
        std::size_t idx = static_cast<std::size_t>(p) * c + ch;
        gx[idx] = gy[idx] * g[ch];
        dg[ch] += gy[idx] * xin[idx];
      }
    }
  }
  // through sigmoid
  Tensor dz2({n, c});
  for (std::size_t i = 0; i < dz2.size(); ++i) {
    dz2[i] = dgates[i] * gates_[i] * (1.0 - gates_[i]);
  }
  Tensor dhidden({n, reduced_});
  {
    CMapMat hm(hidden_.data(), n, reduced_);
    CMapMat dz2m(dz2.data(), n, c);
    MapMat gw2m(gw2_.data(), reduced_, c);
    gw2m.noalias() += hm.transpose() * dz2m;
    CMapMat w2m(w2_.data(), reduced_, c);
    MapMat dhm(dhidden.data(), n, reduced_);
    dhm.noalias() = dz2m * w2m.transpose();
  }
  for (std::size_t i = 0; i < dhidden.size(); ++i) {
    if (hidden_[i] <= 0.0) dhidden[i] = 0.0;
  }
  Tensor dsqueeze({n, c});
  {
    CMapMat sm(squeezed_.data(), n, c);
    CMapMat dz1m(dhidden.data(), n, reduced_);
    MapMat gw1m(gw1_.data(), c, reduced_);
    gw1m.noalias() += sm.transpose() * dz1m;
    CMapMat w1m(w1_.data(), c, reduced_);
    MapMat dsm(dsqueeze.data(), n, c);
    dsm.noalias() = dz1m * w1m.transpose();
  }
  // squeeze path spreads back over the spatial grid
  const double inv = 1.0 / static_cast<double>(h * w);
  for (int i = 0; i < n; ++i) {
    const double* ds = dsqueeze.data() + static_cast<std::size_t>(i) * c;
    double* gx = dx.data() + static_cast<std::size_t>(i) * h * w * c;
    for (int p = 0; p < h * w; ++p) {
      for (int ch = 0; ch < c; ++ch) gx[static_cast<std::size_t>(p) * c + ch] += ds[ch] * inv;
    }
  }
  return dx;
}

void SeBlock::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + "/w1", &w1_, &gw1_});
  out.push_back({prefix + "/w2", &w2_, &gw2_});
}

void SeBlock::collect_state(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + "/w1", &w1_);
  out.emplace_back(prefix + "/w2", &w2_);
}

Tensor se_block(SeBlock& block, const Tensor& x) {
  bool was_3d = false;
  Tensor xb = unsqueeze_if_3d(x, &was_3d);
  return squeeze_if(block.forward(xb, false), was_3d);
}

// ---------------------------------------------------------------------------
// DenseBlock

DenseBlock::DenseBlock(DenseBlockSpec spec, std::mt19937& rng) : spec_(spec) {
  require(spec_.input_channels > 0, "dense block needs positive input channels");
  require(spec_.growth_rate > 0 || spec_.num_layers == 0, "dense block growth rate must be positive");
  for (int l = 0; l < spec_.num_layers; ++l) {
    int c_in = spec_.input_channels + l * spec_.growth_rate;
    auto seq = std::make_unique<Sequential>();
    if (spec_.bottleneck) {
      int mid = 4 * spec_.growth_rate;
      seq->add("conv1", std::make_unique<Conv2d>(c_in, mid, 1, 1, 0, false, rng));
      seq->add("bn1", std::make_unique<BatchNorm2d>(mid));
      seq->add("relu1", std::make_unique<ReLU>());
      seq->add("conv2", std::make_unique<Conv2d>(mid, spec_.growth_rate, 3, 1, 1, false, rng));
      seq->add("bn2", std::make_unique<BatchNorm2d>(spec_.growth_rate));
      seq->add("relu2", std::make_unique<ReLU>());
    } else {
      seq->add("conv", std::make_unique<Conv2d>(c_in, spec_.growth_rate, 3, 1, 1, false, rng));
      seq->add("bn", std::make_unique<BatchNorm2d>(spec_.growth_rate));
      seq->add("relu", std::make_unique<ReLU>());
    }
    transforms_.push_back(std::move(seq));
  }
}

Tensor DenseBlock::forward(const Tensor& x, bool training) {
  require(x.ndim() == 4, "dense block expects (N,H,W,C)");
  require(x.dim(3) == spec_.input_channels,
          "dense block channel mismatch: got " + std::to_string(x.dim(3)) + ", expected " +
              std::to_string(spec_.input_channels));
  in_shape_ = x.shape();
  input_channel_counts_.clear();
  Tensor cat = x;
  for (auto& t : transforms_) {
    input_channel_counts_.push_back(cat.dim(3));
    Tensor out = t->forward(cat, training);
    cat = concat_channels(cat, out);
  }
  return cat;
}

Tensor DenseBlock::forward_instrumented(const Tensor& x, int ablate,
                                        std::vector<Tensor>* layer_inputs) {
  require(x.ndim() == 4 && x.dim(3) == spec_.input_channels, "dense block channel mismatch");
  if (layer_inputs) layer_inputs->clear();
  Tensor cat = x;
  for (int l = 0; l < spec_.num_layers; ++l) {
    if (layer_inputs) layer_inputs->push_back(cat);
    Tensor out = transforms_[static_cast<std::size_t>(l)]->forward(cat, false);
    if (l == ablate) out.zero();
    cat = concat_channels(cat, out);
  }
  return cat;
}

Tensor DenseBlock::backward(const Tensor& grad_out) {
  const int n = in_shape_[0], h = in_shape_[1], w = in_shape_[2];
  const int c0 = spec_.input_channels, k = spec_.growth_rate, L = spec_.num_layers;
  require(grad_out.dim(3) == c0 + L * k, "dense block backward channel mismatch");

  // segment 0 = block input, segment l>=1 = output of layer l
  auto slice = [&](const Tensor& t, int c_lo, int c_hi) {
    Tensor out({n, h, w, c_hi - c_lo});
    const int tc = t.dim(3);
    for (std::size_t p = 0; p < static_cast<std::size_t>(n) * h * w; ++p) {
      std::memcpy(out.data() + p * (c_hi - c_lo), t.data() + p * tc + c_lo,
                  sizeof(double) * static_cast<std::size_t>(c_hi - c_lo));
    }
    return out;
  };
  std::vector<Tensor> seg_grads;
  seg_grads.push_back(slice(grad_out, 0, c0));
  for (int l = 1; l <= L; ++l) {
    seg_grads.push_back(slice(grad_out, c0 + (l - 1) * k, c0 + l * k));
  }
  for (int l = L; l >= 1; --l) {
    Tensor din = transforms_[static_cast<std::size_t>(l - 1)]->backward(seg_grads[static_cast<std::size_t>(l)]);
    // din covers segments 0..l-1
    seg_grads[0] += slice(din, 0, c0);
    for (int j = 1; j <= l - 1; ++j) {
      seg_grads[static_cast<std::size_t>(j)] += slice(din, c0 + (j - 1) * k, c0 + j * k);
    }
  }
  return seg_grads[0];
}

void DenseBlock::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  for (std::size_t l = 0; l < transforms_.size(); ++l) {
    transforms_[l]->collect_params(prefix + "/layer" + std::to_string(l), out);
  }
}

void DenseBlock::collect_state(const std::string& prefix,
                               std::vector<std::pair<std::string, Tensor*>>& out) {
  for (std::size_t l = 0; l < transforms_.size(); ++l) {
    transforms_[l]->collect_state(prefix + "/layer" + std::to_string(l), out);
  }
}

Tensor dense_block_forward(DenseBlock& block, const Tensor& x) {
  bool was_3d = false;
  Tensor xb = unsqueeze_if_3d(x, &was_3d);
  return squeeze_if(block.forward(xb, false), was_3d);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 4 && b.ndim() == 4, "concat expects (N,H,W,C)");
  require(a.dim(0) == b.dim(0) && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
          "concat spatial mismatch");
  const int n = a.dim(0), h = a.dim(1), w = a.dim(2), ca = a.dim(3), cb = b.dim(3);
  Tensor y({n, h, w, ca + cb});
  const std::size_t pixels = static_cast<std::size_t>(n) * h * w;
  for (std::size_t p = 0; p < pixels; ++p) {
    std::memcpy(y.data() + p * (ca + cb), a.data() + p * ca, sizeof(double) * ca);
    std::memcpy(y.data() + p * (ca + cb) + ca, b.data() + p * cb, sizeof(double) * cb);
  }
  return y;
}

// ---------------------------------------------------------------------------
// FpnFuse

FpnFuse::FpnFuse(FpnSpec spec, std::vector<int> input_channels, std::mt19937& rng)
    : spec_(spec), input_channels_(std::move(input_channels)) {
  require(spec_.num_levels >= 1, "fpn needs at least one level");
  require(static_cast<int>(input_channels_.size()) == spec_.num_levels,
          "fpn input channel list must match num_levels");
  for (int i = 0; i < spec_.num_levels; ++i) {
    laterals_.push_back(
        std::make_unique<Conv2d>(input_channels_[static_cast<std::size_t>(i)],
                                 spec_.pyramid_channels, 1, 1, 0, false, rng));
    outputs_.push_back(std::make_unique<Conv2d>(spec_.pyramid_channels, spec_.pyramid_channels, 3,
                                                1, 1, false, rng));
  }
}

std::vector<Tensor> FpnFuse::forward(const std::vector<Tensor>& levels, bool training) {
  require(static_cast<int>(levels.size()) == spec_.num_levels, "fpn level count mismatch");
  for (int i = 0; i < spec_.num_levels; ++i) {
    require(levels[static_cast<std::size_t>(i)].dim(3) == input_channels_[static_cast<std::size_t>(i)],
            "fpn level " + std::to_string(i) + " channel mismatch");
  }
  for (int i = 1; i < spec_.num_levels; ++i) {
    int fh = levels[static_cast<std::size_t>(i)].dim(1);
    int fw = levels[static_cast<std::size_t>(i)].dim(2);
    int ch = levels[static_cast<std::size_t>(i - 1)].dim(1);
    int cw = levels[static_cast<std::size_t>(i - 1)].dim(2);
    if (ch != (fh + 1) / 2 || cw != (fw + 1) / 2) {
      throw std::invalid_argument("fpn levels are not a factor-2 spatial chain: coarse (" +
                                  std::to_string(ch) + "," + std::to_string(cw) + ") vs fine (" +
                                  std::to_string(fh) + "," + std::to_string(fw) + ")");
    }
  }
  level_shapes_.clear();
  std::vector<Tensor> fused;
  fused.reserve(levels.size());
  for (int i = 0; i < spec_.num_levels; ++i) {
    const Tensor& f = levels[static_cast<std::size_t>(i)];
    level_shapes_.push_back(f.shape());
    Tensor pre = laterals_[static_cast<std::size_t>(i)]->forward(f, training);
    if (i > 0) {
      Tensor up = upsample_nearest2x(fused[static_cast<std::size_t>(i - 1)]);
      pre += crop_spatial(up, f.dim(1), f.dim(2));
    }
    fused.push_back(outputs_[static_cast<std::size_t>(i)]->forward(pre, training));
  }
  return fused;
}

std::vector<Tensor> FpnFuse::backward(const std::vector<Tensor>& grad_outputs) {
  require(static_cast<int>(grad_outputs.size()) == spec_.num_levels, "fpn grad count mismatch");
  std::vector<Tensor> dinputs(static_cast<std::size_t>(spec_.num_levels));
  Tensor pending;  // grad flowing into the next-coarser fused output
  for (int i = spec_.num_levels - 1; i >= 0; --i) {
    Tensor g = grad_outputs[static_cast<std::size_t>(i)];
    if (!pending.empty()) g += pending;
    Tensor dpre = outputs_[static_cast<std::size_t>(i)]->backward(g);
    dinputs[static_cast<std::size_t>(i)] = laterals_[static_cast<std::size_t>(i)]->backward(dpre);
    if (i > 0) {
      const auto& coarse_shape = level_shapes_[static_cast<std::size_t>(i - 1)];
      Tensor dup = pad_spatial(dpre, 2 * coarse_shape[1], 2 * coarse_shape[2]);
      pending = downsample_sum2x(dup);
    }
  }
  return dinputs;
}

Tensor FpnFuse::upsample_nearest2x(const Tensor& x) {
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor y({n, 2 * h, 2 * w, c});
  for (int i = 0; i < n; ++i) {
    for (int iy = 0; iy < 2 * h; ++iy) {
      for (int ix = 0; ix < 2 * w; ++ix) {
        const double* src = x.data() + ((static_cast<std::size_t>(i) * h + iy / 2) * w + ix / 2) * c;
        double* dst = y.data() + ((static_cast<std::size_t>(i) * 2 * h + iy) * 2 * w + ix) * c;
        std::memcpy(dst, src, sizeof(double) * c);
      }
    }
  }
  return y;
}

Tensor FpnFuse::downsample_sum2x(const Tensor& g) {
  const int n = g.dim(0), h2 = g.dim(1), w2 = g.dim(2), c = g.dim(3);
  const int h = h2 / 2, w = w2 / 2;
  Tensor y({n, h, w, c});
  for (int i = 0; i < n; ++i) {
    for (int iy = 0; iy < h2; ++iy) {
      for (int ix = 0; ix < w2; ++ix) {
        const double* src = g.data() + ((static_cast<std::size_t>(i) * h2 + iy) * w2 + ix) * c;
        double* dst = y.data() + ((static_cast<std::size_t>(i) * h + iy / 2) * w + ix / 2) * c;
        for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
      }
    }
  }
  return y;
}

void FpnFuse::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  for (std::size_t i = 0; i < laterals_.size(); ++i) {
    laterals_[i]->collect_params(prefix + "/lateral" + std::to_string(i), out);
    outputs_[i]->collect_params(prefix + "/out" + std::to_string(i), out);
  }
}

void FpnFuse::collect_state(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor*>>& out) {
  for (std::size_t i = 0; i < laterals_.size(); ++i) {
    laterals_[i]->collect_state(prefix + "/lateral" + std::to_string(i), out);
    outputs_[i]->collect_state(prefix + "/out" + std::to_string(i), out);
  }
}

std::vector<Tensor> fpn_fuse(FpnFuse& fpn, const std::vector<Tensor>& levels) {
  require(!levels.empty(), "fpn_fuse needs at least one level");
  bool was_3d = false;
  std::vector<Tensor> batched;
  batched.reserve(levels.size());
  for (const auto& l : levels) {
    bool this_3d = false;
    batched.push_back(unsqueeze_if_3d(l, &this_3d));
    was_3d = this_3d;
  }
  auto fused = fpn.forward(batched, false);
  if (was_3d) {
    for (auto& f : fused) f = f.reshaped({f.dim(1), f.dim(2), f.dim(3)});
  }
  return fused;
}

}  // namespace lungct
