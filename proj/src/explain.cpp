#include "lungct/explain.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <random>
#include <set>
#include <stdexcept>

#include "lungct/errors.hpp"
#include "lungct/image.hpp"
#include "lungct/io.hpp"
#include "lungct/plot.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lungct {

// ---------------------------------------------------------------------------
// Grad-CAM

Heatmap grad_cam_from(const Tensor& activation, const Tensor& gradient,
                      const std::string& layer_id, int class_idx) {
  if (activation.ndim() != 3 || !activation.same_shape(gradient)) {
    throw std::invalid_argument("grad_cam needs matching (H,W,C) activation and gradient");
  }
  const int h = activation.dim(0), w = activation.dim(1), c = activation.dim(2);
  // step 2: channel weights = global average of the gradients
  std::vector<double> weights(static_cast<std::size_t>(c), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) weights[static_cast<std::size_t>(ch)] += gradient.at(y, x, ch);
    }
  }
  for (double& v : weights) v /= static_cast<double>(h * w);
  // step 3: weighted channel sum + ReLU
  Heatmap out;
  out.layer_id = layer_id;
  out.class_idx = class_idx;
  out.values = Tensor({h, w});
  double max_v = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int ch = 0; ch < c; ++ch) s += weights[static_cast<std::size_t>(ch)] * activation.at(y, x, ch);
      s = std::max(0.0, s);
      out.values.at(y, x) = s;
      max_v = std::max(max_v, s);
    }
  }
  // step 4: max-normalize, or flag a heatmap with no signal
  if (max_v <= 0.0) {
    out.all_zero = true;
    out.values.zero();
  } else {
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] /= max_v;
  }
  return out;
}

Heatmap grad_cam(CamModel& model, const Tensor& image, int class_idx, const std::string& layer_id) {
  if (class_idx < 0 || class_idx >= model.num_classes()) {
    throw std::invalid_argument("grad_cam class index out of range");
  }
  Tensor gradient;
  Tensor activation = model.cam_activation_and_grad(image, layer_id, class_idx, &gradient);
  return grad_cam_from(activation, gradient, layer_id, class_idx);
}

Heatmap grad_cam_svm(SvmPipeline& pipeline, const Tensor& image, int class_idx) {
  if (pipeline.svm.kernel.kind != KernelKind::Linear) {
    throw std::invalid_argument(
        "grad_cam_svm supports only linear-kernel pipelines; explain RBF models with kernel SHAP");
  }
  if (class_idx < 0 || class_idx >= pipeline.svm.num_classes()) {
    throw std::invalid_argument("grad_cam_svm class index out of range");
  }
  if (image.ndim() != 3) throw std::invalid_argument("grad_cam_svm expects a single (H,W,C) image");
  Tensor batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  Tensor map = pipeline.extractor->forward_map(batch);
  const int h = map.dim(1), w = map.dim(2), c = map.dim(3);
  Tensor activation = map.reshaped({h, w, c});

  // linear head weights in feature space: w = sum_i dual_i * sv_i
  const auto& head = pipeline.svm.heads[static_cast<std::size_t>(class_idx)];
  std::vector<double> head_w(static_cast<std::size_t>(c), 0.0);
  for (int i = 0; i < head.support_vectors.dim(0); ++i) {
    for (int d = 0; d < c; ++d) {
      head_w[static_cast<std::size_t>(d)] +=
          head.dual_coef[static_cast<std::size_t>(i)] * head.support_vectors.at(i, d);
    }
  }
  // score = sum_c w_c * (gap_c - mu_c)/s_c + b  =>  d(score)/d(map) is constant
  // per channel: w_c / (s_c * H * W)
  Tensor gradient({h, w, c});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        gradient.at(y, x, ch) =
            head_w[static_cast<std::size_t>(ch)] / (pipeline.scaler.std[ch] * h * w);
      }
    }
  }
  return grad_cam_from(activation, gradient, "extractor_out", class_idx);
}

Tensor overlay(const Heatmap& heatmap, const Tensor& image, double opacity) {
  if (opacity < 0.0 || opacity > 1.0) throw std::invalid_argument("opacity must be in [0,1]");
  if (image.ndim() != 3 || image.dim(2) != 3) throw std::invalid_argument("overlay expects (H,W,3)");
  const int h = image.dim(0), w = image.dim(1);
  Tensor hm3 = heatmap.values.reshaped({heatmap.values.dim(0), heatmap.values.dim(1), 1});
  Tensor resized = resize_image(hm3, h, w);
  Tensor colored = apply_colormap(resized.reshaped({h, w}));
  Tensor out({h, w, 3});
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (1.0 - opacity) * image[i] + opacity * colored[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernel SHAP

namespace {

// mask[j] != 0 keeps feature j from x; zeros take background values
double coalition_value(const PredictFn& f, const std::vector<double>& x, const Tensor& background,
                       const std::vector<char>& mask) {
  const int d = static_cast<int>(x.size());
  const int b = background.dim(0);
  std::vector<double> probe(x.size());
  double sum = 0.0;
  for (int r = 0; r < b; ++r) {
    for (int j = 0; j < d; ++j) {
      probe[static_cast<std::size_t>(j)] =
          mask[static_cast<std::size_t>(j)] ? x[static_cast<std::size_t>(j)] : background.at(r, j);
    }
    sum += f(probe);
  }
  return sum / b;
}

double binom(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) {
    r *= static_cast<double>(n - i + 1) / static_cast<double>(i);
    if (r > 1e18) return 1e18;  // effectively infinite vs any budget
  }
  return r;
}

struct MaskSample {
  std::vector<char> mask;
  double weight;
};

// lexicographic next combination of s indices out of d; false when exhausted
bool next_combination(std::vector<int>& idx, int d) {
  int s = static_cast<int>(idx.size());
  for (int i = s - 1; i >= 0; --i) {
    if (idx[static_cast<std::size_t>(i)] < d - s + i) {
      ++idx[static_cast<std::size_t>(i)];
      for (int j = i + 1; j < s; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
      return true;
    }
  }
  return false;
}

// All coalitions when they fit the budget, otherwise complete size levels from
// the highest-weight sizes outward and spread the remaining budget uniformly
// inside the first level that does not fit.
std::vector<MaskSample> draw_masks(int d, long budget, std::mt19937_64& rng) {
  std::vector<MaskSample> samples;
  // paired size order 1, d-1, 2, d-2, ... by decreasing kernel weight
  std::vector<int> sizes;
  for (int s = 1; s <= d / 2; ++s) {
    sizes.push_back(s);
    if (s != d - s) sizes.push_back(d - s);
  }
  long remaining = budget;
  for (int s : sizes) {
    if (remaining <= 0) break;
    double count = binom(d, s);
    double level_weight = static_cast<double>(d - 1) / (static_cast<double>(s) * (d - s));
    if (count <= static_cast<double>(remaining)) {
      double per_mask = level_weight / count;
      std::vector<int> idx(static_cast<std::size_t>(s));
      for (int i = 0; i < s; ++i) idx[static_cast<std::size_t>(i)] = i;
      do {
        MaskSample ms;
        ms.mask.assign(static_cast<std::size_t>(d), 0);
        for (int i : idx) ms.mask[static_cast<std::size_t>(i)] = 1;
        ms.weight = per_mask;
        samples.push_back(std::move(ms));
      } while (next_combination(idx, d));
      remaining -= static_cast<long>(count);
    } else {
      long n_samp = remaining;
      double per_mask = level_weight / static_cast<double>(n_samp);
      std::vector<int> idx(static_cast<std::size_t>(d));
      for (int i = 0; i < d; ++i) idx[static_cast<std::size_t>(i)] = i;
      for (long t = 0; t < n_samp; ++t) {
        std::shuffle(idx.begin(), idx.end(), rng);
        MaskSample ms;
        ms.mask.assign(static_cast<std::size_t>(d), 0);
        for (int i = 0; i < s; ++i) ms.mask[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
        ms.weight = per_mask;
        samples.push_back(std::move(ms));
      }
      remaining = 0;
    }
  }
  return samples;
}

}  // namespace

ShapExplanation kernel_shap(const PredictFn& f, const std::vector<double>& x,
                            const Tensor& background, int n_samples, std::uint64_t seed,
                            int class_idx) {
  const int d = static_cast<int>(x.size());
  if (d < 1) throw std::invalid_argument("kernel_shap needs at least one feature");
  if (background.ndim() != 2 || background.dim(0) < 1 || background.dim(1) != d) {
    throw std::invalid_argument("background must be a non-empty (B,D) matrix");
  }
  bool exact_requested = n_samples <= 0;
  if (exact_requested && d > 15) {
    throw std::invalid_argument("exact mode enumerates 2^D coalitions; D must be <= 15");
  }
  if (!exact_requested && n_samples < d + 2) {
    throw std::invalid_argument("kernel_shap needs n_samples >= D+2");
  }

  ShapExplanation out;
  out.class_idx = class_idx;
  out.base_value = coalition_value(f, x, background, std::vector<char>(x.size(), 0));
  std::vector<double> xv(x);
  out.fx = f(xv);
  out.phi.assign(static_cast<std::size_t>(d), 0.0);
  const double delta = out.fx - out.base_value;
  if (d == 1) {
    out.phi[0] = delta;
    return out;
  }

  long budget;
  double full = std::pow(2.0, d) - 2.0;
  if (exact_requested || static_cast<double>(n_samples) >= full) {
    budget = static_cast<long>(full);
  } else {
    budget = n_samples;
  }
  std::mt19937_64 rng(seed);
  std::vector<MaskSample> masks = draw_masks(d, budget, rng);

  // Constrained WLS: eliminate phi_{d-1} via sum(phi) = fx - phi0, then solve
  // the normal equations for the remaining d-1 coefficients.
  const int m = static_cast<int>(masks.size());
  Eigen::MatrixXd u(m, d - 1);
  Eigen::VectorXd t(m), wts(m);
  for (int r = 0; r < m; ++r) {
    const std::vector<char>& mask = masks[static_cast<std::size_t>(r)].mask;
    double z_last = mask[static_cast<std::size_t>(d - 1)] ? 1.0 : 0.0;
    for (int j = 0; j < d - 1; ++j) {
      u(r, j) = (mask[static_cast<std::size_t>(j)] ? 1.0 : 0.0) - z_last;
    }
    double v = coalition_value(f, x, background, mask);
    t(r) = v - out.base_value - z_last * delta;
    wts(r) = masks[static_cast<std::size_t>(r)].weight;
  }
  Eigen::MatrixXd uw = u.array().colwise() * wts.array();
  Eigen::MatrixXd a = uw.transpose() * u;
  Eigen::VectorXd rhs = uw.transpose() * t;
  if (rhs.norm() == 0.0) {
    // constant model: all attributions stay zero
    out.phi.assign(static_cast<std::size_t>(d), 0.0);
    out.phi[static_cast<std::size_t>(d - 1)] = delta;  // delta == 0 here
    return out;
  }
  a.diagonal().array() += 1e-10 * (a.trace() / d + 1.0);
  Eigen::VectorXd sol = a.ldlt().solve(rhs);
  double sum = 0.0;
  for (int j = 0; j < d - 1; ++j) {
    out.phi[static_cast<std::size_t>(j)] = sol(j);
    sum += sol(j);
  }
  out.phi[static_cast<std::size_t>(d - 1)] = delta - sum;
  return out;
}

ShapExplanation shap_exact(const PredictFn& f, const std::vector<double>& x,
                           const Tensor& background, int class_idx) {
  const int d = static_cast<int>(x.size());
  if (d < 1 || d > 15) throw std::invalid_argument("shap_exact supports 1 <= D <= 15");
  if (background.ndim() != 2 || background.dim(0) < 1 || background.dim(1) != d) {
    throw std::invalid_argument("background must be a non-empty (B,D) matrix");
  }
  const std::uint32_t full = (1u << d) - 1u;
  std::vector<double> value(static_cast<std::size_t>(full) + 1);
  std::vector<char> mbytes(static_cast<std::size_t>(d), 0);
  for (std::uint32_t mask = 0; mask <= full; ++mask) {
    for (int j = 0; j < d; ++j) mbytes[static_cast<std::size_t>(j)] = (mask >> j) & 1u ? 1 : 0;
    value[mask] = coalition_value(f, x, background, mbytes);
  }
  // weight |S|! (D-1-|S|)! / D!
  std::vector<double> fact(static_cast<std::size_t>(d) + 1, 1.0);
  for (int i = 1; i <= d; ++i) fact[static_cast<std::size_t>(i)] = fact[static_cast<std::size_t>(i - 1)] * i;
  std::vector<double> weight(static_cast<std::size_t>(d), 0.0);
  for (int s = 0; s < d; ++s) {
    weight[static_cast<std::size_t>(s)] =
        fact[static_cast<std::size_t>(s)] * fact[static_cast<std::size_t>(d - 1 - s)] / fact[static_cast<std::size_t>(d)];
  }
  ShapExplanation out;
  out.class_idx = class_idx;
  out.base_value = value[0];
  out.fx = value[full];
  out.phi.assign(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) {
    for (std::uint32_t mask = 0; mask <= full; ++mask) {
      if ((mask >> i) & 1u) continue;
      int s = __builtin_popcount(mask);
      out.phi[static_cast<std::size_t>(i)] +=
          weight[static_cast<std::size_t>(s)] * (value[mask | (1u << i)] - value[mask]);
    }
  }
  return out;
}

Tensor summarize_background(const Tensor& rows, int k, std::uint64_t seed) {
  if (rows.ndim() != 2 || rows.dim(0) < 1) throw std::invalid_argument("background rows required");
  const int n = rows.dim(0), d = rows.dim(1);
  if (k >= n) return rows;
  std::mt19937_64 rng(seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);
  Tensor centers({k, d});
  for (int c = 0; c < k; ++c) {
    std::copy(rows.data() + static_cast<std::size_t>(order[static_cast<std::size_t>(c)]) * d,
              rows.data() + static_cast<std::size_t>(order[static_cast<std::size_t>(c)] + 1) * d,
              centers.data() + static_cast<std::size_t>(c) * d);
  }
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < 10; ++iter) {
    for (int i = 0; i < n; ++i) {
      double best = 1e300;
      for (int c = 0; c < k; ++c) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
          double diff = rows.at(i, j) - centers.at(c, j);
          s += diff * diff;
        }
        if (s < best) {
          best = s;
          assign[static_cast<std::size_t>(i)] = c;
        }
      }
    }
    Tensor next({k, d});
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      int c = assign[static_cast<std::size_t>(i)];
      count[static_cast<std::size_t>(c)]++;
      for (int j = 0; j < d; ++j) next.at(c, j) += rows.at(i, j);
    }
    for (int c = 0; c < k; ++c) {
      if (count[static_cast<std::size_t>(c)] == 0) continue;  // keep the old center
      for (int j = 0; j < d; ++j) centers.at(c, j) = next.at(c, j) / count[static_cast<std::size_t>(c)];
    }
  }
  return centers;
}

// ---------------------------------------------------------------------------
// plot data

PlotDataResult write_plot_data(const std::vector<ShapExplanation>& explanations,
                               const fs::path& out_dir) {
  if (explanations.empty()) throw std::invalid_argument("write_plot_data needs >= 1 explanation");
  const std::size_t d = explanations.front().phi.size();
  for (const auto& e : explanations) {
    if (e.phi.size() != d) throw std::invalid_argument("explanations disagree on feature count");
  }
  fs::create_directories(out_dir);

  std::vector<double> mean_abs(d, 0.0);
  for (const auto& e : explanations) {
    for (std::size_t j = 0; j < d; ++j) mean_abs[j] += std::abs(e.phi[j]);
  }
  for (double& v : mean_abs) v /= static_cast<double>(explanations.size());
  double total = 0.0;
  for (double v : mean_abs) total += v;

  PlotDataResult result;
  result.all_zero = total == 0.0;

  std::vector<int> order(d);
  for (std::size_t j = 0; j < d; ++j) order[j] = static_cast<int>(j);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return mean_abs[static_cast<std::size_t>(a)] > mean_abs[static_cast<std::size_t>(b)]; });

  json summary;
  summary["schema_version"] = 1;
  summary["all_zero"] = result.all_zero;
  summary["ranking"] = json::array();
  if (!result.all_zero) {
    for (int j : order) {
      summary["ranking"].push_back(
          {{"feature", j}, {"mean_abs_phi", mean_abs[static_cast<std::size_t>(j)]}});
    }
  }
  result.summary_json = out_dir / "shap_summary.json";
  atomic_write(result.summary_json, summary.dump(2) + "\n");

  json force;
  force["schema_version"] = 1;
  force["instances"] = json::array();
  for (const auto& e : explanations) {
    json inst;
    inst["base_value"] = e.base_value;
    inst["fx"] = e.fx;
    inst["class"] = e.class_idx;
    std::vector<int> by_signed(d);
    for (std::size_t j = 0; j < d; ++j) by_signed[j] = static_cast<int>(j);
    std::stable_sort(by_signed.begin(), by_signed.end(), [&](int a, int b) {
      return e.phi[static_cast<std::size_t>(a)] > e.phi[static_cast<std::size_t>(b)];
    });
    inst["contributions"] = json::array();
    for (int j : by_signed) {
      inst["contributions"].push_back({{"feature", j}, {"phi", e.phi[static_cast<std::size_t>(j)]}});
    }
    force["instances"].push_back(std::move(inst));
  }
  result.force_json = out_dir / "shap_force.json";
  atomic_write(result.force_json, force.dump(2) + "\n");

  // renderings: top features by mean |phi| and the first instance's signed bars
  const std::size_t top = std::min<std::size_t>(d, 20);
  std::vector<std::pair<std::string, double>> bars;
  for (std::size_t r = 0; r < top; ++r) {
    int j = order[r];
    bars.emplace_back("f" + std::to_string(j), mean_abs[static_cast<std::size_t>(j)]);
  }
  plot_bars_png(out_dir / "shap_summary.png", bars, "mean |phi| per feature");
  const auto& first = explanations.front();
  std::vector<std::pair<std::string, double>> fbars;
  std::vector<int> by_abs(d);
  for (std::size_t j = 0; j < d; ++j) by_abs[j] = static_cast<int>(j);
  std::stable_sort(by_abs.begin(), by_abs.end(), [&](int a, int b) {
    return std::abs(first.phi[static_cast<std::size_t>(a)]) > std::abs(first.phi[static_cast<std::size_t>(b)]);
  });
  for (std::size_t r = 0; r < top; ++r) {
    int j = by_abs[r];
    fbars.emplace_back("f" + std::to_string(j), first.phi[static_cast<std::size_t>(j)]);
  }
  char buf[120];
  std::snprintf(buf, sizeof(buf), "force: base %.4g -> fx %.4g", first.base_value, first.fx);
  plot_bars_png(out_dir / "shap_force.png", fbars, buf);
  return result;
}

}  // namespace lungct
