#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include "checks.hpp"
#include "lungct/errors.hpp"
#include "lungct/io.hpp"
#include "lungct/svm.hpp"

namespace fs = std::filesystem;
using lungct::ExtractorConfig;
using lungct::FeatureExtractor;
using lungct::KernelKind;
using lungct::KernelSpec;
using lungct::ScalerStats;
using lungct::SvmModel;
using lungct::SvmTrainOptions;
using lungct::Tensor;

namespace {

// Naive double-loop evaluation of the decision function from stored
// support vectors; the independent oracle for the production path.
double decision_oracle(const SvmModel& model, int head, const double* x) {
  const auto& h = model.heads[static_cast<std::size_t>(head)];
  double f = h.bias;
  for (int i = 0; i < h.support_vectors.dim(0); ++i) {
    f += h.dual_coef[static_cast<std::size_t>(i)] *
         lungct::kernel_eval(model.kernel, h.support_vectors.data() + static_cast<std::size_t>(i) * model.dims,
                             x, model.dims);
  }
  return f;
}

Tensor two_blob_data(std::vector<int>& labels, int per_class, double gap, std::uint64_t seed) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  std::normal_distribution<double> noise(0.0, 0.15);
  Tensor x({2 * per_class, 2});
  labels.clear();
  for (int i = 0; i < per_class; ++i) {
    x.at(i, 0) = noise(rng);
    x.at(i, 1) = noise(rng);
    labels.push_back(0);
  }
  for (int i = per_class; i < 2 * per_class; ++i) {
    x.at(i, 0) = gap + noise(rng);
    x.at(i, 1) = gap + noise(rng);
    labels.push_back(1);
  }
  return x;
}

// Parity checkerboard of Gaussian clusters: class = (i+j) mod 2. No halfplane
// can do much better than chance, while a radial kernel separates it cleanly.
Tensor xor_data(std::vector<int>& labels, int per_cluster, std::uint64_t seed) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  std::normal_distribution<double> noise(0.0, 0.08);
  const int grid = 4;
  Tensor x({grid * grid * per_cluster, 2});
  labels.clear();
  int row = 0;
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      for (int p = 0; p < per_cluster; ++p, ++row) {
        x.at(row, 0) = i + noise(rng);
        x.at(row, 1) = j + noise(rng);
        labels.push_back((i + j) % 2);
      }
    }
  }
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// scaler

TEST_CASE("scaler: mean/std fit and transform") {
  Tensor x({2, 3});
  x.at(0, 0) = 0.0;
  x.at(1, 0) = 10.0;  // -> mean 5, std 5 -> {-1, 1}
  x.at(0, 1) = -1.0;
  x.at(1, 1) = 1.0;  // already standardized
  x.at(0, 2) = 5.0;
  x.at(1, 2) = 5.0;  // constant -> flagged
  ScalerStats s = lungct::fit_scaler(x);
  CHECK(s.mean[0] == doctest::Approx(5.0));
  CHECK(s.std[0] == doctest::Approx(5.0));
  CHECK(s.zero_variance[2] == 1);
  CHECK(s.std[2] == 1.0);
  Tensor scaled = lungct::apply_scaler(x, s);
  CHECK(scaled.at(0, 0) == doctest::Approx(-1.0));
  CHECK(scaled.at(1, 0) == doctest::Approx(1.0));
  CHECK(scaled.at(0, 1) == doctest::Approx(-1.0));
  CHECK(scaled.at(1, 1) == doctest::Approx(1.0));
  CHECK(scaled.at(0, 2) == 0.0);
  CHECK(scaled.at(1, 2) == 0.0);
}

TEST_CASE("scaler: training matrix standardizes to mean 0, std 1") {
  std::mt19937 rng(51);
  Tensor x = testutil::random_tensor({40, 7}, rng, -3.0, 9.0);
  ScalerStats s = lungct::fit_scaler(x);
  Tensor scaled = lungct::apply_scaler(x, s);
  for (int j = 0; j < 7; ++j) {
    double mean = 0.0, var = 0.0;
    for (int i = 0; i < 40; ++i) mean += scaled.at(i, j);
    mean /= 40;
    for (int i = 0; i < 40; ++i) var += (scaled.at(i, j) - mean) * (scaled.at(i, j) - mean);
    var /= 40;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(lungct::fit_scaler(Tensor({1, 3})), std::invalid_argument);
}

TEST_CASE("scaler: refitting on train+test would change test scaling") {
  std::mt19937 rng(52);
  Tensor train = testutil::random_tensor({20, 4}, rng, 0.0, 1.0);
  Tensor test = testutil::random_tensor({10, 4}, rng, 2.0, 5.0);  // shifted distribution
  ScalerStats train_only = lungct::fit_scaler(train);
  Tensor combined({30, 4});
  std::copy(train.data(), train.data() + train.size(), combined.data());
  std::copy(test.data(), test.data() + test.size(), combined.data() + train.size());
  ScalerStats leaky = lungct::fit_scaler(combined);
  Tensor a = lungct::apply_scaler(test, train_only);
  Tensor b = lungct::apply_scaler(test, leaky);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  CHECK(diff > 0.1);  // the train-only API is what prevents this leak
}

// ---------------------------------------------------------------------------
// feature extraction

TEST_CASE("extractor: default width is 1280 and rows are deterministic") {
  ExtractorConfig cfg;
  cfg.input_h = cfg.input_w = 64;  // desk-scale input, table-scale width
  cfg.seed = 3;
  FeatureExtractor ext(cfg);
  std::mt19937 rng(53);
  Tensor imgs = testutil::random_tensor({3, 64, 64, 3}, rng, 0.0, 1.0);
  auto fm = lungct::extract_features(imgs, ext);
  CHECK(fm.values.dim(0) == 3);
  CHECK(fm.values.dim(1) == 1280);
  CHECK(fm.fingerprint != 0);

  // same image twice -> identical rows
  Tensor dup({2, 64, 64, 3});
  std::copy(imgs.data(), imgs.data() + 64 * 64 * 3, dup.data());
  std::copy(imgs.data(), imgs.data() + 64 * 64 * 3, dup.data() + 64 * 64 * 3);
  auto fm2 = lungct::extract_features(dup, ext);
  for (int j = 0; j < 1280; ++j) CHECK(fm2.values.at(0, j) == fm2.values.at(1, j));

  Tensor wrong = testutil::random_tensor({1, 32, 32, 3}, rng);
  CHECK_THROWS_AS(lungct::extract_features(wrong, ext), std::invalid_argument);
}

TEST_CASE("extractor: final map spatial size follows the config (8,8,1280)") {
  ExtractorConfig cfg;
  cfg.input_h = cfg.input_w = 256;
  cfg.seed = 1;
  FeatureExtractor ext(cfg);
  std::mt19937 rng(54);
  Tensor img = testutil::random_tensor({1, 256, 256, 3}, rng, 0.0, 1.0);
  Tensor map = ext.forward_map(img);
  CHECK(map.dim(1) == 8);
  CHECK(map.dim(2) == 8);
  CHECK(map.dim(3) == 1280);
}

// ---------------------------------------------------------------------------
// solver

TEST_CASE("svm: separable two-blob data trains to accuracy 1.0") {
  std::vector<int> y;
  Tensor x = two_blob_data(y, 20, 2.0, 55);
  SvmTrainOptions opts;
  opts.c = 1.0;
  SvmModel model = lungct::svm_train(x, y, opts);
  auto pred = lungct::svm_predict(model, x);
  int correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
  CHECK(correct == static_cast<int>(y.size()));
  for (const auto& head : model.heads) {
    CHECK(head.kkt_gap < 1e-3);
    CHECK(head.support_vectors.dim(0) >= 1);
  }
}

TEST_CASE("svm: free support vectors sit on the margin |f| = 1") {
  std::vector<int> y;
  Tensor x = two_blob_data(y, 25, 3.0, 56);
  SvmTrainOptions opts;
  opts.c = 100.0;  // effectively hard margin on well-separated blobs
  SvmModel model = lungct::svm_train(x, y, opts);
  // recover alpha = |dual_coef| per head; free vectors have alpha < C
  int checked = 0;
  for (int h = 0; h < model.num_classes(); ++h) {
    const auto& head = model.heads[static_cast<std::size_t>(h)];
    for (int i = 0; i < head.support_vectors.dim(0); ++i) {
      double alpha = std::abs(head.dual_coef[static_cast<std::size_t>(i)]);
      if (alpha < opts.c * (1.0 - 1e-9)) {
        double f = decision_oracle(model, h, head.support_vectors.data() + static_cast<std::size_t>(i) * 2);
        CHECK(std::abs(std::abs(f) - 1.0) < 1e-2);
        ++checked;
      }
    }
  }
  CHECK(checked >= 2);
}

TEST_CASE("svm: C -> 0 drives decision scores toward the bias") {
  std::vector<int> y;
  Tensor x = two_blob_data(y, 10, 1.0, 57);
  SvmTrainOptions opts;
  opts.c = 1e-6;
  SvmModel model = lungct::svm_train(x, y, opts);
  Tensor scores = lungct::svm_decision(model, x);
  for (int h = 0; h < model.num_classes(); ++h) {
    double max_dev = 0.0;
    for (int i = 0; i < scores.dim(0); ++i) {
      max_dev = std::max(max_dev, std::abs(scores.at(i, h) - model.heads[static_cast<std::size_t>(h)].bias));
    }
    // |sum alpha_i| <= n C bounds the kernel sum
    CHECK(max_dev <= 1e-3);
  }
}

TEST_CASE("svm decision: hand-evaluated single support vector") {
  SvmModel model;
  model.kernel.kind = KernelKind::Linear;
  model.dims = 2;
  lungct::SvmBinaryHead head;
  head.support_vectors = Tensor({1, 2});
  head.support_vectors.at(0, 0) = 1.0;
  head.support_vectors.at(0, 1) = 0.0;
  head.dual_coef = Tensor({1}, 1.0);
  head.bias = -0.5;
  model.heads.push_back(head);

  Tensor x({1, 2});
  x.at(0, 0) = 2.0;
  x.at(0, 1) = 0.0;
  Tensor scores = lungct::svm_decision(model, x);
  CHECK(scores.at(0, 0) == 1.5);  // 1*2 - 0.5

  // orthogonal input -> kernel terms vanish, score == bias
  Tensor ortho({1, 2});
  ortho.at(0, 1) = 7.0;
  CHECK(lungct::svm_decision(model, ortho).at(0, 0) == -0.5);

  // RBF self-similarity: K(x,x) = 1
  SvmModel rbf = model;
  rbf.kernel.kind = KernelKind::Rbf;
  rbf.kernel.gamma = 0.7;
  rbf.heads[0].bias = 0.0;
  Tensor self({1, 2});
  self.at(0, 0) = 1.0;
  self.at(0, 1) = 0.0;
  CHECK(lungct::svm_decision(rbf, self).at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("svm: production scores match the naive double-loop oracle within 1e-9") {
  std::mt19937 rng(58);
  for (KernelKind kind : {KernelKind::Linear, KernelKind::Rbf}) {
    std::vector<int> y;
    Tensor x = two_blob_data(y, 15, 1.2, 59);
    // add a third class to exercise one-vs-rest
    Tensor x3({45, 2});
    std::copy(x.data(), x.data() + x.size(), x3.data());
    std::normal_distribution<double> noise(0.0, 0.15);
    for (int i = 30; i < 45; ++i) {
      x3.at(i, 0) = -2.0 + noise(rng);
      x3.at(i, 1) = 2.0 + noise(rng);
      y.push_back(2);
    }
    SvmTrainOptions opts;
    opts.kernel.kind = kind;
    opts.c = 2.0;
    SvmModel model = lungct::svm_train(x3, y, opts);
    Tensor probe = testutil::random_tensor({25, 2}, rng, -3.0, 3.0);
    Tensor scores = lungct::svm_decision(model, probe);
    for (int i = 0; i < probe.dim(0); ++i) {
      for (int h = 0; h < model.num_classes(); ++h) {
        double oracle = decision_oracle(model, h, probe.data() + static_cast<std::size_t>(i) * 2);
        CHECK(std::abs(scores.at(i, h) - oracle) < 1e-9);
      }
    }
  }
}

TEST_CASE("svm: deterministic support vector sets for a fixed seed") {
  std::vector<int> y;
  Tensor x = two_blob_data(y, 20, 1.0, 60);
  SvmTrainOptions opts;
  opts.seed = 4;
  SvmModel a = lungct::svm_train(x, y, opts);
  SvmModel b = lungct::svm_train(x, y, opts);
  REQUIRE(a.num_classes() == b.num_classes());
  for (int h = 0; h < a.num_classes(); ++h) {
    const auto& ha = a.heads[static_cast<std::size_t>(h)];
    const auto& hb = b.heads[static_cast<std::size_t>(h)];
    REQUIRE(ha.support_vectors.same_shape(hb.support_vectors));
    for (std::size_t i = 0; i < ha.support_vectors.size(); ++i) {
      CHECK(ha.support_vectors[i] == hb.support_vectors[i]);
    }
    CHECK(ha.bias == hb.bias);
  }
}

TEST_CASE("svm: prediction invariance under global feature rescaling") {
  std::vector<int> y;
  Tensor x = two_blob_data(y, 12, 1.5, 61);
  auto fit_predict = [&](const Tensor& features) {
    ScalerStats s = lungct::fit_scaler(features);
    Tensor scaled = lungct::apply_scaler(features, s);
    SvmTrainOptions opts;
    opts.c = 1.0;
    SvmModel model = lungct::svm_train(scaled, y, opts);
    return lungct::svm_predict(model, scaled);
  };
  Tensor x_scaled = x;
  x_scaled *= 3.7;
  CHECK(fit_predict(x) == fit_predict(x_scaled));
}

TEST_CASE("svm: single-class input rejected") {
  Tensor x({4, 2}, 1.0);
  std::vector<int> y = {0, 0, 0, 0};
  SvmTrainOptions opts;
  CHECK_THROWS_AS(lungct::svm_train(x, y, opts), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// grid search

TEST_CASE("grid: singleton grid returns its only cell") {
  std::vector<int> y;
  Tensor x = two_blob_data(y, 10, 2.0, 62);
  auto r = lungct::hyperparam_search(x, y, {KernelKind::Linear}, {1.0}, 2, 1);
  CHECK(r.kernel.kind == KernelKind::Linear);
  CHECK(r.c == 1.0);
  REQUIRE(r.table.size() == 1);
  CHECK(r.table[0].mean_accuracy == r.best_accuracy);
}

TEST_CASE("grid: linearly separable data resolves ties toward the linear kernel") {
  std::vector<int> y;
  Tensor x = two_blob_data(y, 15, 3.0, 63);
  auto r = lungct::hyperparam_search(x, y, {KernelKind::Linear, KernelKind::Rbf}, {0.1, 1.0, 10.0},
                                     3, 2);
  CHECK(r.best_accuracy == 1.0);
  CHECK(r.kernel.kind == KernelKind::Linear);
  CHECK(r.c == 0.1);  // smallest C among the tied perfect cells
}

TEST_CASE("grid: XOR pattern selects the RBF kernel; linear stays near chance") {
  std::vector<int> y;
  Tensor x = xor_data(y, 8, 64);
  auto r = lungct::hyperparam_search(x, y, {KernelKind::Linear, KernelKind::Rbf},
                                     {0.01, 0.1, 1.0, 10.0, 100.0}, 3, 3);
  CHECK(r.kernel.kind == KernelKind::Rbf);
  double best_linear = 0.0, best_rbf = 0.0;
  for (const auto& cell : r.table) {
    if (cell.kernel == KernelKind::Linear) best_linear = std::max(best_linear, cell.mean_accuracy);
    if (cell.kernel == KernelKind::Rbf) best_rbf = std::max(best_rbf, cell.mean_accuracy);
  }
  CHECK(best_linear <= 0.6);  // XOR is not linearly separable
  CHECK(best_rbf >= 0.9);
  CHECK(best_rbf > best_linear);
}

TEST_CASE("grid: fold count above smallest class size is rejected") {
  std::vector<int> y;
  Tensor x = two_blob_data(y, 3, 2.0, 65);
  CHECK_THROWS_AS(lungct::hyperparam_search(x, y, {KernelKind::Linear}, {1.0}, 4, 1),
                  std::invalid_argument);
}

// ---------------------------------------------------------------------------
// pipeline persistence

TEST_CASE("pipeline: save/load round trip is score-identical; guards trip") {
  ExtractorConfig ecfg;
  ecfg.input_h = ecfg.input_w = 32;
  ecfg.final_spatial = 8;
  ecfg.final_channels = 24;
  ecfg.seed = 9;
  lungct::SvmPipeline p;
  p.extractor = std::make_unique<FeatureExtractor>(ecfg);

  std::mt19937 rng(66);
  Tensor imgs = testutil::random_tensor({30, 32, 32, 3}, rng, 0.0, 1.0);
  std::vector<int> y;
  for (int i = 0; i < 30; ++i) y.push_back(i % 2);
  // make the classes separable in image space
  for (int i = 0; i < 30; ++i) {
    if (i % 2 == 1) {
      for (int j = 0; j < 32 * 32 * 3; ++j) {
        imgs[static_cast<std::size_t>(i) * 32 * 32 * 3 + j] =
            std::min(1.0, imgs[static_cast<std::size_t>(i) * 32 * 32 * 3 + j] + 0.4);
      }
    }
  }
  auto fm = lungct::extract_features(imgs, *p.extractor);
  p.scaler = lungct::fit_scaler(fm.values);
  Tensor scaled = lungct::apply_scaler(fm.values, p.scaler);
  SvmTrainOptions opts;
  p.svm = lungct::svm_train(scaled, y, opts);
  p.class_names = {"a", "b"};
  p.fingerprint = p.extractor->fingerprint();

  Tensor before = p.decide_images(imgs);

  fs::path dir = fs::temp_directory_path() / "lungct_test_svm_pipeline";
  fs::remove_all(dir);
  lungct::save_svm_pipeline(p, dir);
  lungct::SvmPipeline q = lungct::load_svm_pipeline(dir);
  Tensor after = q.decide_images(imgs);
  REQUIRE(before.same_shape(after));
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);

  // load-then-predict keeps training accuracy
  auto pred_before = p.predict_images(imgs);
  auto pred_after = q.predict_images(imgs);
  CHECK(pred_before == pred_after);

  // fingerprint guard: features from a *different* extractor are refused
  ExtractorConfig other = ecfg;
  other.seed = 10;
  FeatureExtractor alien(other);
  auto alien_fm = lungct::extract_features(imgs, alien);
  CHECK_THROWS_AS(q.decide_features(alien_fm), lungct::DataError);

  // tampered version field is refused
  {
    std::string content = lungct::read_file(dir / "svm.json");
    auto pos = content.find("\"schema_version\": 1");
    REQUIRE(pos != std::string::npos);
    content.replace(pos, std::string("\"schema_version\": 1").size(), "\"schema_version\": 9");
    std::ofstream out(dir / "svm.json", std::ios::trunc);
    out << content;
  }
  CHECK_THROWS_AS(lungct::load_svm_pipeline(dir), lungct::DataError);
  fs::remove_all(dir);
}
