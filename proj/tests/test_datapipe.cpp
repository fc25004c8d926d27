#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include "checks.hpp"
#include "lungct/datapipe.hpp"
#include "lungct/errors.hpp"
#include "lungct/image.hpp"

namespace fs = std::filesystem;
using lungct::Dataset;
using lungct::PreprocessConfig;
using lungct::SmoteConfig;
using lungct::SplitSpec;
using lungct::Tensor;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("lungct_test_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_gray_png(const fs::path& p, int h, int w, double value) {
  Tensor img({h, w, 3}, value);
  lungct::save_image_png(p, img);
}

std::vector<int> labels_of(const std::vector<int>& counts) {
  std::vector<int> y;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (int i = 0; i < counts[c]; ++i) y.push_back(static_cast<int>(c));
  }
  return y;
}

}  // namespace

// ---------------------------------------------------------------------------
// load_dataset

TEST_CASE("load_dataset: class indices follow lexicographic folder order") {
  TempDir tmp("load_lex");
  for (const std::string name : {"Benign cases", "Malignant cases", "Normal cases"}) {
    fs::create_directories(tmp.path / name);
    write_gray_png(tmp.path / name / "a.png", 8, 8, 0.5);
    write_gray_png(tmp.path / name / "b.png", 8, 8, 0.25);
  }
  lungct::LoadReport report;
  Dataset ds = lungct::load_dataset(tmp.path, &report);
  REQUIRE(ds.class_names.size() == 3);
  CHECK(ds.class_names[0] == "Benign cases");
  CHECK(ds.class_names[1] == "Malignant cases");
  CHECK(ds.class_names[2] == "Normal cases");
  CHECK(ds.samples.size() == 6);
  for (const auto& s : ds.samples) {
    CHECK(s.class_name == ds.class_names[static_cast<std::size_t>(s.label)]);
    CHECK(s.image.min_value() >= 0.0);
    CHECK(s.image.max_value() <= 1.0);
  }
  CHECK(report.total == 6);
  CHECK(report.skipped.empty());
}

TEST_CASE("load_dataset: single class yields all-zero labels") {
  TempDir tmp("load_single");
  fs::create_directories(tmp.path / "only");
  for (int i = 0; i < 5; ++i) {
    write_gray_png(tmp.path / "only" / (std::to_string(i) + ".png"), 6, 6, 0.1 * i);
  }
  Dataset ds = lungct::load_dataset(tmp.path);
  CHECK(ds.samples.size() == 5);
  for (const auto& s : ds.samples) CHECK(s.label == 0);
}

TEST_CASE("load_dataset: corrupt file is skipped and reported") {
  TempDir tmp("load_corrupt");
  fs::create_directories(tmp.path / "c");
  for (int i = 0; i < 9; ++i) {
    write_gray_png(tmp.path / "c" / ("img" + std::to_string(i) + ".png"), 4, 4, 0.5);
  }
  std::ofstream(tmp.path / "c" / "broken.png") << "this is not an image";
  lungct::LoadReport report;
  Dataset ds = lungct::load_dataset(tmp.path, &report);
  CHECK(ds.samples.size() == 9);
  REQUIRE(report.skipped.size() == 1);
  CHECK(report.skipped[0].find("broken.png") != std::string::npos);
}

TEST_CASE("load_dataset: missing root and undecodable class are fatal") {
  CHECK_THROWS_AS(lungct::load_dataset("/nonexistent/dataset/root"), lungct::ConfigError);
  TempDir tmp("load_empty");
  fs::create_directories(tmp.path / "empty_class");
  std::ofstream(tmp.path / "empty_class" / "junk.png") << "garbage";
  CHECK_THROWS_AS(lungct::load_dataset(tmp.path), lungct::DataError);
}

// ---------------------------------------------------------------------------
// preprocess

TEST_CASE("preprocess: output is (256,256,3) for any valid input") {
  std::mt19937 rng(31);
  Tensor raw = testutil::random_tensor({100, 180, 3}, rng, 0.0, 1.0);
  PreprocessConfig cfg;
  Tensor out = lungct::preprocess(raw, cfg);
  REQUIRE(out.ndim() == 3);
  CHECK(out.dim(0) == 256);
  CHECK(out.dim(1) == 256);
  CHECK(out.dim(2) == 3);
  CHECK(out.min_value() >= 0.0);
  CHECK(out.max_value() <= 1.0);
}

TEST_CASE("preprocess: all-white 8-bit image maps to exactly 1.0") {
  TempDir tmp("prep_white");
  write_gray_png(tmp.path / "white.png", 20, 20, 1.0);
  Tensor raw = lungct::decode_image_file(tmp.path / "white.png");
  PreprocessConfig cfg;
  cfg.target_h = cfg.target_w = 16;
  Tensor out = lungct::preprocess(raw, cfg);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 1.0);
}

TEST_CASE("preprocess: pure red collapses to luminance 0.299 in all channels") {
  Tensor raw({4, 4, 3});
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) raw.at(y, x, 0) = 1.0;  // (255,0,0)/255
  }
  PreprocessConfig cfg;
  cfg.target_h = cfg.target_w = 4;
  Tensor out = lungct::preprocess(raw, cfg);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      for (int c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == doctest::Approx(0.299).epsilon(1e-12));
    }
  }
}

TEST_CASE("preprocess: rejects zero-dimension and unknown channel inputs") {
  PreprocessConfig cfg;
  CHECK_THROWS_AS(lungct::preprocess(Tensor({0, 5, 3}), cfg), std::invalid_argument);
  CHECK_THROWS_AS(lungct::preprocess(Tensor({5, 5, 2}), cfg), std::invalid_argument);
}

TEST_CASE("preprocess: idempotent bitwise on conforming tensors") {
  std::mt19937 rng(32);
  PreprocessConfig cfg;
  cfg.target_h = cfg.target_w = 32;
  Tensor raw = testutil::random_tensor({47, 53, 3}, rng, 0.0, 1.0);
  Tensor once = lungct::preprocess(raw, cfg);
  Tensor twice = lungct::preprocess(once, cfg);
  REQUIRE(twice.same_shape(once));
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(twice[i] == once[i]);
}

TEST_CASE("preprocess config validation") {
  PreprocessConfig cfg;
  cfg.gray_r = 0.5;  // weights no longer sum to 1
  CHECK_THROWS_AS(cfg.validate(), lungct::ConfigError);
  PreprocessConfig cfg2;
  cfg2.target_h = 0;
  CHECK_THROWS_AS(cfg2.validate(), lungct::ConfigError);
}

// ---------------------------------------------------------------------------
// stratified split

TEST_CASE("split: paper support counts (24,113,83) from (120,565,415) at 80/20") {
  auto labels = labels_of({120, 565, 415});
  auto [train, test] = lungct::split_indices(labels, {.train_fraction = 0.8, .seed = 7});
  std::vector<int> test_counts(3, 0);
  for (int i : test) test_counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]++;
  CHECK(test_counts[0] == 24);
  CHECK(test_counts[1] == 113);
  CHECK(test_counts[2] == 83);
  CHECK(train.size() + test.size() == labels.size());
}

TEST_CASE("split: symmetric 50/50 on ten samples") {
  auto labels = labels_of({10});
  auto [train, test] = lungct::split_indices(labels, {.train_fraction = 0.5, .seed = 3});
  CHECK(train.size() == 5);
  CHECK(test.size() == 5);
}

TEST_CASE("split: deterministic, disjoint and exhaustive") {
  auto labels = labels_of({13, 29, 8});
  SplitSpec spec{.train_fraction = 0.75, .seed = 42};
  auto [tr1, te1] = lungct::split_indices(labels, spec);
  auto [tr2, te2] = lungct::split_indices(labels, spec);
  CHECK(tr1 == tr2);
  CHECK(te1 == te2);
  std::set<int> all(tr1.begin(), tr1.end());
  for (int i : te1) CHECK(all.insert(i).second);  // disjoint
  CHECK(all.size() == labels.size());             // exhaustive
}

TEST_CASE("split: per-class proportions preserved within one sample") {
  std::mt19937 rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> count_dist(2, 60);
    std::vector<int> counts = {count_dist(rng), count_dist(rng), count_dist(rng)};
    auto labels = labels_of(counts);
    auto [train, test] =
        lungct::split_indices(labels, {.train_fraction = 0.8, .seed = static_cast<std::uint64_t>(trial)});
    std::vector<int> test_counts(3, 0);
    for (int i : test) test_counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]++;
    for (int c = 0; c < 3; ++c) {
      double expected = counts[static_cast<std::size_t>(c)] * 0.2;
      CHECK(std::abs(test_counts[static_cast<std::size_t>(c)] - std::round(expected)) <= 1.0);
    }
  }
}

TEST_CASE("split: a single-sample class cannot be stratified") {
  auto labels = labels_of({5, 1});
  CHECK_THROWS_AS(lungct::split_indices(labels, {.train_fraction = 0.8, .seed = 1}),
                  std::invalid_argument);
}

// ---------------------------------------------------------------------------
// SMOTE

TEST_CASE("smote: balances table-style counts (100,448,329) to 1344 rows") {
  std::mt19937 rng(34);
  std::vector<int> counts = {100, 448, 329};
  auto y = labels_of(counts);
  Tensor x = testutil::random_tensor({877, 8}, rng, 0.0, 1.0);
  auto r = lungct::smote_balance(x, y, {.k_neighbors = 5, .seed = 11});
  CHECK(r.x.dim(0) == 1344);
  CHECK(r.x.dim(1) == 8);
  std::vector<int> out_counts(3, 0);
  for (int c : r.y) out_counts[static_cast<std::size_t>(c)]++;
  CHECK(out_counts[0] == 448);
  CHECK(out_counts[1] == 448);
  CHECK(out_counts[2] == 448);
  // originals preserved verbatim
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(r.x[i] == x[i]);
}

TEST_CASE("smote: already balanced input passes through unchanged") {
  std::mt19937 rng(35);
  auto y = labels_of({12, 12, 12});
  Tensor x = testutil::random_tensor({36, 5}, rng);
  auto r = lungct::smote_balance(x, y, {.k_neighbors = 3, .seed = 1});
  CHECK(r.x.dim(0) == 36);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(r.x[i] == x[i]);
  CHECK(r.y == y);
}

TEST_CASE("smote: two-point minority interpolates along the diagonal") {
  // minority rows (0,0) and (1,1); k=1 forces the unique neighbor
  Tensor x({7, 2});
  x.at(0, 0) = 0.0;
  x.at(0, 1) = 0.0;
  x.at(1, 0) = 1.0;
  x.at(1, 1) = 1.0;
  for (int i = 2; i < 7; ++i) {
    x.at(i, 0) = 10.0 + i;
    x.at(i, 1) = -3.0 * i;
  }
  std::vector<int> y = {0, 0, 1, 1, 1, 1, 1};
  auto r = lungct::smote_balance(x, y, {.k_neighbors = 1, .seed = 9});
  REQUIRE(r.x.dim(0) == 10);
  for (int i = 7; i < 10; ++i) {
    CHECK(r.y[static_cast<std::size_t>(i)] == 0);
    double a = r.x.at(i, 0), b = r.x.at(i, 1);
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("smote: convexity and exact balancing on random imbalanced sets") {
  std::mt19937 rng(36);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> count_dist(4, 20), dim_dist(2, 64), k_dist(1, 3);
    int k_classes = 2 + trial % 3;
    std::vector<int> counts;
    for (int c = 0; c < k_classes; ++c) counts.push_back(count_dist(rng));
    int d = dim_dist(rng);
    auto y = labels_of(counts);
    Tensor x = testutil::random_tensor({static_cast<int>(y.size()), d}, rng, -2.0, 2.0);
    int k_nb = std::min(k_dist(rng), *std::min_element(counts.begin(), counts.end()) - 1);
    auto r = lungct::smote_balance(x, y, {.k_neighbors = k_nb, .seed = static_cast<std::uint64_t>(trial)});

    // count invariant: perfectly balanced
    std::vector<int> out_counts(static_cast<std::size_t>(k_classes), 0);
    for (int c : r.y) out_counts[static_cast<std::size_t>(c)]++;
    CHECK(*std::max_element(out_counts.begin(), out_counts.end()) ==
          *std::min_element(out_counts.begin(), out_counts.end()));

    // convexity: every synthetic row lies on a segment between two original
    // same-class rows
    for (int srow = static_cast<int>(y.size()); srow < r.x.dim(0); ++srow) {
      int cls = r.y[static_cast<std::size_t>(srow)];
      bool found = false;
      std::vector<int> members;
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] == cls) members.push_back(static_cast<int>(i));
      }
      for (std::size_t ai = 0; ai < members.size() && !found; ++ai) {
        for (std::size_t bi = 0; bi < members.size() && !found; ++bi) {
          if (ai == bi) continue;
          int a = members[ai], b = members[bi];
          double t = -1.0;
          bool ok = true;
          for (int j = 0; j < d; ++j) {
            double da = r.x.at(srow, j) - x.at(a, j);
            double db = x.at(b, j) - x.at(a, j);
            if (std::abs(db) > 1e-9) {
              t = da / db;
              break;
            }
          }
          if (t < -1e-6 || t > 1.0 + 1e-6) continue;
          for (int j = 0; j < d; ++j) {
            double expect = x.at(a, j) + t * (x.at(b, j) - x.at(a, j));
            if (std::abs(expect - r.x.at(srow, j)) > 1e-6) {
              ok = false;
              break;
            }
          }
          found = ok;
        }
      }
      CHECK(found);
    }
  }
}

TEST_CASE("smote: single-class input is a flagged no-op") {
  std::mt19937 rng(37);
  Tensor x = testutil::random_tensor({6, 3}, rng);
  std::vector<int> y(6, 0);
  auto r = lungct::smote_balance(x, y, {.k_neighbors = 2, .seed = 1});
  CHECK(r.single_class_noop);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(r.x[i] == x[i]);
}

TEST_CASE("smote: k_neighbors must be below minority class size") {
  std::mt19937 rng(38);
  Tensor x = testutil::random_tensor({8, 2}, rng);
  std::vector<int> y = {0, 0, 0, 1, 1, 1, 1, 1};
  CHECK_THROWS_AS(lungct::smote_balance(x, y, {.k_neighbors = 3, .seed = 1}),
                  std::invalid_argument);
}

// ---------------------------------------------------------------------------
// one-hot

TEST_CASE("one_hot basics and round trip") {
  Tensor m = lungct::one_hot({1}, 3);
  CHECK(m.at(0, 0) == 0.0);
  CHECK(m.at(0, 1) == 1.0);
  CHECK(m.at(0, 2) == 0.0);

  Tensor m2 = lungct::one_hot({0, 2}, 3);
  CHECK(m2.at(0, 0) == 1.0);
  CHECK(m2.at(1, 2) == 1.0);

  Tensor empty = lungct::one_hot({}, 3);
  CHECK(empty.dim(0) == 0);
  CHECK(empty.dim(1) == 3);

  CHECK_THROWS_AS(lungct::one_hot({3}, 3), std::invalid_argument);

  // argmax(one_hot(y)) == y, rows sum to 1
  std::mt19937 rng(39);
  std::uniform_int_distribution<int> lab(0, 4);
  std::vector<int> y;
  for (int i = 0; i < 40; ++i) y.push_back(lab(rng));
  Tensor oh = lungct::one_hot(y, 5);
  for (int i = 0; i < 40; ++i) {
    double sum = 0.0;
    int arg = 0;
    for (int c = 0; c < 5; ++c) {
      sum += oh.at(i, c);
      if (oh.at(i, c) > oh.at(i, arg)) arg = c;
    }
    CHECK(sum == 1.0);
    CHECK(arg == y[static_cast<std::size_t>(i)]);
  }
}

// ---------------------------------------------------------------------------
// synthetic data

TEST_CASE("synthetic: balanced, deterministic, seed-sensitive") {
  lungct::SyntheticSpec spec{.num_classes = 3, .per_class = 20, .height = 24, .width = 24,
                             .separability = 0.9, .seed = 7};
  Dataset a = lungct::make_synthetic_dataset(spec);
  CHECK(a.samples.size() == 60);
  auto counts = a.class_counts();
  for (int c : counts) CHECK(c == 20);

  Dataset b = lungct::make_synthetic_dataset(spec);
  REQUIRE(b.samples.size() == a.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    for (std::size_t j = 0; j < a.samples[i].image.size(); ++j) {
      CHECK(a.samples[i].image[j] == b.samples[i].image[j]);
    }
  }

  spec.seed = 8;
  Dataset c = lungct::make_synthetic_dataset(spec);
  double diff = 0.0;
  for (std::size_t j = 0; j < a.samples[0].image.size(); ++j) {
    diff += std::abs(a.samples[0].image[j] - c.samples[0].image[j]);
  }
  CHECK(diff > 0.0);
  CHECK(c.class_counts() == a.class_counts());
}

TEST_CASE("synthetic: separability 0 removes class-conditional signal") {
  lungct::SyntheticSpec spec{.num_classes = 3, .per_class = 30, .height = 32, .width = 32,
                             .separability = 0.0, .seed = 5};
  Dataset flat = lungct::make_synthetic_dataset(spec);
  std::vector<double> means(3, 0.0);
  std::vector<int> counts(3, 0);
  for (const auto& s : flat.samples) {
    double m = 0.0;
    for (std::size_t i = 0; i < s.image.size(); ++i) m += s.image[i];
    means[static_cast<std::size_t>(s.label)] += m / s.image.size();
    counts[static_cast<std::size_t>(s.label)]++;
  }
  for (int c = 0; c < 3; ++c) means[static_cast<std::size_t>(c)] /= counts[static_cast<std::size_t>(c)];
  CHECK(std::abs(means[0] - means[1]) < 0.01);
  CHECK(std::abs(means[1] - means[2]) < 0.01);

  spec.separability = 0.9;
  Dataset sep = lungct::make_synthetic_dataset(spec);
  std::vector<double> means2(3, 0.0);
  for (const auto& s : sep.samples) {
    double m = 0.0;
    for (std::size_t i = 0; i < s.image.size(); ++i) m += s.image[i];
    means2[static_cast<std::size_t>(s.label)] += m / s.image.size() / spec.per_class;
  }
  CHECK(std::abs(means2[0] - means2[2]) > 0.02);
}

TEST_CASE("manifest: csv round trip and stable hash") {
  TempDir tmp("manifest");
  lungct::SyntheticSpec spec{.num_classes = 2, .per_class = 4, .height = 8, .width = 8,
                             .separability = 0.5, .seed = 2};
  Dataset ds = lungct::make_synthetic_dataset(spec);
  auto [train, test] = lungct::stratified_split(ds, {.train_fraction = 0.5, .seed = 1});
  fs::path mpath = tmp.path / "manifest.csv";
  lungct::write_split_manifest(mpath, train, test);
  auto h1 = lungct::manifest_hash(mpath);
  lungct::write_split_manifest(mpath, train, test);
  CHECK(lungct::manifest_hash(mpath) == h1);
  std::ifstream in(mpath);
  std::string header;
  std::getline(in, header);
  CHECK(header == "path,label,split");
}
