#include "lungct/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <random>
#include <set>
#include <stdexcept>

#include "lungct/errors.hpp"
#include "lungct/image.hpp"
#include "lungct/io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lungct {

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(class_names.size(), 0);
  for (const auto& s : samples) counts[static_cast<std::size_t>(s.label)]++;
  return counts;
}

std::string LoadReport::to_json() const {
  json j;
  j["total"] = total;
  j["classes"] = json::array();
  for (const auto& [name, count] : class_counts) {
    j["classes"].push_back({{"name", name}, {"count", count}});
  }
  j["skipped"] = skipped;
  return j.dump(2) + "\n";
}

void PreprocessConfig::validate() const {
  if (target_h <= 0 || target_w <= 0) throw ConfigError("preprocess target size must be positive");
  double sum = gray_r + gray_g + gray_b;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("grayscale weights must sum to 1 (got " + std::to_string(sum) + ")");
  }
}

// ---------------------------------------------------------------------------
// load_dataset

namespace {

bool has_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

}  // namespace

Dataset load_dataset(const fs::path& root, LoadReport* report) {
  if (!fs::exists(root) || !fs::is_directory(root)) {
    throw ConfigError("dataset root does not exist: " + root.string());
  }
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  if (class_dirs.empty()) {
    throw ConfigError("dataset root has no class subdirectories: " + root.string());
  }

  Dataset ds;
  LoadReport local;
  for (const auto& dir : class_dirs) ds.class_names.push_back(dir.filename().string());
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
      if (entry.is_regular_file() && has_image_extension(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    int loaded = 0;
    for (const auto& f : files) {
      try {
        Sample s;
        s.image = decode_image_file(f);
        s.label = static_cast<int>(label);
        s.source_path = f.string();
        s.class_name = ds.class_names[label];
        ds.samples.push_back(std::move(s));
        ++loaded;
      } catch (const DataError&) {
        local.skipped.push_back(f.string());
      }
    }
    if (loaded == 0) {
      throw DataError("class '" + ds.class_names[label] + "' has no decodable image");
    }
    local.class_counts.emplace_back(ds.class_names[label], loaded);
    local.total += loaded;
  }
  if (report) *report = local;
  return ds;
}

// ---------------------------------------------------------------------------
// preprocess

Tensor preprocess(const Tensor& raw_image, const PreprocessConfig& cfg) {
  cfg.validate();
  if (raw_image.ndim() != 3 || raw_image.dim(0) <= 0 || raw_image.dim(1) <= 0) {
    throw std::invalid_argument("preprocess expects a non-empty (H,W,C) image");
  }
  const int h = raw_image.dim(0), w = raw_image.dim(1);
  int c = raw_image.dim(2);
  if (c != 1 && c != 3 && c != 4) {
    throw std::invalid_argument("preprocess: unsupported channel count " + std::to_string(c));
  }

  // alpha dropped
  Tensor img = raw_image;
  if (c == 4) {
    Tensor rgb({h, w, 3});
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int ch = 0; ch < 3; ++ch) rgb.at(y, x, ch) = img.at(y, x, ch);
      }
    }
    img = std::move(rgb);
    c = 3;
  }

  if (cfg.replicate_channels && c == 3) {
    Tensor gray({h, w, 1});
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
        // equal channels are already gray; keeps replication bitwise idempotent
        gray.at(y, x, 0) = (r == g && g == b) ? r : cfg.gray_r * r + cfg.gray_g * g + cfg.gray_b * b;
      }
    }
    img = std::move(gray);
    c = 1;
  }

  img = resize_image(img, cfg.target_h, cfg.target_w);

  Tensor out({cfg.target_h, cfg.target_w, 3});
  for (int y = 0; y < cfg.target_h; ++y) {
    for (int x = 0; x < cfg.target_w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        double v = (c == 1) ? img.at(y, x, 0) : img.at(y, x, ch);
        out.at(y, x, ch) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// stratified split

namespace {

int round_half_away(double v) {
  return static_cast<int>(v >= 0 ? std::floor(v + 0.5) : std::ceil(v - 0.5));
}

}  // namespace

std::pair<std::vector<int>, std::vector<int>> split_indices(const std::vector<int>& labels,
                                                            const SplitSpec& spec) {
  if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0) {
    throw std::invalid_argument("train_fraction must lie in (0,1)");
  }
  std::mt19937 rng(static_cast<std::uint32_t>(spec.seed));
  std::vector<int> train, test;
  if (!spec.stratified) {
    std::vector<int> idx(labels.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    int test_count = round_half_away(static_cast<double>(labels.size()) * (1.0 - spec.train_fraction));
    test_count = std::clamp(test_count, 0, static_cast<int>(labels.size()) - 1);
    test.assign(idx.begin(), idx.begin() + test_count);
    train.assign(idx.begin() + test_count, idx.end());
  } else {
    int k = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    for (int c = 0; c < k; ++c) {
      std::vector<int> idx;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == c) idx.push_back(static_cast<int>(i));
      }
      if (idx.empty()) continue;
      if (idx.size() < 2) {
        throw std::invalid_argument("class " + std::to_string(c) +
                                    " has a single sample; cannot stratify");
      }
      std::shuffle(idx.begin(), idx.end(), rng);
      int test_count = round_half_away(static_cast<double>(idx.size()) * (1.0 - spec.train_fraction));
      test_count = std::clamp(test_count, 0, static_cast<int>(idx.size()) - 1);
      test.insert(test.end(), idx.begin(), idx.begin() + test_count);
      train.insert(train.end(), idx.begin() + test_count, idx.end());
    }
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, const SplitSpec& spec) {
  auto [train_idx, test_idx] = split_indices(ds.labels(), spec);
  Dataset train, test;
  train.class_names = ds.class_names;
  test.class_names = ds.class_names;
  for (int i : train_idx) train.samples.push_back(ds.samples[static_cast<std::size_t>(i)]);
  for (int i : test_idx) test.samples.push_back(ds.samples[static_cast<std::size_t>(i)]);
  return {train, test};
}

// ---------------------------------------------------------------------------
// SMOTE

SmoteResult smote_balance(const Tensor& x, const std::vector<int>& y, const SmoteConfig& cfg) {
  if (x.ndim() != 2) throw std::invalid_argument("smote expects a (N,D) matrix");
  if (static_cast<std::size_t>(x.dim(0)) != y.size()) {
    throw std::invalid_argument("smote row count does not match label count");
  }
  if (cfg.k_neighbors < 1) throw std::invalid_argument("smote k_neighbors must be >= 1");
  const int n = x.dim(0), d = x.dim(1);

  std::set<int> distinct(y.begin(), y.end());
  if (distinct.size() <= 1) {
    return {x, y, true};
  }
  std::vector<std::vector<int>> by_class;
  int k_classes = *std::max_element(y.begin(), y.end()) + 1;
  by_class.resize(static_cast<std::size_t>(k_classes));
  for (int i = 0; i < n; ++i) by_class[static_cast<std::size_t>(y[i])].push_back(i);
  std::size_t max_count = 0;
  for (const auto& v : by_class) max_count = std::max(max_count, v.size());

  Tensor out = x;
  std::vector<int> out_y = y;
  std::vector<double> synth;
  std::mt19937 rng(static_cast<std::uint32_t>(cfg.seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (int c = 0; c < k_classes; ++c) {
    const auto& idx = by_class[static_cast<std::size_t>(c)];
    if (idx.empty() || idx.size() == max_count) continue;
    if (static_cast<std::size_t>(cfg.k_neighbors) >= idx.size()) {
      throw std::invalid_argument("smote k_neighbors (" + std::to_string(cfg.k_neighbors) +
                                  ") must be smaller than class size (" +
                                  std::to_string(idx.size()) + ")");
    }
    // brute-force k nearest same-class neighbors
    std::vector<std::vector<int>> neighbors(idx.size());
    for (std::size_t a = 0; a < idx.size(); ++a) {
      std::vector<std::pair<double, int>> dist;
      dist.reserve(idx.size() - 1);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        if (a == b) continue;
        double s = 0.0;
        const double* pa = x.data() + static_cast<std::size_t>(idx[a]) * d;
        const double* pb = x.data() + static_cast<std::size_t>(idx[b]) * d;
        for (int j = 0; j < d; ++j) {
          double diff = pa[j] - pb[j];
          s += diff * diff;
        }
        dist.emplace_back(s, idx[b]);
      }
      std::stable_sort(dist.begin(), dist.end(),
                       [](const auto& p, const auto& q) { return p.first < q.first; });
      for (int j = 0; j < cfg.k_neighbors; ++j) neighbors[a].push_back(dist[static_cast<std::size_t>(j)].second);
    }
    std::uniform_int_distribution<int> base_dist(0, static_cast<int>(idx.size()) - 1);
    std::uniform_int_distribution<int> nb_dist(0, cfg.k_neighbors - 1);
    std::size_t need = max_count - idx.size();
    for (std::size_t t = 0; t < need; ++t) {
      int a = base_dist(rng);
      int b = neighbors[static_cast<std::size_t>(a)][static_cast<std::size_t>(nb_dist(rng))];
      double lam = unit(rng);
      const double* pa = x.data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(a)]) * d;
      const double* pb = x.data() + static_cast<std::size_t>(b) * d;
      for (int j = 0; j < d; ++j) synth.push_back(pa[j] + lam * (pb[j] - pa[j]));
      out_y.push_back(c);
    }
  }

  int total = static_cast<int>(out_y.size());
  Tensor balanced({total, d});
  std::copy(out.data(), out.data() + out.size(), balanced.data());
  std::copy(synth.begin(), synth.end(), balanced.data() + out.size());
  return {std::move(balanced), std::move(out_y), false};
}

Dataset smote_balance_images(const Dataset& ds, const SmoteConfig& cfg) {
  if (ds.samples.empty()) return ds;
  Tensor flat = stack_images(ds);
  const int h = flat.dim(1), w = flat.dim(2), c = flat.dim(3);
  Tensor x = flat.reshaped({flat.dim(0), h * w * c});
  SmoteResult r = smote_balance(x, ds.labels(), cfg);
  Dataset out;
  out.class_names = ds.class_names;
  out.samples = ds.samples;
  std::vector<int> synth_counter(ds.class_names.size(), 0);
  for (std::size_t i = ds.samples.size(); i < r.y.size(); ++i) {
    Sample s;
    s.label = r.y[i];
    s.class_name = ds.class_names[static_cast<std::size_t>(s.label)];
    s.source_path = "smote://" + s.class_name + "/" +
                    std::to_string(synth_counter[static_cast<std::size_t>(s.label)]++);
    s.image = Tensor({h, w, c});
    std::copy(r.x.data() + i * static_cast<std::size_t>(h) * w * c,
              r.x.data() + (i + 1) * static_cast<std::size_t>(h) * w * c, s.image.data());
    out.samples.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor one_hot(const std::vector<int>& y, int num_classes) {
  if (num_classes <= 0) throw std::invalid_argument("one_hot needs a positive class count");
  Tensor out({static_cast<int>(y.size()), num_classes});
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || y[i] >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(y[i]) + " out of range [0," +
                                  std::to_string(num_classes) + ")");
    }
    out.at(static_cast<int>(i), y[i]) = 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic data

Dataset make_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.num_classes <= 0 || spec.per_class <= 0 || spec.height <= 0 || spec.width <= 0) {
    throw std::invalid_argument("synthetic spec counts must be positive");
  }
  Dataset ds;
  for (int c = 0; c < spec.num_classes; ++c) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "class_%02d", c);
    ds.class_names.emplace_back(buf);
  }
  std::mt19937 rng(static_cast<std::uint32_t>(spec.seed));
  std::normal_distribution<double> noise(0.0, 0.18 * (1.0 - spec.separability) + 0.02);
  const double pi = 3.14159265358979323846;
  const int h = spec.height, w = spec.width;

  for (int c = 0; c < spec.num_classes; ++c) {
    // class signature: intensity offset, blob position, grating frequency
    double dc = 0.12 * c - 0.06 * (spec.num_classes - 1);
    double angle = 2.0 * pi * c / spec.num_classes;
    double cy = h / 2.0 + (h / 4.0) * std::sin(angle);
    double cx = w / 2.0 + (w / 4.0) * std::cos(angle);
    double sigma = h / 8.0;
    double freq = 2.0 + 3.0 * c;
    double theta = pi * c / std::max(1, spec.num_classes);
    for (int i = 0; i < spec.per_class; ++i) {
      Sample s;
      s.label = c;
      s.class_name = ds.class_names[static_cast<std::size_t>(c)];
      s.source_path = "synthetic://" + s.class_name + "/" + std::to_string(i);
      s.image = Tensor({h, w, 3});
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double dy = (y - cy) / sigma, dx = (x - cx) / sigma;
          double blob = 0.45 * std::exp(-0.5 * (dy * dy + dx * dx));
          double phase = freq * 2.0 * pi * (x * std::cos(theta) + y * std::sin(theta)) / w;
          double grating = 0.18 * std::sin(phase);
          double pattern = dc + blob + grating;
          double v = std::clamp(0.45 + spec.separability * pattern + noise(rng), 0.0, 1.0);
          for (int ch = 0; ch < 3; ++ch) s.image.at(y, x, ch) = v;
        }
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

Tensor stack_images(const Dataset& ds) {
  if (ds.samples.empty()) throw std::invalid_argument("cannot stack an empty dataset");
  const auto& shape = ds.samples.front().image.shape();
  Tensor out({static_cast<int>(ds.samples.size()), shape[0], shape[1], shape[2]});
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Tensor& img = ds.samples[i].image;
    if (img.shape() != shape) throw std::invalid_argument("stack_images: non-uniform image shapes");
    std::copy(img.data(), img.data() + img.size(), out.data() + i * img.size());
  }
  return out;
}

void write_split_manifest(const fs::path& path, const Dataset& train, const Dataset& test) {
  std::string csv = "path,label,split\n";
  for (const auto& s : train.samples) {
    csv += s.source_path + "," + std::to_string(s.label) + ",train\n";
  }
  for (const auto& s : test.samples) {
    csv += s.source_path + "," + std::to_string(s.label) + ",test\n";
  }
  atomic_write(path, csv);
}

std::uint64_t manifest_hash(const fs::path& path) {
  std::string content = read_file(path);
  return fnv1a64(content.data(), content.size());
}

}  // namespace lungct
