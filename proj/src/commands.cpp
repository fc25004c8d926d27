#include "lungct/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <json.hpp>
#include <random>
#include <set>
#include <sstream>

#include "lungct/datapipe.hpp"
#include "lungct/dense_model.hpp"
#include "lungct/errors.hpp"
#include "lungct/explain.hpp"
#include "lungct/image.hpp"
#include "lungct/io.hpp"
#include "lungct/metrics.hpp"
#include "lungct/plot.hpp"
#include "lungct/svm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lungct {

namespace {

constexpr const char* kCacheMagic = "LCTT";
constexpr const char* kFeatureMagic = "LCTF";

PreprocessConfig preprocess_config(const RunConfig& cfg) {
  PreprocessConfig p;
  p.target_h = cfg.get_int("preprocess.height");
  p.target_w = cfg.get_int("preprocess.width");
  p.replicate_channels = cfg.get_bool("preprocess.replicate_channels");
  p.gray_r = cfg.get_double("preprocess.gray_r");
  p.gray_g = cfg.get_double("preprocess.gray_g");
  p.gray_b = cfg.get_double("preprocess.gray_b");
  p.validate();
  return p;
}

void write_effective_config(const RunConfig& cfg, const fs::path& run_dir) {
  atomic_write(run_dir / "effective.config", cfg.serialize());
}

Tensor labels_to_tensor(const std::vector<int>& y) {
  Tensor t({static_cast<int>(y.size())});
  for (std::size_t i = 0; i < y.size(); ++i) t[i] = static_cast<double>(y[i]);
  return t;
}

std::vector<int> tensor_to_labels(const Tensor& t) {
  std::vector<int> y(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) y[i] = static_cast<int>(t[i]);
  return y;
}

// SMOTE over flattened image rows; returns the balanced batch.
std::pair<Tensor, std::vector<int>> smote_images(const Tensor& x, const std::vector<int>& y,
                                                 int k_neighbors, std::uint64_t seed) {
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  SmoteResult r = smote_balance(x.reshaped({n, h * w * c}), y, {k_neighbors, seed});
  return {r.x.reshaped({r.x.dim(0), h, w, c}), r.y};
}

std::vector<int> class_counts_of(const std::vector<int>& y, int k) {
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int v : y) counts[static_cast<std::size_t>(v)]++;
  return counts;
}

std::string detect_model_kind(const fs::path& model_dir) {
  if (fs::exists(model_dir / "config.json")) return "dense";
  if (fs::exists(model_dir / "svm.json")) return "svm";
  throw DataError("no model artifact found at " + model_dir.string());
}

ExtractorConfig extractor_config(const RunConfig& cfg) {
  ExtractorConfig e;
  e.input_h = e.input_w = cfg.get_int("svm.extractor_input");
  e.final_channels = cfg.get_int("svm.extractor_channels");
  e.final_spatial = cfg.get_int("svm.extractor_spatial");
  e.seed = cfg.get_u64("seed");
  return e;
}

FocalLossConfig focal_config(const RunConfig& cfg, const std::vector<int>& counts) {
  FocalLossConfig f;
  f.gamma = cfg.get_double("focal.gamma");
  std::string alpha = cfg.get_string("focal.alpha");
  if (alpha == "auto") {
    f.alpha = inverse_frequency_alpha(counts);
  } else {
    RunConfig tmp = cfg;  // reuse the list parser
    tmp.apply_override("focal.alpha", alpha);
    f.alpha = tmp.get_double_list("focal.alpha");
  }
  return f;
}

}  // namespace

fs::path make_run_dir(const fs::path& root, const std::string& command) {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  fs::path base = root / (std::string(stamp) + "-" + command);
  fs::path dir = base;
  for (int suffix = 2; fs::exists(dir); ++suffix) {
    dir = base;
    dir += "-" + std::to_string(suffix);
  }
  fs::create_directories(dir);
  return dir;
}

PreparedData load_prepared(const fs::path& data_dir) {
  if (!fs::exists(data_dir / "cache.bin")) {
    throw DataError("prepared data not found at " + data_dir.string() +
                    " (expected cache.bin from the prepare command)");
  }
  PreparedData out;
  auto entries = read_tensor_file(data_dir / "cache.bin", kCacheMagic, 1);
  for (auto& e : entries) {
    if (e.name == "train_x") out.train_x = std::move(e.tensor);
    if (e.name == "train_y") out.train_y = tensor_to_labels(e.tensor);
    if (e.name == "test_x") out.test_x = std::move(e.tensor);
    if (e.name == "test_y") out.test_y = tensor_to_labels(e.tensor);
  }
  if (out.train_x.empty() || out.test_x.empty()) {
    throw DataError("cache.bin is missing train/test tensors");
  }
  json classes = json::parse(read_file(data_dir / "classes.json"));
  out.class_names = classes.at("class_names").get<std::vector<std::string>>();
  out.manifest_hash_hex = to_hex(manifest_hash(data_dir / "manifest.csv"));
  return out;
}

// ---------------------------------------------------------------------------
// prepare

fs::path cmd_prepare(const RunConfig& cfg) {
  const std::uint64_t seed = cfg.get_u64("seed");
  LoadReport report;
  Dataset ds;
  if (cfg.get_bool("data.synthetic")) {
    SyntheticSpec spec;
    spec.num_classes = cfg.get_int("synthetic.classes");
    spec.per_class = cfg.get_int("synthetic.per_class");
    spec.height = cfg.get_int("synthetic.height");
    spec.width = cfg.get_int("synthetic.width");
    spec.separability = cfg.get_double("synthetic.separability");
    spec.seed = seed;
    ds = make_synthetic_dataset(spec);
    for (const auto& name : ds.class_names) report.class_counts.emplace_back(name, spec.per_class);
    report.total = static_cast<int>(ds.samples.size());
  } else {
    std::string root = cfg.get_string("data.root");
    if (root.empty()) {
      throw ConfigError("prepare needs data.root or data.synthetic=true (--synthetic)");
    }
    ds = load_dataset(root, &report);
  }

  PreprocessConfig pre = preprocess_config(cfg);
  for (auto& s : ds.samples) s.image = preprocess(s.image, pre);

  SplitSpec split{cfg.get_double("split.train_fraction"), seed, cfg.get_bool("split.stratified")};
  auto [train, test] = stratified_split(ds, split);

  fs::path run_dir = make_run_dir(cfg.get_string("out.root"), "prepare");
  write_effective_config(cfg, run_dir);
  write_split_manifest(run_dir / "manifest.csv", train, test);
  atomic_write(run_dir / "load_report.json", report.to_json());
  json classes;
  classes["class_names"] = ds.class_names;
  atomic_write(run_dir / "classes.json", classes.dump(2) + "\n");

  std::vector<TensorFileEntry> entries;
  entries.push_back({"train_x", stack_images(train), true});
  entries.push_back({"train_y", labels_to_tensor(train.labels()), false});
  entries.push_back({"test_x", stack_images(test), true});
  entries.push_back({"test_y", labels_to_tensor(test.labels()), false});
  write_tensor_file(run_dir / "cache.bin", kCacheMagic, 1, entries);
  return run_dir;
}

// ---------------------------------------------------------------------------
// train

namespace {

fs::path train_dense_branch(const RunConfig& cfg, const PreparedData& data, const fs::path& run_dir) {
  const std::uint64_t seed = cfg.get_u64("seed");
  const int k = static_cast<int>(data.class_names.size());

  Tensor train_x = data.train_x;
  std::vector<int> train_y = data.train_y;
  if (cfg.get_bool("smote.dense")) {
    std::tie(train_x, train_y) = smote_images(train_x, train_y, cfg.get_int("smote.k_neighbors"), seed);
  }

  DenseBranchConfig mc;
  mc.input_h = cfg.get_int("dense.input_h");
  mc.input_w = cfg.get_int("dense.input_w");
  mc.backbone = backbone_kind_from_string(cfg.get_string("dense.backbone"));
  mc.freeze_backbone = cfg.get_bool("dense.freeze_backbone");
  mc.num_classes = k;
  mc.se_ratio = cfg.get_int("dense.se_ratio");
  mc.pyramid_channels = cfg.get_int("dense.pyramid_channels");
  mc.optimizer.learning_rate = cfg.get_double("dense.learning_rate");
  mc.optimizer.epochs = cfg.get_int("dense.epochs");
  mc.optimizer.batch_size = cfg.get_int("dense.batch_size");
  mc.seed = seed;
  mc.toy_width = cfg.get_int("dense.toy_width");
  mc.toy_growth = cfg.get_int("dense.toy_growth");
  mc.toy_layers = cfg.get_int("dense.toy_layers");
  mc.backbone_weights = cfg.get_string("dense.backbone_weights");

  // the dense branch resizes cached images to its own input size at batch time
  Tensor x_train = resize_batch(train_x, mc.input_h, mc.input_w);
  Tensor x_val = resize_batch(data.test_x, mc.input_h, mc.input_w);
  Tensor y_train = one_hot(train_y, k);
  Tensor y_val = one_hot(data.test_y, k);

  DenseBranchModel model(mc);
  FocalLossConfig loss_cfg = focal_config(cfg, class_counts_of(train_y, k));
  TrainHistory history =
      train_dense(model, x_train, y_train, x_val, y_val, loss_cfg, mc.optimizer, seed);

  fs::path model_dir = run_dir / "model";
  save_dense_model(model, data.class_names, history, model_dir);
  if (!history.train_loss.empty()) {
    plot_lines_png(run_dir / "training_curves.png",
                   {{"train_acc", history.train_acc}, {"val_acc", history.val_acc}},
                   "accuracy per epoch");
  }
  return model_dir;
}

fs::path train_svm_branch(const RunConfig& cfg, const PreparedData& data, const fs::path& run_dir) {
  const std::uint64_t seed = cfg.get_u64("seed");

  Tensor train_x = data.train_x;
  std::vector<int> train_y = data.train_y;
  if (cfg.get_bool("smote.svm")) {
    std::tie(train_x, train_y) = smote_images(train_x, train_y, cfg.get_int("smote.k_neighbors"), seed);
  }

  SvmPipeline pipeline;
  pipeline.extractor = std::make_unique<FeatureExtractor>(extractor_config(cfg));
  pipeline.class_names = data.class_names;
  const auto& ec = pipeline.extractor->config();
  Tensor x_train = resize_batch(train_x, ec.input_h, ec.input_w);
  FeatureMatrix fm = extract_features(x_train, *pipeline.extractor);
  pipeline.scaler = fit_scaler(fm.values);
  Tensor scaled = apply_scaler(fm.values, pipeline.scaler);

  SvmTrainOptions opts;
  opts.seed = seed;
  std::string gamma = cfg.get_string("svm.gamma");
  opts.kernel.gamma = gamma == "scale" ? 0.0 : std::stod(gamma);
  std::string kernel = cfg.get_string("svm.kernel");
  if (kernel == "grid") {
    GridSearchResult grid =
        hyperparam_search(scaled, train_y, {KernelKind::Linear, KernelKind::Rbf},
                          cfg.get_double_list("svm.grid_c"), cfg.get_int("svm.folds"), seed);
    opts.kernel.kind = grid.kernel.kind;
    opts.c = grid.c;
    json cv;
    cv["best"] = {{"kernel", to_string(grid.kernel.kind)}, {"c", grid.c},
                  {"mean_accuracy", grid.best_accuracy}};
    cv["table"] = json::array();
    for (const auto& cell : grid.table) {
      cv["table"].push_back({{"kernel", to_string(cell.kernel)}, {"c", cell.c},
                             {"mean_accuracy", cell.mean_accuracy}});
    }
    atomic_write(run_dir / "cv_table.json", cv.dump(2) + "\n");
  } else {
    opts.kernel.kind = kernel_kind_from_string(kernel);
    opts.c = cfg.get_double("svm.c");
  }
  pipeline.svm = svm_train(scaled, train_y, opts);
  pipeline.fingerprint = pipeline.extractor->fingerprint();

  fs::path model_dir = run_dir / "model";
  save_svm_pipeline(pipeline, model_dir);
  // cache the (unscaled) training features for SHAP backgrounds
  std::vector<TensorFileEntry> feat;
  feat.push_back({"features", fm.values, false});
  feat.push_back({"labels", labels_to_tensor(train_y), false});
  write_tensor_file(model_dir / "features.bin", kFeatureMagic, 1, feat);
  return model_dir;
}

}  // namespace

fs::path cmd_train(const RunConfig& cfg, const std::string& branch, const fs::path& data_dir) {
  if (branch != "dense" && branch != "svm" && branch != "both") {
    throw ConfigError("unknown branch '" + branch + "' (dense | svm | both)");
  }
  PreparedData data = load_prepared(data_dir);
  fs::path run_dir = make_run_dir(cfg.get_string("out.root"), "train-" + branch);
  write_effective_config(cfg, run_dir);
  if (branch == "dense") {
    train_dense_branch(cfg, data, run_dir);
  } else if (branch == "svm") {
    train_svm_branch(cfg, data, run_dir);
  } else {
    fs::path dense_dir = run_dir / "dense";
    fs::create_directories(dense_dir);
    train_dense_branch(cfg, data, dense_dir);
    fs::path svm_dir = run_dir / "svm";
    fs::create_directories(svm_dir);
    train_svm_branch(cfg, data, svm_dir);
  }
  return run_dir;
}

// ---------------------------------------------------------------------------
// evaluate

namespace {

struct Scored {
  Tensor scores;  // (N,K)
  std::vector<int> predictions;
  std::string model_id;
};

Scored score_split(const RunConfig& cfg, const fs::path& model_dir, const Tensor& x) {
  Scored out;
  std::string kind = detect_model_kind(model_dir);
  if (kind == "dense") {
    auto loaded = load_dense_model(model_dir);
    Tensor resized = resize_batch(x, loaded.model->config().input_h, loaded.model->config().input_w);
    out.scores = loaded.model->predict(resized);
    out.predictions = argmax_rows(out.scores);
    out.model_id = "dense-" + to_string(loaded.model->config().backbone) + "-seed" +
                   std::to_string(loaded.model->config().seed);
  } else {
    SvmPipeline pipeline = load_svm_pipeline(model_dir);
    const auto& ec = pipeline.extractor->config();
    Tensor resized = resize_batch(x, ec.input_h, ec.input_w);
    out.scores = pipeline.decide_images(resized);
    out.predictions.assign(static_cast<std::size_t>(out.scores.dim(0)), 0);
    for (int i = 0; i < out.scores.dim(0); ++i) {
      int best = 0;
      for (int c = 1; c < out.scores.dim(1); ++c) {
        if (out.scores.at(i, c) > out.scores.at(i, best)) best = c;
      }
      out.predictions[static_cast<std::size_t>(i)] = best;
    }
    out.model_id = "svm-" + to_string(pipeline.svm.kernel.kind) + "-" + to_hex(pipeline.fingerprint);
  }
  (void)cfg;
  return out;
}

}  // namespace

fs::path cmd_evaluate(const RunConfig& cfg, const fs::path& model_dir, const fs::path& data_dir) {
  PreparedData data = load_prepared(data_dir);
  std::string split = cfg.get_string("eval.split");
  if (split != "test" && split != "train") throw ConfigError("eval.split must be test or train");
  const Tensor& x = split == "test" ? data.test_x : data.train_x;
  const std::vector<int>& y = split == "test" ? data.test_y : data.train_y;

  Scored scored = score_split(cfg, model_dir, x);

  EvalReport report = classification_report(
      make_confusion_matrix(y, scored.predictions, static_cast<int>(data.class_names.size()),
                            data.class_names));
  add_roc_curves(report, y, scored.scores);
  report.model_id = scored.model_id;
  report.manifest_hash = data.manifest_hash_hex;

  fs::path run_dir = make_run_dir(cfg.get_string("out.root"), "evaluate");
  write_effective_config(cfg, run_dir);
  emit_report(report, run_dir);
  return run_dir;
}

// ---------------------------------------------------------------------------
// explain

fs::path cmd_explain(const RunConfig& cfg, const fs::path& model_dir, const fs::path& data_dir,
                     const std::string& method, int index, const std::string& image_path,
                     int class_idx) {
  if (method != "gradcam" && method != "shap") {
    throw ConfigError("unknown explain method '" + method + "' (gradcam | shap)");
  }
  std::string kind = detect_model_kind(model_dir);

  Tensor image;  // (H,W,3) at cache resolution
  std::string image_origin;
  if (!image_path.empty()) {
    image = preprocess(decode_image_file(image_path), preprocess_config(cfg));
    image_origin = image_path;
  } else {
    PreparedData data = load_prepared(data_dir);
    std::string split = cfg.get_string("eval.split");
    const Tensor& x = split == "test" ? data.test_x : data.train_x;
    if (index < 0 || index >= x.dim(0)) {
      throw ConfigError("explain index " + std::to_string(index) + " out of range for the " +
                        split + " split (" + std::to_string(x.dim(0)) + " images)");
    }
    image = Tensor({x.dim(1), x.dim(2), x.dim(3)});
    std::copy(x.data() + static_cast<std::size_t>(index) * image.size(),
              x.data() + static_cast<std::size_t>(index + 1) * image.size(), image.data());
    image_origin = split + "[" + std::to_string(index) + "]";
  }

  fs::path run_dir = make_run_dir(cfg.get_string("out.root"), "explain");
  write_effective_config(cfg, run_dir);
  json meta;
  meta["method"] = method;
  meta["image"] = image_origin;
  meta["model"] = kind;

  if (kind == "dense") {
    if (method != "gradcam") {
      throw ConfigError("shap explains the svm feature space; use --method gradcam for the dense branch");
    }
    auto loaded = load_dense_model(model_dir);
    const auto& mc = loaded.model->config();
    Tensor model_img = resize_batch(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}),
                                    mc.input_h, mc.input_w)
                           .reshaped({mc.input_h, mc.input_w, 3});
    int cls = class_idx;
    if (cls < 0) {
      Tensor probs = loaded.model->predict(model_img.reshaped({1, mc.input_h, mc.input_w, 3}));
      cls = argmax_row(probs, 0);
    }
    Heatmap hm = grad_cam(*loaded.model, model_img, cls, cfg.get_string("explain.layer"));
    Tensor blended = overlay(hm, image, cfg.get_double("explain.opacity"));
    save_image_png(run_dir / "overlay.png", blended);
    write_tensor_file(run_dir / "heatmap.bin", "LCTH", 1, {{"heatmap", hm.values, false}});
    meta["class"] = cls;
    meta["class_name"] = loaded.class_names[static_cast<std::size_t>(cls)];
    meta["layer"] = hm.layer_id;
    meta["all_zero"] = hm.all_zero;
  } else {
    SvmPipeline pipeline = load_svm_pipeline(model_dir);
    const auto& ec = pipeline.extractor->config();
    Tensor model_img = resize_batch(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}),
                                    ec.input_h, ec.input_w);
    int cls = class_idx;
    if (cls < 0) cls = pipeline.predict_images(model_img)[0];
    meta["class"] = cls;
    meta["class_name"] = pipeline.class_names[static_cast<std::size_t>(cls)];
    if (method == "gradcam") {
      Heatmap hm = grad_cam_svm(pipeline, model_img.reshaped({ec.input_h, ec.input_w, 3}), cls);
      Tensor blended = overlay(hm, image, cfg.get_double("explain.opacity"));
      save_image_png(run_dir / "overlay.png", blended);
      write_tensor_file(run_dir / "heatmap.bin", "LCTH", 1, {{"heatmap", hm.values, false}});
      meta["layer"] = hm.layer_id;
      meta["all_zero"] = hm.all_zero;
    } else {
      auto feat_entries = read_tensor_file(model_dir / "features.bin", kFeatureMagic, 1);
      Tensor train_features;
      for (auto& e : feat_entries) {
        if (e.name == "features") train_features = std::move(e.tensor);
      }
      if (train_features.empty()) throw DataError("features.bin has no feature matrix");
      Tensor background = summarize_background(train_features, cfg.get_int("explain.background"),
                                               cfg.get_u64("seed"));
      FeatureMatrix fm = extract_features(model_img, *pipeline.extractor);
      pipeline.check_fingerprint(fm);
      std::vector<double> x_row(static_cast<std::size_t>(fm.values.dim(1)));
      for (int j = 0; j < fm.values.dim(1); ++j) x_row[static_cast<std::size_t>(j)] = fm.values.at(0, j);

      PredictFn f = [&pipeline, cls](const std::vector<double>& v) {
        Tensor row({1, static_cast<int>(v.size())}, v);
        Tensor scaled = apply_scaler(row, pipeline.scaler);
        return svm_decision(pipeline.svm, scaled).at(0, cls);
      };
      ShapExplanation e = kernel_shap(f, x_row, background, cfg.get_int("explain.samples"),
                                      cfg.get_u64("seed"), cls);
      json shap;
      shap["base_value"] = e.base_value;
      shap["fx"] = e.fx;
      shap["class"] = cls;
      shap["phi"] = e.phi;
      json feature_ids = json::array();
      for (std::size_t j = 0; j < e.phi.size(); ++j) feature_ids.push_back("f" + std::to_string(j));
      shap["feature_ids"] = std::move(feature_ids);
      atomic_write(run_dir / "shap_explanation.json", shap.dump(2) + "\n");
      auto plots = write_plot_data({e}, run_dir);
      meta["all_zero"] = plots.all_zero;
      double additivity = e.base_value;
      for (double p : e.phi) additivity += p;
      meta["additivity_gap"] = std::abs(additivity - e.fx);
    }
  }
  atomic_write(run_dir / "explanation.json", meta.dump(2) + "\n");
  return run_dir;
}

// ---------------------------------------------------------------------------
// report

fs::path cmd_report(const RunConfig& cfg, const std::vector<fs::path>& eval_dirs) {
  if (eval_dirs.empty()) throw ConfigError("report needs at least one evaluation directory");
  std::vector<EvalReport> reports;
  for (const auto& dir : eval_dirs) {
    fs::path metrics = dir / "metrics.json";
    if (!fs::exists(metrics)) throw DataError("no metrics.json under " + dir.string());
    reports.push_back(report_from_json(read_file(metrics)));
  }

  fs::path run_dir = make_run_dir(cfg.get_string("out.root"), "report");
  write_effective_config(cfg, run_dir);

  json consolidated;
  consolidated["schema_version"] = 1;
  consolidated["models"] = json::array();
  std::string md = "# Branch comparison\n\n| Model | Accuracy |";
  if (!reports.empty()) {
    for (const auto& m : reports.front().per_class) md += " F1 (" + m.name + ") |";
  }
  md += "\n|---|---|";
  for (std::size_t i = 0; i < reports.front().per_class.size(); ++i) md += "---|";
  md += "\n";
  for (const auto& r : reports) {
    json entry;
    entry["model_id"] = r.model_id;
    entry["accuracy"] = r.accuracy;
    entry["manifest_hash"] = r.manifest_hash;
    json per_class = json::array();
    char acc[16];
    std::snprintf(acc, sizeof(acc), "%.2f", round2(r.accuracy));
    md += "| " + r.model_id + " | " + acc + " |";
    for (const auto& m : r.per_class) {
      per_class.push_back({{"name", m.name}, {"f1", m.f1}});
      char f1[16];
      std::snprintf(f1, sizeof(f1), "%.2f", round2(m.f1));
      md += std::string(" ") + f1 + " |";
    }
    md += "\n";
    entry["per_class"] = std::move(per_class);
    consolidated["models"].push_back(std::move(entry));
  }
  md += "\nPer-model reports:\n\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    md += "---\n\n" + report_to_markdown(reports[i]);
  }
  atomic_write(run_dir / "comparison.json", consolidated.dump(2) + "\n");
  atomic_write(run_dir / "comparison.md", md);
  return run_dir;
}

}  // namespace lungct
