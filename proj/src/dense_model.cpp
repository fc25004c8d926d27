#include "lungct/dense_model.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <random>
#include <stdexcept>

#include "lungct/errors.hpp"
#include "lungct/io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lungct {

BackboneKind backbone_kind_from_string(const std::string& s) {
  if (s == "toy") return BackboneKind::Toy;
  if (s == "densenet169" || s == "pretrained" || s == "pretrained-169") {
    return BackboneKind::DenseNet169;
  }
  throw ConfigError("unknown backbone kind: " + s);
}

std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::Toy ? "toy" : "densenet169";
}

namespace {

// stem + two dense blocks at stride 8; small enough to train on a CPU.
int build_toy_backbone(Sequential& seq, const DenseBranchConfig& cfg, std::mt19937& rng) {
  int c = cfg.toy_width;
  seq.add("stem_conv", std::make_unique<Conv2d>(3, c, 3, 1, 1, false, rng));
  seq.add("stem_bn", std::make_unique<BatchNorm2d>(c));
  seq.add("stem_relu", std::make_unique<ReLU>());
  seq.add("pool1", std::make_unique<AvgPool2d>(2, 2));
  seq.add("block1", std::make_unique<DenseBlock>(
                        DenseBlockSpec{.input_channels = c,
                                       .growth_rate = cfg.toy_growth,
                                       .num_layers = cfg.toy_layers},
                        rng));
  c += cfg.toy_growth * cfg.toy_layers;
  seq.add("pool2", std::make_unique<AvgPool2d>(2, 2));
  seq.add("block2", std::make_unique<DenseBlock>(
                        DenseBlockSpec{.input_channels = c,
                                       .growth_rate = cfg.toy_growth,
                                       .num_layers = cfg.toy_layers},
                        rng));
  c += cfg.toy_growth * cfg.toy_layers;
  seq.add("pool3", std::make_unique<AvgPool2d>(2, 2));
  seq.add("final_bn", std::make_unique<BatchNorm2d>(c));
  seq.add("final_relu", std::make_unique<ReLU>());
  return c;
}

// 169-layer dense topology: growth 32, blocks of 6/12/32/32 bottleneck layers,
// halving transitions. (224,224,3) -> (7,7,1664).
int build_densenet169_backbone(Sequential& seq, std::mt19937& rng) {
  const int growth = 32;
  const int block_layers[4] = {6, 12, 32, 32};
  int c = 64;
  seq.add("stem_conv", std::make_unique<Conv2d>(3, c, 7, 2, 3, false, rng));
  seq.add("stem_bn", std::make_unique<BatchNorm2d>(c));
  seq.add("stem_relu", std::make_unique<ReLU>());
  seq.add("stem_pool", std::make_unique<MaxPool2d>(3, 2, 1));
  for (int b = 0; b < 4; ++b) {
    seq.add("block" + std::to_string(b + 1),
            std::make_unique<DenseBlock>(DenseBlockSpec{.input_channels = c,
                                                        .growth_rate = growth,
                                                        .num_layers = block_layers[b],
                                                        .bottleneck = true},
                                         rng));
    c += growth * block_layers[b];
    if (b < 3) {
      int half = c / 2;
      std::string t = "trans" + std::to_string(b + 1);
      seq.add(t + "_conv", std::make_unique<Conv2d>(c, half, 1, 1, 0, false, rng));
      seq.add(t + "_bn", std::make_unique<BatchNorm2d>(half));
      seq.add(t + "_relu", std::make_unique<ReLU>());
      seq.add(t + "_pool", std::make_unique<AvgPool2d>(2, 2));
      c = half;
    }
  }
  seq.add("final_bn", std::make_unique<BatchNorm2d>(c));
  seq.add("final_relu", std::make_unique<ReLU>());
  return c;
}

Tensor gather_rows(const Tensor& data, const std::vector<int>& idx, int from, int to) {
  std::vector<int> shape = data.shape();
  shape[0] = to - from;
  Tensor out(shape);
  const std::size_t row = data.size() / static_cast<std::size_t>(data.dim(0));
  for (int i = from; i < to; ++i) {
    std::copy(data.data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * row,
              data.data() + (static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) + 1) * row,
              out.data() + static_cast<std::size_t>(i - from) * row);
  }
  return out;
}

}  // namespace

DenseBranchModel::DenseBranchModel(const DenseBranchConfig& cfg) : cfg_(cfg) {
  if (cfg_.num_classes < 2) throw ConfigError("dense branch needs at least 2 classes");
  std::mt19937 rng(static_cast<std::uint32_t>(cfg_.seed));
  if (cfg_.backbone == BackboneKind::Toy) {
    backbone_channels_ = build_toy_backbone(backbone_, cfg_, rng);
    backbone_stride_ = 8;
  } else {
    backbone_channels_ = build_densenet169_backbone(backbone_, rng);
    backbone_stride_ = 32;
  }
  if (cfg_.input_h % backbone_stride_ != 0 || cfg_.input_w % backbone_stride_ != 0) {
    throw ConfigError("input size " + std::to_string(cfg_.input_h) + "x" +
                      std::to_string(cfg_.input_w) + " is not divisible by the backbone stride " +
                      std::to_string(backbone_stride_));
  }
  se_ = std::make_unique<SeBlock>(backbone_channels_, cfg_.se_ratio, rng);
  fpn_ = std::make_unique<FpnFuse>(FpnSpec{.pyramid_channels = cfg_.pyramid_channels, .num_levels = 2},
                                   std::vector<int>{backbone_channels_, backbone_channels_}, rng);
  head_ = std::make_unique<Dense>(cfg_.pyramid_channels, cfg_.num_classes, true, rng);

  if (!cfg_.backbone_weights.empty()) {
    auto entries = read_tensor_file(cfg_.backbone_weights, "LCTW", 1);
    std::vector<std::pair<std::string, Tensor>> pairs;
    pairs.reserve(entries.size());
    for (auto& e : entries) pairs.emplace_back(e.name, std::move(e.tensor));
    load_layer_state(backbone_, "backbone", pairs);
  }
}

Tensor DenseBranchModel::forward(const Tensor& images, bool training) {
  if (images.ndim() != 4 || images.dim(1) != cfg_.input_h || images.dim(2) != cfg_.input_w ||
      images.dim(3) != 3) {
    throw std::invalid_argument("dense branch expects (N," + std::to_string(cfg_.input_h) + "," +
                                std::to_string(cfg_.input_w) + ",3), got " + images.shape_str());
  }
  const bool backbone_training = training && !cfg_.freeze_backbone;
  backbone_out_ = backbone_.forward(images, backbone_training);
  se_out_ = se_->forward(backbone_out_, training);
  coarse_out_ = coarse_pool_.forward(se_out_, training);
  auto fused = fpn_->forward({coarse_out_, se_out_}, training);
  fine_out_ = fused[1];
  Tensor pooled = gap_.forward(fine_out_, training);
  logits_ = head_->forward(pooled, training);
  probs_ = softmax_rows(logits_);
  return probs_;
}

Tensor DenseBranchModel::predict(const Tensor& images) { return forward(images, false); }

Tensor DenseBranchModel::backward_from_logits(const Tensor& grad_logits, bool need_input_grad) {
  Tensor dpool = head_->backward(grad_logits);
  Tensor dfine = gap_.backward(dpool);
  Tensor zero_coarse({coarse_out_.dim(0), coarse_out_.dim(1), coarse_out_.dim(2),
                      cfg_.pyramid_channels});
  auto dlevels = fpn_->backward({zero_coarse, dfine});
  Tensor dse = dlevels[1];
  dse += coarse_pool_.backward(dlevels[0]);
  Tensor dbackbone = se_->backward(dse);
  if (need_input_grad) return backbone_.backward(dbackbone);
  if (!cfg_.freeze_backbone) backbone_.backward(dbackbone);
  return Tensor();
}

std::vector<ParamRef> DenseBranchModel::trainable_params() {
  std::vector<ParamRef> out;
  if (!cfg_.freeze_backbone) backbone_.collect_params("backbone", out);
  se_->collect_params("se", out);
  fpn_->collect_params("fpn", out);
  head_->collect_params("head", out);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> DenseBranchModel::state() {
  std::vector<std::pair<std::string, Tensor*>> out;
  backbone_.collect_state("backbone", out);
  se_->collect_state("se", out);
  fpn_->collect_state("fpn", out);
  head_->collect_state("head", out);
  return out;
}

Tensor DenseBranchModel::cam_activation_and_grad(const Tensor& image, const std::string& layer_id,
                                                 int class_idx, Tensor* grad) {
  if (image.ndim() != 3) throw std::invalid_argument("cam expects a single (H,W,C) image");
  if (class_idx < 0 || class_idx >= cfg_.num_classes) {
    throw std::invalid_argument("class index out of range");
  }
  bool known = false;
  for (const auto& l : cam_layers()) known = known || l == layer_id;
  if (!known) {
    throw std::invalid_argument("layer '" + layer_id + "' has no gradient path; valid layers: " +
                                "backbone_out, se_out, fpn_out");
  }
  Tensor x = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  forward(x, false);
  Tensor dlogits({1, cfg_.num_classes});
  dlogits.at(0, class_idx) = 1.0;

  auto squeeze = [](const Tensor& t) { return t.reshaped({t.dim(1), t.dim(2), t.dim(3)}); };
  Tensor dpool = head_->backward(dlogits);
  Tensor dfine = gap_.backward(dpool);
  if (layer_id == "fpn_out") {
    *grad = squeeze(dfine);
    return squeeze(fine_out_);
  }
  Tensor zero_coarse({coarse_out_.dim(0), coarse_out_.dim(1), coarse_out_.dim(2),
                      cfg_.pyramid_channels});
  auto dlevels = fpn_->backward({zero_coarse, dfine});
  Tensor dse = dlevels[1];
  dse += coarse_pool_.backward(dlevels[0]);
  if (layer_id == "se_out") {
    *grad = squeeze(dse);
    return squeeze(se_out_);
  }
  Tensor dbackbone = se_->backward(dse);
  *grad = squeeze(dbackbone);
  return squeeze(backbone_out_);
}

int argmax_row(const Tensor& matrix, int row) {
  int best = 0;
  for (int c = 1; c < matrix.dim(1); ++c) {
    if (matrix.at(row, c) > matrix.at(row, best)) best = c;
  }
  return best;
}

std::vector<int> argmax_rows(const Tensor& matrix) {
  std::vector<int> out(static_cast<std::size_t>(matrix.dim(0)));
  for (int i = 0; i < matrix.dim(0); ++i) out[static_cast<std::size_t>(i)] = argmax_row(matrix, i);
  return out;
}

double accuracy_of(const Tensor& probs, const Tensor& y_onehot) {
  int correct = 0;
  for (int i = 0; i < probs.dim(0); ++i) {
    if (argmax_row(probs, i) == argmax_row(y_onehot, i)) ++correct;
  }
  return probs.dim(0) > 0 ? static_cast<double>(correct) / probs.dim(0) : 0.0;
}

namespace {

std::pair<double, double> eval_pass(DenseBranchModel& model, const Tensor& x, const Tensor& y,
                                    const FocalLossConfig& loss_cfg, int batch_size) {
  const int n = x.dim(0);
  double loss_sum = 0.0;
  int correct = 0;
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int start = 0; start < n; start += batch_size) {
    int end = std::min(n, start + batch_size);
    Tensor xb = gather_rows(x, idx, start, end);
    Tensor yb = gather_rows(y, idx, start, end);
    Tensor probs = model.forward(xb, false);
    loss_sum += focal_loss(probs, yb, loss_cfg) * (end - start);
    for (int i = 0; i < probs.dim(0); ++i) {
      if (argmax_row(probs, i) == argmax_row(yb, i)) ++correct;
    }
  }
  return {loss_sum / n, static_cast<double>(correct) / n};
}

}  // namespace

TrainHistory train_dense(DenseBranchModel& model, const Tensor& x_train, const Tensor& y_train,
                         const Tensor& x_val, const Tensor& y_val, const FocalLossConfig& loss_cfg,
                         const OptimizerSpec& opt, std::uint64_t seed) {
  if (x_train.ndim() != 4 || x_train.dim(0) == 0) throw std::invalid_argument("empty training set");
  if (x_val.ndim() != 4 || x_val.dim(0) == 0) throw std::invalid_argument("empty validation set");
  if (x_train.dim(0) != y_train.dim(0) || x_val.dim(0) != y_val.dim(0)) {
    throw std::invalid_argument("image/label row count mismatch");
  }
  TrainHistory history;
  history.seed = seed;
  if (opt.epochs == 0) return history;
  if (opt.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");

  Adam adam(opt.learning_rate);
  adam.attach(model.trainable_params());
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  const int n = x_train.dim(0);
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;

  double best_acc = -1.0, best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::pair<std::string, Tensor>> best_state;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), rng);
    double loss_sum = 0.0;
    int correct = 0;
    for (int start = 0; start < n; start += opt.batch_size) {
      int end = std::min(n, start + opt.batch_size);
      Tensor xb = gather_rows(x_train, idx, start, end);
      Tensor yb = gather_rows(y_train, idx, start, end);
      adam.zero_grad();
      Tensor probs = model.forward(xb, true);
      double loss = focal_loss(probs, yb, loss_cfg);
      if (!std::isfinite(loss)) {
        throw ComputeError("non-finite training loss at epoch " + std::to_string(epoch) +
                           "; consider lowering the learning rate");
      }
      Tensor dprobs = focal_loss_grad(probs, yb, loss_cfg);
      Tensor dlogits = softmax_backward(probs, dprobs);
      model.backward_from_logits(dlogits);
      adam.step();
      loss_sum += loss * (end - start);
      for (int i = 0; i < probs.dim(0); ++i) {
        if (argmax_row(probs, i) == argmax_row(yb, i)) ++correct;
      }
    }
    history.train_loss.push_back(loss_sum / n);
    history.train_acc.push_back(static_cast<double>(correct) / n);
    auto [vl, va] = eval_pass(model, x_val, y_val, loss_cfg, opt.batch_size);
    history.val_loss.push_back(vl);
    history.val_acc.push_back(va);
    if (va > best_acc || (va == best_acc && vl < best_loss)) {
      best_acc = va;
      best_loss = vl;
      history.best_epoch = epoch;
      best_state.clear();
      for (auto& [name, t] : model.state()) best_state.emplace_back(name, *t);
    }
  }
  // restore the best-validation weights
  for (auto& [name, t] : model.state()) {
    for (const auto& [bname, btensor] : best_state) {
      if (bname == name) {
        *t = btensor;
        break;
      }
    }
  }
  return history;
}

// ---------------------------------------------------------------------------
// persistence

namespace {

json config_to_json(const DenseBranchConfig& c) {
  json j;
  j["input_h"] = c.input_h;
  j["input_w"] = c.input_w;
  j["backbone"] = to_string(c.backbone);
  j["freeze_backbone"] = c.freeze_backbone;
  j["num_classes"] = c.num_classes;
  j["se_ratio"] = c.se_ratio;
  j["pyramid_channels"] = c.pyramid_channels;
  j["learning_rate"] = c.optimizer.learning_rate;
  j["epochs"] = c.optimizer.epochs;
  j["batch_size"] = c.optimizer.batch_size;
  j["seed"] = c.seed;
  j["toy_width"] = c.toy_width;
  j["toy_growth"] = c.toy_growth;
  j["toy_layers"] = c.toy_layers;
  return j;
}

DenseBranchConfig config_from_json(const json& j) {
  DenseBranchConfig c;
  c.input_h = j.at("input_h");
  c.input_w = j.at("input_w");
  c.backbone = backbone_kind_from_string(j.at("backbone"));
  c.freeze_backbone = j.at("freeze_backbone");
  c.num_classes = j.at("num_classes");
  c.se_ratio = j.at("se_ratio");
  c.pyramid_channels = j.at("pyramid_channels");
  c.optimizer.learning_rate = j.at("learning_rate");
  c.optimizer.epochs = j.at("epochs");
  c.optimizer.batch_size = j.at("batch_size");
  c.seed = j.at("seed");
  c.toy_width = j.at("toy_width");
  c.toy_growth = j.at("toy_growth");
  c.toy_layers = j.at("toy_layers");
  return c;
}

json history_to_json(const TrainHistory& h) {
  json j;
  j["train_loss"] = h.train_loss;
  j["train_acc"] = h.train_acc;
  j["val_loss"] = h.val_loss;
  j["val_acc"] = h.val_acc;
  j["seed"] = h.seed;
  j["best_epoch"] = h.best_epoch;
  return j;
}

TrainHistory history_from_json(const json& j) {
  TrainHistory h;
  h.train_loss = j.at("train_loss").get<std::vector<double>>();
  h.train_acc = j.at("train_acc").get<std::vector<double>>();
  h.val_loss = j.at("val_loss").get<std::vector<double>>();
  h.val_acc = j.at("val_acc").get<std::vector<double>>();
  h.seed = j.at("seed");
  h.best_epoch = j.at("best_epoch");
  return h;
}

}  // namespace

void save_dense_model(DenseBranchModel& model, const std::vector<std::string>& class_names,
                      const TrainHistory& history, const fs::path& dir) {
  fs::create_directories(dir);
  json cfg;
  cfg["schema_version"] = 1;
  cfg["kind"] = "dense";
  cfg["config"] = config_to_json(model.config());
  cfg["class_names"] = class_names;
  atomic_write(dir / "config.json", cfg.dump(2) + "\n");
  atomic_write(dir / "history.json", history_to_json(history).dump(2) + "\n");
  std::vector<TensorFileEntry> entries;
  for (auto& [name, t] : model.state()) entries.push_back({name, *t, false});
  write_tensor_file(dir / "weights.bin", "LCTW", 1, entries);
}

LoadedDenseModel load_dense_model(const fs::path& dir) {
  if (!fs::exists(dir / "config.json")) {
    throw DataError("model artifact missing config.json: " + dir.string());
  }
  json cfg = json::parse(read_file(dir / "config.json"));
  if (cfg.at("schema_version") != 1) throw DataError("unsupported model schema version");
  if (cfg.at("kind") != "dense") throw DataError("artifact is not a dense-branch model");
  LoadedDenseModel out;
  out.model = std::make_unique<DenseBranchModel>(config_from_json(cfg.at("config")));
  out.class_names = cfg.at("class_names").get<std::vector<std::string>>();
  out.history = history_from_json(json::parse(read_file(dir / "history.json")));
  auto entries = read_tensor_file(dir / "weights.bin", "LCTW", 1);
  std::vector<std::pair<std::string, Tensor>> pairs;
  for (auto& e : entries) pairs.emplace_back(e.name, std::move(e.tensor));
  for (auto& [name, t] : out.model->state()) {
    bool found = false;
    for (auto& [ename, et] : pairs) {
      if (ename == name) {
        if (!t->same_shape(et)) throw DataError("weight shape mismatch for " + name);
        *t = et;
        found = true;
        break;
      }
    }
    if (!found) throw DataError("weights.bin missing tensor " + name);
  }
  return out;
}

}  // namespace lungct
