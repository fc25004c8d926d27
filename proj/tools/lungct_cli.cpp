// lungct: batch pipeline for the hybrid lung-CT classifier.
//   prepare  -> split manifests + cached preprocessed tensors + load report
//   train    -> model artifact (dense branch, svm branch, or both)
//   evaluate -> metrics.json / confusion.csv / report.md / ROC curves
//   explain  -> Grad-CAM overlays or kernel SHAP attributions
//   report   -> consolidated comparison across evaluations
//
// Exit codes: 0 success, 1 usage/config error, 2 data/artifact error,
// 3 runtime failure.

#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <stdexcept>
#include <string>
#include <vector>

#include "lungct/commands.hpp"
#include "lungct/config.hpp"
#include "lungct/errors.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string seed;
  std::string out_root;
  bool synthetic = false;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "config file (key = value lines)");
  cmd->add_option("--seed", flags.seed, "master seed");
  cmd->add_option("--out", flags.out_root, "output root for run directories");
  cmd->add_flag("--synthetic", flags.synthetic, "use the synthetic dataset generator");
  cmd->add_option("--set", flags.sets, "extra key=value overrides")->take_all();
}

// defaults < config file < flags
lungct::RunConfig resolve_config(const CommonFlags& flags) {
  lungct::RunConfig cfg = lungct::RunConfig::defaults();
  if (!flags.config_path.empty()) cfg.apply_file(flags.config_path);
  if (!flags.seed.empty()) cfg.apply_override("seed", flags.seed);
  if (!flags.out_root.empty()) cfg.apply_override("out.root", flags.out_root);
  if (flags.synthetic) cfg.apply_override("data.synthetic", "true");
  for (const auto& s : flags.sets) cfg.apply_assignment(s);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid lung-CT classification toolkit"};
  app.require_subcommand(1);

  CommonFlags prepare_flags, train_flags, eval_flags, explain_flags, report_flags;
  std::string branch = "both", data_dir, model_dir, method = "gradcam", image_path;
  int index = 0, class_idx = -1;
  std::vector<std::string> eval_dirs;

  CLI::App* prepare = app.add_subcommand("prepare", "load, preprocess, split and cache a dataset");
  add_common(prepare, prepare_flags);

  CLI::App* train = app.add_subcommand("train", "train the dense and/or svm branch");
  add_common(train, train_flags);
  train->add_option("--branch", branch, "dense | svm | both");
  train->add_option("--data", data_dir, "prepare run directory")->required();

  CLI::App* evaluate = app.add_subcommand("evaluate", "score a model and emit a report");
  add_common(evaluate, eval_flags);
  evaluate->add_option("--model", model_dir, "model artifact directory")->required();
  evaluate->add_option("--data", data_dir, "prepare run directory")->required();

  CLI::App* explain = app.add_subcommand("explain", "grad-cam or shap for one image");
  add_common(explain, explain_flags);
  explain->add_option("--model", model_dir, "model artifact directory")->required();
  explain->add_option("--data", data_dir, "prepare run directory");
  explain->add_option("--method", method, "gradcam | shap");
  explain->add_option("--index", index, "image index within the evaluation split");
  explain->add_option("--image", image_path, "explain an image file instead of a split index");
  explain->add_option("--class", class_idx, "class to explain (default: predicted)");

  CLI::App* report = app.add_subcommand("report", "consolidate evaluation runs");
  add_common(report, report_flags);
  report->add_option("--runs", eval_dirs, "evaluation run directories")->required()->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    std::filesystem::path run_dir;
    if (prepare->parsed()) {
      run_dir = lungct::cmd_prepare(resolve_config(prepare_flags));
    } else if (train->parsed()) {
      run_dir = lungct::cmd_train(resolve_config(train_flags), branch, data_dir);
    } else if (evaluate->parsed()) {
      run_dir = lungct::cmd_evaluate(resolve_config(eval_flags), model_dir, data_dir);
    } else if (explain->parsed()) {
      run_dir = lungct::cmd_explain(resolve_config(explain_flags), model_dir, data_dir, method,
                                    index, image_path, class_idx);
    } else if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(eval_dirs.begin(), eval_dirs.end());
      run_dir = lungct::cmd_report(resolve_config(report_flags), dirs);
    }
    std::printf("run_dir: %s\n", run_dir.string().c_str());
    return 0;
  } catch (const lungct::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const lungct::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return 3;
  }
}
