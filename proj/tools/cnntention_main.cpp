// Command-line front end: train / eval / gradcam / gradcheck / bench.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cnntention/checkpoint.hpp"
#include "cnntention/data.hpp"
#include "cnntention/gradcam.hpp"
#include "cnntention/gradcheck.hpp"
#include "cnntention/resnet.hpp"
#include "cnntention/training.hpp"

namespace fs = std::filesystem;
using namespace cnntention;

namespace {

struct RunSpec {
  std::string dataset = "cifar10";  // cifar10 | mnist
  std::string model = "baseline";   // baseline | selfatt | mha | cbam
  std::optional<bool> weighted;     // preset: true for selfatt/mha, false otherwise
  std::size_t reduction_ratio = 16;
  std::size_t heads = 8;
  TrainConfig train;
  bool lr_given = false;
  std::string data_dir;
  std::string out_dir = "runs/run";
  std::string checkpoint;
  std::string split = "test";
  std::string layer = "stage3";
  int image_index = 0;
  int target_class = -1;  // -1: use the predicted class
  int threads = 0;        // 0: hardware default
  std::size_t bench_batches = 10;
};

AttentionKind attention_kind(const std::string& model) {
  if (model == "baseline") return AttentionKind::kNone;
  if (model == "selfatt") return AttentionKind::kSelfAtt;
  if (model == "mha") return AttentionKind::kMha;
  if (model == "cbam") return AttentionKind::kCbam;
  fail("unknown model '" + model + "' (expected baseline|selfatt|mha|cbam)");
}

ModelConfig model_config(const RunSpec& spec) {
  ModelConfig cfg;
  cfg.input_channels = spec.dataset == "mnist" ? 1 : 3;
  cfg.attention = attention_kind(spec.model);
  const bool weighted_default =
      cfg.attention == AttentionKind::kSelfAtt || cfg.attention == AttentionKind::kMha;
  cfg.weighted = cfg.attention != AttentionKind::kNone &&
                 spec.weighted.value_or(weighted_default);
  cfg.reduction_ratio = spec.reduction_ratio;
  cfg.heads = spec.heads;
  cfg.validate();
  return cfg;
}

// Resolves the directory that actually holds the dataset files: the
// --data-dir / CNNTENTION_DATA_DIR root itself or its <dataset>/ subdirectory.
std::string dataset_dir(const RunSpec& spec) {
  std::string root = spec.data_dir;
  if (root.empty()) {
    if (const char* env = std::getenv("CNNTENTION_DATA_DIR")) root = env;
  }
  require(!root.empty(),
          "no data directory: pass --data-dir or set CNNTENTION_DATA_DIR");
  const std::string sub = (fs::path(root) / spec.dataset).string();
  const bool is_mnist = spec.dataset == "mnist";
  if (is_mnist ? mnist_present(sub) : cifar10_present(sub)) return sub;
  if (is_mnist ? mnist_present(root) : cifar10_present(root)) return root;
  fail("dataset '" + spec.dataset + "' not found under '" + root + "' (looked in '" + sub +
       "' too); see scripts/fetch_datasets.sh");
}

DataBundle load_bundle(const RunSpec& spec) {
  const std::string dir = dataset_dir(spec);
  if (spec.dataset == "mnist")
    return load_mnist_bundle(dir, spec.train.seed, spec.train.use_val);
  return load_cifar10_bundle(dir, spec.train.seed, spec.train.use_val);
}

std::map<std::string, std::string> config_kv(const RunSpec& spec, const ModelConfig& cfg) {
  auto kv = cfg.to_kv();
  for (const auto& [k, v] : spec.train.to_kv()) kv["train." + k] = v;
  kv["dataset"] = spec.dataset;
  kv["model"] = spec.model;
  kv["threads"] = std::to_string(spec.threads);
  return kv;
}

void write_config_snapshot(const std::string& out_dir,
                           const std::map<std::string, std::string>& kv) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir + "/config.txt", std::ios::trunc);
  require(out.good(), "cannot write '" + out_dir + "/config.txt'");
  for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
}

void apply_threads(const RunSpec& spec) {
  if (spec.threads > 0) set_max_threads(spec.threads);
}

int require_checkpoint(const RunSpec& spec) {
  if (spec.checkpoint.empty()) {
    std::cerr << "error: --checkpoint is required\n";
    return 2;
  }
  if (!fs::exists(spec.checkpoint)) {
    std::cerr << "error: checkpoint '" << spec.checkpoint << "' does not exist\n";
    return 2;
  }
  return 0;
}

// Rebuilds the model a checkpoint was trained with, erroring on any field
// that disagrees with explicitly requested CLI values.
std::unique_ptr<ResNet20<float>> model_from_checkpoint(const Checkpoint& ckpt,
                                                       const RunSpec& spec,
                                                       const CLI::App* cmd) {
  std::map<std::string, std::string> meta = ckpt.meta;
  ModelConfig cfg = ModelConfig::from_kv(meta);
  std::string mismatches;
  auto clash = [&](const std::string& field, const std::string& file_v,
                   const std::string& cli_v) {
    if (file_v != cli_v)
      mismatches += (mismatches.empty() ? "" : ", ") + field + " (checkpoint: " + file_v +
                    ", requested: " + cli_v + ")";
  };
  if (cmd->count("--dataset")) clash("dataset", meta["dataset"], spec.dataset);
  if (cmd->count("--model")) clash("model", meta["model"], spec.model);
  if (cmd->count("--weighted"))
    clash("weighted", meta["weighted"], spec.weighted.value_or(false) ? "1" : "0");
  if (cmd->count("--reduction-ratio"))
    clash("reduction_ratio", meta["reduction_ratio"], std::to_string(spec.reduction_ratio));
  if (cmd->count("--heads")) clash("heads", meta["heads"], std::to_string(spec.heads));
  require(mismatches.empty(), "checkpoint/config mismatch: " + mismatches);

  auto model = std::make_unique<ResNet20<float>>(cfg, /*seed=*/0);
  auto params = model->params();
  apply_checkpoint(ckpt, params);
  return model;
}

int cmd_train(const RunSpec& spec) {
  apply_threads(spec);
  spec.train.validate();
  ModelConfig cfg = model_config(spec);
  auto kv = config_kv(spec, cfg);
  write_config_snapshot(spec.out_dir, kv);

  DataBundle data = load_bundle(spec);
  ResNet20<float> model(cfg, spec.train.seed);
  std::map<std::string, std::string> meta = kv;
  RunMetrics metrics = train(model, data, spec.train, spec.out_dir, meta);

  std::printf("best_val_err=%.6f%% best_epoch=%zu epochs_run=%zu%s\n", metrics.best_val_err,
              metrics.best_epoch, metrics.epochs.size(),
              metrics.stopped_early ? " (early stop)" : "");
  return 0;
}

int cmd_eval(const RunSpec& spec, const CLI::App* cmd) {
  apply_threads(spec);
  if (int rc = require_checkpoint(spec)) return rc;
  Checkpoint ckpt = load_checkpoint(spec.checkpoint);
  auto model = model_from_checkpoint(ckpt, spec, cmd);

  RunSpec data_spec = spec;
  data_spec.dataset = ckpt.meta.count("dataset") ? ckpt.meta.at("dataset") : spec.dataset;
  data_spec.train.use_val = true;
  DataBundle data = load_bundle(data_spec);
  require(spec.split == "test" || spec.split == "val",
          "--split must be test or val, got '" + spec.split + "'");
  const Dataset& ds = spec.split == "val" ? data.val : data.test;
  EvalResult r = evaluate(*model, ds, spec.train.batch_size);
  std::printf("%s_err=%.6f%%\n", spec.split.c_str(), r.error_pct);
  std::printf("loss=%.6f\n", r.loss);
  return 0;
}

int cmd_gradcam(const RunSpec& spec, const CLI::App* cmd) {
  apply_threads(spec);
  if (int rc = require_checkpoint(spec)) return rc;
  Checkpoint ckpt = load_checkpoint(spec.checkpoint);
  auto model = model_from_checkpoint(ckpt, spec, cmd);

  RunSpec data_spec = spec;
  data_spec.dataset = ckpt.meta.count("dataset") ? ckpt.meta.at("dataset") : spec.dataset;
  data_spec.train.use_val = true;
  DataBundle data = load_bundle(data_spec);
  const Dataset& ds = spec.split == "val" ? data.val : data.test;
  require(spec.image_index >= 0 && static_cast<std::size_t>(spec.image_index) < ds.count(),
          "--image-index " + std::to_string(spec.image_index) + " outside dataset of " +
              std::to_string(ds.count()) + " images");

  const std::size_t isz = ds.image_size();
  Tensor<float> image(Shape{1, ds.channels, ds.height, ds.width},
                      std::vector<float>(ds.images.begin() + spec.image_index * isz,
                                         ds.images.begin() + (spec.image_index + 1) * isz));
  const int target =
      spec.target_class >= 0 ? spec.target_class : predict_class(*model, image);
  Heatmap heat = gradcam(*model, image, target, parse_capture(spec.layer));

  // Raw [0,1] pixels for the overlay.
  std::vector<float> raw(isz);
  const std::size_t hw = ds.height * ds.width;
  for (std::size_t c = 0; c < ds.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      float v = image.value()[c * hw + i] * ds.stdev[c] + ds.mean[c];
      raw[c * hw + i] = std::min(1.0f, std::max(0.0f, v));
    }

  fs::create_directories(spec.out_dir);
  const std::string model_name = ckpt.meta.count("model") ? ckpt.meta.at("model") : spec.model;
  const std::string base = spec.out_dir + "/" + std::to_string(spec.image_index) + "_" +
                           model_name + "_" + std::to_string(target);
  write_pgm(heat, base + ".pgm");
  write_overlay_ppm(heat, raw, ds.channels, base + ".ppm");
  write_config_snapshot(spec.out_dir, config_kv(data_spec, model->config()));
  std::printf("wrote %s.pgm and %s.ppm (layer=%s class=%d label=%d)\n", base.c_str(),
              base.c_str(), spec.layer.c_str(), target, ds.labels[spec.image_index]);
  return 0;
}

int cmd_gradcheck() {
  auto checks = gradcheck::all_checks();
  bool all_passed = true;
  for (const auto& check : checks) {
    auto r = gradcheck::run_check(check);
    std::printf("%-28s max_rel_err=%.3e %s\n", r.name.c_str(), r.max_rel_err,
                r.passed ? "PASS" : "FAIL");
    all_passed = all_passed && r.passed;
  }
  std::printf("gradcheck: %zu checks, %s\n", checks.size(), all_passed ? "all passed" : "FAILED");
  return all_passed ? 0 : 1;
}

int cmd_bench(const RunSpec& spec) {
  apply_threads(spec);
  DataBundle data = load_bundle(spec);

  struct Row {
    std::string name;
    std::size_t params, attention_params;
    double epoch_seconds;
  };
  std::vector<Row> rows;
  const std::size_t baseline_params = [&] {
    RunSpec s = spec;
    s.model = "baseline";
    return analytic_param_count(model_config(s));
  }();

  for (const std::string name : {"baseline", "selfatt", "mha", "cbam"}) {
    RunSpec s = spec;
    s.model = name;
    ModelConfig cfg = model_config(s);
    ResNet20<float> model(cfg, spec.train.seed);
    auto params = model.params();
    SgdOptimizer<float> opt(params, 0.9f, 1e-4f);

    const std::size_t total = count_params(params);
    std::size_t batches = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for_each_batch(data.train, spec.train.batch_size, spec.train.seed, 1, /*aug=*/nullptr,
                   [&](const Tensor<float>& images, const std::vector<int>& labels) {
                     if (batches >= spec.bench_batches) return;
                     Tape<float> tape;
                     Tensor<float> loss =
                         cross_entropy_loss(model.forward(images, Mode::kTrain), labels);
                     tape.backward(loss);
                     opt.step(0.1f);
                     opt.zero_grad();
                     ++batches;
                   });
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double per_epoch = secs / static_cast<double>(batches) *
                             std::ceil(static_cast<double>(data.train.count()) /
                                       static_cast<double>(spec.train.batch_size));
    rows.push_back({name, total, total - baseline_params, per_epoch});
  }

  std::printf("model,params,attention_params,est_epoch_seconds\n");
  for (const auto& r : rows)
    std::printf("%s,%zu,%zu,%.2f\n", r.name.c_str(), r.params, r.attention_params,
                r.epoch_seconds);

  const auto by_name = [&](const std::string& n) {
    for (const auto& r : rows)
      if (r.name == n) return r.attention_params;
    return std::size_t{0};
  };
  require(by_name("cbam") < by_name("selfatt") && by_name("cbam") < by_name("mha"),
          "bench: expected CBAM to have the smallest attention-parameter overhead");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-augmented ResNet-20 trainer"};
  app.require_subcommand(1);

  RunSpec spec;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--dataset", spec.dataset, "cifar10 | mnist")
        ->check(CLI::IsMember({"cifar10", "mnist"}));
    cmd->add_option("--model", spec.model, "baseline | selfatt | mha | cbam")
        ->check(CLI::IsMember({"baseline", "selfatt", "mha", "cbam"}));
    cmd->add_option("--weighted", spec.weighted,
                    "weighted residual wrapper (default: on for selfatt/mha)");
    cmd->add_option("--reduction-ratio", spec.reduction_ratio, "CBAM reduction ratio");
    cmd->add_option("--heads", spec.heads, "MHA head count");
    cmd->add_option("--seed", spec.train.seed, "RNG seed");
    cmd->add_option("--threads", spec.threads, "worker thread cap");
    cmd->add_option("--data-dir", spec.data_dir, "dataset root (or CNNTENTION_DATA_DIR)");
    cmd->add_option("--out-dir", spec.out_dir, "output directory");
    cmd->add_option("--batch-size", spec.train.batch_size, "batch size");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd);
  CLI::Option* lr_opt = train_cmd->add_option("--lr", spec.train.lr, "base learning rate");
  train_cmd->add_option("--epochs", spec.train.epochs, "epochs");
  train_cmd->add_option("--optimizer", spec.train.optimizer, "sgd | adam")
      ->check(CLI::IsMember({"sgd", "adam"}));
  train_cmd->add_option("--momentum", spec.train.momentum, "SGD momentum");
  train_cmd->add_option("--weight-decay", spec.train.weight_decay, "weight decay");
  train_cmd->add_option("--milestones", spec.train.milestones,
                        "epochs after which lr drops by gamma")
      ->delimiter(',');
  train_cmd->add_option("--gamma", spec.train.gamma, "lr decay factor");
  train_cmd->add_option("--early-stop-patience", spec.train.early_stop_patience,
                        "epochs without val improvement before stopping (<=0 disables)");
  train_cmd->add_option("--use-val", spec.train.use_val,
                        "hold out a validation split (off trains on the full set)");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", spec.checkpoint, "checkpoint file");
  eval_cmd->add_option("--split", spec.split, "val | test");

  CLI::App* gradcam_cmd = app.add_subcommand("gradcam", "write GradCAM heatmaps");
  add_common(gradcam_cmd);
  gradcam_cmd->add_option("--checkpoint", spec.checkpoint, "checkpoint file");
  gradcam_cmd->add_option("--split", spec.split, "val | test");
  gradcam_cmd->add_option("--image-index", spec.image_index, "image index within the split");
  gradcam_cmd->add_option("--layer", spec.layer, "stage1 | stage2 | stage3");
  gradcam_cmd->add_option("--target-class", spec.target_class,
                          "class to explain (default: predicted)");

  app.add_subcommand("gradcheck", "finite-difference check of every op");

  CLI::App* bench_cmd = app.add_subcommand("bench", "relative timing of the four variants");
  add_common(bench_cmd);
  bench_cmd->add_option("--bench-batches", spec.bench_batches, "batches to time per variant");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      if (spec.train.optimizer == "adam" && lr_opt->count() == 0) spec.train.lr = 1e-3;
      return cmd_train(spec);
    }
    if (eval_cmd->parsed()) return cmd_eval(spec, eval_cmd);
    if (gradcam_cmd->parsed()) return cmd_gradcam(spec, gradcam_cmd);
    if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
    if (bench_cmd->parsed()) return cmd_bench(spec);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
