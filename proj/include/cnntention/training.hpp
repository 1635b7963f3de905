#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "cnntention/checkpoint.hpp"
#include "cnntention/data.hpp"
#include "cnntention/ops.hpp"
#include "cnntention/resnet.hpp"

namespace cnntention {

struct TrainConfig {
  std::string optimizer = "sgd";  // sgd | adam
  double lr = 0.1;                // Adam preset uses 1e-3
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 128;
  std::size_t epochs = 182;
  std::vector<std::size_t> milestones{91, 136};
  double gamma = 0.1;
  int early_stop_patience = 20;  // <= 0 disables
  bool use_val = true;
  std::uint64_t seed = 42;

  void validate() const {
    require(optimizer == "sgd" || optimizer == "adam",
            "train config: optimizer must be sgd or adam, got '" + optimizer + "'");
    require(batch_size >= 1, "train config: batch_size must be >= 1");
    require(epochs >= 1, "train config: epochs must be >= 1");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      require(milestones[i] >= 1 && milestones[i] <= epochs,
              "train config: milestone " + std::to_string(milestones[i]) +
                  " outside [1, epochs]");
      require(i == 0 || milestones[i] > milestones[i - 1],
              "train config: milestones must be strictly increasing");
    }
  }

  std::map<std::string, std::string> to_kv() const {
    std::string ms;
    for (std::size_t i = 0; i < milestones.size(); ++i)
      ms += (i ? "," : "") + std::to_string(milestones[i]);
    char lr_s[32], mom_s[32], wd_s[32], gamma_s[32];
    std::snprintf(lr_s, sizeof lr_s, "%g", lr);
    std::snprintf(mom_s, sizeof mom_s, "%g", momentum);
    std::snprintf(wd_s, sizeof wd_s, "%g", weight_decay);
    std::snprintf(gamma_s, sizeof gamma_s, "%g", gamma);
    return {{"optimizer", optimizer},
            {"lr", lr_s},
            {"momentum", mom_s},
            {"weight_decay", wd_s},
            {"batch_size", std::to_string(batch_size)},
            {"epochs", std::to_string(epochs)},
            {"milestones", ms.empty() ? "none" : ms},
            {"gamma", gamma_s},
            {"early_stop_patience", std::to_string(early_stop_patience)},
            {"use_val", use_val ? "1" : "0"},
            {"seed", std::to_string(seed)}};
  }
};

// Base lr scaled by gamma once per milestone already completed before this
// epoch: with milestones {91, 136} the drops take effect at epochs 92 and 137.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  require(epoch >= 1 && epoch <= cfg.epochs, "lr_at: epoch out of range");
  double lr = cfg.lr;
  for (auto m : cfg.milestones)
    if (m <= epoch - 1) lr *= cfg.gamma;
  return lr;
}

// ---------------------------------------------------------------------------
// Optimizers. Weight decay touches only parameters flagged for decay
// (conv/linear weights and the attention scalar w); non-trainable tensors
// (BN running stats) are never updated here.
// ---------------------------------------------------------------------------

template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(ParamRefs<T> params, T momentum, T weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    buffers_.resize(params_.size());
  }

  void step(T lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->trainable || !p->tensor.has_grad()) continue;
      auto g = p->tensor.grad_view();
      check_finite(p->name.c_str(), g);
      auto v = p->tensor.mutable_value();
      const T wd = p->decay ? weight_decay_ : T(0);
      auto& buf = buffers_[i];
      if (momentum_ != T(0)) {
        if (buf.empty()) buf.assign(v.size(), T(0));
        for (std::size_t j = 0; j < v.size(); ++j) {
          const T eff = g[j] + wd * v[j];
          buf[j] = momentum_ * buf[j] + eff;
          v[j] -= lr * buf[j];
        }
      } else {
        for (std::size_t j = 0; j < v.size(); ++j) v[j] -= lr * (g[j] + wd * v[j]);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->tensor.zero_grad();
  }

 private:
  ParamRefs<T> params_;
  T momentum_, weight_decay_;
  std::vector<std::vector<T>> buffers_;
};

template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(ParamRefs<T> params, T beta1, T beta2, T eps, T weight_decay)
      : params_(std::move(params)),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps),
        weight_decay_(weight_decay) {
    m_.resize(params_.size());
    v_.resize(params_.size());
  }

  void step(T lr) {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->trainable || !p->tensor.has_grad()) continue;
      auto g = p->tensor.grad_view();
      check_finite(p->name.c_str(), g);
      auto val = p->tensor.mutable_value();
      const T wd = p->decay ? weight_decay_ : T(0);
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.empty()) {
        m.assign(val.size(), T(0));
        v.assign(val.size(), T(0));
      }
      for (std::size_t j = 0; j < val.size(); ++j) {
        const T eff = g[j] + wd * val[j];
        m[j] = beta1_ * m[j] + (T(1) - beta1_) * eff;
        v[j] = beta2_ * v[j] + (T(1) - beta2_) * eff * eff;
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        val[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->tensor.zero_grad();
  }

 private:
  ParamRefs<T> params_;
  T beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// Stops once validation accuracy has not improved for `patience` epochs.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  // Feed one epoch's validation error; true means stop now.
  bool update(double val_err) {
    if (val_err < best_) {
      best_ = val_err;
      since_best_ = 0;
    } else {
      ++since_best_;
    }
    return patience_ > 0 && since_best_ >= patience_;
  }

  double best() const { return best_; }

 private:
  int patience_;
  int since_best_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Evaluation and training loops
// ---------------------------------------------------------------------------

struct EvalResult {
  double error_pct = 0;
  double loss = 0;
};

inline EvalResult evaluate(ResNet20<float>& model, const Dataset& ds,
                           std::size_t batch_size = 128) {
  std::size_t wrong = 0;
  double loss_sum = 0;
  for_each_batch(ds, batch_size, /*seed=*/0, /*epoch=*/0, /*aug=*/nullptr,
                 [&](const Tensor<float>& images, const std::vector<int>& labels) {
                   Tensor<float> logits = model.forward(images, Mode::kEval);
                   const std::size_t n = labels.size(), classes = logits.dim(1);
                   auto lv = logits.value();
                   for (std::size_t i = 0; i < n; ++i) {
                     std::size_t best = 0;
                     for (std::size_t c = 1; c < classes; ++c)
                       if (lv[i * classes + c] > lv[i * classes + best]) best = c;
                     if (best != static_cast<std::size_t>(labels[i])) ++wrong;
                   }
                   loss_sum +=
                       static_cast<double>(cross_entropy_loss(logits, labels).item()) * n;
                 });
  EvalResult out;
  out.error_pct = 100.0 * static_cast<double>(wrong) / static_cast<double>(ds.count());
  out.loss = loss_sum / static_cast<double>(ds.count());
  return out;
}

struct EpochRecord {
  std::size_t epoch;
  double lr, train_loss, train_err, val_err, seconds;
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;
  double best_val_err = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

inline std::string format_csv_row(const EpochRecord& r) {
  char buf[192];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f", r.epoch, r.lr, r.train_loss,
                r.train_err, r.val_err, r.seconds);
  return buf;
}

constexpr const char* kMetricsHeader = "epoch,lr,train_loss,train_err,val_err,seconds";

// Full training run: per-epoch augmented train pass, eval-mode validation
// pass, metrics CSV flushed per epoch, best/last checkpoints, optional
// early stopping. The best checkpoint is the lowest validation error seen.
inline RunMetrics train(ResNet20<float>& model, const DataBundle& data, const TrainConfig& cfg,
                        const std::string& out_dir,
                        const std::map<std::string, std::string>& ckpt_meta = {},
                        bool quiet = false) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  std::ofstream csv(out_dir + "/metrics.csv", std::ios::trunc);
  require(csv.good(), "train: cannot write metrics CSV in '" + out_dir + "'");
  csv << kMetricsHeader << "\n";
  csv.flush();

  auto params = model.params();
  SgdOptimizer<float> sgd(params, static_cast<float>(cfg.momentum),
                          static_cast<float>(cfg.weight_decay));
  AdamOptimizer<float> adam(params, static_cast<float>(cfg.adam_beta1),
                            static_cast<float>(cfg.adam_beta2), static_cast<float>(cfg.adam_eps),
                            static_cast<float>(cfg.weight_decay));
  const bool use_adam = cfg.optimizer == "adam";

  const AugmentationConfig aug{};
  EarlyStopping stopper(cfg.early_stop_patience);
  RunMetrics metrics;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const float lr = static_cast<float>(lr_at(epoch, cfg));
    double loss_sum = 0;
    std::size_t wrong = 0, seen = 0;
    for_each_batch(
        data.train, cfg.batch_size, cfg.seed, epoch,
        data.augment_train ? &aug : nullptr,
        [&](const Tensor<float>& images, const std::vector<int>& labels) {
          Tape<float> tape;
          Tensor<float> logits = model.forward(images, Mode::kTrain);
          Tensor<float> loss = cross_entropy_loss(logits, labels);
          tape.backward(loss);
          if (use_adam) {
            adam.step(lr);
            adam.zero_grad();
          } else {
            sgd.step(lr);
            sgd.zero_grad();
          }
          const std::size_t n = labels.size(), classes = logits.dim(1);
          auto lv = logits.value();
          for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
              if (lv[i * classes + c] > lv[i * classes + best]) best = c;
            if (best != static_cast<std::size_t>(labels[i])) ++wrong;
          }
          loss_sum += static_cast<double>(loss.item()) * n;
          seen += n;
        });

    EvalResult val = evaluate(model, data.val, cfg.batch_size);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    EpochRecord rec{epoch,
                    lr,
                    loss_sum / static_cast<double>(seen),
                    100.0 * static_cast<double>(wrong) / static_cast<double>(seen),
                    val.error_pct,
                    seconds};
    metrics.epochs.push_back(rec);
    csv << format_csv_row(rec) << "\n";
    csv.flush();
    if (!quiet)
      std::fprintf(stderr, "epoch %zu/%zu lr=%.4g train_loss=%.4f train_err=%.2f%% val_err=%.2f%% (%.1fs)\n",
                   epoch, cfg.epochs, rec.lr, rec.train_loss, rec.train_err, rec.val_err,
                   rec.seconds);

    if (val.error_pct < metrics.best_val_err) {
      metrics.best_val_err = val.error_pct;
      metrics.best_epoch = epoch;
      save_checkpoint(out_dir + "/best.ckpt", params, ckpt_meta);
    }
    save_checkpoint(out_dir + "/last.ckpt", params, ckpt_meta);

    if (stopper.update(val.error_pct)) {
      metrics.stopped_early = true;
      break;
    }
  }
  return metrics;
}

}  // namespace cnntention
