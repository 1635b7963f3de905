#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cnntention/attention.hpp"
#include "cnntention/layers.hpp"
#include "cnntention/ops.hpp"

namespace cnntention {

// ---------------------------------------------------------------------------
// Parameter-free Option-A shortcut: stride-2 subsampling (even rows/cols)
// with the channel count doubled by zero bands of width C/2 on both sides,
// so input channel c lands on output channel c + C/2.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> option_a_shortcut(const Tensor<T>& x) {
  require(x.ndim() == 4, "option_a_shortcut: expected BCHW input, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h % 2 == 0 && w % 2 == 0,
          "option_a_shortcut: spatial extents must be even, got " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2, co = 2 * c, off = c / 2;
  Tensor<T> y(Shape{b, co, ho, wo});
  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = xv.data() + (s * c + ch) * h * w;
      T* dst = yv.data() + (s * co + ch + off) * ho * wo;
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) dst[i * wo + j] = src[(2 * i) * w + (2 * j)];
    }
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("option_a_shortcut", [x, y, b, c, h, w, ho, wo, co,
                                                    off]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto gx = x.grad();
      for (std::size_t s = 0; s < b; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* src = gy.data() + (s * co + ch + off) * ho * wo;
          T* dst = gx.data() + (s * c + ch) * h * w;
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) dst[(2 * i) * w + (2 * j)] += src[i * wo + j];
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t input_channels = 3;  // 3 for CIFAR-10, 1 for MNIST
  std::size_t num_classes = 10;
  std::array<std::size_t, 3> stage_channels{16, 32, 64};
  std::size_t blocks_per_stage = 3;
  AttentionKind attention = AttentionKind::kNone;
  bool weighted = false;
  std::size_t reduction_ratio = 16;  // CBAM only
  std::size_t heads = 8;             // MHA only

  // CBAM's bottleneck cannot shrink a site below one unit: the effective
  // ratio at a site with C channels is min(r, C).
  std::size_t effective_reduction(std::size_t channels) const {
    return std::min(reduction_ratio, channels);
  }

  void validate() const {
    require(input_channels == 1 || input_channels == 3,
            "model config: input_channels must be 1 or 3");
    require(num_classes >= 2, "model config: num_classes must be >= 2");
    require(blocks_per_stage >= 1, "model config: blocks_per_stage must be >= 1");
    for (std::size_t i = 1; i < 3; ++i)
      require(stage_channels[i] == 2 * stage_channels[i - 1],
              "model config: stage channels must double per stage for the Option-A shortcut");
    if (attention == AttentionKind::kMha) {
      require(heads >= 1, "model config: heads must be >= 1");
      for (auto c : stage_channels)
        require(c % heads == 0, "model config: " + std::to_string(heads) +
                                    " heads do not divide stage width " + std::to_string(c));
    }
    if (attention == AttentionKind::kCbam) {
      require(reduction_ratio >= 1, "model config: reduction_ratio must be >= 1");
      for (auto c : stage_channels) {
        std::size_t r = effective_reduction(c);
        require(c % r == 0, "model config: reduction ratio " + std::to_string(r) +
                                " does not divide stage width " + std::to_string(c));
      }
    }
    if (weighted)
      require(attention == AttentionKind::kSelfAtt || attention == AttentionKind::kMha,
              "model config: weighted wrappers are defined for selfatt and mha only");
  }

  std::map<std::string, std::string> to_kv() const {
    return {{"input_channels", std::to_string(input_channels)},
            {"num_classes", std::to_string(num_classes)},
            {"blocks_per_stage", std::to_string(blocks_per_stage)},
            {"attention", to_string(attention)},
            {"weighted", weighted ? "1" : "0"},
            {"reduction_ratio", std::to_string(reduction_ratio)},
            {"heads", std::to_string(heads)}};
  }

  static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig cfg;
    auto get = [&](const char* key) -> const std::string& {
      auto it = kv.find(key);
      require(it != kv.end(), std::string("model config: missing key '") + key + "'");
      return it->second;
    };
    cfg.input_channels = std::stoul(get("input_channels"));
    cfg.num_classes = std::stoul(get("num_classes"));
    cfg.blocks_per_stage = std::stoul(get("blocks_per_stage"));
    const std::string& att = get("attention");
    if (att == "none") cfg.attention = AttentionKind::kNone;
    else if (att == "selfatt") cfg.attention = AttentionKind::kSelfAtt;
    else if (att == "mha") cfg.attention = AttentionKind::kMha;
    else if (att == "cbam") cfg.attention = AttentionKind::kCbam;
    else fail("model config: unknown attention kind '" + att + "'");
    cfg.weighted = get("weighted") == "1";
    cfg.reduction_ratio = std::stoul(get("reduction_ratio"));
    cfg.heads = std::stoul(get("heads"));
    cfg.validate();
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// Basic residual block: conv-BN-ReLU-conv-BN plus identity or Option-A
// shortcut, then ReLU.
// ---------------------------------------------------------------------------

template <typename T>
class BasicBlock {
 public:
  BasicBlock(const std::string& prefix, std::size_t in_c, std::size_t out_c, std::size_t stride,
             std::uint64_t seed)
      : downsample_(stride != 1 || in_c != out_c),
        conv1_(prefix + ".conv1", in_c, out_c, 3, stride, 1, false, seed),
        bn1_(prefix + ".bn1", out_c),
        conv2_(prefix + ".conv2", out_c, out_c, 3, 1, 1, false, seed),
        bn2_(prefix + ".bn2", out_c) {
    if (downsample_)
      require(stride == 2 && out_c == 2 * in_c,
              prefix + ": Option-A shortcut needs stride 2 and doubled channels");
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> out = relu(bn1_.forward(conv1_.forward(x), mode));
    out = bn2_.forward(conv2_.forward(out), mode);
    Tensor<T> shortcut = downsample_ ? option_a_shortcut(x) : x;
    return relu(add(out, shortcut));
  }

  void params(ParamRefs<T>& out) {
    conv1_.params(out);
    bn1_.params(out);
    conv2_.params(out);
    bn2_.params(out);
  }

 private:
  bool downsample_;
  Conv2dLayer<T> conv1_;
  BatchNorm2dLayer<T> bn1_;
  Conv2dLayer<T> conv2_;
  BatchNorm2dLayer<T> bn2_;
};

// ---------------------------------------------------------------------------
// ResNet-20 with optional attention wrappers after each of the 3 stages:
// stem 3x3 conv (no max-pool) -> 3 stages of basic blocks (stride 2 entering
// stages 2 and 3) -> global average pool -> linear classifier.
// ---------------------------------------------------------------------------

template <typename T>
class ResNet20 {
 public:
  // Activation capture points for GradCAM; stages capture post-attention.
  enum class Capture { kNone, kStage1, kStage2, kStage3 };

  ResNet20(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg),
        stem_conv_("stem.conv", cfg.input_channels, cfg.stage_channels[0], 3, 1, 1, false, seed),
        stem_bn_("stem.bn", cfg.stage_channels[0]),
        fc_("fc", cfg.stage_channels[2], cfg.num_classes, seed) {
    cfg_.validate();
    std::size_t in_c = cfg.stage_channels[0];
    for (std::size_t s = 0; s < 3; ++s) {
      const std::size_t out_c = cfg.stage_channels[s];
      stages_[s].reserve(cfg.blocks_per_stage);
      for (std::size_t blk = 0; blk < cfg.blocks_per_stage; ++blk) {
        const std::size_t stride = (s > 0 && blk == 0) ? 2 : 1;
        stages_[s].emplace_back("stage" + std::to_string(s + 1) + ".block" +
                                    std::to_string(blk + 1),
                                in_c, out_c, stride, seed);
        in_c = out_c;
      }
      if (cfg.attention != AttentionKind::kNone) {
        attention_[s] = std::make_unique<AttentionWrapper<T>>(
            "stage" + std::to_string(s + 1) + ".att", cfg.attention, out_c, cfg.weighted,
            cfg.effective_reduction(out_c), cfg.heads, seed);
      }
    }
  }

  ResNet20(const ResNet20&) = delete;
  ResNet20& operator=(const ResNet20&) = delete;

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return forward_capture(x, mode, Capture::kNone, nullptr);
  }

  Tensor<T> forward_capture(const Tensor<T>& x, Mode mode, Capture point, Tensor<T>* captured) {
    require(x.ndim() == 4 && x.dim(1) == cfg_.input_channels,
            "model: expected B x " + std::to_string(cfg_.input_channels) +
                " x H x W input, got " + shape_str(x.shape()));
    Tensor<T> out = relu(stem_bn_.forward(stem_conv_.forward(x), mode));
    for (std::size_t s = 0; s < 3; ++s) {
      for (auto& blk : stages_[s]) out = blk.forward(out, mode);
      if (attention_[s]) out = attention_[s]->forward(out);
      require(out.dim(1) == cfg_.stage_channels[s] &&
                  out.dim(2) == x.dim(2) / (std::size_t{1} << s) &&
                  out.dim(3) == x.dim(3) / (std::size_t{1} << s),
              "model: stage " + std::to_string(s + 1) + " produced unexpected shape " +
                  shape_str(out.shape()));
      if (captured && point == static_cast<Capture>(static_cast<int>(Capture::kStage1) + s))
        *captured = out;
    }
    return fc_.forward(global_avg_pool(out));
  }

  ParamRefs<T> params() {
    ParamRefs<T> out;
    stem_conv_.params(out);
    stem_bn_.params(out);
    for (std::size_t s = 0; s < 3; ++s) {
      for (auto& blk : stages_[s]) blk.params(out);
      if (attention_[s]) attention_[s]->params(out);
    }
    fc_.params(out);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  AttentionWrapper<T>* attention(std::size_t stage) { return attention_[stage].get(); }
  LinearLayer<T>& fc() { return fc_; }

 private:
  ModelConfig cfg_;
  Conv2dLayer<T> stem_conv_;
  BatchNorm2dLayer<T> stem_bn_;
  std::array<std::vector<BasicBlock<T>>, 3> stages_;
  std::array<std::unique_ptr<AttentionWrapper<T>>, 3> attention_;
  LinearLayer<T> fc_;
};

// Closed-form trainable-parameter count for a ResNet-20 variant; kept in one
// place so tests can diff it against constructed models.
inline std::size_t analytic_param_count(const ModelConfig& cfg) {
  const auto& ch = cfg.stage_channels;
  std::size_t total = cfg.input_channels * ch[0] * 9;  // stem conv
  total += 2 * ch[0];                                  // stem BN
  std::size_t in_c = ch[0];
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t blk = 0; blk < cfg.blocks_per_stage; ++blk) {
      total += in_c * ch[s] * 9 + 2 * ch[s];  // conv1 + bn1
      total += ch[s] * ch[s] * 9 + 2 * ch[s];  // conv2 + bn2
      in_c = ch[s];
    }
    switch (cfg.attention) {
      case AttentionKind::kSelfAtt:
        total += 3 * ch[s] * ch[s];
        break;
      case AttentionKind::kMha:
        total += 4 * ch[s] * ch[s];
        break;
      case AttentionKind::kCbam: {
        std::size_t hidden = ch[s] / cfg.effective_reduction(ch[s]);
        total += 2 * ch[s] * hidden;  // shared MLP
        total += 2 * 7 * 7;           // spatial conv, 2 -> 1 channels
        break;
      }
      default:
        break;
    }
    if (cfg.weighted && cfg.attention != AttentionKind::kNone) total += 1;
  }
  total += ch[2] * cfg.num_classes + cfg.num_classes;  // classifier
  return total;
}

}  // namespace cnntention
