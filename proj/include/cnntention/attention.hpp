#pragma once

#include <memory>
#include <string>
#include <utility>

#include "cnntention/layers.hpp"
#include "cnntention/ops.hpp"

namespace cnntention {

enum class AttentionKind { kNone, kSelfAtt, kMha, kCbam };

inline const char* to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::kNone: return "none";
    case AttentionKind::kSelfAtt: return "selfatt";
    case AttentionKind::kMha: return "mha";
    case AttentionKind::kCbam: return "cbam";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// SelfAtt: 1x1-conv projections to Q/K/V over the spatial grid, softmax(QK^T)V
// with no scaling factor and no output projection.
// ---------------------------------------------------------------------------

template <typename T>
class SelfAttBlock {
 public:
  SelfAttBlock(const std::string& prefix, std::size_t channels, std::uint64_t seed)
      : channels_(channels),
        query_(prefix + ".query", channels, channels, 1, 1, 0, false, seed),
        key_(prefix + ".key", channels, channels, 1, 1, 0, false, seed),
        value_(prefix + ".value", channels, channels, 1, 1, 0, false, seed) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    require(x.dim(1) == channels_, "selfatt: input has " + std::to_string(x.dim(1)) +
                                       " channels, block built for " + std::to_string(channels_));
    Tensor<T> q = conv1x1(x, query_.weight().tensor);
    Tensor<T> k = conv1x1(x, key_.weight().tensor);
    Tensor<T> v = conv1x1(x, value_.weight().tensor);
    return attention_core(q, k, v, /*heads=*/1, /*scaled=*/false);
  }

  void params(ParamRefs<T>& out) {
    query_.params(out);
    key_.params(out);
    value_.params(out);
  }

  Conv2dLayer<T>& query() { return query_; }
  Conv2dLayer<T>& key() { return key_; }
  Conv2dLayer<T>& value() { return value_; }
  std::size_t channels() const { return channels_; }

 private:
  std::size_t channels_;
  Conv2dLayer<T> query_, key_, value_;
};

// ---------------------------------------------------------------------------
// MHA: full C->C projections split into h contiguous head slices, scaled
// attention per head, concatenation, then a 1x1 output projection.
// ---------------------------------------------------------------------------

template <typename T>
class MHABlock {
 public:
  MHABlock(const std::string& prefix, std::size_t channels, std::size_t heads, std::uint64_t seed)
      : channels_(channels),
        heads_(heads),
        query_(prefix + ".query", channels, channels, 1, 1, 0, false, seed),
        key_(prefix + ".key", channels, channels, 1, 1, 0, false, seed),
        value_(prefix + ".value", channels, channels, 1, 1, 0, false, seed),
        out_(prefix + ".out", channels, channels, 1, 1, 0, false, seed) {
    require(heads >= 1 && channels % heads == 0,
            "mha: " + std::to_string(heads) + " heads do not divide " + std::to_string(channels) +
                " channels");
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    require(x.dim(1) == channels_, "mha: input has " + std::to_string(x.dim(1)) +
                                       " channels, block built for " + std::to_string(channels_));
    Tensor<T> q = conv1x1(x, query_.weight().tensor);
    Tensor<T> k = conv1x1(x, key_.weight().tensor);
    Tensor<T> v = conv1x1(x, value_.weight().tensor);
    Tensor<T> heads_out = attention_core(q, k, v, heads_, /*scaled=*/true);
    return conv1x1(heads_out, out_.weight().tensor);
  }

  void params(ParamRefs<T>& out) {
    query_.params(out);
    key_.params(out);
    value_.params(out);
    out_.params(out);
  }

  Conv2dLayer<T>& query() { return query_; }
  Conv2dLayer<T>& key() { return key_; }
  Conv2dLayer<T>& value() { return value_; }
  Conv2dLayer<T>& out_proj() { return out_; }
  std::size_t heads() const { return heads_; }

 private:
  std::size_t channels_, heads_;
  Conv2dLayer<T> query_, key_, value_, out_;
};

// ---------------------------------------------------------------------------
// CBAM: channel attention (shared MLP over avg- and max-pooled descriptors,
// sigmoid) followed by spatial attention (7x7 conv over the two
// channel-pooled planes, sigmoid), each multiplying the feature map.
// ---------------------------------------------------------------------------

template <typename T>
class CBAMBlock {
 public:
  CBAMBlock(const std::string& prefix, std::size_t channels, std::size_t reduction,
            std::uint64_t seed)
      : channels_(channels),
        reduction_(reduction),
        mlp_(prefix + ".mlp", channels, reduction, seed),
        spatial_(prefix + ".spatial", 2, 1, 7, 1, 3, false, seed) {}

  // M_c = sigmoid(mlp(avg) + mlp(max)); returns (x * M_c, M_c).
  std::pair<Tensor<T>, Tensor<T>> channel_attention(const Tensor<T>& x) const {
    Tensor<T> avg = mlp_.forward(global_avg_pool(x));
    Tensor<T> mx = mlp_.forward(global_max_pool(x));
    Tensor<T> mc = sigmoid(add(avg, mx));
    return {broadcast_mul_channel(x, mc), mc};
  }

  // M_s = sigmoid(f7x7(concat(avg_c, max_c))); returns (x * M_s, M_s).
  std::pair<Tensor<T>, Tensor<T>> spatial_attention(const Tensor<T>& x) const {
    Tensor<T> planes = concat_channels(channel_pool_avg(x), channel_pool_max(x));
    Tensor<T> ms = sigmoid(spatial_.forward(planes));
    return {broadcast_mul_spatial(x, ms), ms};
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    require(x.dim(1) == channels_, "cbam: input has " + std::to_string(x.dim(1)) +
                                       " channels, block built for " + std::to_string(channels_));
    auto [channel_scaled, mc] = channel_attention(x);
    auto [out, ms] = spatial_attention(channel_scaled);
    return out;
  }

  void params(ParamRefs<T>& out) {
    mlp_.params(out);
    spatial_.params(out);
  }

  SharedMLP<T>& mlp() { return mlp_; }
  Conv2dLayer<T>& spatial_conv() { return spatial_; }
  std::size_t reduction() const { return reduction_; }

 private:
  std::size_t channels_, reduction_;
  SharedMLP<T> mlp_;
  Conv2dLayer<T> spatial_;
};

// ---------------------------------------------------------------------------
// Residual integration of an attention block between feature-extractor
// stages: plain mode R(x) = F(x) + x, weighted mode W(x) = w*F(x) + x with
// the scalar w trainable and zero at initialization. Weighted mode is
// defined for SelfAtt and MHA only.
// ---------------------------------------------------------------------------

template <typename T>
class AttentionWrapper {
 public:
  AttentionWrapper(const std::string& prefix, AttentionKind kind, std::size_t channels,
                   bool weighted, std::size_t reduction, std::size_t heads, std::uint64_t seed)
      : kind_(kind), weighted_(weighted) {
    require(kind != AttentionKind::kNone, "attention wrapper: no attention kind given");
    require(!(weighted && kind == AttentionKind::kCbam),
            "attention wrapper: weighted mode is defined for selfatt and mha only");
    switch (kind) {
      case AttentionKind::kSelfAtt:
        selfatt_ = std::make_unique<SelfAttBlock<T>>(prefix, channels, seed);
        break;
      case AttentionKind::kMha:
        mha_ = std::make_unique<MHABlock<T>>(prefix, channels, heads, seed);
        break;
      case AttentionKind::kCbam:
        cbam_ = std::make_unique<CBAMBlock<T>>(prefix, channels, reduction, seed);
        break;
      default: break;
    }
    if (weighted_) {
      w_ = {prefix + ".w", Tensor<T>(Shape{1}), true, true};
      w_.tensor.set_requires_grad();
    }
  }

  Tensor<T> inner_forward(const Tensor<T>& x) const {
    if (selfatt_) return selfatt_->forward(x);
    if (mha_) return mha_->forward(x);
    return cbam_->forward(x);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> f = inner_forward(x);
    require(f.shape() == x.shape(), "attention wrapper: inner block changed shape");
    if (weighted_) return add(scalar_mul(w_.tensor, f), x);
    return add(f, x);
  }

  void params(ParamRefs<T>& out) {
    if (selfatt_) selfatt_->params(out);
    if (mha_) mha_->params(out);
    if (cbam_) cbam_->params(out);
    if (weighted_) out.push_back(&w_);
  }

  AttentionKind kind() const { return kind_; }
  bool weighted() const { return weighted_; }
  Parameter<T>& w() { return w_; }
  SelfAttBlock<T>* selfatt() { return selfatt_.get(); }
  MHABlock<T>* mha() { return mha_.get(); }
  CBAMBlock<T>* cbam() { return cbam_.get(); }

 private:
  AttentionKind kind_;
  bool weighted_;
  std::unique_ptr<SelfAttBlock<T>> selfatt_;
  std::unique_ptr<MHABlock<T>> mha_;
  std::unique_ptr<CBAMBlock<T>> cbam_;
  Parameter<T> w_;
};

}  // namespace cnntention
