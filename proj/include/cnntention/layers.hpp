#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cnntention/ops.hpp"
#include "cnntention/tensor.hpp"

namespace cnntention {

// ---------------------------------------------------------------------------
// Deterministic per-parameter initialization. Each parameter draws from a
// stream keyed by (seed, dotted name), so a layer's values do not depend on
// what other layers exist in the model. That keeps shared backbones
// bit-identical between the baseline and any attention variant.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Box-Muller over splitmix64 output; independent of std library distributions
// so streams are stable across standard-library versions.
class NormalStream {
 public:
  NormalStream(std::uint64_t seed, std::string_view name)
      : state_(splitmix64(seed ^ fnv1a(name))) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_unit();
    while (u1 <= 1e-300) u1 = next_unit();
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  double next_unit() {
    state_ = splitmix64(state_);
    return static_cast<double>(state_ >> 11) * 0x1.0p-53;
  }

  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_out, std::uint64_t seed,
                         std::string_view name) {
  require(fan_out > 0, "kaiming_normal: fan_out must be positive");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_out));
  Tensor<T> t(std::move(shape));
  NormalStream stream(seed, name);
  auto v = t.mutable_value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(stream.next() * stddev);
  return t;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
  bool decay = true;  // participates in weight decay
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer(const std::string& prefix, std::size_t in_c, std::size_t out_c, std::size_t kernel,
              std::size_t stride, std::size_t pad, bool bias, std::uint64_t seed)
      : stride_(stride), pad_(pad) {
    weight_ = {prefix + ".weight",
               kaiming_normal<T>(Shape{out_c, in_c, kernel, kernel}, out_c * kernel * kernel,
                                 seed, prefix + ".weight"),
               true, true};
    weight_.tensor.set_requires_grad();
    if (bias) {
      bias_ = {prefix + ".bias", Tensor<T>(Shape{out_c}), true, false};
      bias_.tensor.set_requires_grad();
      has_bias_ = true;
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, weight_.tensor, has_bias_ ? &bias_.tensor : nullptr, stride_, pad_);
  }

  void params(ParamRefs<T>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  Parameter<T>& weight() { return weight_; }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  bool has_bias_ = false;
  std::size_t stride_, pad_;
};

template <typename T>
class BatchNorm2dLayer {
 public:
  BatchNorm2dLayer(const std::string& prefix, std::size_t channels) {
    scale_ = {prefix + ".scale", Tensor<T>(Shape{channels}, T(1)), true, false};
    shift_ = {prefix + ".shift", Tensor<T>(Shape{channels}), true, false};
    scale_.tensor.set_requires_grad();
    shift_.tensor.set_requires_grad();
    running_mean_ = {prefix + ".running_mean", Tensor<T>(Shape{channels}), false, false};
    running_var_ = {prefix + ".running_var", Tensor<T>(Shape{channels}, T(1)), false, false};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return batchnorm2d(x, scale_.tensor, shift_.tensor, running_mean_.tensor,
                       running_var_.tensor, mode);
  }

  void params(ParamRefs<T>& out) {
    out.push_back(&scale_);
    out.push_back(&shift_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

  Parameter<T>& scale() { return scale_; }
  Parameter<T>& shift() { return shift_; }

 private:
  Parameter<T> scale_, shift_, running_mean_, running_var_;
};

template <typename T>
class LinearLayer {
 public:
  LinearLayer(const std::string& prefix, std::size_t in, std::size_t out, std::uint64_t seed) {
    weight_ = {prefix + ".weight", kaiming_normal<T>(Shape{out, in}, out, seed, prefix + ".weight"),
               true, true};
    bias_ = {prefix + ".bias", Tensor<T>(Shape{out}), true, false};
    weight_.tensor.set_requires_grad();
    bias_.tensor.set_requires_grad();
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight_.tensor, &bias_.tensor); }

  void params(ParamRefs<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Parameter<T>& weight() { return weight_; }

 private:
  Parameter<T> weight_, bias_;
};

// Two bias-free matmuls with a bottleneck of width C/r and a ReLU between;
// applied unchanged to both pooled descriptors in CBAM channel attention.
template <typename T>
class SharedMLP {
 public:
  SharedMLP(const std::string& prefix, std::size_t channels, std::size_t reduction,
            std::uint64_t seed)
      : channels_(channels) {
    require(reduction >= 1 && channels % reduction == 0,
            "shared_mlp: reduction ratio " + std::to_string(reduction) + " does not divide " +
                std::to_string(channels) + " channels");
    const std::size_t hidden = channels / reduction;
    reduce_ = {prefix + ".reduce.weight",
               kaiming_normal<T>(Shape{channels, hidden}, hidden, seed, prefix + ".reduce.weight"),
               true, true};
    expand_ = {prefix + ".expand.weight",
               kaiming_normal<T>(Shape{hidden, channels}, channels, seed,
                                 prefix + ".expand.weight"),
               true, true};
    reduce_.tensor.set_requires_grad();
    expand_.tensor.set_requires_grad();
  }

  Tensor<T> forward(const Tensor<T>& v) const {
    require(v.ndim() == 2 && v.dim(1) == channels_,
            "shared_mlp: expected B x " + std::to_string(channels_) + " input, got " +
                shape_str(v.shape()));
    return matmul(relu(matmul(v, reduce_.tensor)), expand_.tensor);
  }

  void params(ParamRefs<T>& out) {
    out.push_back(&reduce_);
    out.push_back(&expand_);
  }

  Parameter<T>& reduce() { return reduce_; }
  Parameter<T>& expand() { return expand_; }

 private:
  Parameter<T> reduce_, expand_;
  std::size_t channels_;
};

template <typename T>
std::size_t count_params(const ParamRefs<T>& params, bool trainable_only = true) {
  std::size_t n = 0;
  for (const auto* p : params)
    if (!trainable_only || p->trainable) n += p->tensor.size();
  return n;
}

}  // namespace cnntention
