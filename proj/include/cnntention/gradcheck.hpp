#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cnntention/attention.hpp"
#include "cnntention/ops.hpp"
#include "cnntention/resnet.hpp"

namespace cnntention::gradcheck {

// Gradient checking runs in 64-bit mode: central finite differences with the
// stated step are unreliable in 32-bit.

struct Scenario {
  std::vector<Tensor<double>> inputs;    // differentiated tensors (shared handles)
  std::function<Tensor<double>()> loss;  // scalar, re-evaluable
};

struct Check {
  std::string name;
  std::function<Scenario()> build;
};

struct CheckResult {
  std::string name;
  double max_rel_err = 0;
  bool passed = false;
};

constexpr double kStep = 1e-6;
constexpr double kTol = 1e-5;

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t key, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  auto v = t.mutable_value();
  std::uint64_t state = splitmix64(key);
  for (auto& x : v) {
    state = splitmix64(state);
    x = lo + (hi - lo) * (static_cast<double>(state >> 11) * 0x1.0p-53);
  }
  return t;
}

// Fixed-coefficient projection of y to a scalar so every output element
// contributes to the loss.
inline Tensor<double> project(const Tensor<double>& y, std::uint64_t key) {
  Tensor<double> coeffs = random_tensor(y.shape(), key ^ 0xc0effull);
  return sum(mul(y, coeffs));
}

// Replaces a block's trainable parameters with deterministic random values
// and appends them to the scenario inputs.
inline void adopt_param_refs(const ParamRefs<double>& refs, Scenario& s, std::uint64_t key) {
  for (auto* p : refs) {
    if (!p->trainable) continue;
    Tensor<double> fresh = random_tensor(p->tensor.shape(), key ^ fnv1a(p->name), -0.5, 0.5);
    std::copy(fresh.value().begin(), fresh.value().end(), p->tensor.mutable_value().begin());
    s.inputs.push_back(p->tensor);
  }
}

}  // namespace detail

// Compares tape gradients against central finite differences. The reported
// relative error is the largest |analytic - numeric| over the largest
// gradient magnitude in the scenario.
inline CheckResult run_check(const Check& check, double step = kStep, double tol = kTol) {
  Scenario s = check.build();
  for (auto& t : s.inputs) t.set_requires_grad();

  {
    Tape<double> tape;
    Tensor<double> loss = s.loss();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : s.inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    t.zero_grad();
  }

  double max_diff = 0, scale = 0;
  for (std::size_t i = 0; i < s.inputs.size(); ++i) {
    auto v = s.inputs[i].mutable_value();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double orig = v[j];
      v[j] = orig + step;
      const double fp = s.loss().item();
      v[j] = orig - step;
      const double fm = s.loss().item();
      v[j] = orig;
      const double numeric = (fp - fm) / (2 * step);
      const double a = analytic[i][j];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
  }
  CheckResult out;
  out.name = check.name;
  out.max_rel_err = max_diff / std::max(scale, 1e-8);
  out.passed = out.max_rel_err < tol;
  return out;
}

inline std::vector<CheckResult> run_all(const std::vector<Check>& checks, double step = kStep,
                                        double tol = kTol) {
  std::vector<CheckResult> out;
  out.reserve(checks.size());
  for (const auto& c : checks) out.push_back(run_check(c, step, tol));
  return out;
}

// ---------------------------------------------------------------------------
// Registry: one check per differentiable op, then the composite blocks.
// ---------------------------------------------------------------------------

inline std::vector<Check> op_checks() {
  using detail::project;
  using detail::random_tensor;
  std::vector<Check> checks;

  checks.push_back({"add", [] {
    Scenario s;
    Tensor<double> a = random_tensor({2, 3}, 1), b = random_tensor({2, 3}, 2);
    s.inputs = {a, b};
    s.loss = [a, b] { return project(add(a, b), 10); };
    return s;
  }});
  checks.push_back({"mul", [] {
    Scenario s;
    Tensor<double> a = random_tensor({2, 3}, 3), b = random_tensor({2, 3}, 4);
    s.inputs = {a, b};
    s.loss = [a, b] { return project(mul(a, b), 11); };
    return s;
  }});
  checks.push_back({"scalar_mul", [] {
    Scenario s;
    Tensor<double> w = random_tensor({1}, 5), x = random_tensor({2, 2, 2, 2}, 6);
    s.inputs = {w, x};
    s.loss = [w, x] { return project(scalar_mul(w, x), 12); };
    return s;
  }});
  checks.push_back({"relu", [] {
    Scenario s;
    Tensor<double> x = random_tensor({4, 5}, 7);
    s.inputs = {x};
    s.loss = [x] { return project(relu(x), 13); };
    return s;
  }});
  checks.push_back({"sigmoid", [] {
    Scenario s;
    Tensor<double> x = random_tensor({4, 5}, 8);
    s.inputs = {x};
    s.loss = [x] { return project(sigmoid(x), 14); };
    return s;
  }});
  checks.push_back({"sum", [] {
    Scenario s;
    Tensor<double> x = random_tensor({3, 4}, 9);
    s.inputs = {x};
    s.loss = [x] { return sum(x); };
    return s;
  }});
  checks.push_back({"take", [] {
    Scenario s;
    Tensor<double> x = random_tensor({3, 4}, 15);
    s.inputs = {x};
    s.loss = [x] { return take(x, 5); };
    return s;
  }});
  checks.push_back({"matmul", [] {
    Scenario s;
    Tensor<double> a = random_tensor({3, 4}, 16), b = random_tensor({4, 5}, 17);
    s.inputs = {a, b};
    s.loss = [a, b] { return project(matmul(a, b), 18); };
    return s;
  }});
  checks.push_back({"linear", [] {
    Scenario s;
    Tensor<double> x = random_tensor({3, 4}, 19), w = random_tensor({5, 4}, 20),
                   b = random_tensor({5}, 21);
    s.inputs = {x, w, b};
    s.loss = [x, w, b]() mutable { return project(linear(x, w, &b), 22); };
    return s;
  }});
  checks.push_back({"softmax_rows", [] {
    Scenario s;
    Tensor<double> x = random_tensor({4, 6}, 23);
    s.inputs = {x};
    s.loss = [x] { return project(softmax_rows(x), 24); };
    return s;
  }});
  checks.push_back({"cross_entropy_loss", [] {
    Scenario s;
    Tensor<double> x = random_tensor({4, 10}, 25);
    s.inputs = {x};
    s.loss = [x] { return cross_entropy_loss(x, std::vector<int>{1, 0, 7, 9}); };
    return s;
  }});
  checks.push_back({"conv2d", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 3, 8, 8}, 26), w = random_tensor({4, 3, 3, 3}, 27),
                   b = random_tensor({4}, 28);
    s.inputs = {x, w, b};
    s.loss = [x, w, b]() mutable { return project(conv2d(x, w, &b, 1, 1), 29); };
    return s;
  }});
  checks.push_back({"conv2d_stride2", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 2, 8, 8}, 30), w = random_tensor({4, 2, 3, 3}, 31);
    s.inputs = {x, w};
    s.loss = [x, w] { return project(conv2d(x, w, nullptr, 2, 1), 32); };
    return s;
  }});
  checks.push_back({"conv1x1", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 4, 3, 3}, 33), w = random_tensor({5, 4, 1, 1}, 34);
    s.inputs = {x, w};
    s.loss = [x, w] { return project(conv1x1(x, w), 35); };
    return s;
  }});
  checks.push_back({"batchnorm2d_train", [] {
    Scenario s;
    Tensor<double> x = random_tensor({3, 4, 3, 3}, 36),
                   scale = random_tensor({4}, 37, 0.5, 1.5), shift = random_tensor({4}, 38);
    s.inputs = {x, scale, shift};
    s.loss = [x, scale, shift] {
      Tensor<double> rm(Shape{4}), rv(Shape{4}, 1.0);
      return detail::project(batchnorm2d(x, scale, shift, rm, rv, Mode::kTrain), 39);
    };
    return s;
  }});
  checks.push_back({"batchnorm2d_eval", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 4, 3, 3}, 40),
                   scale = random_tensor({4}, 41, 0.5, 1.5), shift = random_tensor({4}, 42);
    s.inputs = {x, scale, shift};
    s.loss = [x, scale, shift] {
      Tensor<double> rm = detail::random_tensor({4}, 43, -0.2, 0.2);
      Tensor<double> rv = detail::random_tensor({4}, 44, 0.5, 1.5);
      return detail::project(batchnorm2d(x, scale, shift, rm, rv, Mode::kEval), 45);
    };
    return s;
  }});
  checks.push_back({"pad_zero", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 3, 4, 4}, 46);
    s.inputs = {x};
    s.loss = [x] { return project(pad_zero(x, 2), 47); };
    return s;
  }});
  checks.push_back({"global_avg_pool", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 3, 4, 4}, 48);
    s.inputs = {x};
    s.loss = [x] { return project(global_avg_pool(x), 49); };
    return s;
  }});
  checks.push_back({"global_max_pool", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 3, 4, 4}, 50);
    s.inputs = {x};
    s.loss = [x] { return project(global_max_pool(x), 51); };
    return s;
  }});
  checks.push_back({"channel_pool_avg", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 5, 3, 3}, 52);
    s.inputs = {x};
    s.loss = [x] { return project(channel_pool_avg(x), 53); };
    return s;
  }});
  checks.push_back({"channel_pool_max", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 5, 3, 3}, 54);
    s.inputs = {x};
    s.loss = [x] { return project(channel_pool_max(x), 55); };
    return s;
  }});
  checks.push_back({"concat_channels", [] {
    Scenario s;
    Tensor<double> a = random_tensor({2, 2, 3, 3}, 56), b = random_tensor({2, 3, 3, 3}, 57);
    s.inputs = {a, b};
    s.loss = [a, b] { return project(concat_channels(a, b), 58); };
    return s;
  }});
  checks.push_back({"broadcast_mul_channel", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 3, 4, 4}, 59), m = random_tensor({2, 3}, 60);
    s.inputs = {x, m};
    s.loss = [x, m] { return project(broadcast_mul_channel(x, m), 61); };
    return s;
  }});
  checks.push_back({"broadcast_mul_spatial", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 3, 4, 4}, 62), m = random_tensor({2, 1, 4, 4}, 63);
    s.inputs = {x, m};
    s.loss = [x, m] { return project(broadcast_mul_spatial(x, m), 64); };
    return s;
  }});
  checks.push_back({"bilinear_upsample", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 1, 3, 3}, 65);
    s.inputs = {x};
    s.loss = [x] { return project(bilinear_upsample(x, 8, 8), 66); };
    return s;
  }});
  checks.push_back({"attention_core_selfatt", [] {
    Scenario s;
    Tensor<double> q = random_tensor({2, 4, 3, 3}, 67), k = random_tensor({2, 4, 3, 3}, 68),
                   v = random_tensor({2, 4, 3, 3}, 69);
    s.inputs = {q, k, v};
    s.loss = [q, k, v] { return project(attention_core(q, k, v, 1, false), 70); };
    return s;
  }});
  checks.push_back({"attention_core_mha", [] {
    Scenario s;
    Tensor<double> q = random_tensor({2, 4, 3, 3}, 71), k = random_tensor({2, 4, 3, 3}, 72),
                   v = random_tensor({2, 4, 3, 3}, 73);
    s.inputs = {q, k, v};
    s.loss = [q, k, v] { return project(attention_core(q, k, v, 2, true), 74); };
    return s;
  }});
  checks.push_back({"option_a_shortcut", [] {
    Scenario s;
    Tensor<double> x = random_tensor({2, 4, 6, 6}, 75);
    s.inputs = {x};
    s.loss = [x] { return project(option_a_shortcut(x), 76); };
    return s;
  }});
  return checks;
}

inline std::vector<Check> composite_checks() {
  using detail::project;
  using detail::random_tensor;
  std::vector<Check> checks;

  checks.push_back({"selfatt_block_weighted", [] {
    auto block = std::make_shared<AttentionWrapper<double>>("att", AttentionKind::kSelfAtt, 4,
                                                            true, 1, 1, 901);
    Scenario s;
    Tensor<double> x = random_tensor({2, 4, 3, 3}, 80);
    s.inputs = {x};
    detail::adopt_param_refs(
        [&] {
          ParamRefs<double> refs;
          block->params(refs);
          return refs;
        }(),
        s, 81);
    block->w().tensor.mutable_value()[0] = 0.7;  // w=0 would zero most paths
    s.loss = [x, block] { return project(block->forward(x), 82); };
    return s;
  }});
  checks.push_back({"mha_block", [] {
    auto block =
        std::make_shared<AttentionWrapper<double>>("att", AttentionKind::kMha, 4, false, 1, 2, 902);
    Scenario s;
    Tensor<double> x = random_tensor({2, 4, 3, 3}, 83);
    s.inputs = {x};
    detail::adopt_param_refs(
        [&] {
          ParamRefs<double> refs;
          block->params(refs);
          return refs;
        }(),
        s, 84);
    s.loss = [x, block] { return project(block->forward(x), 85); };
    return s;
  }});
  checks.push_back({"cbam_block", [] {
    auto block = std::make_shared<AttentionWrapper<double>>("att", AttentionKind::kCbam, 4, false,
                                                            2, 1, 903);
    Scenario s;
    Tensor<double> x = random_tensor({2, 4, 5, 5}, 86);
    s.inputs = {x};
    detail::adopt_param_refs(
        [&] {
          ParamRefs<double> refs;
          block->params(refs);
          return refs;
        }(),
        s, 87);
    s.loss = [x, block] { return project(block->forward(x), 88); };
    return s;
  }});
  checks.push_back({"basic_block", [] {
    auto block = std::make_shared<BasicBlock<double>>("blk", 4, 8, 2, 904);
    Scenario s;
    Tensor<double> x = random_tensor({2, 4, 6, 6}, 89);
    s.inputs = {x};
    detail::adopt_param_refs(
        [&] {
          ParamRefs<double> refs;
          block->params(refs);
          return refs;
        }(),
        s, 90);
    s.loss = [x, block] { return project(block->forward(x, Mode::kTrain), 91); };
    return s;
  }});
  checks.push_back({"tiny_model_baseline", [] {
    ModelConfig cfg;
    cfg.input_channels = 3;
    cfg.stage_channels = {4, 8, 16};
    cfg.blocks_per_stage = 1;
    auto model = std::make_shared<ResNet20<double>>(cfg, 905);
    Scenario s;
    Tensor<double> x = random_tensor({2, 3, 8, 8}, 92);
    s.inputs = {x};
    detail::adopt_param_refs(model->params(), s, 93);
    s.loss = [x, model] {
      return cross_entropy_loss(model->forward(x, Mode::kTrain), std::vector<int>{3, 7});
    };
    return s;
  }});
  checks.push_back({"tiny_model_selfatt_weighted", [] {
    ModelConfig cfg;
    cfg.input_channels = 1;
    cfg.stage_channels = {4, 8, 16};
    cfg.blocks_per_stage = 1;
    cfg.attention = AttentionKind::kSelfAtt;
    cfg.weighted = true;
    auto model = std::make_shared<ResNet20<double>>(cfg, 906);
    Scenario s;
    Tensor<double> x = random_tensor({2, 1, 8, 8}, 94);
    s.inputs = {x};
    detail::adopt_param_refs(model->params(), s, 95);
    for (std::size_t st = 0; st < 3; ++st)
      model->attention(st)->w().tensor.mutable_value()[0] = 0.3 + 0.1 * static_cast<double>(st);
    s.loss = [x, model] {
      return cross_entropy_loss(model->forward(x, Mode::kTrain), std::vector<int>{0, 9});
    };
    return s;
  }});
  return checks;
}

inline std::vector<Check> all_checks() {
  auto checks = op_checks();
  auto comp = composite_checks();
  checks.insert(checks.end(), std::make_move_iterator(comp.begin()),
                std::make_move_iterator(comp.end()));
  return checks;
}

}  // namespace cnntention::gradcheck
