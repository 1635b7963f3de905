#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <vector>

#include "cnntention/tensor.hpp"

namespace cnntention {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;
template <typename T>
using EArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using EArrCMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

namespace detail {

template <typename T>
inline void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <typename T>
inline void require_4d(const char* op, const Tensor<T>& t) {
  require(t.ndim() == 4, std::string(op) + ": expected BCHW tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> y(a.shape());
  auto av = a.value(), bv = b.value();
  auto yv = y.mutable_value();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
  check_finite("add", y);
  if (tracing<T>({&a, &b})) {
    y.set_requires_grad();
    Tape<T>::active()->record("add", [a, b, y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> y(a.shape());
  auto av = a.value(), bv = b.value();
  auto yv = y.mutable_value();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * bv[i];
  check_finite("mul", y);
  if (tracing<T>({&a, &b})) {
    y.set_requires_grad();
    Tape<T>::active()->record("mul", [a, b, y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto av = a.value(), bv = b.value();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
      }
    });
  }
  return y;
}

// y = w * x with a learnable scalar w (a 1-element tensor).
template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& w, const Tensor<T>& x) {
  require(w.size() == 1, "scalar_mul: w must be scalar, got " + shape_str(w.shape()));
  Tensor<T> y(x.shape());
  const T wv = w.value()[0];
  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = wv * xv[i];
  check_finite("scalar_mul", y);
  if (tracing<T>({&w, &x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("scalar_mul", [w, x, y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto xv = x.value();
      if (w.requires_grad()) {
        T acc = T(0);
        for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * xv[i];
        w.grad()[0] += acc;
      }
      if (x.requires_grad()) {
        const T wv = w.value()[0];
        auto gx = x.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += wv * gy[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = xv[i] > T(0) ? xv[i] : T(0);
  check_finite("relu", y);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("relu", [x, y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto xv = x.value();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (xv[i] > T(0)) gx[i] += gy[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  EArrCMap<T> xm(x.value().data(), x.size());
  EArrMap<T> ym(y.mutable_value().data(), y.size());
  ym = T(1) / (T(1) + (-xm).exp());
  check_finite("sigmoid", y);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("sigmoid", [x, y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto yv = y.value();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.value()) acc += v;
  Tensor<T> y = Tensor<T>::scalar(acc);
  check_finite("sum", y);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("sum", [x, y]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad_view()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

// Picks one element as a scalar (flat row-major index).
template <typename T>
Tensor<T> take(const Tensor<T>& x, std::size_t flat_index) {
  require(flat_index < x.size(), "take: index " + std::to_string(flat_index) +
                                     " out of range for " + shape_str(x.shape()));
  Tensor<T> y = Tensor<T>::scalar(x.value()[flat_index]);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("take", [x, y, flat_index]() mutable {
      if (!y.has_grad()) return;
      x.grad()[flat_index] += y.grad_view()[0];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.ndim() == 2 && b.ndim() == 2,
          "matmul: expected 2-d operands, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  Tensor<T> y(Shape{m, n});
  ECMap<T> am(a.value().data(), m, k);
  ECMap<T> bm(b.value().data(), k, n);
  EMap<T> ym(y.mutable_value().data(), m, n);
  ym.noalias() = am * bm;
  check_finite("matmul", y);
  if (tracing<T>({&a, &b})) {
    y.set_requires_grad();
    Tape<T>::active()->record("matmul", [a, b, y, m, k, n]() mutable {
      if (!y.has_grad()) return;
      ECMap<T> gym(y.grad_view().data(), m, n);
      if (a.requires_grad()) {
        ECMap<T> bm(b.value().data(), k, n);
        EMap<T> gam(a.grad().data(), m, k);
        gam.noalias() += gym * bm.transpose();
      }
      if (b.requires_grad()) {
        ECMap<T> am(a.value().data(), m, k);
        EMap<T> gbm(b.grad().data(), k, n);
        gbm.noalias() += am.transpose() * gym;
      }
    });
  }
  return y;
}

// y = x * W^T + b, with x: B x In, W: Out x In, b: Out (optional).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr) {
  require(x.ndim() == 2 && w.ndim() == 2,
          "linear: expected 2-d input and weight, got " + shape_str(x.shape()) + " and " +
              shape_str(w.shape()));
  const std::size_t bs = x.dim(0), in = x.dim(1), out = w.dim(0);
  require(w.dim(1) == in, "linear: input width " + std::to_string(in) +
                              " != weight input width " + std::to_string(w.dim(1)));
  if (b) require(b->size() == out, "linear: bias length != output width");
  Tensor<T> y(Shape{bs, out});
  ECMap<T> xm(x.value().data(), bs, in);
  ECMap<T> wm(w.value().data(), out, in);
  EMap<T> ym(y.mutable_value().data(), bs, out);
  ym.noalias() = xm * wm.transpose();
  if (b) {
    auto bv = b->value();
    auto yv = y.mutable_value();
    for (std::size_t r = 0; r < bs; ++r)
      for (std::size_t c = 0; c < out; ++c) yv[r * out + c] += bv[c];
  }
  check_finite("linear", y);
  const bool rec = b ? tracing<T>({&x, &w, b}) : tracing<T>({&x, &w});
  if (rec) {
    y.set_requires_grad();
    Tensor<T> bias = b ? *b : Tensor<T>();
    Tape<T>::active()->record("linear", [x, w, bias, y, bs, in, out]() mutable {
      if (!y.has_grad()) return;
      ECMap<T> gym(y.grad_view().data(), bs, out);
      if (x.requires_grad()) {
        ECMap<T> wm(w.value().data(), out, in);
        EMap<T> gxm(x.grad().data(), bs, in);
        gxm.noalias() += gym * wm;
      }
      if (w.requires_grad()) {
        ECMap<T> xm(x.value().data(), bs, in);
        EMap<T> gwm(w.grad().data(), out, in);
        gwm.noalias() += gym.transpose() * xm;
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad();
        auto gy = y.grad_view();
        for (std::size_t r = 0; r < bs; ++r)
          for (std::size_t c = 0; c < out; ++c) gb[c] += gy[r * out + c];
      }
    });
  }
  return y;
}

// Row-wise softmax of an N x D matrix.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require(x.ndim() == 2, "softmax_rows: expected 2-d input, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> y(x.shape());
  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = xv.data() + r * d;
    T* yr = yv.data() + r * d;
    T mx = xr[0];
    for (std::size_t c = 1; c < d; ++c) mx = std::max(mx, xr[c]);
    EArrCMap<T> xm(xr, d);
    EArrMap<T> ym(yr, d);
    ym = (xm - mx).exp();
    ym /= ym.sum();
  }
  check_finite("softmax_rows", y);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("softmax_rows", [x, y, n, d]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto yv = y.value();
      auto gx = x.grad();
      for (std::size_t r = 0; r < n; ++r) {
        const T* gr = gy.data() + r * d;
        const T* yr = yv.data() + r * d;
        T dot = T(0);
        for (std::size_t c = 0; c < d; ++c) dot += gr[c] * yr[c];
        T* gxr = gx.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) gxr[c] += yr[c] * (gr[c] - dot);
      }
    });
  }
  return y;
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
  require(logits.ndim() == 2, "cross_entropy_loss: expected B x N logits, got " +
                                  shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  require(labels.size() == b, "cross_entropy_loss: " + std::to_string(labels.size()) +
                                  " labels for batch of " + std::to_string(b));
  for (int lab : labels)
    require(lab >= 0 && static_cast<std::size_t>(lab) < n,
            "cross_entropy_loss: label " + std::to_string(lab) + " outside [0, " +
                std::to_string(n) + ")");
  auto xv = logits.value();
  T total = T(0);
  for (std::size_t r = 0; r < b; ++r) {
    const T* xr = xv.data() + r * n;
    T mx = xr[0];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, xr[c]);
    T se = T(0);
    for (std::size_t c = 0; c < n; ++c) se += std::exp(xr[c] - mx);
    total += mx + std::log(se) - xr[labels[r]];
  }
  Tensor<T> y = Tensor<T>::scalar(total / static_cast<T>(b));
  check_finite("cross_entropy_loss", y);
  if (tracing<T>({&logits})) {
    y.set_requires_grad();
    Tape<T>::active()->record("cross_entropy_loss", [logits, labels, y, b, n]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad_view()[0] / static_cast<T>(b);
      auto xv = logits.value();
      auto gx = logits.grad();
      for (std::size_t r = 0; r < b; ++r) {
        const T* xr = xv.data() + r * n;
        T* gr = gx.data() + r * n;
        T mx = xr[0];
        for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, xr[c]);
        T se = T(0);
        for (std::size_t c = 0; c < n; ++c) se += std::exp(xr[c] - mx);
        for (std::size_t c = 0; c < n; ++c) {
          T p = std::exp(xr[c] - mx) / se;
          gr[c] += g * (p - (static_cast<std::size_t>(labels[r]) == c ? T(1) : T(0)));
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pad_zero(const Tensor<T>& x, std::size_t pad) {
  detail::require_4d("pad_zero", x);
  if (pad == 0) return x;
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
  Tensor<T> y(Shape{b, c, hp, wp});
  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    const T* src = xv.data() + bc * h * w;
    T* dst = yv.data() + bc * hp * wp + pad * wp + pad;
    for (std::size_t r = 0; r < h; ++r) std::memcpy(dst + r * wp, src + r * w, w * sizeof(T));
  }
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("pad_zero", [x, y, b, c, h, w, hp, wp, pad]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto gx = x.grad();
      for (std::size_t bc = 0; bc < b * c; ++bc) {
        const T* src = gy.data() + bc * hp * wp + pad * wp + pad;
        T* dst = gx.data() + bc * h * w;
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t col = 0; col < w; ++col) dst[r * w + col] += src[r * wp + col];
      }
    });
  }
  return y;
}

namespace detail {

// col(C*kh*kw x Ho*Wo) from one already-padded sample (C x H x W), valid windows only.
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t ho, std::size_t wo, T* col) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((ch * kh + ki) * kw + kj) * ho * wo;
        const T* src = x + ch * h * w + ki * w + kj;
        if (stride == 1 && kj + wo <= w) {
          for (std::size_t r = 0; r < ho; ++r)
            std::memcpy(dst + r * wo, src + r * w, wo * sizeof(T));
        } else {
          for (std::size_t r = 0; r < ho; ++r)
            for (std::size_t col_i = 0; col_i < wo; ++col_i)
              dst[r * wo + col_i] = src[r * stride * w + col_i * stride];
        }
      }
}

// Scatter-add transpose of im2col.
template <typename T>
void col2im_add(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t ho, std::size_t wo, T* x) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((ch * kh + ki) * kw + kj) * ho * wo;
        T* dst = x + ch * h * w + ki * w + kj;
        for (std::size_t r = 0; r < ho; ++r)
          for (std::size_t col_i = 0; col_i < wo; ++col_i)
            dst[r * stride * w + col_i * stride] += src[r * wo + col_i];
      }
}

// Sums per-worker partial buffers into dst in worker order.
template <typename T>
void reduce_partials(std::vector<std::vector<T>>& partials, std::span<T> dst) {
  for (auto& p : partials) {
    if (p.empty()) continue;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += p[i];
  }
}

}  // namespace detail

// Cross-correlation of BCHW input with O x I x kH x kW weights.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                 std::size_t stride, std::size_t pad) {
  detail::require_4d("conv2d", input);
  require(weight.ndim() == 4, "conv2d: expected OIHW weight, got " + shape_str(weight.shape()));
  Tensor<T> x = pad_zero(input, pad);
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(1) == input.dim(1),
          "conv2d: input has " + std::to_string(input.dim(1)) + " channels but weight expects " +
              std::to_string(weight.dim(1)));
  require(h >= kh && w >= kw, "conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                  " larger than padded input " + shape_str(x.shape()));
  require((h - kh) % stride == 0 && (w - kw) % stride == 0,
          "conv2d: stride " + std::to_string(stride) + " does not evenly tile padded input " +
              shape_str(x.shape()));
  if (bias) require(bias->size() == o, "conv2d: bias length != output channels");
  const std::size_t ho = (h - kh) / stride + 1, wo = (w - kw) / stride + 1;
  const std::size_t ck = c * kh * kw, p = ho * wo;

  Tensor<T> y(Shape{b, o, ho, wo});
  auto xv = x.value();
  auto yv = y.mutable_value();
  const T* wt = weight.value().data();
  const T* bv = bias ? bias->value().data() : nullptr;
  parallel_for(b, [&](std::size_t b0, std::size_t b1, int) {
    std::vector<T> col(ck * p);
    for (std::size_t s = b0; s < b1; ++s) {
      detail::im2col(xv.data() + s * c * h * w, c, h, w, kh, kw, stride, ho, wo, col.data());
      ECMap<T> wm(wt, o, ck);
      ECMap<T> cm(col.data(), ck, p);
      EMap<T> ym(yv.data() + s * o * p, o, p);
      ym.noalias() = wm * cm;
      if (bv)
        for (std::size_t oc = 0; oc < o; ++oc) ym.row(oc).array() += bv[oc];
    }
  });
  check_finite("conv2d", y);

  const bool rec = bias ? tracing<T>({&x, &weight, bias}) : tracing<T>({&x, &weight});
  if (rec) {
    y.set_requires_grad();
    Tensor<T> bias_t = bias ? *bias : Tensor<T>();
    Tape<T>::active()->record("conv2d", [x, weight, bias_t, y, b, c, h, w, o, kh, kw, stride, ho,
                                         wo, ck, p]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto xv = x.value();
      const T* wt = weight.value().data();
      const bool need_dx = x.requires_grad();
      const bool need_dw = weight.requires_grad();
      const bool need_db = bias_t.defined() && bias_t.requires_grad();
      std::span<T> gx = need_dx ? x.grad() : std::span<T>();
      const int workers = max_threads();
      std::vector<std::vector<T>> dw_parts(workers), db_parts(workers);
      parallel_for(b, [&](std::size_t b0, std::size_t b1, int wk) {
        std::vector<T> col(ck * p), dcol(need_dx ? ck * p : 0);
        auto& dw = dw_parts[wk];
        auto& db = db_parts[wk];
        if (need_dw) dw.assign(o * ck, T(0));
        if (need_db) db.assign(o, T(0));
        for (std::size_t s = b0; s < b1; ++s) {
          ECMap<T> gym(gy.data() + s * o * p, o, p);
          if (need_dw) {
            detail::im2col(xv.data() + s * c * h * w, c, h, w, kh, kw, stride, ho, wo, col.data());
            ECMap<T> cm(col.data(), ck, p);
            EMap<T> dwm(dw.data(), o, ck);
            dwm.noalias() += gym * cm.transpose();
          }
          if (need_db)
            for (std::size_t oc = 0; oc < o; ++oc) db[oc] += gym.row(oc).sum();
          if (need_dx) {
            ECMap<T> wm(wt, o, ck);
            EMap<T> dcm(dcol.data(), ck, p);
            dcm.noalias() = wm.transpose() * gym;
            detail::col2im_add(dcol.data(), c, h, w, kh, kw, stride, ho, wo,
                               gx.data() + s * c * h * w);
          }
        }
      });
      if (need_dw) detail::reduce_partials(dw_parts, weight.grad());
      if (need_db) detail::reduce_partials(db_parts, bias_t.grad());
    });
  }
  return y;
}

// Per-position channel mixing: O x C x 1 x 1 weights applied at every pixel.
template <typename T>
Tensor<T> conv1x1(const Tensor<T>& input, const Tensor<T>& weight) {
  detail::require_4d("conv1x1", input);
  require(weight.ndim() == 4 && weight.dim(2) == 1 && weight.dim(3) == 1,
          "conv1x1: expected O x C x 1 x 1 weight, got " + shape_str(weight.shape()));
  const std::size_t b = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const std::size_t o = weight.dim(0);
  require(weight.dim(1) == c, "conv1x1: input has " + std::to_string(c) +
                                  " channels but weight expects " + std::to_string(weight.dim(1)));
  Tensor<T> y(Shape{b, o, input.dim(2), input.dim(3)});
  auto xv = input.value();
  auto yv = y.mutable_value();
  const T* wt = weight.value().data();
  parallel_for(b, [&](std::size_t b0, std::size_t b1, int) {
    ECMap<T> wm(wt, o, c);
    for (std::size_t s = b0; s < b1; ++s) {
      ECMap<T> xm(xv.data() + s * c * hw, c, hw);
      EMap<T> ym(yv.data() + s * o * hw, o, hw);
      ym.noalias() = wm * xm;
    }
  });
  check_finite("conv1x1", y);
  if (tracing<T>({&input, &weight})) {
    y.set_requires_grad();
    Tape<T>::active()->record("conv1x1", [input, weight, y, b, c, hw, o]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto xv = input.value();
      const T* wt = weight.value().data();
      const bool need_dx = input.requires_grad();
      const bool need_dw = weight.requires_grad();
      std::span<T> gx = need_dx ? input.grad() : std::span<T>();
      const int workers = max_threads();
      std::vector<std::vector<T>> dw_parts(workers);
      parallel_for(b, [&](std::size_t b0, std::size_t b1, int wk) {
        auto& dw = dw_parts[wk];
        if (need_dw) dw.assign(o * c, T(0));
        for (std::size_t s = b0; s < b1; ++s) {
          ECMap<T> gym(gy.data() + s * o * hw, o, hw);
          if (need_dw) {
            ECMap<T> xm(xv.data() + s * c * hw, c, hw);
            EMap<T> dwm(dw.data(), o, c);
            dwm.noalias() += gym * xm.transpose();
          }
          if (need_dx) {
            ECMap<T> wm(wt, o, c);
            EMap<T> gxm(gx.data() + s * c * hw, c, hw);
            gxm.noalias() += wm.transpose() * gym;
          }
        }
      });
      if (need_dw) detail::reduce_partials(dw_parts, weight.grad());
    });
  }
  return y;
}

enum class Mode { kTrain, kEval };

// Per-channel batch normalization over B, H, W. Train mode uses batch
// statistics (biased variance) and updates running stats in place
// (unbiased variance, update factor `momentum`); eval mode uses the
// running stats.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                      T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require_4d("batchnorm2d", x);
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(scale.size() == c && shift.size() == c && running_mean.size() == c &&
              running_var.size() == c,
          "batchnorm2d: per-channel parameter length != " + std::to_string(c));
  require(mode == Mode::kEval || b >= 2,
          "batchnorm2d: train mode needs batch size >= 2, got " + std::to_string(b));

  const std::size_t n = b * hw;
  std::vector<T> mean(c), inv_std(c);
  auto xv = x.value();
  if (mode == Mode::kTrain) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T m = T(0);
      for (std::size_t s = 0; s < b; ++s) {
        const T* p = xv.data() + (s * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) m += p[i];
      }
      m /= static_cast<T>(n);
      T var = T(0);
      for (std::size_t s = 0; s < b; ++s) {
        const T* p = xv.data() + (s * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          T d = p[i] - m;
          var += d * d;
        }
      }
      var /= static_cast<T>(n);
      mean[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      T unbiased = n > 1 ? var * static_cast<T>(n) / static_cast<T>(n - 1) : var;
      running_mean.mutable_value()[ch] =
          (T(1) - momentum) * running_mean.value()[ch] + momentum * m;
      running_var.mutable_value()[ch] =
          (T(1) - momentum) * running_var.value()[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean.value()[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var.value()[ch] + eps);
    }
  }

  Tensor<T> y(x.shape());
  auto yv = y.mutable_value();
  const T* sc = scale.value().data();
  const T* sh = shift.value().data();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = xv.data() + (s * c + ch) * hw;
      T* q = yv.data() + (s * c + ch) * hw;
      const T a = sc[ch] * inv_std[ch];
      const T off = sh[ch] - a * mean[ch];
      for (std::size_t i = 0; i < hw; ++i) q[i] = a * p[i] + off;
    }
  check_finite("batchnorm2d", y);

  if (tracing<T>({&x, &scale, &shift})) {
    y.set_requires_grad();
    Tape<T>::active()->record(
        "batchnorm2d", [x, scale, shift, y, mean, inv_std, mode, b, c, hw, n]() mutable {
          if (!y.has_grad()) return;
          auto gy = y.grad_view();
          auto xv = x.value();
          const T* sc = scale.value().data();
          std::vector<T> sum_gy(c, T(0)), sum_gy_xhat(c, T(0));
          for (std::size_t s = 0; s < b; ++s)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const T* g = gy.data() + (s * c + ch) * hw;
              const T* p = xv.data() + (s * c + ch) * hw;
              T a = T(0), d = T(0);
              for (std::size_t i = 0; i < hw; ++i) {
                a += g[i];
                d += g[i] * (p[i] - mean[ch]) * inv_std[ch];
              }
              sum_gy[ch] += a;
              sum_gy_xhat[ch] += d;
            }
          if (scale.requires_grad()) {
            auto gs = scale.grad();
            for (std::size_t ch = 0; ch < c; ++ch) gs[ch] += sum_gy_xhat[ch];
          }
          if (shift.requires_grad()) {
            auto gs = shift.grad();
            for (std::size_t ch = 0; ch < c; ++ch) gs[ch] += sum_gy[ch];
          }
          if (x.requires_grad()) {
            auto gx = x.grad();
            if (mode == Mode::kTrain) {
              const T invn = T(1) / static_cast<T>(n);
              for (std::size_t s = 0; s < b; ++s)
                for (std::size_t ch = 0; ch < c; ++ch) {
                  const T* g = gy.data() + (s * c + ch) * hw;
                  const T* p = xv.data() + (s * c + ch) * hw;
                  T* gp = gx.data() + (s * c + ch) * hw;
                  const T a = sc[ch] * inv_std[ch];
                  for (std::size_t i = 0; i < hw; ++i) {
                    T xhat = (p[i] - mean[ch]) * inv_std[ch];
                    gp[i] += a * (g[i] - invn * sum_gy[ch] - xhat * invn * sum_gy_xhat[ch]);
                  }
                }
            } else {
              for (std::size_t s = 0; s < b; ++s)
                for (std::size_t ch = 0; ch < c; ++ch) {
                  const T* g = gy.data() + (s * c + ch) * hw;
                  T* gp = gx.data() + (s * c + ch) * hw;
                  const T a = sc[ch] * inv_std[ch];
                  for (std::size_t i = 0; i < hw; ++i) gp[i] += a * g[i];
                }
            }
          }
        });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Pooling and broadcasting
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_4d("global_avg_pool", x);
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{b, c});
  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    T acc = T(0);
    const T* p = xv.data() + bc * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    yv[bc] = acc / static_cast<T>(hw);
  }
  check_finite("global_avg_pool", y);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("global_avg_pool", [x, y, b, c, hw]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto gx = x.grad();
      for (std::size_t bc = 0; bc < b * c; ++bc) {
        const T g = gy[bc] / static_cast<T>(hw);
        T* p = gx.data() + bc * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] += g;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  detail::require_4d("global_max_pool", x);
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{b, c});
  std::vector<std::size_t> argmax(b * c);
  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    const T* p = xv.data() + bc * hw;
    std::size_t best = 0;
    for (std::size_t i = 1; i < hw; ++i)
      if (p[i] > p[best]) best = i;
    yv[bc] = p[best];
    argmax[bc] = best;
  }
  check_finite("global_max_pool", y);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("global_max_pool", [x, y, argmax, b, c, hw]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto gx = x.grad();
      for (std::size_t bc = 0; bc < b * c; ++bc) gx[bc * hw + argmax[bc]] += gy[bc];
    });
  }
  return y;
}

template <typename T>
Tensor<T> channel_pool_avg(const Tensor<T>& x) {
  detail::require_4d("channel_pool_avg", x);
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{b, 1, x.dim(2), x.dim(3)});
  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < hw; ++i) {
      T acc = T(0);
      for (std::size_t ch = 0; ch < c; ++ch) acc += xv[(s * c + ch) * hw + i];
      yv[s * hw + i] = acc / static_cast<T>(c);
    }
  check_finite("channel_pool_avg", y);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("channel_pool_avg", [x, y, b, c, hw]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto gx = x.grad();
      for (std::size_t s = 0; s < b; ++s)
        for (std::size_t i = 0; i < hw; ++i) {
          const T g = gy[s * hw + i] / static_cast<T>(c);
          for (std::size_t ch = 0; ch < c; ++ch) gx[(s * c + ch) * hw + i] += g;
        }
    });
  }
  return y;
}

template <typename T>
Tensor<T> channel_pool_max(const Tensor<T>& x) {
  detail::require_4d("channel_pool_max", x);
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{b, 1, x.dim(2), x.dim(3)});
  std::vector<std::size_t> argmax(b * hw);
  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < hw; ++i) {
      std::size_t best = 0;
      T bv = xv[(s * c) * hw + i];
      for (std::size_t ch = 1; ch < c; ++ch) {
        T v = xv[(s * c + ch) * hw + i];
        if (v > bv) {
          bv = v;
          best = ch;
        }
      }
      yv[s * hw + i] = bv;
      argmax[s * hw + i] = best;
    }
  check_finite("channel_pool_max", y);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("channel_pool_max", [x, y, argmax, b, c, hw]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto gx = x.grad();
      for (std::size_t s = 0; s < b; ++s)
        for (std::size_t i = 0; i < hw; ++i)
          gx[(s * c + argmax[s * hw + i]) * hw + i] += gy[s * hw + i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_4d("concat_channels", a);
  detail::require_4d("concat_channels", b);
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: batch/spatial extents differ, " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const std::size_t bs = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> y(Shape{bs, ca + cb, a.dim(2), a.dim(3)});
  auto av = a.value(), bv = b.value();
  auto yv = y.mutable_value();
  for (std::size_t s = 0; s < bs; ++s) {
    std::memcpy(yv.data() + s * (ca + cb) * hw, av.data() + s * ca * hw, ca * hw * sizeof(T));
    std::memcpy(yv.data() + (s * (ca + cb) + ca) * hw, bv.data() + s * cb * hw,
                cb * hw * sizeof(T));
  }
  if (tracing<T>({&a, &b})) {
    y.set_requires_grad();
    Tape<T>::active()->record("concat_channels", [a, b, y, bs, ca, cb, hw]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t s = 0; s < bs; ++s) {
          const T* src = gy.data() + s * (ca + cb) * hw;
          T* dst = ga.data() + s * ca * hw;
          for (std::size_t i = 0; i < ca * hw; ++i) dst[i] += src[i];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t s = 0; s < bs; ++s) {
          const T* src = gy.data() + (s * (ca + cb) + ca) * hw;
          T* dst = gb.data() + s * cb * hw;
          for (std::size_t i = 0; i < cb * hw; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

// y[b,c,:,:] = x[b,c,:,:] * s[b,c]
template <typename T>
Tensor<T> broadcast_mul_channel(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_4d("broadcast_mul_channel", x);
  require(s.ndim() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1),
          "broadcast_mul_channel: scale " + shape_str(s.shape()) + " does not match input " +
              shape_str(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(x.shape());
  auto xv = x.value();
  auto sv = s.value();
  auto yv = y.mutable_value();
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    const T f = sv[bc];
    const T* p = xv.data() + bc * hw;
    T* q = yv.data() + bc * hw;
    for (std::size_t i = 0; i < hw; ++i) q[i] = f * p[i];
  }
  check_finite("broadcast_mul_channel", y);
  if (tracing<T>({&x, &s})) {
    y.set_requires_grad();
    Tape<T>::active()->record("broadcast_mul_channel", [x, s, y, b, c, hw]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto xv = x.value();
      auto sv = s.value();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t bc = 0; bc < b * c; ++bc) {
          const T f = sv[bc];
          const T* g = gy.data() + bc * hw;
          T* q = gx.data() + bc * hw;
          for (std::size_t i = 0; i < hw; ++i) q[i] += f * g[i];
        }
      }
      if (s.requires_grad()) {
        auto gs = s.grad();
        for (std::size_t bc = 0; bc < b * c; ++bc) {
          const T* g = gy.data() + bc * hw;
          const T* p = xv.data() + bc * hw;
          T acc = T(0);
          for (std::size_t i = 0; i < hw; ++i) acc += g[i] * p[i];
          gs[bc] += acc;
        }
      }
    });
  }
  return y;
}

// y[b,c,h,w] = x[b,c,h,w] * s[b,0,h,w]
template <typename T>
Tensor<T> broadcast_mul_spatial(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_4d("broadcast_mul_spatial", x);
  require(s.ndim() == 4 && s.dim(0) == x.dim(0) && s.dim(1) == 1 && s.dim(2) == x.dim(2) &&
              s.dim(3) == x.dim(3),
          "broadcast_mul_spatial: map " + shape_str(s.shape()) + " does not match input " +
              shape_str(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(x.shape());
  auto xv = x.value();
  auto sv = s.value();
  auto yv = y.mutable_value();
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* m = sv.data() + bb * hw;
      const T* p = xv.data() + (bb * c + ch) * hw;
      T* q = yv.data() + (bb * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) q[i] = m[i] * p[i];
    }
  check_finite("broadcast_mul_spatial", y);
  if (tracing<T>({&x, &s})) {
    y.set_requires_grad();
    Tape<T>::active()->record("broadcast_mul_spatial", [x, s, y, b, c, hw]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto xv = x.value();
      auto sv = s.value();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t bb = 0; bb < b; ++bb)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T* m = sv.data() + bb * hw;
            const T* g = gy.data() + (bb * c + ch) * hw;
            T* q = gx.data() + (bb * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) q[i] += m[i] * g[i];
          }
      }
      if (s.requires_grad()) {
        auto gs = s.grad();
        for (std::size_t bb = 0; bb < b; ++bb)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T* g = gy.data() + (bb * c + ch) * hw;
            const T* p = xv.data() + (bb * c + ch) * hw;
            T* q = gs.data() + bb * hw;
            for (std::size_t i = 0; i < hw; ++i) q[i] += g[i] * p[i];
          }
      }
    });
  }
  return y;
}

// B x 1 x h x w -> B x 1 x H x W, half-pixel-center source mapping.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_4d("bilinear_upsample", x);
  require(x.dim(1) == 1, "bilinear_upsample: expected single-channel input, got " +
                             shape_str(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  Tensor<T> y(Shape{b, 1, out_h, out_w});

  struct Lerp {
    std::size_t i0, i1;
    T w1;  // weight of i1; i0 gets 1-w1
  };
  auto make_axis = [](std::size_t in, std::size_t out) {
    std::vector<Lerp> axis(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      if (src < 0) src = 0;
      double i0f = std::floor(src);
      std::size_t i0 = static_cast<std::size_t>(i0f);
      if (i0 >= in - 1) {
        axis[o] = {in - 1, in - 1, T(0)};
      } else {
        axis[o] = {i0, i0 + 1, static_cast<T>(src - i0f)};
      }
    }
    return axis;
  };
  const auto ay = make_axis(h, out_h);
  const auto ax = make_axis(w, out_w);

  auto xv = x.value();
  auto yv = y.mutable_value();
  for (std::size_t s = 0; s < b; ++s) {
    const T* p = xv.data() + s * h * w;
    T* q = yv.data() + s * out_h * out_w;
    for (std::size_t r = 0; r < out_h; ++r)
      for (std::size_t cidx = 0; cidx < out_w; ++cidx) {
        const auto& ly = ay[r];
        const auto& lx = ax[cidx];
        T v00 = p[ly.i0 * w + lx.i0], v01 = p[ly.i0 * w + lx.i1];
        T v10 = p[ly.i1 * w + lx.i0], v11 = p[ly.i1 * w + lx.i1];
        T top = v00 + lx.w1 * (v01 - v00);
        T bot = v10 + lx.w1 * (v11 - v10);
        q[r * out_w + cidx] = top + ly.w1 * (bot - top);
      }
  }
  check_finite("bilinear_upsample", y);
  if (tracing<T>({&x})) {
    y.set_requires_grad();
    Tape<T>::active()->record("bilinear_upsample", [x, y, ay, ax, b, h, w, out_h,
                                                    out_w]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto gx = x.grad();
      for (std::size_t s = 0; s < b; ++s) {
        const T* g = gy.data() + s * out_h * out_w;
        T* q = gx.data() + s * h * w;
        for (std::size_t r = 0; r < out_h; ++r)
          for (std::size_t cidx = 0; cidx < out_w; ++cidx) {
            const auto& ly = ay[r];
            const auto& lx = ax[cidx];
            const T gv = g[r * out_w + cidx];
            q[ly.i0 * w + lx.i0] += (T(1) - ly.w1) * (T(1) - lx.w1) * gv;
            q[ly.i0 * w + lx.i1] += (T(1) - ly.w1) * lx.w1 * gv;
            q[ly.i1 * w + lx.i0] += ly.w1 * (T(1) - lx.w1) * gv;
            q[ly.i1 * w + lx.i1] += ly.w1 * lx.w1 * gv;
          }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Fused spatial attention core.
//
// Treats each sample's H*W positions as a sequence: per head, A =
// softmax(Qh Kh^T [/ sqrt(dk)]) and out = A Vh, with Q/K/V given as BCHW
// maps and heads as contiguous channel groups. The N x N matrix is held
// per sample per worker only; backward recomputes it from Q and K instead
// of keeping one per batch item.
// ---------------------------------------------------------------------------

namespace detail {

// Gather head slice [c0, c0+dk) of a C x N sample into an N x dk matrix.
template <typename T>
void gather_head(const T* x, std::size_t n, std::size_t c0, std::size_t dk, EMat<T>& out) {
  for (std::size_t j = 0; j < dk; ++j) {
    const T* src = x + (c0 + j) * n;
    for (std::size_t i = 0; i < n; ++i) out(i, j) = src[i];
  }
}

template <typename T>
void scatter_head_add(const EMat<T>& m, std::size_t n, std::size_t c0, std::size_t dk, T* x) {
  for (std::size_t j = 0; j < dk; ++j) {
    T* dst = x + (c0 + j) * n;
    for (std::size_t i = 0; i < n; ++i) dst[i] += m(i, j);
  }
}

template <typename T>
void softmax_rows_inplace(EMat<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
}

}  // namespace detail

template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         std::size_t heads, bool scaled) {
  detail::require_4d("attention_core", q);
  detail::require_same_shape("attention_core", q, k);
  detail::require_same_shape("attention_core", q, v);
  const std::size_t b = q.dim(0), c = q.dim(1), n = q.dim(2) * q.dim(3);
  require(heads >= 1 && c % heads == 0, "attention_core: " + std::to_string(heads) +
                                            " heads do not divide " + std::to_string(c) +
                                            " channels");
  const std::size_t dk = c / heads;
  const T scale = scaled ? T(1) / std::sqrt(static_cast<T>(dk)) : T(1);

  Tensor<T> y(q.shape());
  auto qv = q.value();
  auto kv = k.value();
  auto vv = v.value();
  auto yv = y.mutable_value();
  parallel_for(b, [&](std::size_t b0, std::size_t b1, int) {
    EMat<T> qh(n, dk), kh(n, dk), vh(n, dk), oh(n, dk), att(n, n);
    for (std::size_t s = b0; s < b1; ++s) {
      T* out = yv.data() + s * c * n;
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t c0 = hd * dk;
        detail::gather_head(qv.data() + s * c * n, n, c0, dk, qh);
        detail::gather_head(kv.data() + s * c * n, n, c0, dk, kh);
        detail::gather_head(vv.data() + s * c * n, n, c0, dk, vh);
        att.noalias() = qh * kh.transpose();
        if (scaled) att *= scale;
        detail::softmax_rows_inplace(att);
        oh.noalias() = att * vh;
        for (std::size_t j = 0; j < dk; ++j) {
          T* dst = out + (c0 + j) * n;
          for (std::size_t i = 0; i < n; ++i) dst[i] = oh(i, j);
        }
      }
    }
  });
  check_finite("attention_core", y);

  if (tracing<T>({&q, &k, &v})) {
    y.set_requires_grad();
    Tape<T>::active()->record("attention_core", [q, k, v, y, b, c, n, heads, dk,
                                                 scale]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad_view();
      auto qvs = q.value();
      auto kvs = k.value();
      auto vvs = v.value();
      auto gq = q.grad();
      auto gk = k.grad();
      auto gv = v.grad();
      parallel_for(b, [&](std::size_t b0, std::size_t b1, int) {
        EMat<T> qh(n, dk), kh(n, dk), vh(n, dk), goh(n, dk), att(n, n), datt(n, n), tmp(n, dk);
        for (std::size_t s = b0; s < b1; ++s) {
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t c0 = hd * dk;
            detail::gather_head(qvs.data() + s * c * n, n, c0, dk, qh);
            detail::gather_head(kvs.data() + s * c * n, n, c0, dk, kh);
            detail::gather_head(vvs.data() + s * c * n, n, c0, dk, vh);
            detail::gather_head(gy.data() + s * c * n, n, c0, dk, goh);
            att.noalias() = qh * kh.transpose();
            if (scale != T(1)) att *= scale;
            detail::softmax_rows_inplace(att);
            // dV = A^T gO
            tmp.noalias() = att.transpose() * goh;
            detail::scatter_head_add(tmp, n, c0, dk, gv.data() + s * c * n);
            // dA = gO V^T, then softmax backward into dS (reuses datt)
            datt.noalias() = goh * vh.transpose();
            for (std::size_t r = 0; r < n; ++r) {
              T dot = T(0);
              for (std::size_t j2 = 0; j2 < n; ++j2) dot += datt(r, j2) * att(r, j2);
              for (std::size_t j2 = 0; j2 < n; ++j2)
                datt(r, j2) = att(r, j2) * (datt(r, j2) - dot);
            }
            if (scale != T(1)) datt *= scale;
            tmp.noalias() = datt * kh;
            detail::scatter_head_add(tmp, n, c0, dk, gq.data() + s * c * n);
            tmp.noalias() = datt.transpose() * qh;
            detail::scatter_head_add(tmp, n, c0, dk, gk.data() + s * c * n);
          }
        }
      });
    });
  }
  return y;
}

// Attention matrices for inspection (no autograd): one N x N row-stochastic
// matrix per (sample, head).
template <typename T>
std::vector<EMat<T>> attention_matrices(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads,
                                        bool scaled) {
  const std::size_t b = q.dim(0), c = q.dim(1), n = q.dim(2) * q.dim(3);
  require(c % heads == 0, "attention_matrices: heads do not divide channels");
  const std::size_t dk = c / heads;
  const T scale = scaled ? T(1) / std::sqrt(static_cast<T>(dk)) : T(1);
  std::vector<EMat<T>> out;
  out.reserve(b * heads);
  EMat<T> qh(n, dk), kh(n, dk);
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t hd = 0; hd < heads; ++hd) {
      detail::gather_head(q.value().data() + s * c * n, n, hd * dk, dk, qh);
      detail::gather_head(k.value().data() + s * c * n, n, hd * dk, dk, kh);
      EMat<T> att = qh * kh.transpose();
      if (scaled) att *= scale;
      detail::softmax_rows_inplace(att);
      out.push_back(std::move(att));
    }
  return out;
}

}  // namespace cnntention
