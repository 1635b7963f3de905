#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cnntention {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// ---------------------------------------------------------------------------
// Threading. Kernels parallelize over independent slices (batch items,
// samples); worker count is capped globally. threads()==1 runs loops inline,
// which keeps single-threaded results bit-identical run to run.
// ---------------------------------------------------------------------------

inline int& thread_cap() {
  static int cap = []() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
  }();
  return cap;
}

inline void set_max_threads(int n) { thread_cap() = n < 1 ? 1 : n; }
inline int max_threads() { return thread_cap(); }

// body(begin, end, worker_index); ranges partition [0, n).
template <typename F>
void parallel_for(std::size_t n, F&& body) {
  int workers = max_threads();
  if (workers > static_cast<int>(n)) workers = static_cast<int>(n);
  if (workers <= 1) {
    if (n > 0) body(std::size_t{0}, n, 0);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers - 1);
  std::size_t chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    std::size_t b = chunk * w;
    std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    threads.emplace_back([&, b, e, w]() { body(b, e, w); });
  }
  body(std::size_t{0}, std::min(n, chunk), 0);
  for (auto& t : threads) t.join();
}

// ---------------------------------------------------------------------------
// Tensor: shared handle to an N-d row-major value array with an optional
// same-shape gradient accumulator. Copies alias the same storage, so
// parameters stay shared between the model, tape closures and the optimizer.
// ---------------------------------------------------------------------------

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until touched by backward
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : d_(std::make_shared<TensorData<T>>()) {
    d_->shape = std::move(shape);
    d_->value.assign(numel(d_->shape), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : d_(std::make_shared<TensorData<T>>()) {
    require(numel(shape) == values.size(),
            "tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                shape_str(shape));
    d_->shape = std::move(shape);
    d_->value = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t ndim() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape[i]; }
  std::size_t size() const { return d_->value.size(); }

  std::span<const T> value() const { return {d_->value.data(), d_->value.size()}; }
  std::span<T> mutable_value() { return {d_->value.data(), d_->value.size()}; }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool rg = true) {
    d_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }

  // Allocates a zeroed accumulator on first access.
  std::span<T> grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), T(0));
    return {d_->grad.data(), d_->grad.size()};
  }

  std::span<const T> grad_view() const { return {d_->grad.data(), d_->grad.size()}; }

  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
  }

  void drop_grad() { d_->grad.clear(); }

  T item() const {
    require(size() == 1, "item() on non-scalar tensor " + shape_str(shape()));
    return d_->value[0];
  }

  // Node identity (aliasing test), independent of values.
  const void* node() const { return d_.get(); }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

template <typename T>
inline void check_finite(const char* op, std::span<const T> v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      fail(std::string("non-finite value produced by op '") + op + "' at flat index " +
           std::to_string(i));
    }
  }
}

template <typename T>
inline void check_finite(const char* op, const Tensor<T>& t) {
  check_finite(op, t.value());
}

// ---------------------------------------------------------------------------
// Tape: ordered record of executed ops. Ops append a backward rule as they
// run, so the list is topologically ordered by construction; backward()
// seeds the loss gradient and replays the rules in reverse. Rules must
// no-op when their output never received a gradient (dead branches).
// Single-writer: one thread builds and replays a tape.
// ---------------------------------------------------------------------------

template <typename T>
class Tape {
 public:
  Tape() : prev_(active_ptr()) { active_ptr() = this; }
  ~Tape() { active_ptr() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_ptr(); }

  void record(const char* op, std::function<void()> rule) {
    entries_.push_back({op, std::move(rule)});
  }

  std::size_t num_ops() const { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays all rules in reverse order.
  // Calling twice accumulates gradients twice.
  void backward(Tensor<T> loss) {
    require(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    require(loss.requires_grad(), "backward: loss does not require grad (nothing recorded)");
    loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->rule();
  }

 private:
  struct Entry {
    const char* op;
    std::function<void()> rule;
  };

  static Tape*& active_ptr() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<Entry> entries_;
  Tape* prev_ = nullptr;
};

// True when an op executed now should record a backward rule.
template <typename T>
inline bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace cnntention
