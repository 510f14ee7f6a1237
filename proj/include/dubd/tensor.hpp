#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dubd {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible or invalid tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff tape (detached loss, second backward, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

/// Configuration or argument outside its valid domain.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Accumulator type for reductions and convolution sums.
template <typename T>
using accum_t = double;

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  [[nodiscard]] bool is_scalar() const { return n == 1 && c == 1 && h == 1 && w == 1; }
  [[nodiscard]] std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline void check_shape_valid(const Shape& s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ShapeError("invalid tensor shape " + s.str());
  }
}

template <typename T>
class Tape;

namespace detail {

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  std::uint64_t id = next_tensor_id();

  TensorImpl(Shape s, std::vector<T> d) : shape(s), data(std::move(d)) {}

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

/// Dense N x C x H x W array, row-major NCHW.
///
/// A Tensor is a shared handle: copies alias the same storage, the way
/// the autodiff tape refers to values. Ops never write into their inputs;
/// only optimizers and explicit `data()` users mutate storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape s) { return full(s, T(0)); }

  static Tensor full(Shape s, T value) {
    check_shape_valid(s);
    return Tensor(std::make_shared<detail::TensorImpl<T>>(s, std::vector<T>(s.numel(), value)));
  }

  /// Takes ownership of `values`; rejects length mismatch and non-finite entries.
  static Tensor from_data(Shape s, std::vector<T> values) {
    check_shape_valid(s);
    if (values.size() != s.numel()) {
      throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                       s.str());
    }
    Tensor t(std::make_shared<detail::TensorImpl<T>>(s, std::move(values)));
    t.check_finite("from_data");
    return t;
  }

  static Tensor scalar(T v) { return from_data(Shape{}, {v}); }

  [[nodiscard]] bool defined() const { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return impl().shape; }
  [[nodiscard]] std::size_t numel() const { return impl().data.size(); }

  [[nodiscard]] std::span<const T> data() const { return impl().data; }
  [[nodiscard]] std::span<T> data() { return impl().data; }

  [[nodiscard]] bool has_grad() const { return !impl().grad.empty(); }
  /// Gradient storage; empty span when no backward pass has reached this tensor.
  [[nodiscard]] std::span<const T> grad() const { return impl().grad; }
  [[nodiscard]] std::span<T> grad() { return impl().grad; }
  void zero_grad() { impl().grad.assign(numel(), T(0)); }
  void clear_grad() { impl().grad.clear(); }

  [[nodiscard]] bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl().requires_grad = on;
    return *this;
  }

  [[nodiscard]] std::uint64_t id() const { return impl().id; }

  [[nodiscard]] T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape().str());
    return impl().data[0];
  }

  [[nodiscard]] std::size_t index(int n, int c, int h, int w) const {
    const Shape& s = shape();
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
  }
  [[nodiscard]] T at(int n, int c, int h, int w) const { return impl().data[index(n, c, h, w)]; }
  T& at(int n, int c, int h, int w) { return impl().data[index(n, c, h, w)]; }

  /// Deep copy detached from any tape, requires_grad cleared.
  [[nodiscard]] Tensor clone() const {
    return Tensor(std::make_shared<detail::TensorImpl<T>>(shape(), impl().data));
  }

  /// Same data under a different shape with equal element count.
  [[nodiscard]] Tensor reshaped(Shape s) const {
    check_shape_valid(s);
    if (s.numel() != numel()) throw ShapeError("cannot reshape " + shape().str() + " to " + s.str());
    return Tensor(std::make_shared<detail::TensorImpl<T>>(s, impl().data));
  }

  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(numel());
    std::transform(impl().data.begin(), impl().data.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>::from_data(shape(), std::move(out));
  }

  void check_finite(const char* where) const {
    for (T v : impl().data) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string("non-finite value in ") + where + " (shape " +
                           shape().str() + ")");
      }
    }
  }

  /// Batch item `i` as an independent 1xCxHxW tensor.
  [[nodiscard]] Tensor slice_batch(int i) const {
    const Shape& s = shape();
    if (i < 0 || i >= s.n) throw ShapeError("batch index out of range");
    const std::size_t per = static_cast<std::size_t>(s.c) * s.plane();
    std::vector<T> out(impl().data.begin() + static_cast<std::ptrdiff_t>(i * per),
                       impl().data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    return Tensor(std::make_shared<detail::TensorImpl<T>>(Shape{1, s.c, s.h, s.w}, std::move(out)));
  }

  [[nodiscard]] bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

  [[nodiscard]] const std::shared_ptr<detail::TensorImpl<T>>& handle() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> p) : impl_(std::move(p)) {}

 private:
  detail::TensorImpl<T>& impl() const {
    if (!impl_) throw Error("use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Stacks 1xCxHxW tensors into an NxCxHxW batch.
template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack_batch of empty list");
  Shape s = items.front().shape();
  std::vector<T> out;
  out.reserve(s.numel() * items.size());
  for (const auto& t : items) {
    if (t.shape() != s) throw ShapeError("stack_batch shape mismatch");
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  s.n = static_cast<int>(items.size()) * s.n;
  return Tensor<T>::from_data(s, std::move(out));
}

template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  return stack_batch(std::span<const Tensor<T>>(items));
}

/// Records differentiable ops while active and replays them backwards once.
///
/// Ops consult the innermost active tape of their scalar type. An op is
/// recorded only when at least one input requires grad; its output then
/// requires grad as well.
template <typename T>
class Tape {
 public:
  using Impl = detail::TensorImpl<T>;

  struct Entry {
    std::vector<std::shared_ptr<Impl>> inputs;
    std::shared_ptr<Impl> output;
    std::function<void()> backward;
  };

  /// RAII activation; restores the previously active tape on destruction.
  class Recording {
   public:
    explicit Recording(Tape& t) : prev_(active_) { active_ = &t; }
    ~Recording() { active_ = prev_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* prev_;
  };

  /// Suspends recording (inference inside a training step).
  class Pause {
   public:
    Pause() : prev_(active_) { active_ = nullptr; }
    ~Pause() { active_ = prev_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* prev_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] Recording record() { return Recording(*this); }

  static Tape* active() { return active_; }

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] bool consumed() const { return consumed_; }

  void push(Entry e) {
    if (consumed_) throw TapeError("recording onto a tape that was already consumed by backward");
    entries_.push_back(std::move(e));
  }

  /// Fills grads of every tensor that participated in producing `loss`.
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw TapeError("backward called twice on the same tape");
    if (loss.numel() != 1) throw TapeError("backward requires a scalar loss, got " + loss.shape().str());
    const auto& h = loss.handle();
    const auto it = std::find_if(entries_.rbegin(), entries_.rend(),
                                 [&](const Entry& e) { return e.output == h; });
    if (it == entries_.rend()) throw TapeError("loss was not produced on this tape");
    h->ensure_grad();
    h->grad[0] += T(1);
    // Entries after the loss cannot contribute to it.
    for (auto e = it; e != entries_.rend(); ++e) {
      if (!e->output->grad.empty()) e->backward();
    }
    consumed_ = true;
    entries_.clear();
  }

 private:
  static inline thread_local Tape* active_ = nullptr;
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Convenience for `tape.backward(loss)`.
template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

namespace detail {

/// Records `fn` for `out` if a tape is active and any input needs grads.
template <typename T, typename Fn>
void record(std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& out, Fn&& fn) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!any) return;
  out.set_requires_grad(true);
  typename Tape<T>::Entry e;
  for (const auto* in : inputs) e.inputs.push_back(in->handle());
  e.output = out.handle();
  e.backward = std::forward<Fn>(fn);
  tape->push(std::move(e));
}

}  // namespace detail

}  // namespace dubd
