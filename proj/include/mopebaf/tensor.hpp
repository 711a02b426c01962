#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mopebaf/errors.hpp"

namespace mopebaf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A Tensor is a cheap handle: copies share the same storage, the way
/// parameter handles do in most autodiff frameworks. Use clone() for a
/// deep copy. Gradients are recorded only while a GradTape is active on
/// the calling thread and at least one operand requires grad.
class Tensor {
 public:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool grad_populated = false;
    bool requires_grad = false;
  };

  Tensor() : Tensor(Shape{0}) {}

  explicit Tensor(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    s_->data.assign(shape_numel(shape), 0.0);
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, {v}, requires_grad);
  }
  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.s_->data.begin(), t.s_->data.end(), v);
    return t;
  }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<double> data() { return s_->data; }
  std::span<const double> data() const { return s_->data; }
  double& operator[](std::size_t i) { return s_->data[i]; }
  double operator[](std::size_t i) const { return s_->data[i]; }
  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool v) { s_->requires_grad = v; }

  bool has_grad() const { return s_->grad_populated; }
  // Gradient access is const: a Tensor is a handle and the gradient buffer
  // belongs to the shared storage, so backward closures holding const
  // copies still accumulate into it.
  std::span<double> grad() const { return s_->grad; }
  /// Allocates a zero gradient buffer if none exists; returns it.
  std::span<double> ensure_grad() const {
    if (!s_->grad_populated) {
      s_->grad.assign(s_->data.size(), 0.0);
      s_->grad_populated = true;
    }
    return s_->grad;
  }
  void clear_grad() const {
    s_->grad.clear();
    s_->grad_populated = false;
  }

  /// Deep copy of the values; the copy carries no gradient.
  Tensor clone() const {
    Tensor t(s_->shape, s_->data, false);
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  std::shared_ptr<Storage> s_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

/// Ordered record of differentiable operations for one forward pass.
///
/// Constructing a tape makes it the active tape of the calling thread
/// (the previous one is restored on destruction). Ops append a backward
/// closure as they run; backward() replays them in reverse, which is a
/// valid topological order because recording order is execution order.
class GradTape {
 public:
  GradTape() : previous_(active_slot()) { active_slot() = this; }
  ~GradTape() { active_slot() = previous_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_slot(); }

  void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates gradients to every tensor
  /// upstream of the loss that requires grad. Gradients accumulate.
  void backward(Tensor loss) {
    if (loss.numel() != 1) {
      throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    loss.ensure_grad()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  static GradTape*& active_slot() {
    thread_local GradTape* slot = nullptr;
    return slot;
  }

  GradTape* previous_;
  std::vector<std::function<void()>> entries_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  if (GradTape::active() == nullptr) return false;
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

}  // namespace mopebaf
