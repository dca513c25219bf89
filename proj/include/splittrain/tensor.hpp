#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace splittrain {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
struct TensorImpl;

// A recorded op: the output it produced, the tensors it read, and the rule
// that pushes the output gradient back into the inputs' gradient buffers.
template <typename T>
struct TapeNode {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(std::span<const T> grad_out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::shared_ptr<TapeNode<T>> node;
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// detached deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor();
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value);

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Parameters are updated in place by optimizers and loaders; activations
  // are never written after construction.
  std::span<T> mutable_data() { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return impl_->node == nullptr; }

  T item() const;
  T at(std::size_t flat) const { return impl_->data.at(flat); }

  BasicTensor clone() const;
  BasicTensor detach() const;

  bool same_storage(const BasicTensor& other) const {
    return impl_ == other.impl_;
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  explicit BasicTensor(std::shared_ptr<TensorImpl<T>> impl);

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

/// Linearized view of the recorded graph reachable from a loss, in
/// topological order (inputs before the ops that read them).
template <typename T>
class Tape {
 public:
  static Tape record_from(const BasicTensor<T>& root);

  std::size_t size() const { return order_.size(); }
  const std::vector<std::shared_ptr<TensorImpl<T>>>& order() const {
    return order_;
  }

 private:
  std::vector<std::shared_ptr<TensorImpl<T>>> order_;
};

/// Reverse-mode pass from a scalar loss. Leaf gradients accumulate into
/// existing buffers (call zero_grad between steps). The recorded graph is
/// released afterwards; a second call on the same loss throws.
template <typename T>
void backward(const BasicTensor<T>& loss);

// Attaches a backward rule to a freshly computed output when recording is
// active and any input requires grad.
template <typename T>
BasicTensor<T> record(Shape shape, std::vector<T> data,
                      std::vector<BasicTensor<T>> inputs,
                      std::function<void(std::span<const T>)> rule);

// Adds into an input's gradient buffer, allocating it on first use.
template <typename T>
std::span<T> grad_buffer(const std::shared_ptr<TensorImpl<T>>& impl);

}  // namespace splittrain
