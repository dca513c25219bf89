#include "splittrain/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace splittrain {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
BasicTensor<T>::BasicTensor() : BasicTensor(Shape{0}, {}) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data,
                            bool requires_grad)
    : impl_(std::make_shared<TensorImpl<T>>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T>::BasicTensor(std::shared_ptr<TensorImpl<T>> impl)
    : impl_(std::move(impl)) {}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value),
                     requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t i) const {
  if (i >= impl_->shape.size()) {
    throw ShapeError("dimension " + std::to_string(i) + " out of range for " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[i];
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
}

template <typename T>
T BasicTensor<T>::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(impl_->shape));
  }
  return impl_->data[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(impl_->shape, impl_->data, impl_->requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(impl_->shape, impl_->data, false);
}

template <typename T>
std::span<T> grad_buffer(const std::shared_ptr<TensorImpl<T>>& impl) {
  if (impl->grad.size() != impl->data.size()) {
    impl->grad.assign(impl->data.size(), T(0));
  }
  return impl->grad;
}

template <typename T>
BasicTensor<T> record(Shape shape, std::vector<T> data,
                      std::vector<BasicTensor<T>> inputs,
                      std::function<void(std::span<const T>)> rule) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const auto& t) { return t.requires_grad(); });
  if (!any) return out;
  for (const auto& t : inputs) {
    if (t.impl()->consumed) {
      throw AutogradError("op reads a tensor whose tape was already consumed");
    }
  }
  auto node = std::make_shared<TapeNode<T>>();
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(rule);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

template <typename T>
Tape<T> Tape<T>::record_from(const BasicTensor<T>& root) {
  Tape tape;
  std::unordered_set<const TensorImpl<T>*> seen;
  // Iterative post-order DFS; recursion depth would otherwise track the
  // network depth times the op count.
  struct Frame {
    std::shared_ptr<TensorImpl<T>> impl;
    std::size_t next;
  };
  std::vector<Frame> stack;
  if (!root.impl()->node) return tape;
  stack.push_back({root.impl(), 0});
  seen.insert(root.impl().get());
  while (!stack.empty()) {
    auto& frame = stack.back();
    const auto& inputs = frame.impl->node->inputs;
    if (frame.next < inputs.size()) {
      auto child = inputs[frame.next++];
      if (child->node && seen.insert(child.get()).second) {
        stack.push_back({std::move(child), 0});
      }
    } else {
      tape.order_.push_back(frame.impl);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  const auto& root = loss.impl();
  if (loss.numel() != 1) {
    throw AutogradError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  if (root->consumed) {
    throw AutogradError("backward() called twice on the same tape");
  }
  if (!root->node) {
    throw AutogradError("backward() on a loss that was not recorded");
  }
  auto tape = Tape<T>::record_from(loss);
  const auto& order = tape.order();
  for (const auto& impl : order) impl->grad.assign(impl->data.size(), T(0));
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& impl = *it;
    impl->node->backward(impl->grad);
    impl->node.reset();
    impl->consumed = true;
    if (impl != root) {
      impl->grad.clear();
      impl->grad.shrink_to_fit();
    }
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward(const BasicTensor<float>&);
template void backward(const BasicTensor<double>&);
template BasicTensor<float> record(Shape, std::vector<float>,
                                   std::vector<BasicTensor<float>>,
                                   std::function<void(std::span<const float>)>);
template BasicTensor<double> record(Shape, std::vector<double>,
                                    std::vector<BasicTensor<double>>,
                                    std::function<void(std::span<const double>)>);
template std::span<float> grad_buffer(const std::shared_ptr<TensorImpl<float>>&);
template std::span<double> grad_buffer(const std::shared_ptr<TensorImpl<double>>&);

}  // namespace splittrain
