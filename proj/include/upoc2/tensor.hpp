// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace upoc2 {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

// 64-byte aligned storage. Vectorised reductions peel differently on
// differently aligned buffers, which would make results depend on where
// malloc happened to place them.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
  friend bool operator!=(const AlignedAllocator&, const AlignedAllocator&) { return false; }
};
using Buffer = std::vector<Real, AlignedAllocator<Real>>;
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until written by backward
  bool requires_grad = false;

  // Allocates the gradient buffer on first use.
  Buffer& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

// Reference-counted handle to a dense row-major array. Copies share storage;
// use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<Real> data() { return impl_->data; }
  std::span<const Real> data() const { return impl_->data; }
  Real& at(std::size_t flat) { return impl_->data.at(flat); }
  Real at(std::size_t flat) const { return impl_->data.at(flat); }
  Real item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Real> grad() const { return impl_->grad; }
  std::span<Real> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  // Deep copy of values (and requires_grad), no gradient, no tape history.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Append-only record of differentiable operations executed on this thread.
class Tape {
 public:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    // Reads output->grad and accumulates into the inputs' grads.
    std::function<void()> backward;
  };

  static Tape& current();

  bool recording() const { return enabled_; }
  void set_recording(bool enabled) { enabled_ = enabled; }

  // Records `backward` if any input requires a gradient; marks `output` as
  // requiring one in that case. Returns whether the node was recorded.
  bool record(std::initializer_list<Tensor> inputs, Tensor& output,
              std::function<void()> backward);
  bool record(const std::vector<Tensor>& inputs, Tensor& output,
              std::function<void()> backward);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  bool enabled_ = true;
};

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::current().recording()) { Tape::current().set_recording(false); }
  ~NoGradGuard() { Tape::current().set_recording(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Seeds d(loss)/d(loss) = 1 and runs the recorded rules in reverse order.
// Gradients of leaves accumulate across calls until zero_grad(). The tape
// is cleared afterwards.
void backward(const Tensor& loss);

}  // namespace upoc2
