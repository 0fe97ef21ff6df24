// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/tensor.hpp"

#include <sstream>

#include "upoc2/errors.hpp"

namespace upoc2 {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<Real> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data.assign(data.begin(), data.end());
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

bool Tape::record(std::initializer_list<Tensor> inputs, Tensor& output, std::function<void()> backward) {
  return record(std::vector<Tensor>(inputs), output, std::move(backward));
}

bool Tape::record(const std::vector<Tensor>& inputs, Tensor& output, std::function<void()> backward) {
  if (!enabled_) return false;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return false;
  Node node;
  for (const auto& t : inputs) {
    if (t.defined()) node.inputs.push_back(t.impl());
  }
  output.set_requires_grad(true);
  node.output = output.impl();
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return true;
}

void backward(const Tensor& loss) {
  Tape& tape = Tape::current();
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    tape.clear();
    return;
  }
  const auto& nodes = tape.nodes();
  std::size_t end = nodes.size();
  while (end > 0 && nodes[end - 1].output != loss.impl()) --end;
  if (end == 0) {
    // A leaf loss: d loss / d loss = 1.
    loss.impl()->grad_buffer()[0] += 1.0;
    tape.clear();
    return;
  }
  loss.impl()->grad_buffer()[0] += 1.0;
  for (std::size_t i = end; i-- > 0;) {
    const auto& node = nodes[i];
    if (node.output->grad.empty()) continue;  // not reachable from the loss
    node.backward();
  }
  tape.clear();
}

}  // namespace upoc2
