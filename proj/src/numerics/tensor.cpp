// SPDX-License-Identifier: Apache-2.0
#include "fedalign/numerics/tensor.hpp"

#include <cmath>
#include <unordered_set>

#include "fedalign/errors.hpp"

namespace fedalign::numerics {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape)
    if (d == 0) throw ContractViolation("tensor extents must be positive, got " + shape_string(shape));
  if (numel(shape) != values.size())
    throw ContractViolation("tensor shape " + shape_string(shape) + " does not match " +
                            std::to_string(values.size()) + " values");
  for (double v : values)
    if (!std::isfinite(v)) throw NumericFault("leaf", "non-finite initial value");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

const detail::Node& checked(const std::shared_ptr<detail::Node>& n) {
  if (!n) throw ContractViolation("use of an undefined tensor");
  return *n;
}

}  // namespace

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), true));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ContractViolation("axis out of range for shape " + shape_string(s));
  return s[axis];
}

std::span<const double> Tensor::values() const { return checked(node_).value; }

std::span<double> Tensor::mutable_values() {
  checked(node_);
  if (!node_->is_leaf()) throw ContractViolation("only leaf tensors can be modified in place");
  return node_->value;
}

double Tensor::item() const {
  const auto& n = checked(node_);
  if (n.value.size() != 1) throw ContractViolation("item() on non-scalar tensor " + shape_string(n.shape));
  return n.value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
bool Tensor::is_leaf() const { return checked(node_).is_leaf(); }
bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const double> Tensor::grad() const {
  checked(node_);
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  checked(node_);
  node_->grad.clear();
}

Tensor Tensor::detach() const { return constant(shape(), checked(node_).value); }

const char* Tensor::op_name() const { return checked(node_).op; }

void backward(const Tensor& loss) {
  const auto& root = loss.node();
  if (!root) throw ContractViolation("backward on an undefined tensor");
  if (root->value.size() != 1)
    throw ContractViolation("backward requires a scalar loss, got shape " + shape_string(root->shape));
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  root->grad_buffer()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf() || !n->backward) continue;
    n->backward(*n);
  }

  for (detail::Node* n : order) {
    if (!n->is_leaf()) continue;
    for (double g : n->grad)
      if (!std::isfinite(g)) throw NumericFault("backward", "non-finite gradient on a leaf");
  }
}

}  // namespace fedalign::numerics
