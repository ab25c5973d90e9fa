// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// Every op result keeps shared ownership of its inputs plus a closure that
// pushes its output gradient back into them, so a graph lives exactly as long
// as the tensors that reference it. A graph is confined to one thread; the
// values of a finished tensor may be read from any thread.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fedalign::numerics {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  const char* op = "leaf";
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is first written
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node& self)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  // Leaf without gradient tracking.
  static Tensor constant(Shape shape, std::vector<double> values);
  // Leaf whose gradient is accumulated by backward().
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return values().size(); }

  std::span<const double> values() const;
  // Only leaves may be written in place (optimizer updates, finite differences).
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  // Zero-filled view when no gradient has been written yet.
  std::span<const double> grad() const;
  void zero_grad();

  // New leaf holding a copy of the values, cut from the graph.
  Tensor detach() const;

  const char* op_name() const;

  // Engine internals; ops are written against these.
  static Tensor from_node(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Reverse pass from a scalar loss. Leaf gradients accumulate across calls
// until zero_grad(); interior gradients are recomputed on every call.
void backward(const Tensor& loss);

}  // namespace fedalign::numerics
