#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "falldet/error.hpp"

namespace falldet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// One vertex of the recorded computation graph. Edges point from a result
// to its inputs, so releasing the root releases the whole graph.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Builds an op result node. Graph edges are recorded only when gradients are
// enabled and at least one parent requires them; otherwise the parents and
// the backprop closure are dropped so eval-mode forward carries no tape.
std::shared_ptr<Node> make_op(Shape shape, std::vector<double> value,
                              std::vector<std::shared_ptr<Node>> parents,
                              std::function<void(Node&)> backprop);

}  // namespace detail

// Disables graph recording for its lifetime (thread-local, nestable).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Dense 64-bit tensor handle. Copies are shallow; two Tensors may share the
// same storage and graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return check().shape; }
  std::size_t size() const { return check().value.size(); }
  std::size_t rank() const { return check().shape.size(); }

  const std::vector<double>& data() const { return check().value; }
  std::vector<double>& mutable_data() { return check().value; }

  // Empty until a backward pass (or zero_grad) has populated it.
  const std::vector<double>& grad() const { return check().grad; }
  bool requires_grad() const { return check().requires_grad; }

  // Allocates (or resets) the gradient buffer to zeros.
  void zero_grad() {
    auto& n = check();
    n.grad.assign(n.value.size(), 0.0);
  }

  // Value of a one-element tensor.
  double value() const;

  // Reverse-mode accumulation from a scalar root. Throws ContractError if the
  // root is not scalar or if backward already ran on this root.
  void backward();

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Deep copy with no graph history.
  Tensor detached_clone() const;

 private:
  detail::Node& check() const {
    if (!node_) throw ContractError("operation on an undefined Tensor");
    return *node_;
  }
  std::shared_ptr<detail::Node> node_;
};

}  // namespace falldet
