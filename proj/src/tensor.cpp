#include "falldet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace falldet {

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

namespace detail {

std::shared_ptr<Node> make_op(Shape shape, std::vector<double> value,
                              std::vector<std::shared_ptr<Node>> parents,
                              std::function<void(Node&)> backprop) {
  if (numel(shape) != value.size())
    throw DimensionError("make_op: value length " + std::to_string(value.size()) +
                         " does not match shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool track = false;
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p && p->requires_grad) {
        track = true;
        break;
      }
  }
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backprop = std::move(backprop);
  }
  return node;
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->value.assign(numel(shape), fill);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw DimensionError("from_data: " + std::to_string(data.size()) +
                         " values do not fill shape " + shape_str(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

double Tensor::value() const {
  const auto& n = check();
  if (n.value.size() != 1)
    throw ContractError("value(): tensor " + shape_str(n.shape) + " is not scalar");
  return n.value[0];
}

Tensor Tensor::detached_clone() const {
  const auto& n = check();
  auto node = std::make_shared<detail::Node>();
  node->shape = n.shape;
  node->value = n.value;
  node->requires_grad = n.requires_grad;
  return Tensor(std::move(node));
}

void Tensor::backward() {
  detail::Node* root = node_.get();
  if (!root) throw ContractError("backward on an undefined Tensor");
  if (root->value.size() != 1)
    throw ContractError("backward root must be scalar, got " + shape_str(root->shape));
  if (root->backward_done)
    throw ContractError("backward already ran on this root; rebuild the graph first");
  root->backward_done = true;

  // Iterative post-order over parent edges: parents land before their
  // consumers, so the reversed order processes each node before its inputs.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  struct Frame {
    detail::Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  if (root->requires_grad) {
    stack.push_back({root, 0});
    seen.insert(root);
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::Node* p = f.node->parents[f.next_parent++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) n->ensure_grad();
  root->ensure_grad();
  root->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

}  // namespace falldet
