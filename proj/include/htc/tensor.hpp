#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace htc {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("tensor shape has negative dim");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's grad into its parents' grads. May be empty for
  // leaves. Must not capture a shared_ptr to the node itself.
  std::function<void(Node&)> backward;
  int64_t id = 0;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <typename S>
inline int64_t next_node_id() {
  static int64_t counter = 0;
  return ++counter;
}

}  // namespace detail

// Autograd tensor: a shared handle to a value in the computation graph.
// Ops build the graph define-by-run; backward() walks it in reverse
// creation order. Single-threaded per graph.
template <typename S>
class Tensor {
 public:
  using Node = detail::Node<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return filled(std::move(shape), S(0));
  }

  static Tensor filled(Shape shape, S v) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(shape_numel(n->shape)), v);
    n->id = detail::next_node_id<S>();
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<S> data) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->id = detail::next_node_id<S>();
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return node().shape; }
  int dim(int i) const { return node().shape.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(node().shape.size()); }
  int64_t numel() const { return node().numel(); }

  std::vector<S>& data() { return node().value; }
  const std::vector<S>& data() const { return node().value; }

  bool has_grad() const { return node().grad.size() == node().value.size(); }
  std::vector<S>& grad() {
    node().ensure_grad();
    return node().grad;
  }
  const std::vector<S>& grad() const {
    if (!has_grad()) throw std::runtime_error("tensor has no gradient");
    return node().grad;
  }
  void zero_grad() {
    if (has_grad()) std::fill(node().grad.begin(), node().grad.end(), S(0));
  }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node().requires_grad = v;
    return *this;
  }

  S item() const {
    if (numel() != 1) throw std::runtime_error("item() on non-scalar tensor " + shape_str(shape()));
    return node().value[0];
  }

  // Runs reverse-mode accumulation from this scalar. Seeds d(this)/d(this)=1.
  void backward() const {
    if (numel() != 1) throw std::runtime_error("backward() requires a scalar root");
    Node& root = node();
    if (!root.requires_grad)
      throw std::runtime_error("backward() on a graph with no trainable inputs");

    // Gather reachable nodes; ids increase with creation order, so sorting
    // by id descending is a valid reverse topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{&root};
    seen.insert(&root);
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });

    for (Node* n : order) n->ensure_grad();
    root.grad[0] += S(1);
    for (Node* n : order) {
      if (n->backward) n->backward(*n);
    }
  }

  std::shared_ptr<Node> raw() const { return n_; }
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

 private:
  Node& node() const {
    if (!n_) throw std::runtime_error("use of undefined tensor");
    return *n_;
  }

  std::shared_ptr<Node> n_;
};

// Builds an op node. `parents` participate in autograd; `backward` receives
// the op node and must add into parents' grad buffers (which are allocated).
template <typename S>
Tensor<S> make_op(Shape shape, std::vector<S> value, std::vector<Tensor<S>> parents,
                  std::function<void(detail::Node<S>&)> backward) {
  auto n = std::make_shared<detail::Node<S>>();
  n->shape = std::move(shape);
  if (static_cast<int64_t>(value.size()) != shape_numel(n->shape))
    throw std::logic_error("op produced value of wrong size");
  n->value = std::move(value);
  n->id = detail::next_node_id<S>();
  bool req = false;
  for (auto& p : parents) {
    n->parents.push_back(p.raw());
    req = req || p.raw()->requires_grad;
  }
  n->requires_grad = req;
  if (req) n->backward = std::move(backward);
  return Tensor<S>(std::move(n));
}

// Named trainable (or frozen) tensor. Names are unique within a model and
// encode module/stage, e.g. "cascade.stage1.mask_head.conv2.weight".
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  bool trainable = true;
};

}  // namespace htc
