#pragma once

// Dense tensors with a reverse-mode differentiation tape.
//
// Every differentiable operation appends a node to the tape carrying a
// monotonically increasing sequence number; a node's inputs therefore always
// precede it. Backward rules are written in terms of the same differentiable
// operations, so a backward pass run with `create_graph` is itself recorded
// and can be differentiated again (reverse-over-reverse, to any depth).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "volsynth/error.hpp"

namespace volsynth {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
class BasicTensor;

template <class T>
struct Node {
  using Tensor = BasicTensor<T>;
  /// Returns one gradient per input; entries whose `needs` flag is false may be left undefined.
  using Backward = std::function<std::vector<Tensor>(const Tensor& grad_out, const std::vector<bool>& needs)>;

  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<Tensor> inputs;
  Backward backward;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;
};

namespace detail {
inline bool& grad_mode_ref() {
  thread_local bool enabled = true;
  return enabled;
}
inline std::uint64_t next_seq() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_ref(); }

/// Scoped switch of the recording mode.
class GradModeGuard {
public:
  explicit GradModeGuard(bool enabled) : prev_(detail::grad_mode_ref()) { detail::grad_mode_ref() = enabled; }
  ~GradModeGuard() { detail::grad_mode_ref() = prev_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
  bool prev_;
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

template <class T>
class BasicTensor {
public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->data.assign(volsynth::numel(shape), fill);
    impl_->shape = std::move(shape);
  }
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    if (volsynth::numel(shape) != data.size())
      throw DimensionError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape s) { return BasicTensor(std::move(s), T(0)); }
  static BasicTensor ones(Shape s) { return BasicTensor(std::move(s), T(1)); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }
  template <class Rng>
  static BasicTensor randn(Shape s, Rng& rng, T stddev = T(1)) {
    BasicTensor t(std::move(s));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.impl_->data) v = static_cast<T>(dist(rng)) * stddev;
    return t;
  }
  template <class Rng>
  static BasicTensor uniform(Shape s, Rng& rng, T lo, T hi) {
    BasicTensor t(std::move(s));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& v : t.impl_->data) v = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  const std::vector<T>& data() const { return impl_->data; }
  /// Mutable access; only meaningful for leaves (parameter updates, inputs).
  std::vector<T>& mutable_data() { return impl_->data; }
  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool r) {
    if (impl_->node) throw UsageError("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = r;
    return *this;
  }
  bool is_leaf() const { return !impl_->node; }
  const std::shared_ptr<Node<T>>& node() const { return impl_->node; }
  const TensorImpl<T>* id() const { return impl_.get(); }

  /// Leaf copy of the values, cut from the tape.
  BasicTensor detach() const { return BasicTensor(shape(), data()); }

  // Internal: attach a tape node to a freshly computed result.
  void attach_node(std::shared_ptr<Node<T>> n) {
    impl_->requires_grad = true;
    impl_->node = std::move(n);
  }

private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

template <class T>
void check_finite(const std::vector<T>& data, const char* op) {
  for (const T& v : data)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

/// Wraps forward results into a tensor and records the node when any input
/// participates in differentiation and recording is enabled.
template <class T>
BasicTensor<T> record(Shape shape, std::vector<T> data, const char* op, std::vector<BasicTensor<T>> inputs,
                      typename Node<T>::Backward backward) {
  check_finite(data, op);
  BasicTensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  node->seq = detail::next_seq();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.attach_node(std::move(node));
  return out;
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

struct GradOptions {
  /// Record the backward pass so the returned gradients are differentiable.
  bool create_graph = false;
};

/// Gradients of the scalar `loss` with respect to each tensor in `wrt`.
///
/// Tensors that require grad but do not influence the loss receive zeros.
/// Throws UsageError when `loss` is not scalar or a `wrt` entry does not
/// require grad.
template <class T>
std::vector<BasicTensor<T>> grad(const BasicTensor<T>& loss, const std::vector<BasicTensor<T>>& wrt,
                                 GradOptions opts = {}) {
  using Tensor = BasicTensor<T>;
  if (!loss.defined() || loss.numel() != 1) throw UsageError("backward requires a scalar loss");
  for (const auto& w : wrt)
    if (!w.defined() || !w.requires_grad()) throw UsageError("gradient requested for a tensor that is not on the tape");

  // Collect reachable nodes.
  std::vector<Node<T>*> nodes;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack;
  if (loss.node()) stack.push_back(loss.node().get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& in : n->inputs)
      if (in.node()) stack.push_back(in.node().get());
  }
  std::sort(nodes.begin(), nodes.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq < b->seq; });

  // Relevance: does a node's output (or a leaf) lead to any requested tensor?
  std::unordered_set<const void*> targets;
  for (const auto& w : wrt) targets.insert(w.id());
  std::unordered_map<const Node<T>*, bool> relevant;
  auto tensor_relevant = [&](const Tensor& t) {
    if (!t.requires_grad()) return false;
    if (targets.count(t.id())) return true;
    if (t.node()) {
      auto it = relevant.find(t.node().get());
      return it != relevant.end() && it->second;
    }
    return false;
  };
  for (Node<T>* n : nodes) {
    bool r = false;
    for (const auto& in : n->inputs) r = r || tensor_relevant(in);
    relevant[n] = r;
  }
  // Non-leaf targets: their node output itself is requested.
  std::unordered_map<const Node<T>*, const void*> node_output_id;
  for (const auto& w : wrt)
    if (w.node()) {
      relevant[w.node().get()] = true;
      node_output_id[w.node().get()] = w.id();
    }

  GradModeGuard mode(opts.create_graph);
  std::unordered_map<const Node<T>*, Tensor> node_grads;
  std::unordered_map<const void*, Tensor> leaf_grads;
  auto accumulate = [](Tensor& slot, const Tensor& g) { slot = slot.defined() ? add(slot, g) : g; };

  if (loss.node()) {
    node_grads[loss.node().get()] = Tensor::ones(loss.shape());
  } else {
    leaf_grads[loss.id()] = Tensor::ones(loss.shape());
  }

  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<T>* n = *it;
    if (!relevant[n]) continue;
    auto g_it = node_grads.find(n);
    if (g_it == node_grads.end()) continue;
    std::vector<bool> needs(n->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      needs[i] = tensor_relevant(n->inputs[i]) ||
                 (n->inputs[i].node() && relevant[n->inputs[i].node().get()]);
      any = any || needs[i];
    }
    if (!any) continue;
    const Tensor g_out = g_it->second;
    std::vector<Tensor> gin = n->backward(g_out, needs);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      if (!needs[i] || !gin[i].defined()) continue;
      const Tensor& in = n->inputs[i];
      if (gin[i].shape() != in.shape())
        throw DimensionError(std::string("backward of ") + n->op + " produced gradient of shape " +
                             shape_str(gin[i].shape()) + " for input " + shape_str(in.shape()));
      if (in.node())
        accumulate(node_grads[in.node().get()], gin[i]);
      else
        accumulate(leaf_grads[in.id()], gin[i]);
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    Tensor g;
    if (w.node()) {
      auto f = node_grads.find(w.node().get());
      if (f != node_grads.end()) g = f->second;
    } else {
      auto f = leaf_grads.find(w.id());
      if (f != leaf_grads.end()) g = f->second;
    }
    out.push_back(g.defined() ? g : Tensor::zeros(w.shape()));
  }
  return out;
}

}  // namespace volsynth
