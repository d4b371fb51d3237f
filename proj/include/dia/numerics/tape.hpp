#pragma once

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>

#include "dia/numerics/array.hpp"
#include "dia/numerics/rng.hpp"

namespace dia {

template <class T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy.
template <class T>
struct Var {
  Graph<T>* g = nullptr;
  int id = -1;

  const BasicArray<T>& value() const { return g->value(*this); }
  int rows() const { return value().rows(); }
  int cols() const { return value().cols(); }
  T item() const { return value().item(); }
  bool valid() const { return g != nullptr && id >= 0; }
};

/// Trainable tensor with its gradient accumulator.
template <class T>
struct Parameter {
  BasicArray<T> value;
  BasicArray<T> grad;
  /// Whether decoupled weight decay applies (false for biases and norm gains).
  bool decay = true;
};

/// Named parameters in deterministic (lexicographic) order.
template <class T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, BasicArray<T> value, bool decay) {
    if (params_.count(name)) throw std::logic_error("param store: duplicate parameter " + name);
    BasicArray<T> grad(value.shape());
    auto [it, ok] = params_.emplace(name, Parameter<T>{std::move(value), std::move(grad), decay});
    return it->second;
  }

  /// Gaussian init with the given std from a per-name derived seed.
  Parameter<T>& add_normal(const std::string& name, std::vector<int> shape, double stddev,
                           std::uint64_t seed) {
    BasicArray<T> v(std::move(shape));
    CounterRng rng(derive_seed(seed, name));
    for (auto& x : v.values()) x = static_cast<T>(stddev * rng.normal());
    return add(name, std::move(v), true);
  }
  Parameter<T>& add_const(const std::string& name, std::vector<int> shape, T fill, bool decay = false) {
    return add(name, BasicArray<T>(std::move(shape), fill), decay);
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("param store: no parameter " + name);
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("param store: no parameter " + name);
    return it->second;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad.fill(T(0));
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>(), p.decay);
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Parameter<T>> params_;
};

/// Reverse-mode tape. Nodes are appended in topological order; backward()
/// walks them in reverse and invokes each node's adjoint closure.
template <class T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const BasicArray<T>&)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(BasicArray<T> v) { return append(std::move(v), false, nullptr, {}); }

  /// Leaf that requires a gradient; the gradient is added to `sink` after backward().
  Var<T> variable(BasicArray<T> v, BasicArray<T>* sink = nullptr) {
    return append(std::move(v), grad_enabled_, sink, {});
  }

  /// Parameter leaf, created once per graph and shared across uses.
  Var<T> param(ParamStore<T>& store, const std::string& name) {
    auto it = param_ids_.find(name);
    if (it != param_ids_.end()) return Var<T>{this, it->second};
    auto& p = store.at(name);
    Var<T> v = variable(p.value, &p.grad);
    param_ids_.emplace(name, v.id);
    return v;
  }

  /// Appends an op result. `bw` is kept only when some input needs a gradient.
  Var<T> push(BasicArray<T> value, std::initializer_list<Var<T>> inputs, Backward bw) {
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) needs = needs || nodes_[static_cast<std::size_t>(in.id)].needs_grad;
    }
    return append(std::move(value), needs, nullptr, needs ? std::move(bw) : Backward{});
  }
  Var<T> push(BasicArray<T> value, const std::vector<Var<T>>& inputs, Backward bw) {
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) needs = needs || nodes_[static_cast<std::size_t>(in.id)].needs_grad;
    }
    return append(std::move(value), needs, nullptr, needs ? std::move(bw) : Backward{});
  }

  const BasicArray<T>& value(Var<T> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  bool needs(Var<T> v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  /// Gradient buffer of a node, allocated (zeroed) on first access.
  BasicArray<T>& grad(Var<T> v) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() != n.value.size()) n.grad = BasicArray<T>(n.value.shape());
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1 (root must be a scalar) and back-propagates.
  void backward(Var<T> root) {
    if (!grad_enabled_) throw std::logic_error("graph: backward on a no-grad graph");
    if (value(root).size() != 1) throw ShapeError("graph: backward root must be scalar");
    grad(root)[0] = T(1);
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) {
        const BasicArray<T> g = std::move(n.grad);
        n.grad = BasicArray<T>();
        n.backward(*this, g);
      } else if (n.sink) {
        auto& s = *n.sink;
        for (std::size_t k = 0; k < s.size(); ++k) s[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    BasicArray<T> value;
    BasicArray<T> grad;
    Backward backward;
    BasicArray<T>* sink = nullptr;
    bool needs_grad = false;
  };

  Var<T> append(BasicArray<T> v, bool needs, BasicArray<T>* sink, Backward bw) {
    nodes_.push_back(Node{std::move(v), BasicArray<T>(), std::move(bw), sink, needs});
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;
  std::unordered_map<std::string, int> param_ids_;
  bool grad_enabled_;
};

using Graph32 = Graph<float>;
using GraphD = Graph<double>;
using ParamStore32 = ParamStore<float>;
using ParamStoreD = ParamStore<double>;

}  // namespace dia
