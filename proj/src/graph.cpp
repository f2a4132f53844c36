#include "mtat/graph.hpp"

#include <set>
#include <stdexcept>

namespace mtat {

template <typename T>
typename Graph<T>::Node& Graph<T>::check(Var<T> v) {
  if (v.graph != this || v.id >= nodes_.size()) {
    throw std::invalid_argument("variable does not belong to this graph");
  }
  return nodes_[v.id];
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::variable(Tensor<T> value) {
  Node n;
  n.op = "variable";
  n.value = std::move(value);
  n.is_leaf = true;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::param(ParamSet<T>& params, std::size_t index) {
  const auto key = std::make_pair(static_cast<const void*>(&params), index);
  if (const auto it = bound_.find(key); it != bound_.end()) return Var<T>{this, it->second};
  Node n;
  n.op = "param";
  n.external = &params.value(index);
  n.is_leaf = true;
  if (!freeze_all_ && !frozen_.contains(&params)) {
    n.requires_grad = true;
    n.params = &params;
    n.param_index = index;
  }
  nodes_.push_back(std::move(n));
  bound_.emplace(key, nodes_.size() - 1);
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::param(ParamSet<T>& params, const std::string& name) {
  return param(params, params.index_of(name));
}

template <typename T>
Var<T> Graph<T>::record(std::string_view op, const std::vector<Var<T>>& inputs, Tensor<T> out,
                        BackwardFn<T> backward) {
  Node n;
  n.op = op;
  n.value = std::move(out);
  for (const auto& in : inputs) {
    check(in);
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Graph<T>::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.value;
}

template <typename T>
void Graph<T>::backward(Var<T> loss, bool write_param_grads) {
  check(loss);
  if (!value(loss.id).is_scalar()) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     shape_str(value(loss.id).shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor<T>();
  }
  last_visits_ = 0;

  std::vector<char> reachable(loss.id + 1, 0);
  reachable[loss.id] = 1;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (!reachable[id] || !nodes_[id].requires_grad) continue;
    for (const auto in : nodes_[id].inputs) reachable[in] = 1;
  }

  Node& root = nodes_[loss.id];
  root.grad = Tensor<T>(value(loss.id).shape(), T(1));
  root.has_grad = true;

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!reachable[id] || !n.requires_grad || n.is_leaf || !n.has_grad) continue;
    BackwardContext<T> ctx{n.grad, value(id), {}, {}};
    for (const auto in : n.inputs) {
      Node& src = nodes_[in];
      ctx.inputs.push_back(&value(in));
      if (src.requires_grad) {
        if (!src.has_grad) {
          src.grad = Tensor<T>(value(in).shape());
          src.has_grad = true;
        }
        ctx.input_grads.push_back(&src.grad);
      } else {
        ctx.input_grads.push_back(nullptr);
      }
    }
    n.backward(ctx);
    ++last_visits_;
    // Interior gradients are not observable; release them as the sweep passes.
    n.grad = Tensor<T>();
    n.has_grad = false;
  }

  if (!write_param_grads) return;
  std::set<ParamSet<T>*> touched;
  for (auto& n : nodes_) {
    if (n.params) touched.insert(n.params);
  }
  for (auto* ps : touched) ps->zero_grad();
  for (auto& n : nodes_) {
    if (n.params && n.has_grad) n.params->grad(n.param_index) = n.grad;
  }
}

template <typename T>
Tensor<T> Graph<T>::grad(Var<T> leaf) const {
  const Node& n = nodes_.at(leaf.id);
  if (n.has_grad) return n.grad;
  return Tensor<T>(value(leaf.id).shape());
}

template class Graph<float>;
template class Graph<double>;

}  // namespace mtat
