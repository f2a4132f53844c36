#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mtat/param_set.hpp"
#include "mtat/tensor.hpp"

namespace mtat {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the Graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return graph->requires_grad(id); }
};

/// What a node's backward function sees: the incoming gradient, the forward
/// values, and accumulation buffers for the inputs that need a gradient
/// (nullptr for the ones that do not).
template <typename T>
struct BackwardContext {
  const Tensor<T>& grad_out;
  const Tensor<T>& out;
  std::vector<const Tensor<T>*> inputs;
  std::vector<Tensor<T>*> input_grads;
};

template <typename T>
using BackwardFn = std::function<void(BackwardContext<T>&)>;

/// Append-only record of a forward computation, replayed in reverse by
/// backward(). Node ids increase in creation order, so the record is acyclic
/// by construction. A Graph is confined to one thread.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var<T> constant(Tensor<T> value);
  /// Leaf whose gradient is kept after backward() and readable via grad().
  Var<T> variable(Tensor<T> value);
  /// Leaf bound to a ParamSet entry. Binding the same entry twice yields the
  /// same node, so gradients from every use accumulate.
  Var<T> param(ParamSet<T>& params, std::size_t index);
  Var<T> param(ParamSet<T>& params, const std::string& name);

  /// Later bindings of `params` become constants: no gradient flows into
  /// them and backward() leaves their gradient slots alone.
  void freeze(const ParamSet<T>& params) { frozen_.insert(&params); }
  void freeze_all() { freeze_all_ = true; }

  /// Appends an operation node. The backward function is dropped when no
  /// input requires a gradient.
  Var<T> record(std::string_view op, const std::vector<Var<T>>& inputs, Tensor<T> out,
                BackwardFn<T> backward);

  const Tensor<T>& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar loss. Gradients of variable leaves are
  /// retained; gradients of bound parameters are written into their
  /// ParamSets (every entry of a touched ParamSet is overwritten, zero when
  /// the loss does not depend on it) unless `write_param_grads` is false.
  void backward(Var<T> loss, bool write_param_grads = true);

  /// Gradient of the last backward() with respect to a leaf; zeros when the
  /// leaf was not reached.
  Tensor<T> grad(Var<T> leaf) const;

  /// Number of nodes whose backward function ran in the last sweep.
  std::size_t last_visit_count() const { return last_visits_; }

 private:
  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn<T> backward;
    ParamSet<T>* params = nullptr;
    std::size_t param_index = 0;
    Tensor<T> grad;
    bool has_grad = false;
  };

  Node& check(Var<T> v);

  std::deque<Node> nodes_;
  std::map<std::pair<const void*, std::size_t>, std::size_t> bound_;
  std::set<const void*> frozen_;
  bool freeze_all_ = false;
  std::size_t last_visits_ = 0;
};

}  // namespace mtat
