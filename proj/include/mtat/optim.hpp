#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtat/param_set.hpp"

namespace mtat {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter moments plus the shared step counter. Moments are stored in
/// the parameter precision; bias corrections are evaluated in double.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;
  AdamConfig config;

  static AdamState fresh(const ParamSet<T>& params, AdamConfig config);
};

/// One bias-corrected Adam update from the gradients held in `params`, which
/// are zeroed afterwards. Throws std::invalid_argument on shape drift.
template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state);

/// w -= lr * grad, then zero the gradients.
template <typename T>
void sgd_step(ParamSet<T>& params, double lr);

enum class OptimizerKind { adam, sgd };

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

/// Adam or plain SGD behind one interface; the learning rate lives in the
/// Adam config for both kinds.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, const ParamSet<T>& params, AdamConfig config);

  void step(ParamSet<T>& params);
  void set_lr(double lr) { state_.config.lr = lr; }
  double lr() const { return state_.config.lr; }
  OptimizerKind kind() const { return kind_; }
  AdamState<T>& state() { return state_; }
  const AdamState<T>& state() const { return state_; }

 private:
  OptimizerKind kind_;
  AdamState<T> state_;
};

}  // namespace mtat
