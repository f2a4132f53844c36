#include "mtat/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mtat {

template <typename T>
AdamState<T> AdamState<T>::fresh(const ParamSet<T>& params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params.value(i).shape());
    s.v.emplace_back(params.value(i).shape());
  }
  return s;
}

template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: state holds " + std::to_string(state.m.size()) +
                                " moments for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = params.value(i).shape();
    if (state.m[i].shape() != s || state.v[i].shape() != s || params.grad(i).shape() != s) {
      throw std::invalid_argument("adam_step: shape drift on '" + params.name(i) + "': param " +
                                  shape_str(s) + ", moment " + shape_str(state.m[i].shape()));
    }
  }
  const auto& c = state.config;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params.value(i).data();
    auto g = params.grad(i).data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      w[k] = static_cast<T>(w[k] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
  params.zero_grad();
}

template <typename T>
void sgd_step(ParamSet<T>& params, double lr) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params.value(i).data();
    const auto g = params.grad(i).data();
    if (w.size() != g.size()) throw std::invalid_argument("sgd_step: gradient shape drift on '" + params.name(i) + "'");
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = static_cast<T>(w[k] - lr * g[k]);
  }
  params.zero_grad();
}

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected adam or sgd)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

template <typename T>
Optimizer<T>::Optimizer(OptimizerKind kind, const ParamSet<T>& params, AdamConfig config)
    : kind_(kind), state_(AdamState<T>::fresh(params, config)) {}

template <typename T>
void Optimizer<T>::step(ParamSet<T>& params) {
  if (kind_ == OptimizerKind::adam) {
    adam_step(params, state_);
  } else {
    state_.t += 1;
    sgd_step(params, state_.config.lr);
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(ParamSet<float>&, AdamState<float>&);
template void adam_step(ParamSet<double>&, AdamState<double>&);
template void sgd_step(ParamSet<float>&, double);
template void sgd_step(ParamSet<double>&, double);
template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace mtat
