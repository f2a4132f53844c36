#pragma once

#include <functional>
#include <vector>

#include "mtat/graph.hpp"

namespace mtat {

struct LossWeights {
  double adv = 1.0;
  double cls = 10.0;
  double cycle = 10.0;
  double gp = 10.0;

  void validate() const;
};

/// Scalar values of one training step. Generator fields hold the most recent
/// generator update (zero before the first one).
struct LossReport {
  double d_adv = 0.0;
  double d_class = 0.0;
  double d_gp = 0.0;
  double g_adv = 0.0;
  double g_class = 0.0;
  double g_cycle = 0.0;
  double d_total = 0.0;
  double g_total = 0.0;
};

/// mean |x - x_rec|.
template <typename T>
Var<T> cycle_loss(Var<T> x, Var<T> x_rec);

/// Mean binary cross-entropy with logits; labels must be 0/1.
template <typename T>
Var<T> classification_loss(Var<T> logits, const Tensor<T>& labels);

double generator_total(double g_adv, double g_class, double g_cycle, const LossWeights& w);
double discriminator_total(double d_adv, double gp, double d_class, const LossWeights& w);

template <typename T>
Var<T> generator_total(Var<T> g_adv, Var<T> g_class, Var<T> g_cycle, const LossWeights& w);
template <typename T>
Var<T> discriminator_total(Var<T> d_adv, Var<T> gp, Var<T> d_class, const LossWeights& w);

/// Builds per-sample critic scores (shape N) for a batch on the given graph.
template <typename T>
using Critic = std::function<Var<T>(Graph<T>&, Var<T>)>;

/// Gradient penalty at x_hat = u * real + (1 - u) * fake, with the critic's
/// input gradient obtained from a dedicated backward pass.
template <typename T>
struct PenaltyProbe {
  double value = 0.0;
  Tensor<T> point;          // x_hat
  Tensor<T> input_grad;     // d score_i / d x_hat_i, stacked
  std::vector<double> norms;
};

template <typename T>
PenaltyProbe<T> probe_gradient_penalty(const Critic<T>& critic, const Tensor<T>& real, const Tensor<T>& fake,
                                       const Tensor<T>& u);

/// Default finite-difference step of the penalty surrogate.
template <typename T>
constexpr double penalty_step() {
  return sizeof(T) >= 8 ? 1e-5 : 1e-2;
}

/// Scalar on `g` whose value is the penalty and whose gradient with respect
/// to the critic's parameters is that of the penalty. Differentiating the
/// penalty needs d/dphi of the input-gradient norm, i.e. a Hessian-vector
/// product; it is taken as a central difference of the critic along the unit
/// input-gradient direction:
///   sum_i 2 (|g_i| - 1) / N * [s_i(x + h v_i) - s_i(x - h v_i)] / 2h.
template <typename T>
Var<T> gradient_penalty_surrogate(Graph<T>& g, const Critic<T>& critic, const PenaltyProbe<T>& probe,
                                  double h = penalty_step<T>());

template <typename T>
struct AdversarialTerms {
  Var<T> d_adv;  // mean s(fake) - mean s(real)
  Var<T> gp;
  Var<T> g_adv;  // -mean s(fake)
};

/// Throws NonFiniteError when a critic score is not finite.
template <typename T>
AdversarialTerms<T> adversarial_terms(Graph<T>& g, const Critic<T>& critic, Var<T> real, Var<T> fake,
                                      const Tensor<T>& u, double h = penalty_step<T>());

}  // namespace mtat
