#include "mtat/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "mtat/ops.hpp"

namespace mtat {
namespace {

template <typename T>
void require_finite_scores(const char* what, Var<T> s) {
  if (!s.value().all_finite()) throw NonFiniteError(std::string("non-finite critic score on ") + what);
}

}  // namespace

void LossWeights::validate() const {
  if (!(adv >= 0 && cls >= 0 && cycle >= 0 && gp >= 0)) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

template <typename T>
Var<T> cycle_loss(Var<T> x, Var<T> x_rec) {
  if (x.shape() != x_rec.shape()) {
    throw ShapeError("cycle_loss: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(x_rec.shape()));
  }
  return ops::mean(ops::abs(ops::sub(x, x_rec)));
}

template <typename T>
Var<T> classification_loss(Var<T> logits, const Tensor<T>& labels) {
  return ops::bce_with_logits(logits, labels);
}

double generator_total(double g_adv, double g_class, double g_cycle, const LossWeights& w) {
  return w.adv * g_adv + w.cls * g_class + w.cycle * g_cycle;
}

double discriminator_total(double d_adv, double gp, double d_class, const LossWeights& w) {
  return w.adv * (d_adv + w.gp * gp) + w.cls * d_class;
}

template <typename T>
Var<T> generator_total(Var<T> g_adv, Var<T> g_class, Var<T> g_cycle, const LossWeights& w) {
  return ops::add(ops::add(ops::scale(g_adv, w.adv), ops::scale(g_class, w.cls)), ops::scale(g_cycle, w.cycle));
}

template <typename T>
Var<T> discriminator_total(Var<T> d_adv, Var<T> gp, Var<T> d_class, const LossWeights& w) {
  return ops::add(ops::scale(ops::add(d_adv, ops::scale(gp, w.gp)), w.adv), ops::scale(d_class, w.cls));
}

template <typename T>
PenaltyProbe<T> probe_gradient_penalty(const Critic<T>& critic, const Tensor<T>& real, const Tensor<T>& fake,
                                       const Tensor<T>& u) {
  for (const T v : u.data()) {
    if (!(v >= T(0) && v <= T(1))) throw std::invalid_argument("gradient penalty: u outside [0, 1]");
  }
  Graph<T> g;
  g.freeze_all();
  const Var<T> mixed = ops::interpolate(g.constant(real), g.constant(fake), u);
  const Var<T> point = g.variable(mixed.value());
  const Var<T> scores = critic(g, point);
  require_finite_scores("interpolates", scores);
  g.backward(ops::sum(scores), false);

  PenaltyProbe<T> probe;
  probe.point = point.value();
  probe.input_grad = g.grad(point);
  const std::int64_t n = real.dim(0);
  const std::int64_t per = real.numel() / n;
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::int64_t q = 0; q < per; ++q) {
      const double v = probe.input_grad[static_cast<std::size_t>(i * per + q)];
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    probe.norms.push_back(norm);
    total += (norm - 1.0) * (norm - 1.0);
  }
  probe.value = total / static_cast<double>(n);
  return probe;
}

template <typename T>
Var<T> gradient_penalty_surrogate(Graph<T>& g, const Critic<T>& critic, const PenaltyProbe<T>& probe, double h) {
  const std::int64_t n = probe.point.dim(0);
  const std::int64_t per = probe.point.numel() / n;
  Tensor<T> plus = probe.point;
  Tensor<T> minus = probe.point;
  Tensor<T> coef(Shape{n});
  for (std::int64_t i = 0; i < n; ++i) {
    const double norm = probe.norms[static_cast<std::size_t>(i)];
    if (norm == 0.0) continue;  // direction undefined; contributes nothing
    for (std::int64_t q = 0; q < per; ++q) {
      const auto k = static_cast<std::size_t>(i * per + q);
      const double step = h * probe.input_grad[k] / norm;
      plus[k] = static_cast<T>(probe.point[k] + step);
      minus[k] = static_cast<T>(probe.point[k] - step);
    }
    coef[static_cast<std::size_t>(i)] =
        static_cast<T>(2.0 * (norm - 1.0) / static_cast<double>(n) / (2.0 * h));
  }
  const Var<T> diff = ops::sub(critic(g, g.constant(plus)), critic(g, g.constant(minus)));
  const Var<T> surrogate = ops::sum(ops::mul(diff, g.constant(coef)));
  // Shift the value onto the penalty itself; the gradient is unaffected.
  const double offset = probe.value - static_cast<double>(surrogate.value().item());
  return ops::add(surrogate, g.constant(Tensor<T>::scalar(static_cast<T>(offset))));
}

template <typename T>
AdversarialTerms<T> adversarial_terms(Graph<T>& g, const Critic<T>& critic, Var<T> real, Var<T> fake,
                                      const Tensor<T>& u, double h) {
  if (real.shape() != fake.shape()) {
    throw ShapeError("adversarial_terms: real " + shape_str(real.shape()) + " vs fake " + shape_str(fake.shape()));
  }
  const Var<T> s_real = critic(g, real);
  const Var<T> s_fake = critic(g, fake);
  require_finite_scores("real images", s_real);
  require_finite_scores("fake images", s_fake);
  const Var<T> mean_fake = ops::mean(s_fake);
  AdversarialTerms<T> out{ops::sub(mean_fake, ops::mean(s_real)), {}, ops::neg(mean_fake)};
  const auto probe = probe_gradient_penalty(critic, real.value(), fake.value(), u);
  out.gp = gradient_penalty_surrogate(g, critic, probe, h);
  return out;
}

#define MTAT_INSTANTIATE_OBJECTIVES(T)                                                                  \
  template Var<T> cycle_loss(Var<T>, Var<T>);                                                           \
  template Var<T> classification_loss(Var<T>, const Tensor<T>&);                                        \
  template Var<T> generator_total(Var<T>, Var<T>, Var<T>, const LossWeights&);                          \
  template Var<T> discriminator_total(Var<T>, Var<T>, Var<T>, const LossWeights&);                      \
  template PenaltyProbe<T> probe_gradient_penalty(const Critic<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                  const Tensor<T>&);                                    \
  template Var<T> gradient_penalty_surrogate(Graph<T>&, const Critic<T>&, const PenaltyProbe<T>&, double); \
  template AdversarialTerms<T> adversarial_terms(Graph<T>&, const Critic<T>&, Var<T>, Var<T>, const Tensor<T>&, \
                                                 double);

MTAT_INSTANTIATE_OBJECTIVES(float)
MTAT_INSTANTIATE_OBJECTIVES(double)

}  // namespace mtat
