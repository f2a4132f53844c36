#include "mtat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>

#include "mtat/ops.hpp"
#include "mtat/rng.hpp"

namespace mtat {
namespace {

using D = double;
using Build = std::function<Var<D>(Graph<D>&, const std::vector<Var<D>>&)>;

struct Case {
  std::vector<Tensor<D>> inputs;
  Build build;
};

Tensor<D> random_tensor(Rng& rng, Shape shape, bool away_from_zero = false) {
  Tensor<D> t(std::move(shape));
  for (auto& v : t.data()) {
    double x = rng.uniform(-1.0, 1.0);
    // Keep piecewise-linear ops away from their kink at zero.
    if (away_from_zero && std::abs(x) < 0.05) x = x < 0 ? x - 0.05 : x + 0.05;
    v = x;
  }
  return t;
}

Tensor<D> one_hot_rows(Rng& rng, std::int64_t n, std::int64_t k) {
  Tensor<D> t(Shape{n, k});
  for (std::int64_t i = 0; i < n; ++i) t[static_cast<std::size_t>(i * k + static_cast<std::int64_t>(rng.below(k)))] = 1.0;
  return t;
}

std::int64_t pick(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

Case make_case(const std::string& op, Rng& rng) {
  const std::int64_t n = pick(rng, 1, 3);
  const std::int64_t c = pick(rng, 1, 3);
  const std::int64_t h = pick(rng, 3, 6);
  const std::int64_t w = pick(rng, 3, 6);
  const Shape img{n, c, h, w};
  Case k;
  if (op == "conv2d" || op == "conv_transpose2d") {
    const std::int64_t o = pick(rng, 1, 3);
    const std::int64_t kh = pick(rng, 1, 3), kw = pick(rng, 1, 3);
    const ops::Conv2dAttrs attrs{pick(rng, 1, 2), pick(rng, 0, 1)};
    const bool transposed = op == "conv_transpose2d";
    k.inputs = {random_tensor(rng, img), random_tensor(rng, transposed ? Shape{c, o, kh, kw} : Shape{o, c, kh, kw}),
                random_tensor(rng, Shape{o})};
    k.build = [attrs, transposed](Graph<D>&, const std::vector<Var<D>>& v) {
      return transposed ? ops::conv_transpose2d(v[0], v[1], std::optional(v[2]), attrs)
                        : ops::conv2d(v[0], v[1], std::optional(v[2]), attrs);
    };
  } else if (op == "linear") {
    const std::int64_t o = pick(rng, 1, 4);
    k.inputs = {random_tensor(rng, img), random_tensor(rng, Shape{o, c * h * w}), random_tensor(rng, Shape{o})};
    k.build = [](Graph<D>&, const std::vector<Var<D>>& v) { return ops::linear(v[0], v[1], std::optional(v[2])); };
  } else if (op == "instance_norm") {
    k.inputs = {random_tensor(rng, img), random_tensor(rng, Shape{c}), random_tensor(rng, Shape{c})};
    k.build = [](Graph<D>&, const std::vector<Var<D>>& v) {
      return ops::instance_norm(v[0], std::optional(v[1]), std::optional(v[2]));
    };
  } else if (op == "relu" || op == "leaky_relu" || op == "abs" || op == "tanh" || op == "neg" || op == "scale" ||
             op == "sum" || op == "mean" || op == "sample_mean" || op == "flatten") {
    k.inputs = {random_tensor(rng, img, true)};
    const double factor = rng.uniform(-2.0, 2.0);
    k.build = [op, factor](Graph<D>&, const std::vector<Var<D>>& v) {
      if (op == "relu") return ops::relu(v[0]);
      if (op == "leaky_relu") return ops::leaky_relu(v[0]);
      if (op == "abs") return ops::abs(v[0]);
      if (op == "tanh") return ops::tanh(v[0]);
      if (op == "neg") return ops::neg(v[0]);
      if (op == "scale") return ops::scale(v[0], factor);
      if (op == "sum") return ops::sum(v[0]);
      if (op == "mean") return ops::mean(v[0]);
      if (op == "sample_mean") return ops::sample_mean(v[0]);
      return ops::flatten(v[0]);
    };
  } else if (op == "add" || op == "sub" || op == "mul") {
    k.inputs = {random_tensor(rng, img), random_tensor(rng, img)};
    k.build = [op](Graph<D>&, const std::vector<Var<D>>& v) {
      if (op == "add") return ops::add(v[0], v[1]);
      if (op == "sub") return ops::sub(v[0], v[1]);
      return ops::mul(v[0], v[1]);
    };
  } else if (op == "concat") {
    k.inputs = {random_tensor(rng, img), random_tensor(rng, Shape{n, pick(rng, 1, 3), h, w})};
    k.build = [](Graph<D>&, const std::vector<Var<D>>& v) { return ops::concat_channels<D>({v[0], v[1]}); };
  } else if (op == "tile_label") {
    k.inputs = {random_tensor(rng, Shape{n, c})};
    k.build = [h, w](Graph<D>&, const std::vector<Var<D>>& v) { return ops::tile_label(v[0], h, w); };
  } else if (op == "interpolate") {
    k.inputs = {random_tensor(rng, img), random_tensor(rng, img)};
    Tensor<D> u(Shape{n});
    for (auto& x : u.data()) x = rng.uniform();
    k.build = [u](Graph<D>&, const std::vector<Var<D>>& v) { return ops::interpolate(v[0], v[1], u); };
  } else if (op == "bce_with_logits") {
    k.inputs = {random_tensor(rng, Shape{n, c + 1})};
    Tensor<D> t = one_hot_rows(rng, n, c + 1);
    k.build = [t](Graph<D>&, const std::vector<Var<D>>& v) { return ops::bce_with_logits(v[0], t); };
  } else if (op == "softmax_cross_entropy") {
    k.inputs = {random_tensor(rng, Shape{n, c + 1})};
    Tensor<D> t = one_hot_rows(rng, n, c + 1);
    k.build = [t](Graph<D>&, const std::vector<Var<D>>& v) { return ops::softmax_cross_entropy(v[0], t); };
  } else {
    throw std::logic_error("gradcheck: no case generator for op '" + op + "'");
  }
  return k;
}

// sum(out * r), evaluated with plain loops so the probe adds no error of its own.
double project(const Tensor<D>& out, const Tensor<D>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.storage().size(); ++i) s += out[i] * r[i];
  return s;
}

double check_case(const Case& k, Rng& rng) {
  constexpr double h = 1e-5;
  auto forward = [&](const std::vector<Tensor<D>>& inputs) {
    Graph<D> g;
    std::vector<Var<D>> vars;
    for (const auto& t : inputs) vars.push_back(g.variable(t));
    return k.build(g, vars).value();
  };
  const Tensor<D> base = forward(k.inputs);
  Tensor<D> r(base.shape());
  for (auto& v : r.data()) v = rng.uniform(-1.0, 1.0);

  Graph<D> g;
  std::vector<Var<D>> vars;
  for (const auto& t : k.inputs) vars.push_back(g.variable(t));
  const Var<D> out = k.build(g, vars);
  const Var<D> loss = ops::sum(ops::mul(out, g.constant(r)));
  g.backward(loss);

  double worst = 0.0;
  std::vector<Tensor<D>> probe = k.inputs;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const Tensor<D> analytic = g.grad(vars[i]);
    for (std::size_t e = 0; e < probe[i].storage().size(); ++e) {
      const double orig = probe[i][e];
      probe[i][e] = orig + h;
      const double up = project(forward(probe), r);
      probe[i][e] = orig - h;
      const double down = project(forward(probe), r);
      probe[i][e] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[e];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, int cases_per_op) {
  std::vector<GradcheckResult> results;
  const auto names = ops::catalog();
  for (std::size_t o = 0; o < names.size(); ++o) {
    Rng rng{seed, static_cast<std::uint64_t>(o)};
    GradcheckResult res{names[o], 0, 0.0};
    for (int c = 0; c < cases_per_op; ++c) {
      const Case k = make_case(names[o], rng);
      res.max_rel_error = std::max(res.max_rel_error, check_case(k, rng));
      ++res.cases;
    }
    results.push_back(res);
  }
  return results;
}

}  // namespace mtat
