#include "mtat/nets.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mtat/ops.hpp"
#include "mtat/rng.hpp"

namespace mtat {
namespace {

constexpr double kReluGain = 1.4142135623730951;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
void add_normal(ParamSet<T>& ps, Rng& rng, const std::string& name, Shape shape, double fan_in, double gain) {
  Tensor<T> t(std::move(shape));
  const double std = gain / std::sqrt(fan_in);
  for (auto& v : t.data()) v = static_cast<T>(std * rng.normal());
  ps.add(name, std::move(t));
}

template <typename T>
void add_norm(ParamSet<T>& ps, const std::string& prefix, std::int64_t c) {
  ps.add(prefix + ".gamma", Tensor<T>(Shape{c}, T(1)));
  ps.add(prefix + ".beta", Tensor<T>(Shape{c}, T(0)));
}

template <typename T>
Var<T> conv(Graph<T>& g, ParamSet<T>& ps, const std::string& name, Var<T> x, std::int64_t stride, std::int64_t pad,
            bool bias) {
  std::optional<Var<T>> b;
  if (bias) b = g.param(ps, name + ".b");
  return ops::conv2d(x, g.param(ps, name + ".w"), b, ops::Conv2dAttrs{stride, pad});
}

template <typename T>
Var<T> norm(Graph<T>& g, ParamSet<T>& ps, const std::string& name, Var<T> x) {
  return ops::instance_norm(x, std::optional(g.param(ps, name + ".gamma")),
                            std::optional(g.param(ps, name + ".beta")));
}

}  // namespace

void GeneratorConfig::validate() const {
  require(image_size > 0 && image_channels > 0 && base_width > 0, "generator: sizes must be positive");
  require(n_downsample >= 0 && n_resblocks >= 0, "generator: negative layer count");
  require(n_domains >= 2, "generator: n_domains must be at least 2");
  require(image_size % (std::int64_t{1} << n_downsample) == 0,
          "generator: image_size " + std::to_string(image_size) + " not divisible by 2^" +
              std::to_string(n_downsample));
}

void DiscriminatorConfig::validate() const {
  require(image_size > 0 && image_channels > 0 && base_width > 0, "discriminator: sizes must be positive");
  require(n_layers >= 1, "discriminator: n_layers must be at least 1");
  require(n_domains >= 2, "discriminator: n_domains must be at least 2");
  require(image_size % (std::int64_t{1} << n_layers) == 0 && trunk_size() >= 1,
          "discriminator: image_size " + std::to_string(image_size) + " not divisible by 2^" +
              std::to_string(n_layers));
}

template <typename T>
ParamSet<T> init_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng{seed, 1};
  ParamSet<T> ps;
  const std::int64_t w = cfg.base_width;
  const std::int64_t cin = cfg.image_channels + cfg.n_domains;
  // Convolutions followed by instance norm carry no bias: the norm's shift
  // absorbs it.
  add_normal(ps, rng, "stem.conv.w", {w, cin, 7, 7}, double(cin * 49), kReluGain);
  add_norm(ps, "stem.norm", w);
  std::int64_t c = w;
  for (std::int64_t i = 0; i < cfg.n_downsample; ++i) {
    const auto p = "down" + std::to_string(i);
    add_normal(ps, rng, p + ".conv.w", {2 * c, c, 4, 4}, double(c * 16), kReluGain);
    add_norm(ps, p + ".norm", 2 * c);
    c *= 2;
  }
  for (std::int64_t i = 0; i < cfg.n_resblocks; ++i) {
    const auto p = "res" + std::to_string(i);
    add_normal(ps, rng, p + ".conv1.w", {c, c, 3, 3}, double(c * 9), kReluGain);
    add_norm(ps, p + ".norm1", c);
    add_normal(ps, rng, p + ".conv2.w", {c, c, 3, 3}, double(c * 9), 1.0);
    add_norm(ps, p + ".norm2", c);
  }
  for (std::int64_t i = 0; i < cfg.n_downsample; ++i) {
    const auto p = "up" + std::to_string(i);
    // A stride-2, 4x4 transposed conv feeds each output from c * 4 weights.
    add_normal(ps, rng, p + ".conv.w", {c, c / 2, 4, 4}, double(c * 4), kReluGain);
    add_norm(ps, p + ".norm", c / 2);
    c /= 2;
  }
  add_normal(ps, rng, "out.conv.w", {cfg.image_channels, c, 7, 7}, double(c * 49), 1.0);
  ps.add("out.conv.b", Tensor<T>(Shape{cfg.image_channels}));
  return ps;
}

template <typename T>
ParamSet<T> init_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng{seed, 2};
  ParamSet<T> ps;
  std::int64_t c = cfg.image_channels;
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    const std::int64_t o = cfg.base_width << i;
    const auto p = "trunk" + std::to_string(i);
    add_normal(ps, rng, p + ".w", {o, c, 4, 4}, double(c * 16), kReluGain);
    ps.add(p + ".b", Tensor<T>(Shape{o}));
    c = o;
  }
  const std::int64_t k = cfg.trunk_size();
  add_normal(ps, rng, "src.w", {1, c, 3, 3}, double(c * 9), 1.0);
  ps.add("src.b", Tensor<T>(Shape{1}));
  add_normal(ps, rng, "cls.w", {cfg.n_domains, c, k, k}, double(c * k * k), 1.0);
  ps.add("cls.b", Tensor<T>(Shape{cfg.n_domains}));
  return ps;
}

template <typename T>
Var<T> generator_forward(Graph<T>& g, ParamSet<T>& ps, const GeneratorConfig& cfg, Var<T> x, Var<T> label) {
  const Shape want{x.shape().empty() ? 0 : x.shape()[0], cfg.image_channels, cfg.image_size, cfg.image_size};
  if (x.shape() != want) {
    throw ShapeError("generator: input " + shape_str(x.shape()) + " vs expected " + shape_str(want));
  }
  if (label.shape() != Shape{want[0], cfg.n_domains}) {
    throw ShapeError("generator: label " + shape_str(label.shape()) + " vs expected " +
                     shape_str(Shape{want[0], cfg.n_domains}));
  }
  const auto s = cfg.image_size;
  Var<T> h = ops::concat_channels<T>({x, ops::tile_label(label, s, s)});
  h = ops::relu(norm(g, ps, "stem.norm", conv(g, ps, "stem.conv", h, 1, 3, false)));
  for (std::int64_t i = 0; i < cfg.n_downsample; ++i) {
    const auto p = "down" + std::to_string(i);
    h = ops::relu(norm(g, ps, p + ".norm", conv(g, ps, p + ".conv", h, 2, 1, false)));
  }
  for (std::int64_t i = 0; i < cfg.n_resblocks; ++i) {
    const auto p = "res" + std::to_string(i);
    Var<T> r = ops::relu(norm(g, ps, p + ".norm1", conv(g, ps, p + ".conv1", h, 1, 1, false)));
    r = norm(g, ps, p + ".norm2", conv(g, ps, p + ".conv2", r, 1, 1, false));
    h = ops::add(h, r);
  }
  for (std::int64_t i = 0; i < cfg.n_downsample; ++i) {
    const auto p = "up" + std::to_string(i);
    h = ops::conv_transpose2d(h, g.param(ps, p + ".conv.w"), std::optional<Var<T>>{}, ops::Conv2dAttrs{2, 1});
    h = ops::relu(norm(g, ps, p + ".norm", h));
  }
  return ops::tanh(conv(g, ps, "out.conv", h, 1, 3, true));
}

template <typename T>
DiscriminatorOutput<T> discriminator_forward(Graph<T>& g, ParamSet<T>& ps, const DiscriminatorConfig& cfg, Var<T> x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[1] != cfg.image_channels || xs[2] != cfg.image_size || xs[3] != cfg.image_size) {
    throw ShapeError("discriminator: input " + shape_str(xs) + " vs expected [Nx" +
                     std::to_string(cfg.image_channels) + "x" + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.image_size) + "]");
  }
  Var<T> h = x;
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    h = ops::leaky_relu(conv(g, ps, "trunk" + std::to_string(i), h, 2, 1, true));
  }
  const Var<T> src = conv(g, ps, "src", h, 1, 1, true);
  const Var<T> cls = ops::flatten(conv(g, ps, "cls", h, 1, 0, true));
  return {src, cls};
}

template <typename T>
Var<T> critic_scores(Graph<T>& g, ParamSet<T>& ps, const DiscriminatorConfig& cfg, Var<T> x) {
  return ops::sample_mean(discriminator_forward(g, ps, cfg, x).src);
}

#define MTAT_INSTANTIATE_NETS(T)                                                                              \
  template ParamSet<T> init_generator(const GeneratorConfig&, std::uint64_t);                                 \
  template ParamSet<T> init_discriminator(const DiscriminatorConfig&, std::uint64_t);                         \
  template Var<T> generator_forward(Graph<T>&, ParamSet<T>&, const GeneratorConfig&, Var<T>, Var<T>);         \
  template DiscriminatorOutput<T> discriminator_forward(Graph<T>&, ParamSet<T>&, const DiscriminatorConfig&, \
                                                        Var<T>);                                              \
  template Var<T> critic_scores(Graph<T>&, ParamSet<T>&, const DiscriminatorConfig&, Var<T>);

MTAT_INSTANTIATE_NETS(float)
MTAT_INSTANTIATE_NETS(double)

}  // namespace mtat
