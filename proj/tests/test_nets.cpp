#include <gtest/gtest.h>

#include <cmath>

#include "mtat/data.hpp"
#include "mtat/nets.hpp"
#include "mtat/ops.hpp"
#include "mtat/rng.hpp"

using namespace mtat;

namespace {

Tensor<float> random_images(std::int64_t n, std::int64_t s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t({n, 3, s, s});
  for (auto& v : t.storage()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

}  // namespace

TEST(Generator, PreservesShapeAndStaysInTanhRange) {
  GeneratorConfig cfg;
  auto ps = init_generator<float>(cfg, 7);
  Graph<float> g;
  auto y = generator_forward(g, ps, cfg, g.constant(random_images(16, 32, 1)), g.constant(one_hot(2, 16, 4)));
  ASSERT_EQ(y.shape(), (Shape{16, 3, 32, 32}));
  for (const float v : y.value().storage()) {
    EXPECT_GT(v, -1.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Generator, DeterministicAcrossFreshBuilds) {
  GeneratorConfig cfg;
  cfg.base_width = 8;
  const auto x = random_images(2, 32, 3);
  auto run = [&] {
    auto ps = init_generator<float>(cfg, 11);
    Graph<float> g;
    return generator_forward(g, ps, cfg, g.constant(x), g.constant(one_hot(1, 2, 4))).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Generator, RejectsUnrealisableTopology) {
  GeneratorConfig cfg;
  cfg.image_size = 30;  // not divisible by 2^n_downsample
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.n_domains = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Discriminator, HeadShapes) {
  DiscriminatorConfig cfg;
  auto ps = init_discriminator<float>(cfg, 7);
  Graph<float> g;
  auto out = discriminator_forward(g, ps, cfg, g.constant(random_images(16, 32, 2)));
  EXPECT_EQ(out.cls.shape(), (Shape{16, 4}));
  EXPECT_EQ(out.src.shape()[0], 16);
  EXPECT_TRUE(out.src.value().all_finite());
}

// Input gradient of the critic, checked by a central difference on one pixel.
TEST(Discriminator, InputGradientMatchesFiniteDifference) {
  DiscriminatorConfig cfg;
  cfg.base_width = 4;
  auto ps = init_discriminator<double>(cfg, 5);
  Rng rng(9);
  Tensor<double> x({1, 3, 32, 32});
  for (auto& v : x.storage()) v = rng.uniform(-1.0, 1.0);
  Graph<double> g;
  auto xv = g.variable(x);
  g.backward(ops::mean(discriminator_forward(g, ps, cfg, xv).src), false);
  const auto grad = g.grad(xv);
  ASSERT_TRUE(grad.all_finite());
  const std::size_t pix = 1 * 32 * 32 + 17 * 32 + 9;
  auto score = [&](double delta) {
    Tensor<double> xp = x;
    xp[pix] += delta;
    Graph<double> h;
    h.freeze_all();
    return ops::mean(discriminator_forward(h, ps, cfg, h.constant(xp)).src).value().item();
  };
  const double fd = (score(1e-5) - score(-1e-5)) / 2e-5;
  EXPECT_NEAR(grad[pix], fd, 1e-6 + 1e-4 * std::abs(fd));
}

TEST(Init, BitIdenticalForSameSeed) {
  GeneratorConfig gc;
  DiscriminatorConfig dc;
  EXPECT_TRUE(init_generator<float>(gc, 3).values_equal(init_generator<float>(gc, 3)));
  EXPECT_TRUE(init_discriminator<float>(dc, 3).values_equal(init_discriminator<float>(dc, 3)));
  EXPECT_FALSE(init_generator<float>(gc, 3).values_equal(init_generator<float>(gc, 4)));
}

TEST(Init, ConvWeightVarianceMatchesTarget) {
  GeneratorConfig cfg;
  const auto ps = init_generator<double>(cfg, 1);
  struct Case {
    const char* name;
    double fan_in, gain;
  };
  const std::int64_t c = cfg.base_width * 4;
  for (const Case& k : {Case{"res0.conv1.w", double(c * 9), std::sqrt(2.0)}, Case{"res1.conv2.w", double(c * 9), 1.0},
                        Case{"stem.conv.w", double(7 * 49), std::sqrt(2.0)}}) {
    const auto& w = ps.value(ps.index_of(k.name));
    ASSERT_GE(w.numel(), 10000) << k.name;
    double s = 0, ss = 0;
    for (const double v : w.storage()) {
      s += v;
      ss += v * v;
    }
    const double n = static_cast<double>(w.numel());
    const double var = ss / n - (s / n) * (s / n);
    const double target = k.gain * k.gain / k.fan_in;
    EXPECT_NEAR(var / target, 1.0, 0.2) << k.name;
  }
}

TEST(Init, BiasesAreZero) {
  const auto g = init_generator<float>(GeneratorConfig{}, 2);
  const auto d = init_discriminator<float>(DiscriminatorConfig{}, 2);
  for (const auto* ps : {&g, &d}) {
    for (std::size_t i = 0; i < ps->size(); ++i) {
      const auto& n = ps->name(i);
      if (n.size() > 2 && n.substr(n.size() - 2) == ".b") {
        for (const float v : ps->value(i).storage()) EXPECT_EQ(v, 0.0f) << n;
      }
    }
  }
}
