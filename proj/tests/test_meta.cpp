#include <gtest/gtest.h>

#include <cmath>

#include "mtat/artifacts.hpp"
#include "mtat/meta.hpp"
#include "mtat/ops.hpp"
#include "mtat/pipeline.hpp"
#include "tiny.hpp"

using namespace mtat;

namespace {

ParamSet<double> scalar(double v) {
  ParamSet<double> ps;
  ps.add("phi", Tensor<double>({1}, v));
  return ps;
}

// L_c(phi) = (phi - c)^2 / 2
TaskLoss<double> quadratic(double c) {
  return [c](Graph<double>& g, ParamSet<double>& ps) {
    auto d = ops::add(g.param(ps, 0), g.constant(Tensor<double>({1}, -c)));
    return ops::scale(ops::sum(ops::mul(d, d)), 0.5);
  };
}

Optimizer<double> sgd(const ParamSet<double>& ps, double lr) {
  return Optimizer<double>(OptimizerKind::sgd, ps, AdamConfig{lr, 0.5, 0.999, 1e-8});
}

const Splits& tiny_data() {
  static const Splits data = prepare_data(tiny_config());
  return data;
}

}  // namespace

TEST(SgdInnerLoop, ClosedFormOnQuadratic) {
  for (const double c : {-1.0, 1.0, 2.5}) {
    for (std::int64_t k = 1; k <= 5; ++k) {
      const auto a = sgd_inner_loop(scalar(0.3), quadratic(c), 0.5, k);
      EXPECT_NEAR(a.value(0)[0], c + std::pow(0.5, static_cast<double>(k)) * (0.3 - c), 1e-12);
    }
  }
}

TEST(Reptile, OneMetaStepByHand) {
  auto phi = scalar(0.0);
  const auto a = sgd_inner_loop(phi, quadratic(1.0), 0.5, 1);
  EXPECT_DOUBLE_EQ(a.value(0)[0], 0.5);
  auto outer = sgd(phi, 1.0);
  reptile_outer_step(phi, a, outer);
  EXPECT_DOUBLE_EQ(phi.value(0)[0], 0.5);
}

TEST(Reptile, SingleStepsMatchRecursion) {
  const double alpha = 0.5, eps = 0.1;
  auto phi = scalar(0.8);
  auto outer = sgd(phi, eps);
  double ref = 0.8;
  Rng rng(1);
  for (int step = 0; step < 50; ++step) {
    const double c = rng.below(2) ? 1.0 : -1.0;
    reptile_outer_step(phi, sgd_inner_loop(phi, quadratic(c), alpha, 3), outer);
    const double a = c + std::pow(1 - alpha, 3) * (ref - c);
    ref = ref + eps * (a - ref);
    EXPECT_NEAR(phi.value(0)[0], ref, 1e-10);
  }
}

// Each meta-step takes the expected pseudo-gradient over c in {-1, +1}.
TEST(Reptile, ConvergesToMeanTask) {
  auto phi = scalar(0.9);
  auto outer = sgd(phi, 0.1);
  for (int step = 0; step < 2000; ++step) {
    const auto up = sgd_inner_loop(phi, quadratic(1.0), 0.5, 3);
    const auto down = sgd_inner_loop(phi, quadratic(-1.0), 0.5, 3);
    auto mean = up.clone();
    mean.value(0)[0] = 0.5 * (up.value(0)[0] + down.value(0)[0]);
    reptile_outer_step(phi, mean, outer);
  }
  EXPECT_LT(std::abs(phi.value(0)[0]), 0.05);
}

// With one sampled task per step phi_B keeps fluctuating around E[c]; its
// time average still settles near 0.
TEST(Reptile, SampledTasksHoverAroundMeanTask) {
  auto phi = scalar(0.9);
  auto outer = sgd(phi, 0.1);
  Rng rng(7);
  double avg = 0.0;
  for (int step = 0; step < 4000; ++step) {
    const double c = rng.below(2) ? 1.0 : -1.0;
    reptile_outer_step(phi, sgd_inner_loop(phi, quadratic(c), 0.5, 3), outer);
    if (step >= 2000) avg += phi.value(0)[0] / 2000.0;
  }
  EXPECT_LT(std::abs(avg), 0.15);
}

// k = 1 with SGD on both levels is plain SGD with rate eps * alpha.
TEST(Reptile, DegenerateCaseIsJointSgd) {
  Rng rng(4);
  ParamSet<double> phi;
  phi.add("w", Tensor<double>({3, 2}));
  phi.add("b", Tensor<double>({3}));
  for (std::size_t i = 0; i < phi.size(); ++i)
    for (auto& v : phi.value(i).storage()) v = rng.uniform(-1, 1);
  Tensor<double> x({5, 2}), y({5, 3});
  for (auto& v : x.storage()) v = rng.uniform(-1, 1);
  for (auto& v : y.storage()) v = rng.uniform(-1, 1);
  TaskLoss<double> loss = [&](Graph<double>& g, ParamSet<double>& ps) {
    auto r = ops::sub(ops::linear(g.constant(x), g.param(ps, "w"), std::optional(g.param(ps, "b"))), g.constant(y));
    return ops::mean(ops::mul(ops::tanh(r), r));
  };
  const double alpha = 0.3, eps = 0.2;
  auto joint = phi.clone();
  {
    Graph<double> g;
    g.backward(loss(g, joint));
    sgd_step(joint, eps * alpha);
  }
  auto outer = sgd(phi, eps);
  reptile_outer_step(phi, sgd_inner_loop(phi, loss, alpha, 1), outer);
  for (std::size_t i = 0; i < phi.size(); ++i)
    for (std::size_t e = 0; e < phi.value(i).storage().size(); ++e)
      EXPECT_NEAR(phi.value(i)[e], joint.value(i)[e], 1e-7);
}

TEST(Reptile, SgdOuterStepIsParallelToPseudoGradient) {
  Rng rng(2);
  ParamSet<double> b, a;
  b.add("w", Tensor<double>({6}));
  for (auto& v : b.value(0).storage()) v = rng.uniform(-1, 1);
  a = b.clone();
  for (auto& v : a.value(0).storage()) v += rng.uniform(-0.1, 0.1);
  const auto before = b.value(0);
  auto outer = sgd(b, 0.3);
  reptile_outer_step(b, a, outer);
  double dot = 0, n1 = 0, n2 = 0;
  for (int i = 0; i < 6; ++i) {
    const double s = b.value(0)[i] - before[i], t = a.value(0)[i] - before[i];
    dot += s * t;
    n1 += s * s;
    n2 += t * t;
  }
  EXPECT_NEAR(dot / std::sqrt(n1 * n2), 1.0, 1e-7);
}

TEST(Reptile, EqualParamsAreANoOp) {
  auto phi = scalar(0.7);
  Optimizer<double> outer(OptimizerKind::adam, phi, {});
  reptile_outer_step(phi, phi.clone(), outer);
  EXPECT_EQ(phi.value(0)[0], 0.7);
}

TEST(Reptile, RejectsStructuralMismatch) {
  auto phi = scalar(0.0);
  ParamSet<double> other;
  other.add("psi", Tensor<double>({1}));
  auto outer = sgd(phi, 0.1);
  EXPECT_THROW(reptile_outer_step(phi, other, outer), std::invalid_argument);
}

TEST(Schedule, ConstantThenLinearDecay) {
  EXPECT_EQ(scheduled_lr(1e-4, 0, 100), 1e-4);
  EXPECT_EQ(scheduled_lr(1e-4, 49, 100), 1e-4);
  EXPECT_NEAR(scheduled_lr(1e-4, 75, 100), 0.5e-4, 1e-18);
  EXPECT_GT(scheduled_lr(1e-4, 99, 100), 0.0);
}

TEST(MetaConfig, Validation) {
  RunConfig cfg;
  cfg.meta.k_a = 0;
  EXPECT_THROW(cfg.finalize(), ConfigError);
  cfg = RunConfig{};
  cfg.meta.n_gen = 0;
  EXPECT_THROW(cfg.finalize(), ConfigError);
  cfg = RunConfig{};
  cfg.meta.n_iter = 200000;
  cfg.meta.batch_size = 16;
  EXPECT_NO_THROW(cfg.finalize());
}

TEST(InnerLoop, OneDiscriminatorUpdateAndGatedGenerator) {
  const RunConfig cfg = tiny_config();
  const auto& data = tiny_data();
  const Networks phi_b = Networks::init(cfg.generator, cfg.discriminator, 1);
  BatchSampler sampler(data.train, cfg.held_out_index());
  Rng rng(5);
  Batch batch = sampler.sample(0, 4, rng);
  LossReport report;

  std::uint64_t counter = 3;  // the next step is the 4th: no generator update
  auto a = inner_loop(phi_b, batch, cfg.meta, cfg.loss, 1e-3, counter, rng, report);
  EXPECT_EQ(counter, 4u);
  EXPECT_FALSE(a.d.values_equal(phi_b.d));
  EXPECT_TRUE(a.g.values_equal(phi_b.g));

  a = inner_loop(phi_b, batch, cfg.meta, cfg.loss, 1e-3, counter, rng, report);
  EXPECT_EQ(counter, 5u);
  EXPECT_FALSE(a.g.values_equal(phi_b.g));
  EXPECT_TRUE(std::isfinite(report.g_total));
}

TEST(MetaTrain, SmokeRunIsFiniteAndRespectsHoldOut) {
  const RunConfig cfg = tiny_config();
  const auto& data = tiny_data();
  const auto held = cfg.held_out_index();
  MetaHooks hooks;
  std::int64_t batches = 0;
  hooks.on_batch = [&](const Batch& b) {
    ++batches;
    EXPECT_NE(b.target, held);
    for (const auto l : b.original) EXPECT_NE(l, held);
  };
  const auto res = meta_train(cfg, data.train, hooks);
  EXPECT_EQ(batches, 10);
  ASSERT_EQ(res.history.size(), 10u);
  for (const auto& r : res.history) {
    for (const double v : {r.d_adv, r.d_class, r.d_gp, r.d_total, r.g_adv, r.g_class, r.g_cycle, r.g_total}) {
      EXPECT_TRUE(std::isfinite(v));
    }
  }
  EXPECT_EQ(res.checkpoint.iteration, 10u);
}

TEST(MetaTrain, SameSeedGivesByteIdenticalCheckpoints) {
  const RunConfig cfg = tiny_config();
  const auto a = meta_train(cfg, tiny_data().train);
  const auto b = meta_train(cfg, tiny_data().train);
  EXPECT_EQ(serialize(a.checkpoint), serialize(b.checkpoint));
}

TEST(MetaTrain, ResumeMatchesUninterruptedRun) {
  RunConfig cfg = tiny_config();
  cfg.meta.n_iter = 6;
  cfg.meta.checkpoint_every = 3;
  std::optional<Checkpoint> mid;
  MetaHooks hooks;
  hooks.on_checkpoint = [&](const Checkpoint& c) { mid = c; };
  const auto full = meta_train(cfg, tiny_data().train, hooks);
  ASSERT_TRUE(mid);
  EXPECT_EQ(mid->iteration, 3u);
  const auto resumed = meta_train(cfg, tiny_data().train, {}, &*mid);
  EXPECT_EQ(serialize(resumed.checkpoint), serialize(full.checkpoint));
}

TEST(MetaTrain, RejectsMissingDomain) {
  const RunConfig cfg = tiny_config();
  const auto& train = tiny_data().train;
  std::vector<std::int64_t> keep;
  for (std::int64_t i = 0; i < train.size(); ++i) {
    if (train.labels[static_cast<std::size_t>(i)] != 0) keep.push_back(i);
  }
  EXPECT_THROW(meta_train(cfg, train.subset(keep, "train")), std::invalid_argument);
}

TEST(FewShot, ZeroStepsIsIdentityAndOriginalIsUntouched) {
  const RunConfig cfg = tiny_config();
  const auto& data = tiny_data();
  const auto held = cfg.held_out_index();
  const Networks start = Networks::init(cfg.generator, cfg.discriminator, 2);
  const Networks copy = start.clone();
  const Dataset support = support_set(data.train, held, 4, cfg.seed, 0);
  const auto same = few_shot_finetune(start, support, held, 0, data.train, cfg, 1);
  EXPECT_TRUE(same.g.values_equal(start.g));
  EXPECT_TRUE(same.d.values_equal(start.d));
  const auto moved = few_shot_finetune(start, support, held, 5, data.train, cfg, 1);
  EXPECT_FALSE(moved.g.values_equal(start.g));
  EXPECT_TRUE(start.g.values_equal(copy.g));
  EXPECT_TRUE(start.d.values_equal(copy.d));
}

TEST(FewShot, RejectsSupportFromWrongDomain) {
  const RunConfig cfg = tiny_config();
  const auto& data = tiny_data();
  const Networks start = Networks::init(cfg.generator, cfg.discriminator, 2);
  const Dataset wrong = support_set(data.train, 0, 4, cfg.seed, 0);
  EXPECT_THROW(few_shot_finetune(start, wrong, cfg.held_out_index(), 3, data.train, cfg, 1), std::invalid_argument);
}

TEST(FewShot, SnapshotsEqualSeparateRuns) {
  const RunConfig cfg = tiny_config();
  const auto& data = tiny_data();
  const auto held = cfg.held_out_index();
  const Networks start = Networks::init(cfg.generator, cfg.discriminator, 2);
  const Dataset support = support_set(data.train, held, 2, cfg.seed, 1);
  const auto snaps = few_shot_snapshots(start, support, held, {1, 6}, data.train, cfg, 9);
  ASSERT_EQ(snaps.size(), 2u);
  const auto six = few_shot_finetune(start, support, held, 6, data.train, cfg, 9);
  EXPECT_TRUE(snaps[1].g.values_equal(six.g));
  EXPECT_TRUE(snaps[1].d.values_equal(six.d));
  const auto one = few_shot_finetune(start, support, held, 1, data.train, cfg, 9);
  EXPECT_TRUE(snaps[0].d.values_equal(one.d));
}

TEST(SupportSet, NestedAcrossSizesAndFromHeldOutDomain) {
  const RunConfig cfg = tiny_config();
  const auto& train = tiny_data().train;
  const auto held = cfg.held_out_index();
  const auto small = support_set(train, held, 2, cfg.seed, 0);
  const auto large = support_set(train, held, 4, cfg.seed, 0);
  for (const auto l : large.labels) EXPECT_EQ(l, held);
  for (std::int64_t i = 0; i < small.size(); ++i) EXPECT_EQ(image_at(small.images, i), image_at(large.images, i));
  EXPECT_THROW(support_set(train, held, 10000, cfg.seed, 0), std::invalid_argument);
}

TEST(Evaluate, RefusesUntrustworthyProbe) {
  const RunConfig cfg = tiny_config();
  const auto& data = tiny_data();
  Probe chance;
  chance.image_size = cfg.data.image_size;
  chance.n_domains = 4;
  chance.params = init_probe(chance.image_size, 4, 1);
  Networks net = Networks::init(cfg.generator, cfg.discriminator, 1);
  EXPECT_THROW(evaluate(net, data.test, chance, cfg.held_out_index(), 0.95), ProbeError);
}

TEST(Evaluate, ReportsEveryDomain) {
  const RunConfig cfg = tiny_config();
  const auto& data = tiny_data();
  Probe probe = fit_probe(cfg, data);
  Networks net = Networks::init(cfg.generator, cfg.discriminator, 1);
  const auto m = evaluate(net, data.test, probe, 2, 0.0);
  ASSERT_EQ(m.domain_accuracy.size(), 4u);
  EXPECT_EQ(m.target_accuracy, m.domain_accuracy[2]);
  EXPECT_GE(m.cycle_l1, 0.0);
  for (const double a : m.domain_accuracy) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Ablation, GridShapeOrderAndThreadIndependence) {
  RunConfig cfg = tiny_config();
  cfg.probe.min_accuracy = 0.0;
  const auto& data = tiny_data();
  Probe probe = fit_probe(cfg, data);
  const Networks base = Networks::init(cfg.generator, cfg.discriminator, 1);
  std::vector<AblationRow> streamed;
  const auto one = ablation_grid(base, data.train, data.test, probe, cfg, 1,
                                 [&](const AblationRow& r) { streamed.push_back(r); });
  const auto two = ablation_grid(base, data.train, data.test, probe, cfg, 2);
  ASSERT_EQ(one.rows.size(), 2u * 2u * 2u);
  ASSERT_EQ(streamed.size(), one.rows.size());
  EXPECT_EQ(one.panel.size(), 4u);
  std::size_t i = 0;
  for (const auto s : cfg.fewshot.grid_steps)
    for (const auto n : cfg.fewshot.grid_samples)
      for (std::int64_t t = 0; t < cfg.fewshot.trials; ++t, ++i) {
        EXPECT_EQ(one.rows[i].n_steps, s);
        EXPECT_EQ(one.rows[i].n_samples, n);
        EXPECT_EQ(one.rows[i].trial, t);
        EXPECT_EQ(streamed[i].metrics.target_accuracy, one.rows[i].metrics.target_accuracy);
        EXPECT_EQ(two.rows[i].metrics.target_accuracy, one.rows[i].metrics.target_accuracy);
        EXPECT_EQ(two.rows[i].metrics.cycle_l1, one.rows[i].metrics.cycle_l1);
      }
  for (std::size_t p = 0; p < one.panel.size(); ++p) EXPECT_EQ(one.panel[p], two.panel[p]);
}

TEST(Threads, EnvironmentOverride) {
  setenv("MTAT_THREADS", "3", 1);
  EXPECT_EQ(resolve_threads(1), 3);
  unsetenv("MTAT_THREADS");
  EXPECT_EQ(resolve_threads(2), 2);
  EXPECT_GE(resolve_threads(0), 1);
}

TEST(TranslationPanel, OriginalPlusEveryDomain) {
  const RunConfig cfg = tiny_config();
  Networks net = Networks::init(cfg.generator, cfg.discriminator, 1);
  const auto& test = tiny_data().test;
  const auto cells = translation_panel(net, test.gather({0, 1}), cfg.held_out_index());
  ASSERT_EQ(cells.size(), 2u * 5u);
  EXPECT_EQ(cells[0], image_at(test.images, 0));
  EXPECT_EQ(cells[0].shape(), (Shape{3, 8, 8}));
}
