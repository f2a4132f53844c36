#include "mtat/meta.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <thread>

#include "mtat/artifacts.hpp"
#include "mtat/ops.hpp"

namespace mtat {

Networks Networks::init(const GeneratorConfig& gcfg, const DiscriminatorConfig& dcfg, std::uint64_t seed) {
  return Networks{gcfg, dcfg, init_generator<float>(gcfg, seed), init_discriminator<float>(dcfg, seed)};
}

Networks Networks::clone() const { return Networks{gcfg, dcfg, g.clone(), d.clone()}; }

GanOptimizers::GanOptimizers(const Networks& net, OptimizerKind kind, double lr_gen, double lr_disc, double beta1,
                             double beta2)
    : g(kind, net.g, AdamConfig{lr_gen, beta1, beta2, 1e-8}), d(kind, net.d, AdamConfig{lr_disc, beta1, beta2, 1e-8}) {}

namespace {

Tensor<float> concat_batches(const Tensor<float>& a, const Tensor<float>& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<float> buf(a.data().begin(), a.data().end());
  buf.insert(buf.end(), b.data().begin(), b.data().end());
  return Tensor<float>(s, std::move(buf));
}

void require_finite_loss(const char* what, double v) {
  if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite ") + what + " loss");
}

}  // namespace

Tensor<float> translate(Networks& net, const Tensor<float>& images, const Tensor<float>& labels) {
  constexpr std::int64_t chunk = 100;
  const std::int64_t n = images.dim(0);
  const std::int64_t per = images.numel() / n;
  const std::int64_t k = labels.dim(1);
  Tensor<float> out(images.shape());
  for (std::int64_t start = 0; start < n; start += chunk) {
    const std::int64_t len = std::min(chunk, n - start);
    Shape s = images.shape();
    s[0] = len;
    Tensor<float> x(s, std::vector<float>(images.data().begin() + start * per,
                                          images.data().begin() + (start + len) * per));
    Tensor<float> l(Shape{len, k}, std::vector<float>(labels.data().begin() + start * k,
                                                      labels.data().begin() + (start + len) * k));
    Graph<float> g;
    g.freeze_all();
    const auto y = generator_forward(g, net.g, net.gcfg, g.constant(std::move(x)), g.constant(std::move(l)));
    std::copy(y.value().data().begin(), y.value().data().end(), out.data().begin() + start * per);
  }
  return out;
}

void discriminator_step(Networks& net, Optimizer<float>& opt, const DiscriminatorBatch& batch, const LossWeights& w,
                        Rng& rng, LossReport& report) {
  const Tensor<float> fake = translate(net, batch.fake_source, batch.fake_label);
  const std::int64_t n = batch.adv_real.dim(0);
  Tensor<float> u(Shape{n});
  for (auto& v : u.data()) v = static_cast<float>(rng.uniform());

  Graph<float> g;
  const Critic<float> critic = [&net](Graph<float>& gg, Var<float> x) {
    return critic_scores(gg, net.d, net.dcfg, x);
  };
  const auto terms = adversarial_terms(g, critic, g.constant(batch.adv_real), g.constant(fake), u);
  const auto logits = discriminator_forward(g, net.d, net.dcfg, g.constant(batch.cls_real)).cls;
  const auto d_class = classification_loss(logits, batch.cls_label);
  const auto total = discriminator_total(terms.d_adv, terms.gp, d_class, w);
  require_finite_loss("discriminator", total.value().item());
  g.backward(total);
  opt.step(net.d);
  report.d_adv = terms.d_adv.value().item();
  report.d_gp = terms.gp.value().item();
  report.d_class = d_class.value().item();
  report.d_total = discriminator_total(report.d_adv, report.d_gp, report.d_class, w);
}

void generator_step(Networks& net, Optimizer<float>& opt, const Tensor<float>& x, const Tensor<float>& original,
                    const Tensor<float>& target, const LossWeights& w, LossReport& report) {
  Graph<float> g;
  g.freeze(net.d);
  const auto xv = g.constant(x);
  const auto translated = generator_forward(g, net.g, net.gcfg, xv, g.constant(target));
  const auto out = discriminator_forward(g, net.d, net.dcfg, translated);
  const auto g_adv = ops::neg(ops::mean(out.src));
  const auto g_class = classification_loss(out.cls, target);
  const auto rec = generator_forward(g, net.g, net.gcfg, translated, g.constant(original));
  const auto g_cycle = cycle_loss(xv, rec);
  const auto total = generator_total(g_adv, g_class, g_cycle, w);
  require_finite_loss("generator", total.value().item());
  g.backward(total);
  opt.step(net.g);
  report.g_adv = g_adv.value().item();
  report.g_class = g_class.value().item();
  report.g_cycle = g_cycle.value().item();
  report.g_total = generator_total(report.g_adv, report.g_class, report.g_cycle, w);
}

Networks inner_loop(const Networks& phi_b, const Batch& batch, const MetaConfig& cfg, const LossWeights& w, double lr,
                    std::uint64_t& d_counter, Rng& rng, LossReport& report) {
  Networks phi_a = phi_b.clone();
  GanOptimizers opt(phi_a, parse_optimizer_kind(cfg.inner_optimizer), lr, lr * cfg.lr_disc / cfg.lr_gen, cfg.beta1,
                    cfg.beta2);
  // The schedule scales lr_gen; lr_disc keeps its ratio to it.
  const auto k = phi_a.gcfg.n_domains;
  const std::int64_t m = batch.images.dim(0);
  const Tensor<float> original = one_hot(batch.original, k);
  const Tensor<float> target = one_hot(batch.target, m, k);
  const DiscriminatorBatch db{batch.images, batch.images, target, batch.images, original};
  for (std::int64_t step = 0; step < cfg.k_a; ++step) {
    discriminator_step(phi_a, opt.d, db, w, rng, report);
    ++d_counter;
    if (d_counter % static_cast<std::uint64_t>(cfg.n_gen) == 0) {
      generator_step(phi_a, opt.g, batch.images, original, target, w, report);
    }
  }
  return phi_a;
}

template <typename T>
void reptile_outer_step(ParamSet<T>& phi_b, const ParamSet<T>& phi_a, Optimizer<T>& outer) {
  require_same_structure(phi_b, phi_a, "reptile_outer_step");
  for (std::size_t i = 0; i < phi_b.size(); ++i) {
    auto grad = phi_b.grad(i).data();
    const auto b = phi_b.value(i).data();
    const auto a = phi_a.value(i).data();
    for (std::size_t e = 0; e < grad.size(); ++e) grad[e] = static_cast<T>(static_cast<double>(b[e]) - a[e]);
  }
  outer.step(phi_b);
}

template <typename T>
ParamSet<T> sgd_inner_loop(const ParamSet<T>& phi, const TaskLoss<T>& loss, double alpha, std::int64_t k) {
  if (k < 1) throw std::invalid_argument("inner loop needs at least one step");
  ParamSet<T> a = phi.clone();
  for (std::int64_t i = 0; i < k; ++i) {
    Graph<T> g;
    g.backward(loss(g, a));
    sgd_step(a, alpha);
  }
  return a;
}

double scheduled_lr(double base, std::int64_t it, std::int64_t n) {
  const std::int64_t half = n / 2;
  if (it < half) return base;
  return base * (1.0 - static_cast<double>(it - half) / static_cast<double>(n - half));
}

Checkpoint make_checkpoint(const RunConfig& cfg, const Networks& net, const Optimizer<float>& outer_g,
                           const Optimizer<float>& outer_d, std::uint64_t iteration, std::uint64_t d_steps,
                           const Rng& rng) {
  Checkpoint c;
  c.config_digest = config_digest(cfg);
  c.iteration = iteration;
  c.rng_state = rng.state();
  c.texts["config"] = canonical_text(cfg);
  c.scalars["d_steps"] = static_cast<double>(d_steps);
  c.put_params("G", net.g);
  c.put_params("D", net.d);
  c.put_optimizer("opt.G", outer_g, net.g);
  c.put_optimizer("opt.D", outer_d, net.d);
  return c;
}

Networks networks_from_checkpoint(const RunConfig& cfg, const Checkpoint& ckpt) {
  Networks net = Networks::init(cfg.generator, cfg.discriminator, cfg.seed);
  ckpt.get_params("G", net.g);
  ckpt.get_params("D", net.d);
  return net;
}

MetaResult meta_train(const RunConfig& cfg, const Dataset& train, const MetaHooks& hooks, const Checkpoint* resume) {
  const std::int64_t held = cfg.held_out_index();
  const auto counts = train.counts();
  std::vector<std::int64_t> domains;
  for (std::int64_t d = 0; d < train.n_domains; ++d) {
    if (d == held) continue;
    if (counts[static_cast<std::size_t>(d)] == 0) {
      throw std::invalid_argument("training data has no images of domain '" + cfg.data.attributes[d] + "'");
    }
    domains.push_back(d);
  }
  if (domains.size() < 2) throw std::invalid_argument("meta-training needs at least 2 non-held-out domains");

  MetaResult res{Networks::init(cfg.generator, cfg.discriminator, cfg.seed), {}, {}};
  Networks& net = res.net;
  const auto outer_kind = parse_optimizer_kind(cfg.meta.outer_optimizer);
  Optimizer<float> outer_g(outer_kind, net.g, AdamConfig{cfg.meta.lr_outer, cfg.meta.beta1, cfg.meta.beta2, 1e-8});
  Optimizer<float> outer_d(outer_kind, net.d, AdamConfig{cfg.meta.lr_outer, cfg.meta.beta1, cfg.meta.beta2, 1e-8});
  Rng rng(cfg.seed);
  std::uint64_t d_steps = 0;
  std::int64_t start = 0;
  if (resume) {
    resume->get_params("G", net.g);
    resume->get_params("D", net.d);
    resume->get_optimizer("opt.G", outer_g, net.g);
    resume->get_optimizer("opt.D", outer_d, net.d);
    rng.set_state(resume->rng_state);
    d_steps = static_cast<std::uint64_t>(resume->scalar("d_steps"));
    start = static_cast<std::int64_t>(resume->iteration);
  }

  BatchSampler sampler(train, held);
  const std::int64_t n = cfg.meta.n_iter;
  LossReport report;
  for (std::int64_t it = start; it < n; ++it) {
    const double lr = scheduled_lr(cfg.meta.lr_gen, it, n);
    outer_g.set_lr(scheduled_lr(cfg.meta.lr_outer, it, n));
    outer_d.set_lr(scheduled_lr(cfg.meta.lr_outer, it, n));
    Batch batch;
    const auto idx = sampler.sample_indices(cfg.meta.batch_size, rng);
    batch.images = train.gather(idx);
    for (const auto k : idx) batch.original.push_back(train.labels[static_cast<std::size_t>(k)]);
    batch.target = domains[rng.below(domains.size())];
    if (hooks.on_batch) hooks.on_batch(batch);
    Networks phi_a;
    try {
      phi_a = inner_loop(net, batch, cfg.meta, cfg.loss, lr, d_steps, rng, report);
    } catch (const NonFiniteError& e) {
      throw TrainingFault(std::string(e.what()) + " at meta-iteration " + std::to_string(it) + " (discriminator step " +
                          std::to_string(d_steps) + ")");
    }
    reptile_outer_step(net.g, phi_a.g, outer_g);
    reptile_outer_step(net.d, phi_a.d, outer_d);
    res.history.push_back(report);
    if (hooks.on_iteration) hooks.on_iteration(it, report, batch.target);
    if (cfg.meta.checkpoint_every > 0 && (it + 1) % cfg.meta.checkpoint_every == 0 && it + 1 < n &&
        hooks.on_checkpoint) {
      hooks.on_checkpoint(make_checkpoint(cfg, net, outer_g, outer_d, static_cast<std::uint64_t>(it + 1), d_steps, rng));
    }
  }
  res.checkpoint = make_checkpoint(cfg, net, outer_g, outer_d, static_cast<std::uint64_t>(std::max(n, start)), d_steps, rng);
  return res;
}

std::vector<Networks> few_shot_snapshots(const Networks& start, const Dataset& support, std::int64_t held_out,
                                         const std::vector<std::int64_t>& at_steps, const Dataset& source,
                                         const RunConfig& cfg, std::uint64_t seed, std::vector<LossReport>* history) {
  if (at_steps.empty() || !std::is_sorted(at_steps.begin(), at_steps.end()) || at_steps.front() < 0) {
    throw std::invalid_argument("few-shot step counts must be non-negative and ascending");
  }
  if (support.size() < 1) throw std::invalid_argument("few-shot support set is empty");
  for (const auto l : support.labels) {
    if (l != held_out) {
      throw std::invalid_argument("support image labelled '" + cfg.data.attributes.at(static_cast<std::size_t>(l)) +
                                  "' is not from the held-out domain '" + cfg.fewshot.held_out + "'");
    }
  }
  Networks net = start.clone();
  std::vector<Networks> out;
  GanOptimizers opt(net, parse_optimizer_kind(cfg.meta.inner_optimizer), cfg.meta.lr_gen, cfg.meta.lr_disc,
                    cfg.meta.beta1, cfg.meta.beta2);
  Rng rng(seed);
  BatchSampler sampler(source, held_out);
  const std::int64_t m = cfg.meta.batch_size;
  const std::int64_t n = support.size();
  const std::int64_t k = net.gcfg.n_domains;
  const Tensor<float> target = one_hot(held_out, m, k);
  LossReport report;
  std::size_t next = 0;
  for (std::int64_t step = 0;; ++step) {
    while (next < at_steps.size() && at_steps[next] == step) {
      out.push_back(net.clone());
      ++next;
    }
    if (next == at_steps.size()) break;
    const auto idx = sampler.sample_indices(m, rng);
    const Tensor<float> x = source.gather(idx);
    std::vector<std::int64_t> y;
    for (const auto i : idx) y.push_back(source.labels[static_cast<std::size_t>(i)]);
    // m support images: without replacement when there are enough.
    std::vector<std::int64_t> sidx;
    if (n >= m) {
      std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      for (std::int64_t i = 0; i < m; ++i) std::swap(perm[i], perm[i + rng.below(n - i)]);
      sidx.assign(perm.begin(), perm.begin() + m);
    } else {
      for (std::int64_t i = 0; i < m; ++i) sidx.push_back(static_cast<std::int64_t>(rng.below(n)));
    }
    const Tensor<float> reals = support.gather(sidx);
    const Tensor<float> original = one_hot(y, k);
    const DiscriminatorBatch db{reals, x, target, concat_batches(reals, x), concat_batches(target, original)};
    try {
      discriminator_step(net, opt.d, db, cfg.loss, rng, report);
      ++opt.d_steps;
      if (opt.d_steps % static_cast<std::uint64_t>(cfg.meta.n_gen) == 0) {
        generator_step(net, opt.g, x, original, target, cfg.loss, report);
      }
    } catch (const NonFiniteError& e) {
      throw TrainingFault(std::string(e.what()) + " at few-shot step " + std::to_string(step));
    }
    if (history) history->push_back(report);
  }
  return out;
}

Networks few_shot_finetune(const Networks& start, const Dataset& support, std::int64_t held_out, std::int64_t n_steps,
                           const Dataset& source, const RunConfig& cfg, std::uint64_t seed,
                           std::vector<LossReport>* history) {
  if (n_steps < 0) throw std::invalid_argument("few-shot steps must be non-negative");
  return std::move(few_shot_snapshots(start, support, held_out, {n_steps}, source, cfg, seed, history).front());
}

EvalMetrics evaluate(Networks& net, const Dataset& test, Probe& probe, std::int64_t target, double min_probe_accuracy) {
  const double real_acc = probe_accuracy(probe, test.images, test.labels);
  if (real_acc < min_probe_accuracy) {
    throw ProbeError("probe accuracy " + std::to_string(real_acc) + " on real test images is below " +
                         std::to_string(min_probe_accuracy) + "; evaluation refused",
                     real_acc);
  }
  const std::int64_t n = test.size();
  const std::int64_t k = test.n_domains;
  EvalMetrics m;
  m.target = target;
  for (std::int64_t d = 0; d < k; ++d) {
    const Tensor<float> translated = translate(net, test.images, one_hot(d, n, k));
    m.domain_accuracy.push_back(probe_accuracy(probe, translated, std::vector<std::int64_t>(n, d)));
    if (d == target) {
      const Tensor<float> rec = translate(net, translated, one_hot(test.labels, k));
      double s = 0.0;
      for (std::size_t i = 0; i < rec.storage().size(); ++i) s += std::abs(test.images[i] - rec[i]);
      m.cycle_l1 = s / static_cast<double>(rec.storage().size());
    }
  }
  m.target_accuracy = m.domain_accuracy.at(static_cast<std::size_t>(target));
  return m;
}

Dataset support_set(const Dataset& train, std::int64_t held_out, std::int64_t n, std::uint64_t seed,
                    std::int64_t trial) {
  auto idx = train.indices_of(held_out);
  if (static_cast<std::int64_t>(idx.size()) < n) {
    throw std::invalid_argument("only " + std::to_string(idx.size()) + " held-out images available for a support set of " +
                                std::to_string(n));
  }
  Rng rng{seed, 0x5u, static_cast<std::uint64_t>(trial)};
  for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
    std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  }
  idx.resize(static_cast<std::size_t>(n));
  return train.subset(idx, "support");
}

int resolve_threads(std::int64_t configured) {
  if (const char* env = std::getenv("MTAT_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  if (configured > 0) return static_cast<int>(configured);
  return std::max(1u, std::thread::hardware_concurrency());
}

AblationResult ablation_grid(const Networks& base, const Dataset& train, const Dataset& test, Probe& probe,
                             const RunConfig& cfg, int threads, const std::function<void(const AblationRow&)>& on_row) {
  const std::int64_t held = cfg.held_out_index();
  const auto& ns = cfg.fewshot.grid_samples;
  const auto& steps = cfg.fewshot.grid_steps;
  const std::int64_t trials = cfg.fewshot.trials;

  // Check the probe once up front so that workers cannot throw on it.
  const double real_acc = probe_accuracy(probe, test.images, test.labels);
  if (real_acc < cfg.probe.min_accuracy) {
    throw ProbeError("probe accuracy " + std::to_string(real_acc) + " on real test images; evaluation refused", real_acc);
  }
  std::int64_t panel_image = 0;
  while (panel_image < test.size() - 1 && test.labels[static_cast<std::size_t>(panel_image)] == held) ++panel_image;
  const Tensor<float> panel_x = test.gather({panel_image});
  const Tensor<float> panel_label = one_hot(held, 1, test.n_domains);

  // One fine-tuning run per (samples, trial) covers every step count. Rows
  // are ordered by steps, then samples, then trial.
  struct Cell {
    std::size_t ni;
    std::int64_t trial;
  };
  std::vector<Cell> cells;
  for (std::size_t ni = 0; ni < ns.size(); ++ni)
    for (std::int64_t t = 0; t < trials; ++t) cells.push_back({ni, t});
  std::vector<std::int64_t> sorted_steps = steps;
  std::sort(sorted_steps.begin(), sorted_steps.end());
  auto row_index = [&](std::size_t si, std::size_t ni, std::int64_t t) {
    return (si * ns.size() + ni) * static_cast<std::size_t>(trials) + static_cast<std::size_t>(t);
  };

  AblationResult res;
  res.rows.resize(steps.size() * ns.size() * static_cast<std::size_t>(trials));
  res.panel.resize(steps.size() * ns.size());
  std::vector<char> done(res.rows.size(), 0);
  std::size_t next_emit = 0;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;

  auto worker = [&] {
    Probe local = probe;
    for (std::size_t c; (c = next.fetch_add(1)) < cells.size();) {
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        const auto& cell = cells[c];
        const std::int64_t n = ns[cell.ni];
        const Dataset support = support_set(train, held, n, cfg.seed, cell.trial);
        const std::uint64_t stream = static_cast<std::uint64_t>(cell.trial) * 1000003u + static_cast<std::uint64_t>(n);
        auto snaps = few_shot_snapshots(base, support, held, sorted_steps, train, cfg, Rng{cfg.seed, 0x6u, stream}.next());
        for (std::size_t si = 0; si < steps.size(); ++si) {
          const auto pos = static_cast<std::size_t>(std::find(sorted_steps.begin(), sorted_steps.end(), steps[si]) -
                                                    sorted_steps.begin());
          Networks& adapted = snaps[pos];
          AblationRow row{n, steps[si], cell.trial, evaluate(adapted, test, local, held, 0.0)};
          Tensor<float> shot;
          if (cell.trial == 0) shot = image_at(translate(adapted, panel_x, panel_label), 0);
          std::lock_guard lock(mu);
          const auto ri = row_index(si, cell.ni, cell.trial);
          res.rows[ri] = row;
          if (cell.trial == 0) res.panel[si * ns.size() + cell.ni] = std::move(shot);
          done[ri] = 1;
        }
        std::lock_guard lock(mu);
        while (next_emit < res.rows.size() && done[next_emit]) {
          if (on_row) on_row(res.rows[next_emit]);
          ++next_emit;
        }
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(cells.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return res;
}

std::vector<Tensor<float>> translation_panel(Networks& net, const Tensor<float>& images, std::int64_t held_out) {
  const std::int64_t n = images.dim(0);
  const std::int64_t k = net.gcfg.n_domains;
  std::vector<std::int64_t> order;
  for (std::int64_t d = 0; d < k; ++d) {
    if (d != held_out) order.push_back(d);
  }
  order.push_back(held_out);
  std::vector<Tensor<float>> translated;
  for (const auto d : order) translated.push_back(translate(net, images, one_hot(d, n, k)));
  std::vector<Tensor<float>> cells;
  for (std::int64_t i = 0; i < n; ++i) {
    cells.push_back(image_at(images, i));
    for (const auto& t : translated) cells.push_back(image_at(t, i));
  }
  return cells;
}

template void reptile_outer_step(ParamSet<float>&, const ParamSet<float>&, Optimizer<float>&);
template void reptile_outer_step(ParamSet<double>&, const ParamSet<double>&, Optimizer<double>&);
template ParamSet<float> sgd_inner_loop(const ParamSet<float>&, const TaskLoss<float>&, double, std::int64_t);
template ParamSet<double> sgd_inner_loop(const ParamSet<double>&, const TaskLoss<double>&, double, std::int64_t);

}  // namespace mtat
