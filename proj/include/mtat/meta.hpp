#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtat/checkpoint.hpp"
#include "mtat/config.hpp"
#include "mtat/data.hpp"
#include "mtat/nets.hpp"
#include "mtat/objectives.hpp"
#include "mtat/optim.hpp"
#include "mtat/rng.hpp"

namespace mtat {

/// A non-finite loss or critic score, tagged with where training was.
class TrainingFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Networks {
  GeneratorConfig gcfg;
  DiscriminatorConfig dcfg;
  ParamSet<float> g;
  ParamSet<float> d;

  static Networks init(const GeneratorConfig& gcfg, const DiscriminatorConfig& dcfg, std::uint64_t seed);
  Networks clone() const;
};

/// Optimizers of one adversarial training phase plus the shared
/// discriminator-step counter that gates generator updates.
struct GanOptimizers {
  Optimizer<float> g;
  Optimizer<float> d;
  std::uint64_t d_steps = 0;

  GanOptimizers(const Networks& net, OptimizerKind kind, double lr_gen, double lr_disc, double beta1, double beta2);
};

/// Inputs of one discriminator update.
struct DiscriminatorBatch {
  Tensor<float> adv_real;     // reals scored by the critic
  Tensor<float> fake_source;  // images the generator translates
  Tensor<float> fake_label;   // their target rows
  Tensor<float> cls_real;     // reals for the classification term
  Tensor<float> cls_label;    // their original rows
};

/// Minimises L_disc on `batch`; fills the d_* fields of `report`.
void discriminator_step(Networks& net, Optimizer<float>& opt, const DiscriminatorBatch& batch, const LossWeights& w,
                        Rng& rng, LossReport& report);

/// Minimises L_gen for translating x (original rows) to target rows and back;
/// fills the g_* fields of `report`.
void generator_step(Networks& net, Optimizer<float>& opt, const Tensor<float>& x, const Tensor<float>& original,
                    const Tensor<float>& target, const LossWeights& w, LossReport& report);

/// k_a discriminator updates on a copy of phi_b with fresh optimizer state;
/// the generator is updated whenever the global discriminator-step counter
/// (incremented first) is a multiple of n_gen. Returns phi_a.
Networks inner_loop(const Networks& phi_b, const Batch& batch, const MetaConfig& cfg, const LossWeights& w, double lr,
                    std::uint64_t& d_counter, Rng& rng, LossReport& report);

/// Installs phi_b - phi_a as the gradient of phi_b and takes one step.
template <typename T>
void reptile_outer_step(ParamSet<T>& phi_b, const ParamSet<T>& phi_a, Optimizer<T>& outer);

/// Generic first-order inner loop: k plain SGD steps of rate alpha on a copy
/// of phi.
template <typename T>
using TaskLoss = std::function<Var<T>(Graph<T>&, ParamSet<T>&)>;
template <typename T>
ParamSet<T> sgd_inner_loop(const ParamSet<T>& phi, const TaskLoss<T>& loss, double alpha, std::int64_t k);

/// Learning rate at iteration `it` of `n`: constant for the first half, then
/// linear decay to 0.
double scheduled_lr(double base, std::int64_t it, std::int64_t n);

struct MetaHooks {
  std::function<void(std::int64_t iteration, const LossReport&, std::int64_t target)> on_iteration;
  std::function<void(const Checkpoint&)> on_checkpoint;  // periodic checkpoints
  std::function<void(const Batch&)> on_batch;
};

struct MetaResult {
  Networks net;
  Checkpoint checkpoint;
  std::vector<LossReport> history;
};

/// Meta-training over the non-held-out domains of `train`. When `resume` is
/// given, networks, optimizers, RNG and counters continue from it.
MetaResult meta_train(const RunConfig& cfg, const Dataset& train, const MetaHooks& hooks = {},
                      const Checkpoint* resume = nullptr);

Checkpoint make_checkpoint(const RunConfig& cfg, const Networks& net, const Optimizer<float>& outer_g,
                           const Optimizer<float>& outer_d, std::uint64_t iteration, std::uint64_t d_steps,
                           const Rng& rng);
/// Networks of a checkpoint written with the geometry of `cfg`.
Networks networks_from_checkpoint(const RunConfig& cfg, const Checkpoint& ckpt);

/// Fine-tunes a copy of `start` for n_steps on the held-out domain: the
/// critic compares support images with translations of trained-domain images
/// from `source`, its classifier sees support and source reals, and the
/// generator learns to translate source images to the held-out label.
Networks few_shot_finetune(const Networks& start, const Dataset& support, std::int64_t held_out, std::int64_t n_steps,
                           const Dataset& source, const RunConfig& cfg, std::uint64_t seed,
                           std::vector<LossReport>* history = nullptr);

/// One fine-tuning run observed at several step counts (ascending); the
/// result for k steps equals few_shot_finetune with n_steps = k.
std::vector<Networks> few_shot_snapshots(const Networks& start, const Dataset& support, std::int64_t held_out,
                                         const std::vector<std::int64_t>& at_steps, const Dataset& source,
                                         const RunConfig& cfg, std::uint64_t seed,
                                         std::vector<LossReport>* history = nullptr);

/// Batch translation in chunks; labels as rows.
Tensor<float> translate(Networks& net, const Tensor<float>& images, const Tensor<float>& labels);

struct EvalMetrics {
  std::int64_t target = 0;
  double target_accuracy = 0.0;
  std::vector<double> domain_accuracy;  // accuracy of translations to each domain
  double cycle_l1 = 0.0;
};

/// Translates every test image to each domain and scores the probe's
/// agreement; cycle_l1 is the mean |x - G(G(x, target), original)|. Refuses
/// (ProbeError) when the probe scores below min_probe_accuracy on real test
/// images.
EvalMetrics evaluate(Networks& net, const Dataset& test, Probe& probe, std::int64_t target,
                     double min_probe_accuracy = 0.95);

struct AblationRow {
  std::int64_t n_samples = 0;
  std::int64_t n_steps = 0;
  std::int64_t trial = 0;
  EvalMetrics metrics;
};

struct AblationResult {
  std::vector<AblationRow> rows;               // ordered by steps, samples, trial
  std::vector<Tensor<float>> panel;            // steps-by-samples translations of one test image
};

/// Support sets are nested per trial (the first n of one shuffled draw of
/// held-out training images); each (trial, n) shares one fine-tuning stream
/// across step counts. Cells run on `threads` workers; results do not depend
/// on the thread count.
AblationResult ablation_grid(const Networks& base, const Dataset& train, const Dataset& test, Probe& probe,
                             const RunConfig& cfg, int threads,
                             const std::function<void(const AblationRow&)>& on_row = {});

/// Support set for one trial: `n` held-out images from `train`.
Dataset support_set(const Dataset& train, std::int64_t held_out, std::int64_t n, std::uint64_t seed,
                    std::int64_t trial);

/// Worker count: MTAT_THREADS if set, else `configured` if positive, else
/// hardware concurrency.
int resolve_threads(std::int64_t configured);

/// Fig. 3 style panel: one row per image, columns [original, translation to
/// every domain in attribute order with the held-out one last].
std::vector<Tensor<float>> translation_panel(Networks& net, const Tensor<float>& images, std::int64_t held_out);

}  // namespace mtat
