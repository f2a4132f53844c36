#include "mtat/pipeline.hpp"

#include <algorithm>
#include <climits>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mtat {

Splits prepare_data(const RunConfig& cfg) {
  Splits out;
  Dataset all;
  if (cfg.data.source == "synthetic") {
    all = gen_synthetic(cfg.data.seed, cfg.data.n_per_domain, cfg.data.image_size, cfg.attribute_set());
  } else {
    IngestReport r = load_image_folder(cfg.data.image_dir, cfg.data.attr_file, cfg.attribute_set(), cfg.data.image_size);
    out.messages = std::move(r.messages);
    out.messages.push_back("kept " + std::to_string(r.kept) + " of " + std::to_string(r.total_rows) + " rows (" +
                           std::to_string(r.skipped_labels) + " without exactly one selected attribute, " +
                           std::to_string(r.skipped_unreadable) + " unreadable)");
    all = std::move(r.data);
  }
  auto [train, test] = split(all, cfg.data.n_test, cfg.data.seed);
  out.train = std::move(train);
  out.test = std::move(test);
  return out;
}

Probe fit_probe(const RunConfig& cfg, const Splits& data) {
  const std::int64_t n_val = std::max<std::int64_t>(data.train.n_domains, data.train.size() / 10);
  auto [fit, val] = split(data.train, n_val, cfg.probe.seed + 1);
  return train_probe(fit, val, cfg.probe);
}

FinetuneRun finetune_and_evaluate(const RunConfig& cfg, const Networks& net, const Splits& data, Probe& probe) {
  const std::int64_t held = cfg.held_out_index();
  Networks start = net.clone();
  FinetuneRun r{evaluate(start, data.test, probe, held, cfg.probe.min_accuracy), {}, {}, {}};
  const Dataset support = support_set(data.train, held, cfg.fewshot.n_samples, cfg.seed, 0);
  const std::uint64_t seed = Rng{cfg.seed, 0x6u, static_cast<std::uint64_t>(cfg.fewshot.n_samples)}.next();
  r.adapted = few_shot_finetune(net, support, held, cfg.meta.k_b, data.train, cfg, seed, &r.history);
  r.after = evaluate(r.adapted, data.test, probe, held, cfg.probe.min_accuracy);
  return r;
}

Checkpoint probe_checkpoint(const Probe& probe) {
  Checkpoint c;
  c.put_params("probe", probe.params);
  c.scalars["image_size"] = static_cast<double>(probe.image_size);
  c.scalars["n_domains"] = static_cast<double>(probe.n_domains);
  c.scalars["val_accuracy"] = probe.val_accuracy;
  c.scalars["steps"] = static_cast<double>(probe.steps);
  return c;
}

Probe probe_from_checkpoint(const Checkpoint& ckpt) {
  Probe p;
  p.image_size = static_cast<std::int64_t>(ckpt.scalar("image_size"));
  p.n_domains = static_cast<std::int64_t>(ckpt.scalar("n_domains"));
  p.val_accuracy = ckpt.scalar("val_accuracy");
  p.steps = static_cast<std::int64_t>(ckpt.scalar("steps"));
  p.params = init_probe(p.image_size, p.n_domains, 0);
  ckpt.get_params("probe", p.params);
  return p;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, INT_MAX);
#endif
}

}  // namespace mtat
