#pragma once

#include <string>
#include <vector>

#include "mtat/checkpoint.hpp"
#include "mtat/config.hpp"
#include "mtat/data.hpp"
#include "mtat/meta.hpp"

// Glue shared by the command-line tool and the end-to-end tests.
namespace mtat {

struct Splits {
  Dataset train;
  Dataset test;
  std::vector<std::string> messages;  // ingestion notes for folder sources
};

/// Synthetic generation or folder ingestion per cfg.data, then the stratified
/// train/test split.
Splits prepare_data(const RunConfig& cfg);

/// Probe trained on the training split (all domains, the held-out one
/// included) with a stratified tenth of it kept for early stopping.
Probe fit_probe(const RunConfig& cfg, const Splits& data);

struct FinetuneRun {
  EvalMetrics before;
  EvalMetrics after;
  Networks adapted;
  std::vector<LossReport> history;
};

/// Evaluates `net`, fine-tunes a copy on fewshot.n_samples held-out training
/// images for meta.k_b steps (trial 0 support set) and evaluates again.
FinetuneRun finetune_and_evaluate(const RunConfig& cfg, const Networks& net, const Splits& data, Probe& probe);

// Keeps freed conv temporaries in the heap instead of returning them to the OS each step.
void tune_allocator();

Checkpoint probe_checkpoint(const Probe& probe);
Probe probe_from_checkpoint(const Checkpoint& ckpt);

}  // namespace mtat
