#pragma once

#include "mtat/config.hpp"

// A configuration small enough for unit tests: 8x8 images, a few channels.
inline mtat::RunConfig tiny_config() {
  mtat::RunConfig cfg;
  cfg.seed = 3;
  cfg.data.image_size = 8;
  cfg.data.n_per_domain = 24;
  cfg.data.n_test = 16;
  cfg.generator.base_width = 4;
  cfg.generator.n_downsample = 1;
  cfg.generator.n_resblocks = 1;
  cfg.discriminator.base_width = 4;
  cfg.discriminator.n_layers = 2;
  cfg.meta.n_iter = 10;
  cfg.meta.batch_size = 4;
  cfg.fewshot.n_samples = 4;
  cfg.fewshot.grid_samples = {2, 4};
  cfg.fewshot.grid_steps = {0, 3};
  cfg.fewshot.trials = 2;
  cfg.probe.max_steps = 300;
  cfg.probe.batch_size = 32;
  cfg.finalize();
  return cfg;
}
