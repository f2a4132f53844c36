#pragma once

#include <cstdint>

#include "mtat/graph.hpp"
#include "mtat/param_set.hpp"

namespace mtat {

struct GeneratorConfig {
  std::int64_t image_size = 32;
  std::int64_t image_channels = 3;
  std::int64_t base_width = 32;
  std::int64_t n_downsample = 2;
  std::int64_t n_resblocks = 3;
  std::int64_t n_domains = 4;

  /// Throws std::invalid_argument when the topology is not realisable.
  void validate() const;
};

struct DiscriminatorConfig {
  std::int64_t image_size = 32;
  std::int64_t image_channels = 3;
  std::int64_t base_width = 32;
  std::int64_t n_layers = 4;
  std::int64_t n_domains = 4;

  void validate() const;
  /// Side of the trunk output, which is also the src map side and the class
  /// head kernel.
  std::int64_t trunk_size() const { return image_size >> n_layers; }
};

/// Conv weights ~ N(0, (gain / sqrt(fan_in))^2) with gain sqrt(2) before
/// (leaky) relu and 1 on output heads; biases 0; norm scale 1, shift 0.
template <typename T>
ParamSet<T> init_generator(const GeneratorConfig& cfg, std::uint64_t seed);
template <typename T>
ParamSet<T> init_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed);

/// x: N x C x S x S in [-1, 1]; label: N x n_domains target rows. The label is
/// tiled to S x S maps and concatenated to the image channels. Output has the
/// shape of x, squashed by tanh.
template <typename T>
Var<T> generator_forward(Graph<T>& g, ParamSet<T>& params, const GeneratorConfig& cfg, Var<T> x,
                         Var<T> label);

template <typename T>
struct DiscriminatorOutput {
  Var<T> src;  // N x 1 x s x s critic map, unbounded
  Var<T> cls;  // N x n_domains logits
};

template <typename T>
DiscriminatorOutput<T> discriminator_forward(Graph<T>& g, ParamSet<T>& params, const DiscriminatorConfig& cfg,
                                             Var<T> x);

/// Per-sample critic score: the mean of the src map.
template <typename T>
Var<T> critic_scores(Graph<T>& g, ParamSet<T>& params, const DiscriminatorConfig& cfg, Var<T> x);

}  // namespace mtat
