#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtat/data.hpp"
#include "mtat/nets.hpp"
#include "mtat/objectives.hpp"

namespace mtat {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  std::string source = "synthetic";  // or "folder"
  std::string image_dir;
  std::string attr_file;
  std::vector<std::string> attributes{"blond", "black", "brown", "gray"};
  std::int64_t n_per_domain = 600;
  std::int64_t image_size = 32;
  std::int64_t n_test = 400;
  std::uint64_t seed = 1;
};

struct MetaConfig {
  std::int64_t n_iter = 3000;  // 200000 in the full-scale setting
  std::int64_t batch_size = 16;
  std::int64_t k_a = 1;
  std::int64_t k_b = 10;  // few-shot fine-tuning steps
  std::int64_t n_gen = 5;
  double lr_disc = 1e-4;
  double lr_gen = 1e-4;
  double lr_outer = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::string inner_optimizer = "adam";
  std::string outer_optimizer = "adam";
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const;
};

struct FewShotConfig {
  std::string held_out = "brown";
  std::int64_t n_samples = 32;
  std::vector<std::int64_t> grid_samples{4, 8, 16, 32};
  std::vector<std::int64_t> grid_steps{10, 100, 1000};
  std::int64_t trials = 3;
  std::int64_t threads = 0;  // 0: MTAT_THREADS or hardware concurrency
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  MetaConfig meta;
  LossWeights loss;
  FewShotConfig fewshot;
  ProbeConfig probe;

  /// Copies the data geometry into the network configs and checks every
  /// section. Throws ConfigError.
  void finalize();
  AttributeSet attribute_set() const;
  std::int64_t held_out_index() const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys and wrong types are
/// rejected with the offending path.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

/// Sorted keys, two-space indent, trailing newline.
std::string canonical_text(const RunConfig& cfg);
std::array<std::uint8_t, 32> config_digest(const RunConfig& cfg);

/// Dotted leaf paths of the config ("meta.n_iter", ...), in canonical order.
std::vector<std::string> config_leaf_paths();
/// Sets one leaf from its textual form; arrays are comma-separated.
void set_config_value(nlohmann::json& j, const std::string& dotted_path, const std::string& value);

}  // namespace mtat
