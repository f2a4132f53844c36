#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtat/param_set.hpp"
#include "mtat/rng.hpp"
#include "mtat/tensor.hpp"

namespace mtat {

/// Ordered attribute names with one RGB base colour each. Synthetic hair is
/// drawn as base + uniform jitter in [-jitter, jitter] per channel.
struct AttributeSet {
  std::vector<std::string> names{"blond", "black", "brown", "gray"};
  std::vector<std::array<double, 3>> palette{{225, 190, 100}, {35, 30, 30}, {140, 80, 40}, {165, 165, 170}};
  double jitter = 15.0;

  void validate() const;
  std::int64_t size() const { return static_cast<std::int64_t>(names.size()); }
  /// Throws std::invalid_argument listing the known names.
  std::int64_t index_of(const std::string& name) const;
};

struct Dataset {
  Tensor<float> images;             // N x C x H x W in [-1, 1]
  std::vector<std::int64_t> labels;  // domain index per image
  std::int64_t n_domains = 0;
  std::string split = "all";
  std::string provenance;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t image_size() const { return images.dim(3); }
  std::vector<std::int64_t> counts() const;
  /// Images at `indices`, in that order.
  Tensor<float> gather(const std::vector<std::int64_t>& indices) const;
  Dataset subset(const std::vector<std::int64_t>& indices, const std::string& split_tag) const;
  std::vector<std::int64_t> indices_of(std::int64_t domain) const;
};

/// N x k one-hot rows.
Tensor<float> one_hot(const std::vector<std::int64_t>& labels, std::int64_t k);
/// n identical one-hot rows for `domain`.
Tensor<float> one_hot(std::int64_t domain, std::int64_t n, std::int64_t k);

struct SyntheticImage {
  Tensor<float> image;           // 3 x S x S
  std::vector<bool> hair_mask;   // S x S
};

/// One portrait: bluish background, skin-toned face ellipse and a hair cap in
/// the attribute colour, plus per-pixel noise. Deterministic in
/// (seed, domain, index).
SyntheticImage synthetic_image(std::uint64_t seed, std::int64_t domain, std::int64_t index, std::int64_t size,
                               const AttributeSet& attrs);

/// n_per_domain portraits per attribute, grouped by domain.
Dataset gen_synthetic(std::uint64_t seed, std::int64_t n_per_domain, std::int64_t size = 32,
                      const AttributeSet& attrs = {});

struct IngestReport {
  Dataset data;
  std::int64_t total_rows = 0;
  std::int64_t kept = 0;
  std::int64_t skipped_labels = 0;      // zero or several selected attributes
  std::int64_t skipped_unreadable = 0;  // missing or undecodable image
  std::vector<std::string> messages;
};

/// CelebA list_attr layout: optional count line, optional header of attribute
/// names, then "filename v1 v2 ..." with values in {-1, 1}. With a header the
/// selected attributes are matched by name ("blond" matches "Blond_Hair");
/// without one the columns are taken in attribute order.
IngestReport load_image_folder(const std::string& dir, const std::string& attr_file, const AttributeSet& attrs,
                               std::int64_t target_size);

/// Largest centred square, then bilinear resampling (half-pixel centres) to
/// target x target, returned as 3 x target x target in [-1, 1].
Tensor<float> crop_and_resize(const std::vector<std::uint8_t>& rgb, std::int64_t width, std::int64_t height,
                              std::int64_t target);

/// Stratified uniform split: each domain contributes its proportional share
/// of the n_test images (largest-remainder rounding).
std::pair<Dataset, Dataset> split(const Dataset& data, std::int64_t n_test, std::uint64_t seed);

struct Batch {
  Tensor<float> images;
  std::vector<std::int64_t> original;
  std::int64_t target = 0;
};

/// Uniform sampling with replacement over every image whose domain is not
/// held out. Each draw is checked against the hold-out.
class BatchSampler {
 public:
  BatchSampler(const Dataset& data, std::optional<std::int64_t> held_out);

  Batch sample(std::int64_t target, std::int64_t m, Rng& rng);
  std::vector<std::int64_t> sample_indices(std::int64_t m, Rng& rng);

  std::uint64_t images_drawn() const { return drawn_; }
  std::uint64_t held_out_drawn() const { return held_out_seen_; }
  const std::vector<std::int64_t>& eligible() const { return eligible_; }

 private:
  const Dataset* data_;
  std::optional<std::int64_t> held_out_;
  std::vector<std::int64_t> eligible_;
  std::uint64_t drawn_ = 0;
  std::uint64_t held_out_seen_ = 0;
};

struct ProbeConfig {
  std::int64_t max_steps = 2000;
  std::int64_t batch_size = 64;
  double lr = 1e-3;
  std::int64_t eval_every = 100;
  double stop_accuracy = 0.99;  // early stop once validation reaches this
  double min_accuracy = 0.95;   // below this the probe is unusable
  std::uint64_t seed = 0;
};

struct Probe {
  ParamSet<float> params;
  std::int64_t image_size = 32;
  std::int64_t n_domains = 4;
  double val_accuracy = 0.0;
  std::int64_t steps = 0;
};

class ProbeError : public std::runtime_error {
 public:
  ProbeError(const std::string& msg, double accuracy) : std::runtime_error(msg), accuracy_(accuracy) {}
  double accuracy() const { return accuracy_; }

 private:
  double accuracy_;
};

/// Small conv classifier (conv4/s2 x 2, linear) trained with softmax
/// cross-entropy and Adam. Throws ProbeError when the budget runs out below
/// min_accuracy on `val`.
Probe train_probe(const Dataset& train, const Dataset& val, const ProbeConfig& cfg);

ParamSet<float> init_probe(std::int64_t image_size, std::int64_t n_domains, std::uint64_t seed);
std::vector<std::int64_t> probe_predict(Probe& probe, const Tensor<float>& images);
double probe_accuracy(Probe& probe, const Tensor<float>& images, const std::vector<std::int64_t>& labels);

}  // namespace mtat
