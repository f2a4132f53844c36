#include "mtat/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mtat/ops.hpp"
#include "mtat/optim.hpp"
#include "mtat/png_io.hpp"

namespace mtat {

void AttributeSet::validate() const {
  if (names.size() < 2) throw std::invalid_argument("attribute set needs at least 2 names");
  if (palette.size() != names.size()) {
    throw std::invalid_argument("attribute set has " + std::to_string(names.size()) + " names but " +
                                std::to_string(palette.size()) + " palette colours");
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    for (std::size_t j = i + 1; j < names.size(); ++j) {
      if (names[i] == names[j]) throw std::invalid_argument("duplicate attribute name '" + names[i] + "'");
    }
  }
}

std::int64_t AttributeSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<std::int64_t>(i);
  }
  std::string known;
  for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown attribute '" + name + "' (known: " + known + ")");
}

std::vector<std::int64_t> Dataset::counts() const {
  std::vector<std::int64_t> c(static_cast<std::size_t>(n_domains), 0);
  for (const auto l : labels) ++c.at(static_cast<std::size_t>(l));
  return c;
}

Tensor<float> Dataset::gather(const std::vector<std::int64_t>& indices) const {
  if (indices.empty()) throw std::invalid_argument("gather: no indices");
  const auto& s = images.shape();
  const std::int64_t per = s[1] * s[2] * s[3];
  Tensor<float> out(Shape{static_cast<std::int64_t>(indices.size()), s[1], s[2], s[3]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto k = indices[i];
    if (k < 0 || k >= size()) throw std::out_of_range("gather: index " + std::to_string(k) + " out of range");
    std::copy_n(images.data().data() + k * per, per, out.data().data() + static_cast<std::int64_t>(i) * per);
  }
  return out;
}

Dataset Dataset::subset(const std::vector<std::int64_t>& indices, const std::string& split_tag) const {
  Dataset d;
  d.images = gather(indices);
  for (const auto k : indices) d.labels.push_back(labels[static_cast<std::size_t>(k)]);
  d.n_domains = n_domains;
  d.split = split_tag;
  d.provenance = provenance;
  return d;
}

std::vector<std::int64_t> Dataset::indices_of(std::int64_t domain) const {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == domain) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

Tensor<float> one_hot(const std::vector<std::int64_t>& labels, std::int64_t k) {
  Tensor<float> t(Shape{static_cast<std::int64_t>(labels.size()), k});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw std::out_of_range("one_hot: label " + std::to_string(labels[i]));
    t[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(labels[i])] = 1.0f;
  }
  return t;
}

Tensor<float> one_hot(std::int64_t domain, std::int64_t n, std::int64_t k) {
  return one_hot(std::vector<std::int64_t>(static_cast<std::size_t>(n), domain), k);
}

SyntheticImage synthetic_image(std::uint64_t seed, std::int64_t domain, std::int64_t index, std::int64_t size,
                               const AttributeSet& attrs) {
  Rng rng{seed, static_cast<std::uint64_t>(domain), static_cast<std::uint64_t>(index)};
  const double s = static_cast<double>(size);
  const double scale = s / 32.0;
  const std::array<double, 3> bg{rng.uniform(60, 110), rng.uniform(110, 160), rng.uniform(170, 230)};
  const double cx = s / 2 + rng.uniform(-2, 2) * scale;
  const double cy = s / 2 + (2 + rng.uniform(-2, 2)) * scale;
  const double a = rng.uniform(7, 9) * scale;
  const double b = rng.uniform(9, 11) * scale;
  const double t = rng.uniform(2, 4) * scale;
  const std::array<double, 3> skin{rng.uniform(200, 240), rng.uniform(150, 190), rng.uniform(120, 160)};
  const auto& base = attrs.palette.at(static_cast<std::size_t>(domain));
  std::array<double, 3> hair{};
  for (int c = 0; c < 3; ++c) hair[c] = base[c] + rng.uniform(-attrs.jitter, attrs.jitter);

  SyntheticImage out{Tensor<float>(Shape{3, size, size}), std::vector<bool>(static_cast<std::size_t>(size * size))};
  const std::int64_t plane = size * size;
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double fx = (px - cx) / a, fy = (py - cy) / b;
      const double ox = (px - cx) / (a + t), oy = (py - cy) / (b + t);
      const bool face = fx * fx + fy * fy <= 1.0;
      const bool outer = ox * ox + oy * oy <= 1.0;
      const bool is_hair = (outer && !face && py <= cy - 0.3 * b) || (face && py <= cy - 0.6 * b);
      const auto& col = is_hair ? hair : (face ? skin : bg);
      out.hair_mask[static_cast<std::size_t>(y * size + x)] = is_hair;
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(col[c] + rng.uniform(-4, 4), 0.0, 255.0);
        out.image[static_cast<std::size_t>(c * plane + y * size + x)] = static_cast<float>(v / 127.5 - 1.0);
      }
    }
  }
  return out;
}

Dataset gen_synthetic(std::uint64_t seed, std::int64_t n_per_domain, std::int64_t size, const AttributeSet& attrs) {
  attrs.validate();
  if (n_per_domain < 1) throw std::invalid_argument("gen_synthetic: n per domain must be at least 1");
  if (size < 8) throw std::invalid_argument("gen_synthetic: image size must be at least 8");
  const std::int64_t k = attrs.size();
  Dataset d;
  d.n_domains = k;
  d.images = Tensor<float>(Shape{k * n_per_domain, 3, size, size});
  d.provenance = "synthetic seed=" + std::to_string(seed);
  const std::int64_t per = 3 * size * size;
  for (std::int64_t dom = 0; dom < k; ++dom) {
    for (std::int64_t i = 0; i < n_per_domain; ++i) {
      const auto img = synthetic_image(seed, dom, i, size, attrs);
      std::copy_n(img.image.data().data(), per, d.images.data().data() + (dom * n_per_domain + i) * per);
      d.labels.push_back(dom);
    }
  }
  return d;
}

Tensor<float> crop_and_resize(const std::vector<std::uint8_t>& rgb, std::int64_t width, std::int64_t height,
                              std::int64_t target) {
  if (target < 1) throw std::invalid_argument("crop_and_resize: target size must be positive");
  const std::int64_t side = std::min(width, height);
  const std::int64_t x0 = (width - side) / 2, y0 = (height - side) / 2;
  Tensor<float> out(Shape{3, target, target});
  const double ratio = static_cast<double>(side) / static_cast<double>(target);
  auto at = [&](std::int64_t y, std::int64_t x, int c) {
    return static_cast<double>(rgb[static_cast<std::size_t>(((y0 + y) * width + x0 + x) * 3 + c)]);
  };
  for (std::int64_t i = 0; i < target; ++i) {
    const double sy = std::clamp((i + 0.5) * ratio - 0.5, 0.0, static_cast<double>(side - 1));
    const auto ya = static_cast<std::int64_t>(std::floor(sy));
    const auto yb = std::min(ya + 1, side - 1);
    const double wy = sy - ya;
    for (std::int64_t j = 0; j < target; ++j) {
      const double sx = std::clamp((j + 0.5) * ratio - 0.5, 0.0, static_cast<double>(side - 1));
      const auto xa = static_cast<std::int64_t>(std::floor(sx));
      const auto xb = std::min(xa + 1, side - 1);
      const double wx = sx - xa;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * at(ya, xa, c) + wx * at(ya, xb, c)) +
                         wy * ((1 - wx) * at(yb, xa, c) + wx * at(yb, xb, c));
        out[static_cast<std::size_t>((c * target + i) * target + j)] = static_cast<float>(v / 127.5 - 1.0);
      }
    }
  }
  return out;
}

namespace {

std::vector<std::string> tokens(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string t; is >> t;) out.push_back(t);
  return out;
}

bool is_integer(const std::string& s) {
  if (s.empty()) return false;
  std::size_t i = (s[0] == '-' || s[0] == '+') ? 1 : 0;
  if (i == s.size()) return false;
  for (; i < s.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  }
  return true;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

IngestReport load_image_folder(const std::string& dir, const std::string& attr_file, const AttributeSet& attrs,
                               std::int64_t target_size) {
  attrs.validate();
  std::ifstream in(attr_file);
  if (!in) throw std::runtime_error("cannot open attribute file '" + attr_file + "'");
  IngestReport rep;
  std::vector<std::size_t> columns;  // per attribute, index into the value columns
  bool seen_rows = false;
  std::vector<Tensor<float>> images;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tok = tokens(line);
    if (tok.empty()) continue;
    // CelebA files open with the row count.
    if (tok.size() == 1 && is_integer(tok[0]) && !seen_rows && columns.empty()) continue;
    const bool data_row = tok.size() >= 2 && std::all_of(tok.begin() + 1, tok.end(), is_integer);
    if (!data_row) {
      if (seen_rows || !columns.empty()) {
        throw std::runtime_error(attr_file + ":" + std::to_string(line_no) + ": malformed row");
      }
      for (const auto& name : attrs.names) {
        const auto it = std::find_if(tok.begin(), tok.end(), [&](const std::string& h) {
          return lower(h) == lower(name) || lower(h) == lower(name) + "_hair";
        });
        if (it == tok.end()) {
          throw std::runtime_error(attr_file + ": header has no column for attribute '" + name + "'");
        }
        columns.push_back(static_cast<std::size_t>(it - tok.begin()));
      }
      continue;
    }
    seen_rows = true;
    ++rep.total_rows;
    if (columns.empty()) {
      for (std::size_t i = 0; i < attrs.names.size(); ++i) columns.push_back(i);
    }
    std::vector<std::int64_t> selected;
    bool valid = true;
    for (std::size_t a = 0; a < columns.size(); ++a) {
      const std::size_t col = columns[a] + 1;
      if (col >= tok.size()) {
        valid = false;
        break;
      }
      const int v = std::stoi(tok[col]);
      if (v != 1 && v != -1) valid = false;
      if (v == 1) selected.push_back(static_cast<std::int64_t>(a));
    }
    if (!valid || selected.size() != 1) {
      ++rep.skipped_labels;
      continue;
    }
    try {
      const auto img = read_png(dir + "/" + tok[0]);
      images.push_back(crop_and_resize(img.pixels, img.width, img.height, target_size));
      rep.data.labels.push_back(selected[0]);
      ++rep.kept;
    } catch (const std::exception& e) {
      ++rep.skipped_unreadable;
      rep.messages.push_back(e.what());
    }
  }
  if (rep.kept == 0) {
    throw std::runtime_error("no usable images in '" + attr_file + "' (" + std::to_string(rep.total_rows) +
                             " rows, " + std::to_string(rep.skipped_labels) + " label skips, " +
                             std::to_string(rep.skipped_unreadable) + " unreadable)");
  }
  const std::int64_t per = 3 * target_size * target_size;
  rep.data.images = Tensor<float>(Shape{rep.kept, 3, target_size, target_size});
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::copy_n(images[i].data().data(), per, rep.data.images.data().data() + static_cast<std::int64_t>(i) * per);
  }
  rep.data.n_domains = attrs.size();
  rep.data.provenance = dir;
  return rep;
}

std::pair<Dataset, Dataset> split(const Dataset& data, std::int64_t n_test, std::uint64_t seed) {
  const std::int64_t n = data.size();
  if (n_test < 1 || n_test >= n) {
    throw std::invalid_argument("split: n_test " + std::to_string(n_test) + " must lie in [1, " +
                                std::to_string(n) + ")");
  }
  const auto counts = data.counts();
  std::vector<std::int64_t> quota(counts.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::int64_t assigned = 0;
  for (std::size_t d = 0; d < counts.size(); ++d) {
    const double share = static_cast<double>(n_test) * counts[d] / static_cast<double>(n);
    quota[d] = static_cast<std::int64_t>(std::floor(share));
    assigned += quota[d];
    remainders.emplace_back(share - quota[d], d);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n_test; ++i, ++assigned) ++quota[remainders[i].second];

  Rng rng(seed);
  std::vector<std::int64_t> test, train;
  for (std::size_t d = 0; d < counts.size(); ++d) {
    auto idx = data.indices_of(static_cast<std::int64_t>(d));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    test.insert(test.end(), idx.begin(), idx.begin() + quota[d]);
    train.insert(train.end(), idx.begin() + quota[d], idx.end());
  }
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {data.subset(train, "train"), data.subset(test, "test")};
}

BatchSampler::BatchSampler(const Dataset& data, std::optional<std::int64_t> held_out)
    : data_(&data), held_out_(held_out) {
  for (std::int64_t i = 0; i < data.size(); ++i) {
    if (!held_out || data.labels[static_cast<std::size_t>(i)] != *held_out) eligible_.push_back(i);
  }
}

std::vector<std::int64_t> BatchSampler::sample_indices(std::int64_t m, Rng& rng) {
  if (m < 1) throw std::invalid_argument("batch size must be at least 1");
  if (eligible_.empty()) throw std::runtime_error("batch sampling: no eligible images left");
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    const auto k = eligible_[rng.below(eligible_.size())];
    ++drawn_;
    if (held_out_ && data_->labels[static_cast<std::size_t>(k)] == *held_out_) {
      ++held_out_seen_;
      throw std::logic_error("batch sampling drew held-out image " + std::to_string(k));
    }
    idx.push_back(k);
  }
  return idx;
}

Batch BatchSampler::sample(std::int64_t target, std::int64_t m, Rng& rng) {
  if (target < 0 || target >= data_->n_domains) throw std::invalid_argument("task target out of range");
  if (held_out_ && target == *held_out_) throw std::invalid_argument("task targets the held-out domain");
  const auto idx = sample_indices(m, rng);
  Batch b;
  b.images = data_->gather(idx);
  for (const auto k : idx) b.original.push_back(data_->labels[static_cast<std::size_t>(k)]);
  b.target = target;
  return b;
}

namespace {

Var<float> probe_forward(Graph<float>& g, ParamSet<float>& ps, Var<float> x) {
  Var<float> h = ops::relu(ops::conv2d(x, g.param(ps, "conv1.w"), std::optional(g.param(ps, "conv1.b")),
                                       ops::Conv2dAttrs{2, 1}));
  h = ops::relu(ops::conv2d(h, g.param(ps, "conv2.w"), std::optional(g.param(ps, "conv2.b")), ops::Conv2dAttrs{2, 1}));
  return ops::linear(ops::flatten(h), g.param(ps, "fc.w"), std::optional(g.param(ps, "fc.b")));
}

void add_normal(ParamSet<float>& ps, Rng& rng, const std::string& name, Shape shape, double fan_in, double gain) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(gain / std::sqrt(fan_in) * rng.normal());
  ps.add(name, std::move(t));
}

}  // namespace

ParamSet<float> init_probe(std::int64_t image_size, std::int64_t n_domains, std::uint64_t seed) {
  if (image_size % 4 != 0) throw std::invalid_argument("probe: image size must be divisible by 4");
  Rng rng{seed, 3};
  ParamSet<float> ps;
  const double g = std::sqrt(2.0);
  add_normal(ps, rng, "conv1.w", {8, 3, 4, 4}, 48, g);
  ps.add("conv1.b", Tensor<float>(Shape{8}));
  add_normal(ps, rng, "conv2.w", {16, 8, 4, 4}, 128, g);
  ps.add("conv2.b", Tensor<float>(Shape{16}));
  const std::int64_t f = 16 * (image_size / 4) * (image_size / 4);
  add_normal(ps, rng, "fc.w", {n_domains, f}, static_cast<double>(f), 1.0);
  ps.add("fc.b", Tensor<float>(Shape{n_domains}));
  return ps;
}

std::vector<std::int64_t> probe_predict(Probe& probe, const Tensor<float>& images) {
  constexpr std::int64_t chunk = 256;
  const std::int64_t n = images.dim(0);
  const std::int64_t per = images.numel() / n;
  std::vector<std::int64_t> out;
  for (std::int64_t start = 0; start < n; start += chunk) {
    const std::int64_t len = std::min(chunk, n - start);
    Shape s = images.shape();
    s[0] = len;
    std::vector<float> buf(images.data().begin() + start * per, images.data().begin() + (start + len) * per);
    Graph<float> g;
    g.freeze_all();
    const auto logits = probe_forward(g, probe.params, g.constant(Tensor<float>(s, std::move(buf)))).value();
    const std::int64_t k = logits.dim(1);
    for (std::int64_t i = 0; i < len; ++i) {
      const float* row = logits.data().data() + i * k;
      out.push_back(std::max_element(row, row + k) - row);
    }
  }
  return out;
}

double probe_accuracy(Probe& probe, const Tensor<float>& images, const std::vector<std::int64_t>& labels) {
  const auto pred = probe_predict(probe, images);
  std::int64_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

Probe train_probe(const Dataset& train, const Dataset& val, const ProbeConfig& cfg) {
  if (train.size() == 0 || val.size() == 0) throw std::invalid_argument("train_probe: empty dataset");
  Probe probe;
  probe.image_size = train.image_size();
  probe.n_domains = train.n_domains;
  probe.params = init_probe(probe.image_size, probe.n_domains, cfg.seed);
  Optimizer<float> opt(OptimizerKind::adam, probe.params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  Rng rng{cfg.seed, 4};
  std::vector<std::int64_t> all(static_cast<std::size_t>(train.size()));
  std::iota(all.begin(), all.end(), 0);
  for (std::int64_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<std::int64_t> idx, lab;
    for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
      const auto k = all[rng.below(all.size())];
      idx.push_back(k);
      lab.push_back(train.labels[static_cast<std::size_t>(k)]);
    }
    Graph<float> g;
    const auto logits = probe_forward(g, probe.params, g.constant(train.gather(idx)));
    g.backward(ops::softmax_cross_entropy(logits, one_hot(lab, train.n_domains)));
    opt.step(probe.params);
    probe.steps = step;
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      probe.val_accuracy = probe_accuracy(probe, val.images, val.labels);
      if (probe.val_accuracy >= cfg.stop_accuracy) break;
    }
  }
  if (probe.val_accuracy < cfg.min_accuracy) {
    throw ProbeError("probe reached only " + std::to_string(probe.val_accuracy) + " validation accuracy after " +
                         std::to_string(probe.steps) + " steps",
                     probe.val_accuracy);
  }
  return probe;
}

}  // namespace mtat
