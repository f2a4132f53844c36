#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mtat/data.hpp"
#include "mtat/png_io.hpp"

using namespace mtat;
namespace fs = std::filesystem;

namespace {

Dataset labelled_stub(std::int64_t n, std::int64_t k) {
  Dataset d;
  d.images = Tensor<float>({n, 3, 1, 1});
  for (std::int64_t i = 0; i < n; ++i) {
    d.images[static_cast<std::size_t>(3 * i)] = static_cast<float>(i) / static_cast<float>(n);
    d.labels.push_back(i % k);
  }
  d.n_domains = k;
  return d;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mtat_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Red bands top and bottom, green in between: a centred square crop of a
// 178 x 218 image keeps exactly the green part.
RgbImage banded_portrait() {
  RgbImage img{178, 218, std::vector<std::uint8_t>(178 * 218 * 3)};
  for (std::int64_t y = 0; y < 218; ++y)
    for (std::int64_t x = 0; x < 178; ++x) {
      const bool band = y < 20 || y >= 198;
      auto* p = &img.pixels[static_cast<std::size_t>((y * 178 + x) * 3)];
      p[0] = band ? 255 : 0;
      p[1] = band ? 0 : 255;
      p[2] = 0;
    }
  return img;
}

}  // namespace

TEST(Synthetic, BalancedCounts) {
  const auto d = gen_synthetic(1, 8);
  EXPECT_EQ(d.size(), 32);
  EXPECT_EQ(d.counts(), (std::vector<std::int64_t>{8, 8, 8, 8}));
}

TEST(Synthetic, ValuesInRangeAndLabelsValid) {
  const auto d = gen_synthetic(2, 5);
  for (const float v : d.images.storage()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  const auto oh = one_hot(d.labels, d.n_domains);
  for (std::int64_t i = 0; i < d.size(); ++i) {
    float s = 0;
    for (std::int64_t c = 0; c < d.n_domains; ++c) s += oh[static_cast<std::size_t>(i * d.n_domains + c)];
    EXPECT_EQ(s, 1.0f);
  }
}

// Mean colour over the hair mask is nearest to the image's own palette entry.
TEST(Synthetic, HairColourSelfCheck) {
  const AttributeSet attrs;
  const std::int64_t per = 2500, size = 32;
  std::int64_t ok = 0, total = 0;
  for (std::int64_t d = 0; d < attrs.size(); ++d) {
    for (std::int64_t i = 0; i < per; ++i) {
      const auto s = synthetic_image(77, d, i, size, attrs);
      std::array<double, 3> mean{};
      std::int64_t n = 0;
      for (std::int64_t p = 0; p < size * size; ++p) {
        if (!s.hair_mask[static_cast<std::size_t>(p)]) continue;
        ++n;
        for (int c = 0; c < 3; ++c) mean[c] += (s.image[static_cast<std::size_t>(c * size * size + p)] + 1.0) * 127.5;
      }
      ASSERT_GT(n, 0);
      std::int64_t best = -1;
      double best_dist = 1e300;
      for (std::int64_t k = 0; k < attrs.size(); ++k) {
        double dist = 0;
        for (int c = 0; c < 3; ++c) dist += std::pow(mean[c] / n - attrs.palette[k][c], 2);
        if (dist < best_dist) best_dist = dist, best = k;
      }
      ok += best == d;
      ++total;
    }
  }
  EXPECT_EQ(total, 10000);
  EXPECT_GE(static_cast<double>(ok) / total, 0.99);
}

TEST(Synthetic, PaletteSeparationExceedsJitter) {
  const AttributeSet attrs;
  for (std::int64_t a = 0; a < attrs.size(); ++a)
    for (std::int64_t b = a + 1; b < attrs.size(); ++b) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d += std::pow(attrs.palette[a][c] - attrs.palette[b][c], 2);
      // Worst case jitter displacement is jitter * sqrt(3) per image.
      EXPECT_GE(std::sqrt(d), 3.0 * attrs.jitter * std::sqrt(3.0)) << attrs.names[a] << "/" << attrs.names[b];
    }
}

TEST(Synthetic, SameSeedIsByteIdentical) {
  const auto a = gen_synthetic(9, 6), b = gen_synthetic(9, 6), c = gen_synthetic(10, 6);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.images, c.images);
}

TEST(Split, LargeDatasetCounts) {
  const auto d = labelled_stub(32502, 4);
  const auto [train, test] = split(d, 2000, 5);
  EXPECT_EQ(train.size(), 30502);
  EXPECT_EQ(test.size(), 2000);
  EXPECT_EQ(train.split, "train");
  EXPECT_EQ(test.split, "test");
}

TEST(Split, DisjointAndSeedDeterministic) {
  const auto d = labelled_stub(1000, 4);
  const auto [tr1, te1] = split(d, 100, 3);
  const auto [tr2, te2] = split(d, 100, 3);
  const auto [tr3, te3] = split(d, 100, 4);
  EXPECT_EQ(te1.images, te2.images);
  EXPECT_NE(te1.images, te3.images);
  std::set<float> seen;
  for (std::int64_t i = 0; i < tr1.size(); ++i) seen.insert(tr1.images[static_cast<std::size_t>(3 * i)]);
  for (std::int64_t i = 0; i < te1.size(); ++i) {
    EXPECT_FALSE(seen.count(te1.images[static_cast<std::size_t>(3 * i)]));
  }
}

// Per-domain share of each side within 2% of the full data's share.
TEST(Split, PreservesDomainProportions) {
  Dataset d = labelled_stub(3001, 4);
  for (std::int64_t i = 0; i < 400; ++i) d.labels[static_cast<std::size_t>(i)] = 0;  // skew towards domain 0
  const auto full = d.counts();
  const auto [train, test] = split(d, 500, 8);
  for (const Dataset* part : {&train, &test}) {
    const auto c = part->counts();
    for (std::size_t k = 0; k < c.size(); ++k) {
      const double share = static_cast<double>(c[k]) / part->size();
      const double ref = static_cast<double>(full[k]) / d.size();
      EXPECT_NEAR(share, ref, 0.02) << part->split << " domain " << k;
    }
  }
}

TEST(Split, RejectsOversizedTest) {
  const auto d = labelled_stub(10, 2);
  EXPECT_THROW(split(d, 10, 1), std::invalid_argument);
}

TEST(Sampler, NeverDrawsHeldOutDomain) {
  const auto d = gen_synthetic(4, 10, 8);
  BatchSampler sampler(d, 2);
  Rng rng(1);
  std::int64_t drawn = 0;
  while (drawn < 10000) {
    const auto b = sampler.sample(0, 16, rng);
    ASSERT_EQ(b.images.dim(0), 16);
    for (const auto o : b.original) EXPECT_NE(o, 2);
    drawn += 16;
  }
  EXPECT_EQ(sampler.held_out_drawn(), 0u);
  EXPECT_GE(sampler.images_drawn(), 10000u);
}

TEST(Sampler, ReproducibleForFixedStream) {
  const auto d = gen_synthetic(4, 10, 8);
  BatchSampler a(d, std::nullopt), b(d, std::nullopt);
  Rng ra(6), rb(6);
  EXPECT_EQ(a.sample_indices(16, ra), b.sample_indices(16, rb));
}

TEST(Sampler, CoversEveryEligibleDomain) {
  const auto d = gen_synthetic(4, 10, 8);
  BatchSampler sampler(d, 1);
  Rng rng(2);
  std::set<std::int64_t> domains;
  for (const auto i : sampler.sample_indices(400, rng)) domains.insert(d.labels[static_cast<std::size_t>(i)]);
  EXPECT_EQ(domains, (std::set<std::int64_t>{0, 2, 3}));
}

TEST(CropResize, CentredSquareOfPortrait) {
  const auto img = banded_portrait();
  const auto out = crop_and_resize(img.pixels, img.width, img.height, 128);
  ASSERT_EQ(out.shape(), (Shape{3, 128, 128}));
  for (std::int64_t p = 0; p < 128 * 128; ++p) {
    EXPECT_EQ(out[static_cast<std::size_t>(p)], -1.0f);
    EXPECT_EQ(out[static_cast<std::size_t>(128 * 128 + p)], 1.0f);
  }
}

TEST(Ingest, CelebALayout) {
  const auto dir = scratch_dir("ingest");
  write_png((dir / "a.png").string(), banded_portrait());
  write_png((dir / "b.png").string(), banded_portrait());
  write_png((dir / "c.png").string(), banded_portrait());
  {
    std::ofstream f(dir / "list_attr.txt");
    f << "5\n"
      << "Bald Blond_Hair Black_Hair Brown_Hair Gray_Hair Smiling\n"
      << "a.png 1 -1 1 -1 -1 1\n"       // black
      << "b.png -1 1 -1 -1 -1 -1\n"     // blond
      << "c.png -1 1 1 -1 -1 -1\n"      // two hair colours
      << "d.png -1 -1 -1 -1 -1 -1\n"    // none
      << "missing.png -1 -1 -1 1 -1 1\n";
  }
  const auto rep = load_image_folder(dir.string(), (dir / "list_attr.txt").string(), AttributeSet{}, 16);
  EXPECT_EQ(rep.total_rows, 5);
  EXPECT_EQ(rep.kept, 2);
  EXPECT_EQ(rep.skipped_labels, 2);
  EXPECT_EQ(rep.skipped_unreadable, 1);
  EXPECT_EQ(rep.kept + rep.skipped_labels + rep.skipped_unreadable, rep.total_rows);
  EXPECT_EQ(rep.data.labels, (std::vector<std::int64_t>{1, 0}));
  EXPECT_EQ(rep.data.images.shape(), (Shape{2, 3, 16, 16}));
  fs::remove_all(dir);
}

TEST(Ingest, HeaderlessColumnsFollowAttributeOrder) {
  const auto dir = scratch_dir("headerless");
  write_png((dir / "img1.png").string(), banded_portrait());
  { std::ofstream(dir / "attrs.txt") << "img1.png 1 -1 -1 -1\n"; }
  const auto rep = load_image_folder(dir.string(), (dir / "attrs.txt").string(), AttributeSet{}, 8);
  EXPECT_EQ(rep.data.labels, (std::vector<std::int64_t>{0}));
  fs::remove_all(dir);
}

TEST(Ingest, RejectsWhenNothingUsable) {
  const auto dir = scratch_dir("empty");
  { std::ofstream(dir / "attrs.txt") << "x.png 1 1 -1 -1\n"; }
  EXPECT_THROW(load_image_folder(dir.string(), (dir / "attrs.txt").string(), AttributeSet{}, 8), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Probe, SeparatesSyntheticClassesFromAQuarter) {
  const auto d = gen_synthetic(12, 200);
  const auto [rest, quarter] = split(d, 200, 1);
  const auto [train, val] = split(quarter, 40, 2);
  ProbeConfig cfg;
  cfg.seed = 3;
  auto probe = train_probe(train, val, cfg);
  EXPECT_LE(probe.steps, 2000);
  EXPECT_GE(probe_accuracy(probe, rest.images, rest.labels), 0.99);
}

TEST(Probe, ShuffledLabelsGiveChance) {
  auto d = gen_synthetic(13, 500, 16);
  Rng rng(4);
  for (std::size_t i = d.labels.size(); i > 1; --i) std::swap(d.labels[i - 1], d.labels[rng.below(i)]);
  const auto [train, test] = split(d, 1000, 2);
  const auto [fit, val] = split(train, 100, 3);
  ProbeConfig cfg;
  cfg.max_steps = 500;
  cfg.min_accuracy = 0.0;
  auto probe = train_probe(fit, val, cfg);
  EXPECT_NEAR(probe_accuracy(probe, test.images, test.labels), 0.25, 0.05);
}

TEST(Probe, DeterministicUnderFixedSeed) {
  const auto d = gen_synthetic(14, 40, 16);
  const auto [train, val] = split(d, 40, 1);
  ProbeConfig cfg;
  cfg.max_steps = 100;
  cfg.min_accuracy = 0.0;
  const auto a = train_probe(train, val, cfg), b = train_probe(train, val, cfg);
  EXPECT_TRUE(a.params.values_equal(b.params));
  EXPECT_EQ(a.val_accuracy, b.val_accuracy);
}

TEST(Probe, BudgetExhaustionIsAnError) {
  auto d = gen_synthetic(15, 40, 16);
  Rng rng(5);
  for (std::size_t i = d.labels.size(); i > 1; --i) std::swap(d.labels[i - 1], d.labels[rng.below(i)]);
  const auto [train, val] = split(d, 40, 1);
  ProbeConfig cfg;
  cfg.max_steps = 20;
  EXPECT_THROW(train_probe(train, val, cfg), ProbeError);
}
