#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "mtat/artifacts.hpp"
#include "mtat/checkpoint.hpp"
#include "mtat/config.hpp"
#include "mtat/rng.hpp"

using namespace mtat;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "mtat_test_artifacts";
  fs::create_directories(dir);
  const auto p = dir / name;
  fs::remove(p);
  return p;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Checkpoint sample_checkpoint() {
  Rng rng(1);
  Checkpoint c;
  c.config_digest = sha256("cfg");
  c.iteration = 42;
  c.rng_state = "12 34 56";
  c.scalars["d_steps"] = 210;
  c.texts["config"] = "{}\n";
  Tensor<float> f({2, 3});
  for (auto& v : f.storage()) v = static_cast<float>(rng.normal());
  f[0] = -0.0f;
  Tensor<double> d({4});
  for (auto& v : d.storage()) v = rng.uniform();
  c.put("g.w", f);
  c.put("x.d", d);
  return c;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto c = sample_checkpoint();
  const auto p = scratch("round.ckpt");
  save_checkpoint(p.string(), c);
  const auto back = load_checkpoint(p.string());
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize(back), file_bytes(p));
  EXPECT_FALSE(fs::exists(p.string() + ".tmp"));
  const auto f = back.get<float>("g.w");
  EXPECT_TRUE(std::signbit(f[0]));
}

TEST(Checkpoint, TruncationNamesOffset) {
  const auto bytes = serialize(sample_checkpoint());
  for (const std::size_t keep : {std::size_t{3}, std::size_t{20}, bytes.size() - 1}) {
    try {
      deserialize(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep)), "f");
      FAIL() << keep;
    } catch (const CheckpointError& e) {
      EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
    }
  }
}

TEST(Checkpoint, RefusesUnknownVersion) {
  auto bytes = serialize(sample_checkpoint());
  bytes[4] = static_cast<std::uint8_t>(kCheckpointVersion + 1);
  try {
    deserialize(bytes);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, RejectsBadMagic) {
  auto bytes = serialize(sample_checkpoint());
  bytes[0] = 'X';
  EXPECT_THROW(deserialize(bytes), CheckpointError);
}

TEST(Checkpoint, ParamsRoundTrip) {
  ParamSet<float> ps;
  ps.add("a", Tensor<float>({3}, 1.5f));
  ps.add("b", Tensor<float>({2, 2}, -2.0f));
  Checkpoint c;
  c.put_params("G", ps);
  ParamSet<float> into;
  into.add("a", Tensor<float>({3}));
  into.add("b", Tensor<float>({2, 2}));
  c.get_params("G", into);
  EXPECT_TRUE(into.values_equal(ps));
  ParamSet<float> wrong;
  wrong.add("a", Tensor<float>({4}));
  EXPECT_ANY_THROW(c.get_params("G", wrong));
}

TEST(Sha256, KnownVector) {
  EXPECT_EQ(hex(sha256("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Csv, TwoAppendsGiveOneHeaderTwoRows) {
  const auto p = scratch("two.csv");
  {
    CsvWriter w(p.string(), {"a", "b"});
    w.append(std::vector<double>{1, 2});
  }
  {
    CsvWriter w(p.string(), {"a", "b"});
    w.append(std::vector<double>{3, 4});
  }
  const auto t = read_csv(p.string());
  EXPECT_EQ(t.header, (std::vector<std::string>{"a", "b"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.number(1, "b"), 4.0);
  EXPECT_THROW(CsvWriter(p.string(), {"a", "c"}), std::invalid_argument);
}

TEST(Csv, ParseBackRecoversFullPrecision) {
  const auto p = scratch("prec.csv");
  Rng rng(5);
  std::vector<double> values{0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0};
  for (int i = 0; i < 200; ++i) values.push_back(rng.normal() * std::pow(10.0, rng.uniform(-20, 20)));
  {
    CsvWriter w(p.string(), {"v"});
    for (const double v : values) w.append(std::vector<double>{v});
  }
  const auto t = read_csv(p.string());
  ASSERT_EQ(t.rows.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) EXPECT_EQ(t.number(i, "v"), values[i]) << i;
}

TEST(Csv, QuotesFieldsWithCommas) {
  const auto p = scratch("quote.csv");
  {
    CsvWriter w(p.string(), {"name", "x"});
    w.append(std::vector<std::string>{"a,\"b\"", "1"});
  }
  const auto t = read_csv(p.string());
  EXPECT_EQ(t.rows[0][0], "a,\"b\"");
}

TEST(Png, PixelRangeMap) {
  EXPECT_EQ(to_pixel(-1.0f), 0);
  EXPECT_EQ(to_pixel(1.0f), 255);
  EXPECT_EQ(to_pixel(0.0f), 128);
  EXPECT_EQ(to_pixel(-3.0f), 0);
  EXPECT_EQ(to_pixel(3.0f), 255);
}

TEST(Png, RenderingIsDeterministicAndReadable) {
  std::vector<Tensor<float>> cells;
  Rng rng(2);
  for (int i = 0; i < 6; ++i) {
    Tensor<float> t({3, 8, 8});
    for (auto& v : t.storage()) v = static_cast<float>(rng.uniform(-1, 1));
    cells.push_back(t);
  }
  const auto a = scratch("a.png"), b = scratch("b.png");
  write_image_grid(cells, 2, 3, a.string(), {{"columns", "x,y,z"}});
  write_image_grid(cells, 2, 3, b.string(), {{"columns", "x,y,z"}});
  EXPECT_EQ(file_bytes(a), file_bytes(b));
  const auto img = read_png(a.string());
  EXPECT_EQ(img.pixels, render_grid(cells, 2, 3).pixels);
}

TEST(Grid, TranslationLayoutHasFiveColumns) {
  std::vector<Tensor<float>> cells(5, Tensor<float>({3, 16, 16}, -1.0f));
  const auto img = render_grid(cells, 1, 5);
  EXPECT_EQ(img.width, 5 * 16 + 6 * 2);
  EXPECT_EQ(img.height, 16 + 2 * 2);
  // Cell interiors are black, gutters white.
  EXPECT_EQ(img.pixels[static_cast<std::size_t>((2 * img.width + 2) * 3)], 0);
  EXPECT_EQ(img.pixels[0], 255);
}

TEST(Grid, AblationPanelIsFourByThree) {
  std::vector<Tensor<float>> cells;
  for (int i = 0; i < 12; ++i) cells.emplace_back(Shape{3, 8, 8}, static_cast<float>(i) / 6.0f - 1.0f);
  const auto img = render_grid(cells, 3, 4);
  EXPECT_EQ(img.width, 4 * 8 + 5 * 2);
  EXPECT_EQ(img.height, 3 * 8 + 4 * 2);
  // Row 1, column 2 holds cell 6.
  const std::int64_t x = 2 + 2 * 10 + 3, y = 2 + 1 * 10 + 3;
  EXPECT_EQ(img.pixels[static_cast<std::size_t>((y * img.width + x) * 3)], to_pixel(0.0f));
  EXPECT_THROW(render_grid(cells, 2, 4), std::invalid_argument);
}

TEST(Config, UnknownKeysRejected) {
  auto j = to_json(RunConfig{});
  j["meta"]["n_iters"] = 5;
  try {
    config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("meta.n_iters"), std::string::npos) << e.what();
  }
}

TEST(Config, RoundTripAndDigest) {
  RunConfig c;
  c.meta.n_iter = 77;
  const auto back = config_from_json(nlohmann::json::parse(canonical_text(c)));
  EXPECT_EQ(canonical_text(back), canonical_text(c));
  EXPECT_EQ(config_digest(back), config_digest(c));
  c.meta.n_iter = 78;
  EXPECT_NE(config_digest(back), config_digest(c));
}

TEST(Config, SetValueFromText) {
  auto j = to_json(RunConfig{});
  set_config_value(j, "meta.lr_gen", "0.5");
  set_config_value(j, "fewshot.grid_samples", "2,4");
  const auto c = config_from_json(j);
  EXPECT_EQ(c.meta.lr_gen, 0.5);
  EXPECT_EQ(c.fewshot.grid_samples, (std::vector<std::int64_t>{2, 4}));
  EXPECT_THROW(set_config_value(j, "meta.nope", "1"), ConfigError);
  EXPECT_THROW(set_config_value(j, "meta.n_iter", "abc"), ConfigError);
}

TEST(Config, LeafPathsAreCanonicallyOrdered) {
  const auto paths = config_leaf_paths();
  EXPECT_TRUE(std::is_sorted(paths.begin(), paths.end()));
  EXPECT_NE(std::find(paths.begin(), paths.end(), "meta.k_a"), paths.end());
}
