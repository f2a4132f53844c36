#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mtat/artifacts.hpp"
#include "mtat/checkpoint.hpp"
#include "mtat/png_io.hpp"

using namespace mtat;
namespace fs = std::filesystem;

namespace {

const std::string kTiny =
    " --seed 3 --image-size 8 --n-per-domain 24 --n-test 16 --generator-base-width 4 --n-downsample 1"
    " --n-resblocks 1 --discriminator-base-width 4 --n-layers 2 --meta-batch-size 4 --n-samples 4"
    " --grid-samples 2,4 --grid-steps 0,3 --trials 2 --max-steps 300 --probe-batch-size 32 --min-accuracy 0.9";

struct Run {
  int code;
  std::string err;
};

Run mtat_cli(const std::string& args) {
  const auto log = fs::temp_directory_path() / "mtat_cli_stderr.txt";
  const std::string cmd = std::string(MTAT_BIN) + " " + args + " >/dev/null 2>" + log.string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mtat_cli_" + name);
  fs::remove_all(p);
  return p.string();
}

}  // namespace

TEST(Cli, GradcheckSucceeds) { EXPECT_EQ(mtat_cli("gradcheck --cases 5").code, 0); }

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(mtat_cli("train-meta --no-such-flag").code, 1);
  EXPECT_EQ(mtat_cli("frobnicate").code, 1);
  const auto r = mtat_cli("train-meta --meta-n-iter abc --out-dir " + scratch("bad"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("meta.n_iter"), std::string::npos) << r.err;
}

TEST(Cli, GenDataWritesImagesAndAttributeList) {
  const auto out = scratch("gen");
  ASSERT_EQ(mtat_cli("gen-data --image-size 8 --n-per-domain 3 --n-layers 2 --n-downsample 1 --out-dir " + out).code, 0);
  std::ifstream in(out + "/list_attr.txt");
  std::int64_t count = 0;
  in >> count;
  EXPECT_EQ(count, 12);
  EXPECT_TRUE(fs::exists(out + "/images/000011.png"));
  EXPECT_EQ(read_png(out + "/images/000000.png").width, 8);

  // Ingesting the written folder reproduces the labels.
  const auto again = scratch("ingest");
  EXPECT_EQ(mtat_cli("probe-train --source folder --image-dir " + out + "/images --attr-file " + out +
                     "/list_attr.txt --image-size 8 --n-layers 2 --n-downsample 1 --n-test 4 --min-accuracy 0 --max-steps 5 --out-dir " + again)
                .code,
            0);
}

TEST(Cli, TrainResumeFinetuneAblate) {
  const auto out = scratch("train");
  ASSERT_EQ(mtat_cli("train-meta --n-iter 6" + kTiny + " --out-dir " + out).code, 0);
  EXPECT_EQ(read_csv(out + "/metrics.csv").rows.size(), 6u);
  EXPECT_EQ(load_checkpoint(out + "/meta.ckpt").iteration, 6u);

  const auto resumed = scratch("resumed");
  auto r = mtat_cli("train-meta --resume " + out + "/meta.ckpt --lr-gen 0.001 --out-dir " + resumed);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("warning"), std::string::npos) << r.err;
  r = mtat_cli("train-meta --resume " + out + "/meta.ckpt --n-iter 8 --allow-config-change --out-dir " + resumed);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_csv(resumed + "/metrics.csv").rows.size(), 2u);

  const auto probe = scratch("probe");
  ASSERT_EQ(mtat_cli("probe-train" + kTiny + " --out-dir " + probe).code, 0);

  const auto ft = scratch("finetune");
  r = mtat_cli("finetune --checkpoint " + out + "/meta.ckpt --probe " + probe + "/probe.ckpt --k-b 2 --out-dir " + ft);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto eval = read_csv(ft + "/eval.csv");
  EXPECT_EQ(eval.rows.size(), 2u);
  EXPECT_EQ(read_csv(ft + "/finetune_metrics.csv").rows.size(), 2u);
  const auto panel = read_png(ft + "/panel.png");
  EXPECT_EQ(panel.width, 5 * 8 + 6 * 2);
  EXPECT_EQ(panel.height, 8 * 8 + 9 * 2);

  const auto ab = scratch("ablate");
  r = mtat_cli("ablate --checkpoint " + out + "/meta.ckpt --probe " + probe + "/probe.ckpt --out-dir " + ab);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_csv(ab + "/ablation.csv").rows.size(), 2u * 2u * 2u);
  EXPECT_TRUE(fs::exists(ab + "/ablation_brown.png"));

  const auto tr = scratch("translate");
  fs::create_directories(tr);
  write_png(tr + "/in.png", RgbImage{8, 8, std::vector<std::uint8_t>(8 * 8 * 3, 90)});
  r = mtat_cli("translate --checkpoint " + ft + "/finetuned.ckpt --input " + tr + "/in.png --target brown --out-dir " +
               tr);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(tr + "/translated.png"));
  EXPECT_TRUE(fs::exists(tr + "/cycle.png"));
  EXPECT_EQ(mtat_cli("evaluate --checkpoint " + out + "/meta.ckpt --probe " + probe + "/probe.ckpt --out-dir " + ab)
                .code,
            0);
}

TEST(Cli, MissingCheckpointIsAnError) {
  EXPECT_NE(mtat_cli("finetune --checkpoint /nonexistent.ckpt").code, 0);
}
