#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "ovseg/encoder.hpp"
#include "ovseg/image.hpp"
#include "ovseg/params.hpp"

namespace fs = std::filesystem;
using namespace ovseg;

namespace {

// Small model settings shared by every run so the suite stays quick.
const std::string kSmall =
    " --set encoder.image_size=32 --set encoder.patch_size=8 --set encoder.depth=2 --set encoder.embed_dim=16"
    " --set encoder.num_heads=2 --set encoder.proj_dim=8 --set infer.window=32 --set infer.stride=16"
    " --set infer.long_side=64";

struct Outcome {
  int code = -1;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("ovseg_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome run(const std::string& args) const {
    const fs::path log = dir_ / "log.txt";
    const std::string cmd = std::string(OVSEG_CLI) + " " + args + " --workdir " + dir_.string() + " > " +
                            log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
  }

  void gen_toy() const {
    const Outcome r = run("gen-toy-data --output toy --set toy.corpus_images=2 --set toy.corpus_size=48"
                      " --set toy.pairs=4 --set toy.pair_size=32 --set toy.scenes=2 --set toy.scene_size=64");
    ASSERT_EQ(r.code, 0) << r.out;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, HelpListsConfigKeys) {
  const Outcome r = run("segment --help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("infer.lambda = 0.3"), std::string::npos);
  EXPECT_NE(r.out.find("distill.k = 7"), std::string::npos);
  EXPECT_NE(r.out.find("paths.vocab_embeddings"), std::string::npos);
}

TEST_F(Cli, UnknownKeyAndMissingPathsExitTwo) {
  EXPECT_EQ(run("gradcheck --set infer.lamda=0.1").code, 2);
  EXPECT_EQ(run("train-upsampler --corpus nowhere").code, 2);
  EXPECT_EQ(run("distill --manifest nowhere.csv").code, 2);
  EXPECT_EQ(run("segment --image nowhere.ppm --vocab nowhere.txt").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(Cli, TrainUpsamplerIsReproducibleAndNamesKeys) {
  gen_toy();
  const std::string args =
      "train-upsampler --corpus toy/corpus --steps 2 --set train.batch=1 --set train.jitter_views=0" + kSmall;
  ASSERT_EQ(run(args + " --output a.ovw").code, 0);
  ASSERT_EQ(run(args + " --output b.ovw").code, 0);
  EXPECT_EQ(slurp(dir_ / "a.ovw"), slurp(dir_ / "b.ovw"));
  EXPECT_EQ(slurp(dir_ / "a_loss.csv"), slurp(dir_ / "b_loss.csv"));
  const ParamSet ps = load_ovw1((dir_ / "a.ovw").string());
  bool jbu = false, crn = false, down = false;
  for (const auto& [name, t] : ps) {
    (void)t;
    jbu |= name.rfind("jbu.", 0) == 0;
    crn |= name.rfind("crn.", 0) == 0;
    down |= name.rfind("down.", 0) == 0;
  }
  EXPECT_TRUE(jbu && crn && down);
}

TEST_F(Cli, GammaZeroStillLogsImageLoss) {
  gen_toy();
  ASSERT_EQ(run("train-upsampler --corpus toy/corpus --steps 1 --gamma 0 --set train.batch=1 --output g.ovw" + kSmall)
                .code,
            0);
  std::istringstream csv(slurp(dir_ / "g_loss.csv"));
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, "step,loss_rec,loss_img,total");
  double rec = 0, img = 0, total = 0;
  ASSERT_EQ(std::sscanf(row.c_str(), "%*d,%lf,%lf,%lf", &rec, &img, &total), 3);
  EXPECT_GT(img, 0.0);
  EXPECT_EQ(total, rec);
}

TEST_F(Cli, DistillLeavesTeacherFileAlone) {
  gen_toy();
  EncoderConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 8;
  cfg.depth = 2;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.proj_dim = 8;
  save_ovw1((dir_ / "teacher.ovw").string(), EncoderWeights::synthesize(cfg, 3).params());
  const std::string before = slurp(dir_ / "teacher.ovw");
  const std::string args = "distill --manifest toy/pairs/manifest.csv --encoder teacher.ovw --steps 2 --k 2" + kSmall;
  ASSERT_EQ(run(args + " --output s1.ovw").code, 0);
  ASSERT_EQ(run(args + " --output s2.ovw").code, 0);
  EXPECT_EQ(slurp(dir_ / "teacher.ovw"), before);
  EXPECT_EQ(slurp(dir_ / "s1.ovw"), slurp(dir_ / "s2.ovw"));
  const ParamSet student = load_ovw1((dir_ / "s1.ovw").string());
  EXPECT_TRUE(student.contains("student.proj"));
  EXPECT_EQ(slurp(dir_ / "s1_loss.csv").rfind("step,contrast,cls,local,total,tau\n", 0), 0u);
}

TEST_F(Cli, DistillNamesMissingRow) {
  gen_toy();
  std::ofstream(dir_ / "bad.csv") << "opt_path,sar_path\ntoy/pairs/missing.ppm,toy/pairs/missing.pgm\n";
  const Outcome r = run("distill --manifest bad.csv --steps 1" + kSmall);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("line 2"), std::string::npos) << r.out;
}

TEST_F(Cli, SegmentIsReproducibleAndSized) {
  gen_toy();
  save_raster((dir_ / "wide.ppm").string(), Raster(96, 48, 3, 90));
  const std::string args = "segment --image toy/scenes/images/scene_00.ppm --vocab toy/scenes/vocab.txt" + kSmall;
  ASSERT_EQ(run(args + " --output m1.pgm --color m1.ppm").code, 0);
  ASSERT_EQ(run(args + " --output m2.pgm").code, 0);
  EXPECT_EQ(slurp(dir_ / "m1.pgm"), slurp(dir_ / "m2.pgm"));
  EXPECT_TRUE(fs::exists(dir_ / "m1.ppm"));
  ASSERT_EQ(run(args + " --output m3.pgm --lambda 0").code, 0);

  ASSERT_EQ(run("segment --image wide.ppm --vocab toy/scenes/vocab.txt --output w.pgm" + kSmall).code, 0);
  const SegmentationMask m = load_mask((dir_ / "w.pgm").string());
  EXPECT_EQ(m.width, 64u);
  EXPECT_EQ(m.height, 32u);
  for (auto l : m.labels) EXPECT_EQ(l, m.labels[0]);
}

TEST_F(Cli, SegmentRejectsMismatchedEmbeddings) {
  gen_toy();
  ParamSet emb;
  emb.add("background", Tensor::vector({1, 0, 0}));
  emb.add("ground", Tensor::vector({0, 1, 0}));
  emb.add("blob", Tensor::vector({0, 0, 1}));
  emb.add("disc", Tensor::vector({1, 0, 0}));
  save_ovw1((dir_ / "emb.ovw").string(), emb);
  EXPECT_EQ(run("segment --image toy/scenes/images/scene_00.ppm --vocab toy/scenes/vocab.txt --embeddings emb.ovw"
                " --output m.pgm" + kSmall)
                .code,
            2);
}

TEST_F(Cli, EvalIdenticalDirsAndErrors) {
  gen_toy();
  Outcome r = run("eval --pred toy/scenes/masks --gt toy/scenes/masks --vocab toy/scenes/vocab.txt --output e.csv");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(slurp(dir_ / "e.csv").find("miou,1"), std::string::npos);
  fs::create_directories(dir_ / "empty_a");
  fs::create_directories(dir_ / "empty_b");
  EXPECT_EQ(run("eval --pred empty_a --gt empty_b").code, 2);
  fs::create_directories(dir_ / "other");
  save_mask((dir_ / "other" / "unrelated.pgm").string(), SegmentationMask(64, 64));
  r = run("eval --pred other --gt toy/scenes/masks");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("unrelated"), std::string::npos);
}

TEST_F(Cli, GenToyDataIsReproducible) {
  ASSERT_EQ(run("gen-toy-data --output t1 --set toy.corpus_images=1 --set toy.pairs=2 --set toy.scenes=1"
                " --set toy.scene_size=64 --set toy.pair_size=32 --set toy.corpus_size=48")
                .code,
            0);
  ASSERT_EQ(run("gen-toy-data --output t2 --set toy.corpus_images=1 --set toy.pairs=2 --set toy.scenes=1"
                " --set toy.scene_size=64 --set toy.pair_size=32 --set toy.corpus_size=48")
                .code,
            0);
  for (const auto& e : fs::recursive_directory_iterator(dir_ / "t1")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), dir_ / "t1");
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "t2" / rel)) << rel;
  }
}
