#include <gtest/gtest.h>

#include "ovseg/config.hpp"
#include "ovseg/errors.hpp"

using namespace ovseg;

TEST(Config, InferenceAndTrainingDefaults) {
  const RunConfig rc;
  EXPECT_EQ(bias_config(rc).lambda, 0.3);
  EXPECT_EQ(upsampler_train_config(rc).gamma, 0.1);
  EXPECT_EQ(distill_config(rc).tau_init, 0.07);
  EXPECT_EQ(distill_config(rc).k, 7u);
  EXPECT_EQ(slide_config(rc).window, 224u);
  EXPECT_EQ(slide_config(rc).stride, 112u);
  EXPECT_EQ(rc.get_size("infer.long_side"), 448u);
  EXPECT_EQ(upsampler_train_config(rc).batch, 8u);
}

TEST(Config, DefaultsAppearVerbatimInHelp) {
  const std::string help = config_help();
  EXPECT_NE(help.find("infer.lambda = 0.3\n"), std::string::npos);
  EXPECT_NE(help.find("train.gamma = 0.1\n"), std::string::npos);
  EXPECT_NE(help.find("distill.tau_init = 0.07\n"), std::string::npos);
  EXPECT_NE(help.find("distill.k = 7\n"), std::string::npos);
}

TEST(Config, HelpListsEveryKey) {
  const std::string help = config_help();
  for (const auto& k : config_schema()) EXPECT_NE(help.find("  " + k.name + " = "), std::string::npos) << k.name;
}

TEST(Config, ParseOverridesAndComments) {
  const RunConfig rc = RunConfig::parse("# top\nseed = 42  # trailing\n\ninfer.lambda=0\npaths.image = a b.ppm\n");
  EXPECT_EQ(run_seed(rc), 42u);
  EXPECT_EQ(bias_config(rc).lambda, 0.0);
  EXPECT_EQ(rc.get("paths.image"), "a b.ppm");
  EXPECT_FALSE(rc.is_default("seed"));
  EXPECT_TRUE(rc.is_default("distill.k"));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(RunConfig::parse("infer.lamda = 0.3\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("seed = abc\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("train.lr = 1e-3x\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("encoder.surgery = maybe\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("just words\n"), ConfigError);
  RunConfig rc;
  EXPECT_THROW(rc.set("nope", "1"), ConfigError);
  rc.set("distill.k", "-1");
  EXPECT_THROW(rc.get_size("distill.k"), ConfigError);
}

TEST(Config, DerivedConfigsValidate) {
  RunConfig rc;
  rc.set("infer.lambda", "1.5");
  EXPECT_THROW(bias_config(rc), ConfigError);
  RunConfig enc;
  enc.set("encoder.image_size", "100");
  EXPECT_THROW(encoder_config(enc), ConfigError);
  RunConfig slide;
  slide.set("infer.stride", "300");
  EXPECT_THROW(slide_config(slide), ConfigError);
}

TEST(Config, DumpRoundTrips) {
  RunConfig rc;
  rc.set("seed", "9");
  rc.set("paths.output", "x.ovw");
  const RunConfig back = RunConfig::parse(rc.dump());
  EXPECT_EQ(back.values(), rc.values());
}
