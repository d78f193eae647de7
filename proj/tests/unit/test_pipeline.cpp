#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "oracles.hpp"
#include "ovseg/pipeline.hpp"
#include "ovseg/rng.hpp"
#include "ovseg/toydata.hpp"

using namespace ovseg;

namespace {

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

SegmentationModel tiny_model(std::uint64_t seed) {
  SegmentationModel m;
  m.cfg.image_size = 32;
  m.cfg.patch_size = 8;
  m.cfg.depth = 1;
  m.cfg.embed_dim = 8;
  m.cfg.num_heads = 2;
  m.cfg.proj_dim = 6;
  m.encoder = EncoderWeights::synthesize(m.cfg, seed);
  m.jbu = JbuParams::init(seed, 3, 32, 2.0, 1.0);
  m.vocab = ClassVocabulary::synthesize({{"a", {"a"}}, {"b", {"b", "bb"}}, {"c", {"c"}}}, 6, seed);
  return m;
}

SegmentationMask random_mask(std::size_t w, std::size_t h, std::size_t n, Rng& rng, bool ignore = false) {
  SegmentationMask m(w, h);
  for (auto& l : m.labels) {
    l = static_cast<std::uint8_t>(rng.below(n));
    if (ignore && rng.below(5) == 0) l = kIgnoreLabel;
  }
  return m;
}

}  // namespace

TEST(Pnm, DecodesKnownP6) {
  auto bytes = bytes_of("P6\n2 2\n255\n");
  for (std::uint8_t v = 1; v <= 12; ++v) bytes.push_back(v * 10);
  const Raster r = decode_pnm(bytes);
  EXPECT_EQ(r.width, 2u);
  EXPECT_EQ(r.height, 2u);
  EXPECT_EQ(r.channels, 3u);
  ASSERT_EQ(r.samples.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(r.samples[i], (i + 1) * 10);
  EXPECT_EQ(r.at(1, 0, 2), 90);
}

TEST(Pnm, RoundTripIsByteExact) {
  Rng rng(3);
  Raster r(17, 9, 3);
  for (auto& s : r.samples) s = static_cast<std::uint8_t>(rng.below(256));
  const auto bytes = encode_pnm(r);
  EXPECT_EQ(decode_pnm(bytes), r);
  EXPECT_EQ(encode_pnm(decode_pnm(bytes)), bytes);
}

TEST(Pnm, MaskFileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "ovseg_test_pnm";
  std::filesystem::create_directories(dir);
  SegmentationMask m(5, 3);
  for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = static_cast<std::uint8_t>(i % 3);
  const std::string path = (dir / "m.pgm").string();
  save_mask(path, m);
  EXPECT_EQ(load_mask(path), m);
  const auto raw = read_file_bytes(path);
  EXPECT_EQ(std::string(raw.begin(), raw.begin() + 2), "P5");
  Raster rgb(2, 2, 3, 7);
  save_raster((dir / "r.ppm").string(), rgb);
  EXPECT_EQ(load_raster((dir / "r.ppm").string()), rgb);
  EXPECT_THROW(load_mask((dir / "r.ppm").string()), InputError);
  std::filesystem::remove_all(dir);
}

TEST(Pnm, MalformedInputReportsOffset) {
  try {
    decode_pnm(bytes_of("P3\n1 1\n255\n..."));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  try {
    decode_pnm(bytes_of("P5\n2 2\n255\n\x01\x02"));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 13u);
  }
  try {
    decode_pnm(bytes_of("P5\n2 x\n255\n"));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 5u);
  }
  try {
    decode_pnm(bytes_of("P5\n1 1\n65535\n\x00\x00"));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 7u);
  }
}

TEST(Pnm, CommentsInHeader) {
  auto bytes = bytes_of("P5\n# made by hand\n3 1\n255\n");
  bytes.insert(bytes.end(), {4, 5, 6});
  const Raster r = decode_pnm(bytes);
  EXPECT_EQ(r.width, 3u);
  EXPECT_EQ(r.samples, (std::vector<std::uint8_t>{4, 5, 6}));
}

TEST(Resize, LongSideExamples) {
  const Raster wide = resize_long_side(Raster(896, 448, 3, 5), 448);
  EXPECT_EQ(wide.width, 448u);
  EXPECT_EQ(wide.height, 224u);
  const Raster same = resize_long_side(Raster(448, 300, 3, 9), 448);
  EXPECT_EQ(same.width, 448u);
  EXPECT_EQ(same.height, 300u);
  const Raster tall = resize_long_side(Raster(100, 301, 1, 0), 448);
  EXPECT_EQ(tall.height, 448u);
  EXPECT_EQ(tall.width, 149u);
}

TEST(Resize, ConstantStaysConstant) {
  const Raster r = resize_long_side(Raster(37, 23, 3, 131), 448);
  for (auto s : r.samples) EXPECT_EQ(s, 131);
  EXPECT_THROW(resize_long_side(r, 0), ContractError);
}

TEST(Resize, TensorConversionRoundTrip) {
  Rng rng(4);
  Raster r(6, 4, 3);
  for (auto& s : r.samples) s = static_cast<std::uint8_t>(rng.below(256));
  const Tensor t = raster_to_tensor(r);
  EXPECT_EQ(t.shape(), (Shape{3, 4, 6}));
  for (double v : t.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(tensor_to_raster(t), r);
  Raster gray(3, 2, 1, 255);
  const Tensor g = raster_to_tensor(gray);
  EXPECT_EQ(g.dim(0), 3u);
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(Windows, PositionsAlignToEdge) {
  EXPECT_EQ(window_positions(448, 224, 112), (std::vector<std::size_t>{0, 112, 224}));
  EXPECT_EQ(window_positions(224, 224, 112), (std::vector<std::size_t>{0}));
  EXPECT_EQ(window_positions(100, 224, 112), (std::vector<std::size_t>{0}));
  EXPECT_EQ(window_positions(300, 224, 112), (std::vector<std::size_t>{0, 76}));
  EXPECT_EQ(window_positions(500, 224, 112), (std::vector<std::size_t>{0, 112, 224, 276}));
}

TEST(Windows, NineForFourFortyEightAndCenterCoveredFourTimes) {
  const auto pos = window_positions(448, 224, 112);
  EXPECT_EQ(pos.size() * pos.size(), 9u);
  std::size_t cover = 0;
  for (auto y : pos)
    for (auto x : pos)
      if (224 >= y && 224 < y + 224 && 224 >= x && 224 < x + 224) ++cover;
  EXPECT_EQ(cover, 4u);
}

TEST(Slide, ScaledTilingCoverage) {
  const SegmentationModel m = tiny_model(5);
  const Tensor image = raster_to_tensor(make_toy_scene(64, 64, 6).image);
  const SlideResult r = slide_inference(image, m, SlideConfig{32, 16});
  EXPECT_EQ(r.windows, 9u);
  EXPECT_EQ(r.scores.shape(), (Shape{3, 64, 64}));
  EXPECT_EQ(r.coverage[32 * 64 + 32], 4u);
  EXPECT_EQ(r.coverage[0], 1u);
  const std::uint64_t total = std::accumulate(r.coverage.begin(), r.coverage.end(), std::uint64_t{0});
  EXPECT_EQ(total, 9u * 32u * 32u);
}

TEST(Slide, SingleWindowIsBitExact) {
  const SegmentationModel m = tiny_model(7);
  const Tensor image = raster_to_tensor(make_toy_scene(32, 32, 8).image);
  const SlideResult r = slide_inference(image, m, SlideConfig{32, 16});
  EXPECT_EQ(r.windows, 1u);
  const Tensor direct = window_scores(image, m);
  ASSERT_EQ(direct.shape(), r.scores.shape());
  for (std::size_t i = 0; i < direct.numel(); ++i) EXPECT_EQ(direct.at(i), r.scores.at(i));
}

TEST(Slide, SmallImageIsPaddedAndCropped) {
  const SegmentationModel m = tiny_model(9);
  const Tensor image = raster_to_tensor(make_toy_scene(20, 27, 10).image);
  const SlideResult r = slide_inference(image, m, SlideConfig{32, 16});
  EXPECT_EQ(r.scores.shape(), (Shape{3, 27, 20}));
  const SegmentationMask mask = predict_mask(r);
  EXPECT_EQ(mask.width, 20u);
  EXPECT_EQ(mask.height, 27u);
}

TEST(Slide, DeterministicAndValidated) {
  const SegmentationModel m = tiny_model(11);
  const Tensor image = raster_to_tensor(make_toy_scene(48, 40, 12).image);
  EXPECT_EQ(predict_mask(slide_inference(image, m, SlideConfig{32, 16})),
            predict_mask(slide_inference(image, m, SlideConfig{32, 16})));
  EXPECT_THROW(slide_inference(image, m, SlideConfig{64, 32}), ConfigError);
  EXPECT_THROW(SlideConfig({32, 40}).validate(), ConfigError);
  SegmentationModel bad = tiny_model(11);
  bad.vocab = ClassVocabulary::synthesize({{"a", {"a"}}}, 5, 0);
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Confusion, Examples) {
  SegmentationMask pred(2, 1), gt(2, 1);
  pred.labels = {0, 1};
  gt.labels = {0, 0};
  const ConfusionMatrix cm = confusion(pred, gt, 2);
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.total(), 2u);
  const ConfusionMatrix diag = confusion(gt, gt, 2);
  EXPECT_EQ(diag.at(0, 0), 2u);
  EXPECT_EQ(diag.at(0, 1) + diag.at(1, 0) + diag.at(1, 1), 0u);
  SegmentationMask ignored(2, 1, kIgnoreLabel);
  EXPECT_EQ(confusion(pred, ignored, 2).total(), 0u);
  EXPECT_THROW(confusion(pred, SegmentationMask(1, 2), 2), InputError);
  SegmentationMask out_of_range(2, 1, 3);
  EXPECT_THROW(confusion(out_of_range, gt, 2), InputError);
}

TEST(Miou, HandEvaluated) {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 2;
  cm.at(0, 1) = 1;
  cm.at(1, 0) = 1;
  cm.at(1, 1) = 2;
  const IouReport r = miou(cm);
  EXPECT_DOUBLE_EQ(r.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(r.iou[1], 0.5);
  EXPECT_DOUBLE_EQ(r.miou, 0.5);
}

TEST(Miou, PerfectAndAbsentClasses) {
  SegmentationMask gt(3, 1);
  gt.labels = {0, 2, 2};
  const IouReport r = miou(confusion(gt, gt, 3));
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_TRUE(std::isnan(r.iou[1]));
  EXPECT_TRUE(std::isnan(miou(ConfusionMatrix(2)).miou));
}

TEST(Miou, MatchesPixelSetReference) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t w = 1 + rng.below(8), h = 1 + rng.below(8), n = 1 + rng.below(4);
    const auto pred = random_mask(w, h, n, rng), gt = random_mask(w, h, n, rng, true);
    const IouReport r = miou(confusion(pred, gt, n));
    const auto ref = oracle::brute_iou(pred, gt, n);
    double sum = 0.0;
    std::size_t k = 0;
    for (std::size_t c = 0; c < n; ++c) {
      if (std::isnan(ref[c])) {
        EXPECT_TRUE(std::isnan(r.iou[c]));
        continue;
      }
      EXPECT_NEAR(r.iou[c], ref[c], 1e-12);
      sum += ref[c];
      ++k;
    }
    if (k > 0) EXPECT_NEAR(r.miou, sum / static_cast<double>(k), 1e-12);
  }
}

TEST(Miou, PermutationEquivariant) {
  Rng rng(14);
  const std::vector<std::uint8_t> perm = {2, 0, 3, 1};
  auto relabel = [&](SegmentationMask m) {
    for (auto& l : m.labels)
      if (l != kIgnoreLabel) l = perm[l];
    return m;
  };
  const auto pred = random_mask(8, 8, 4, rng), gt = random_mask(8, 8, 4, rng, true);
  const IouReport a = miou(confusion(pred, gt, 4));
  const IouReport b = miou(confusion(relabel(pred), relabel(gt), 4));
  EXPECT_NEAR(a.miou, b.miou, 1e-15);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(a.iou[c], b.iou[perm[c]]);
}

TEST(Miou, CsvLayout) {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 1;
  cm.at(1, 1) = 1;
  const std::string csv = iou_csv(miou(cm), {"background", "building"});
  EXPECT_EQ(csv.rfind("class,iou\nbackground,1", 0), 0u);
  EXPECT_NE(csv.find("\nmiou,1"), std::string::npos);
}

TEST(Confusion, MergeAddsCounts) {
  ConfusionMatrix a(2), b(2);
  a.at(1, 0) = 3;
  b.at(1, 0) = 4;
  a.merge(b);
  EXPECT_EQ(a.at(1, 0), 7u);
  EXPECT_THROW(a.merge(ConfusionMatrix(3)), DimensionError);
}
