#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "ovseg/distill.hpp"
#include "ovseg/image.hpp"
#include "ovseg/toydata.hpp"

using namespace ovseg;

namespace {

EncoderConfig micro() {
  EncoderConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 8;
  cfg.depth = 2;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.proj_dim = 6;
  return cfg;
}

// Symmetric InfoNCE written out with plain loops.
double contrast_reference(const Tensor& a, const Tensor& b, double tau) {
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<double> s(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t k = 0; k < c; ++k) {
        ab += a.at(i, k) * b.at(j, k);
        aa += a.at(i, k) * a.at(i, k);
        bb += b.at(j, k) * b.at(j, k);
      }
      s[i * n + j] = ab / std::sqrt(aa * bb) / tau;
    }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row += std::exp(s[i * n + j]);
      col += std::exp(s[j * n + i]);
    }
    total += (s[i * n + i] - std::log(row)) + (s[i * n + i] - std::log(col));
  }
  return -total / static_cast<double>(n);
}

std::vector<DistillPair> toy_pairs(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<DistillPair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    const Raster opt = make_toy_scene(size, size, seed + i).image;
    const Raster sar = make_toy_sar(opt, seed + 100 + i);
    pairs.push_back({raster_to_tensor(opt), raster_to_tensor(sar), i});
  }
  return pairs;
}

}  // namespace

TEST(Contrast, SingleSampleIsZero) {
  EXPECT_EQ(loss_cls_contrast(oracle::random_tensor({1, 4}, 1), oracle::random_tensor({1, 4}, 2), 0.07).item(), 0.0);
}

TEST(Contrast, HandEvaluatedPair) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const double expected = 2.0 * std::log(1.0 + std::exp(-1.0));
  EXPECT_NEAR(expected, 0.6265, 1e-4);
  EXPECT_NEAR(loss_cls_contrast(eye, eye, 1.0).item(), expected, 1e-14);
}

TEST(Contrast, MatchesLoopReference) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor a = oracle::random_tensor({5, 7}, 10 + seed), b = oracle::random_tensor({5, 7}, 20 + seed);
    const double got = loss_cls_contrast(a, b, 0.07).item();
    EXPECT_NEAR(got, contrast_reference(a, b, 0.07), 1e-10);
    EXPECT_GE(got, 0.0);
  }
}

TEST(Contrast, PermutationAndModalitySymmetry) {
  const Tensor a = oracle::random_tensor({4, 5}, 30), b = oracle::random_tensor({4, 5}, 31);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<Tensor> pa, pb;
  for (auto i : perm) {
    pa.push_back(ops::slice_rows(a, i, i + 1));
    pb.push_back(ops::slice_rows(b, i, i + 1));
  }
  const double base = loss_cls_contrast(a, b, 0.3).item();
  EXPECT_NEAR(loss_cls_contrast(ops::concat_rows(pa), ops::concat_rows(pb), 0.3).item(), base, 1e-13);
  EXPECT_NEAR(loss_cls_contrast(b, a, 0.3).item(), base, 1e-13);
}

TEST(Contrast, LogTauGradientMatchesFiniteDifferences) {
  const Tensor a = oracle::random_tensor({3, 4}, 32), b = oracle::random_tensor({3, 4}, 33);
  Tensor log_tau = Tensor::scalar(std::log(0.2));
  EXPECT_LT(oracle::max_grad_error([&] { return loss_cls_contrast(a, b, log_tau); }, log_tau, 1e-5), 1e-4);
}

TEST(Contrast, ZeroRowIsContractError) {
  Tensor a = oracle::random_tensor({2, 3}, 34);
  for (std::size_t j = 0; j < 3; ++j) a.mutable_data()[j] = 0.0;
  EXPECT_THROW(loss_cls_contrast(a, oracle::random_tensor({2, 3}, 35), 0.07), ContractError);
}

TEST(ClsDistill, CosineCases) {
  EXPECT_NEAR(loss_cls_distill(Tensor::vector({1, 2}), Tensor::vector({2, 4})).item(), 0.0, 1e-15);
  EXPECT_NEAR(loss_cls_distill(Tensor::vector({1, 0}), Tensor::vector({0, 3})).item(), 1.0, 1e-15);
  EXPECT_NEAR(loss_cls_distill(Tensor::vector({1, -1}), Tensor::vector({-2, 2})).item(), 2.0, 1e-15);
  EXPECT_THROW(loss_cls_distill(Tensor::vector({0, 0}), Tensor::vector({1, 0})), ContractError);
}

TEST(RegionPool, SingleRegionIsGlobalMean) {
  const Tensor local = oracle::random_tensor({12, 3}, 40);
  const Tensor pooled = region_mean_pool(local, 3, 4, 1);
  ASSERT_EQ(pooled.shape(), (Shape{1, 3}));
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < 12; ++i) m += local.at(i, j);
    EXPECT_NEAR(pooled.at(0, j), m / 12.0, 1e-15);
  }
}

TEST(RegionPool, OneTokenPerRegionIsIdentity) {
  const Tensor local = oracle::random_tensor({49, 2}, 41);
  const Tensor pooled = region_mean_pool(local, 7, 7, 7);
  for (std::size_t i = 0; i < local.numel(); ++i) EXPECT_EQ(pooled.at(i), local.at(i));
}

TEST(RegionPool, ConstantMapAndRemainderTiles) {
  const Tensor pooled = region_mean_pool(Tensor::full({14 * 10, 3}, 0.25), 14, 10, 7);
  EXPECT_EQ(pooled.shape(), (Shape{49, 3}));
  for (double v : pooled.data()) EXPECT_NEAR(v, 0.25, 1e-15);
  // 10 columns into 7 tiles: sizes 1,1,1,1,1,1,4.
  const auto tiles = region_tiles(14, 10, 7);
  ASSERT_EQ(tiles.size(), 49u);
  std::size_t covered = 0;
  for (const auto& t : tiles) covered += t.size();
  EXPECT_EQ(covered, 140u);
  EXPECT_EQ(tiles[6].size(), 2u * 4u);
  EXPECT_EQ(tiles[0].size(), 2u * 1u);
}

TEST(RegionPool, GridSmallerThanKIsDimensionError) {
  EXPECT_THROW(region_mean_pool(Tensor::zeros({36, 2}), 6, 6, 7), DimensionError);
  EXPECT_THROW(region_tiles(14, 5, 7), DimensionError);
}

TEST(LocalDistill, IdenticalAndNegated) {
  const Tensor opt = oracle::random_tensor({196, 4}, 42);
  EXPECT_NEAR(loss_local_distill(opt, opt, 14, 14, 7).item(), 0.0, 1e-14);
  EXPECT_NEAR(loss_local_distill(opt, ops::neg(opt), 14, 14, 7).item(), 2.0, 1e-14);
}

TEST(LocalDistill, ScaleInvariant) {
  const Tensor a = oracle::random_tensor({196, 4}, 43), b = oracle::random_tensor({196, 4}, 44);
  EXPECT_NEAR(loss_local_distill(a, b, 14, 14, 7).item(), loss_local_distill(ops::scale(a, 3.5), b, 14, 14, 7).item(),
              1e-13);
}

TEST(LocalDistill, RegionAveragingDampensOneCellShift) {
  const std::size_t n = 14, c = 8;
  const Tensor opt = oracle::random_tensor({n * n, c}, 45);
  Tensor shifted = Tensor::zeros({n * n, c});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t k = 0; k < c; ++k)
        shifted.mutable_data()[(y * n + x) * c + k] = opt.at(y * n + std::min(x + 1, n - 1), k);
  const double token_wise = loss_local_distill(opt, shifted, n, n, n).item();
  const double regional = loss_local_distill(opt, shifted, n, n, 7).item();
  EXPECT_LT(regional, token_wise);
  EXPECT_LT(loss_local_distill(opt, shifted, n, n, 2).item(), regional);
}

TEST(Distill, IdenticalPairsGiveZeroDistillTermsAtStart) {
  const EncoderConfig cfg = micro();
  const auto teacher = EncoderWeights::synthesize(cfg, 50);
  auto pairs = toy_pairs(3, 32, 51);
  for (auto& p : pairs) p.sar = p.optical.clone();
  std::vector<TeacherFeatures> tf;
  for (const auto& p : pairs) tf.push_back(teacher_features(p.optical, teacher, cfg));
  DistillConfig dc;
  dc.k = 2;
  const DistillLoss l = distill_loss(pairs, tf, {0, 1, 2}, teacher.clone(), cfg, Tensor::scalar(std::log(0.07)), dc);
  EXPECT_NEAR(l.cls.item(), 0.0, 1e-12);
  EXPECT_NEAR(l.local.item(), 0.0, 1e-12);
}

TEST(Distill, GradientOfSampledStudentTensorMatchesFiniteDifferences) {
  const EncoderConfig cfg = micro();
  const auto teacher = EncoderWeights::synthesize(cfg, 52);
  const auto pairs = toy_pairs(2, 32, 53);
  std::vector<TeacherFeatures> tf;
  for (const auto& p : pairs) tf.push_back(teacher_features(p.optical, teacher, cfg));
  EncoderWeights student = teacher.clone();
  Tensor log_tau = Tensor::scalar(std::log(0.07));
  DistillConfig dc;
  dc.k = 2;
  auto loss = [&] { return distill_loss(pairs, tf, {0, 1}, student, cfg, log_tau, dc).total; };
  EXPECT_LT(oracle::max_grad_error(loss, student.blocks[1].ln2_g, 1e-5), 1e-4);
  EXPECT_LT(oracle::max_grad_error(loss, student.proj, 1e-5), 1e-4);
  EXPECT_LT(oracle::max_grad_error(loss, log_tau, 1e-5), 1e-4);
}

TEST(Distill, TeacherUntouchedCurveAndTauClamp) {
  const EncoderConfig cfg = micro();
  const auto teacher = EncoderWeights::synthesize(cfg, 54);
  const auto before = encode_ovw1(teacher.params());
  DistillConfig dc;
  dc.k = 2;
  dc.steps = 3;
  dc.batch = 2;
  dc.lr = 1e-2;
  const auto result = distill(toy_pairs(4, 32, 55), teacher, cfg, dc);
  EXPECT_EQ(encode_ovw1(teacher.params()), before);
  ASSERT_EQ(result.curve.size(), 3u);
  for (const auto& r : result.curve) {
    EXPECT_GE(r.tau, dc.tau_min);
    EXPECT_LE(r.tau, dc.tau_max);
    EXPECT_NEAR(r.total, r.contrast + r.cls + r.local, 1e-12);
  }
  EXPECT_NE(encode_ovw1(result.student.params()), before);
}

TEST(Distill, StudentTrainableSkipsKeyBias) {
  const auto w = EncoderWeights::synthesize(micro(), 56);
  const ParamSet ps = student_trainable(w, "student.");
  for (const auto& [name, t] : ps) {
    (void)t;
    EXPECT_EQ(name.rfind("student.", 0), 0u);
    EXPECT_EQ(name.find("attn.bk"), std::string::npos) << name;
  }
  EXPECT_TRUE(ps.contains("student.proj"));
}

TEST(Distill, RejectsBadInputs) {
  const EncoderConfig cfg = micro();
  const auto teacher = EncoderWeights::synthesize(cfg, 57);
  DistillConfig dc;
  dc.k = 2;
  EXPECT_THROW(distill({}, teacher, cfg, dc), InputError);
  auto dup = toy_pairs(2, 32, 58);
  dup[1].id = dup[0].id;
  EXPECT_THROW(distill(dup, teacher, cfg, dc), InputError);
  dc.tau_init = 5.0;
  EXPECT_THROW(distill(toy_pairs(2, 32, 59), teacher, cfg, dc), ConfigError);
}

TEST(DistillConfig, Defaults) {
  const DistillConfig dc;
  EXPECT_EQ(dc.tau_init, 0.07);
  EXPECT_EQ(dc.k, 7u);
  EXPECT_EQ(dc.w_contrast, 1.0);
  EXPECT_EQ(dc.w_cls, 1.0);
  EXPECT_EQ(dc.w_local, 1.0);
}

TEST(Manifest, ParsesWithAndWithoutHeader) {
  const auto rows = parse_manifest("opt_path,sar_path\na/1.ppm,b/1.pgm\n\na/2.ppm , b/2.pgm\n");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].opt_path, "a/1.ppm");
  EXPECT_EQ(rows[1].sar_path, "b/2.pgm");
  EXPECT_EQ(parse_manifest("x.ppm,y.pgm").size(), 1u);
  EXPECT_THROW(parse_manifest("only_one_column\n"), InputError);
  EXPECT_THROW(parse_manifest("opt_path,sar_path\n"), InputError);
  EXPECT_THROW(parse_manifest("a.ppm,\n"), InputError);
}

TEST(DistillCsv, Header) {
  EXPECT_EQ(distill_curve_csv({}).rfind("step,contrast,cls,local,total,tau\n", 0), 0u);
}
