#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "ovseg/head.hpp"
#include "ovseg/pipeline.hpp"
#include "ovseg/toydata.hpp"

using namespace ovseg;

namespace {

ClassVocabulary two_axis_vocab() {
  // Embeddings e0 = x-axis, e1 = y-axis in 3-D.
  return ClassVocabulary({{"a", {"a"}}, {"b", {"b"}}}, Tensor({2, 3}, {1, 0, 0, 0, 1, 0}));
}

}  // namespace

TEST(GlobalBias, WorkedExample) {
  const Tensor out = alleviate_global_bias(Tensor({1, 2}, {1.0, 2.0}), Tensor::vector({1.0, 0.0}), 0.3);
  EXPECT_NEAR(out.at(0, 0), 0.7, 1e-15);
  EXPECT_EQ(out.at(0, 1), 2.0);
}

TEST(GlobalBias, LambdaZeroIsIdentityAndOneCancelsCls) {
  const Tensor cls = oracle::random_tensor({1, 5}, 1);
  const Tensor patches = ops::concat_rows({cls, cls, cls});
  const Tensor same = alleviate_global_bias(patches, cls, 0.0);
  for (std::size_t i = 0; i < patches.numel(); ++i) EXPECT_EQ(same.at(i), patches.at(i));
  const Tensor zero = alleviate_global_bias(patches, cls, 1.0);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(GlobalBias, TokenSequenceOverloadDropsCls) {
  TokenSequence seq{oracle::random_tensor({5, 4}, 2), 2, 2};
  const Tensor out = alleviate_global_bias(seq, BiasConfig{0.3});
  ASSERT_EQ(out.shape(), (Shape{4, 4}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_EQ(out.at(i, j), seq.tokens.at(i + 1, j) - 0.3 * seq.tokens.at(0, j));
  TokenSequence lonely{oracle::random_tensor({1, 4}, 3), 0, 0};
  EXPECT_THROW(alleviate_global_bias(lonely, BiasConfig{}), DimensionError);
}

TEST(BiasConfig, RangeChecked) {
  EXPECT_EQ(BiasConfig{}.lambda, 0.3);
  EXPECT_THROW(BiasConfig{1.5}.validate(), ConfigError);
  EXPECT_THROW(BiasConfig{-0.1}.validate(), ConfigError);
  EXPECT_THROW(BiasConfig{std::nan("")}.validate(), ConfigError);
  EXPECT_NO_THROW(BiasConfig{1.0}.validate());
}

TEST(GlobalBias, ReducesMeanCosineToCls) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PlantedToy toy = make_planted_toy(8, 8, 16, 0.5, 1.0, seed);
    const Tensor patches = toy.tokens.patches(), cls = toy.tokens.cls();
    EXPECT_LT(mean_cosine_to_cls(alleviate_global_bias(patches, cls, 0.3), cls), mean_cosine_to_cls(patches, cls));
  }
}

TEST(Similarity, ParallelOrthogonalAntiParallel) {
  const Tensor patches({3, 3}, {2.5, 0, 0, 0, 0, 7, -0.1, 0, 0});
  const Tensor s = similarity_logits(patches, two_axis_vocab());
  EXPECT_NEAR(s.at(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(s.at(1, 0), 0.0, 1e-15);
  EXPECT_NEAR(s.at(1, 1), 0.0, 1e-15);
  EXPECT_NEAR(s.at(2, 0), -1.0, 1e-15);
}

TEST(Similarity, ValuesBoundedAndZeroRowReported) {
  const ClassVocabulary v = ClassVocabulary::synthesize({{"x", {"x", "y"}}, {"z", {"z"}}}, 6, 4);
  const Tensor s = similarity_logits(oracle::random_tensor({20, 6}, 5, 3.0), v);
  for (double x : s.data()) {
    EXPECT_LE(x, 1.0);
    EXPECT_GE(x, -1.0);
  }
  Tensor bad = oracle::random_tensor({4, 6}, 6);
  for (std::size_t j = 0; j < 6; ++j) bad.mutable_data()[2 * 6 + j] = 0.0;
  try {
    similarity_logits(bad, v);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find('2'), std::string::npos);
  }
  EXPECT_THROW(similarity_logits(oracle::random_tensor({4, 5}, 7), v), DimensionError);
}

TEST(GroupReduce, MaxOverSynonyms) {
  ClassVocabulary v({{"building", {"building", "roof", "house"}}, {"tree", {"tree"}}},
                    ops::normalize_rows(oracle::random_tensor({4, 3}, 8)));
  const Tensor logits({1, 4}, {0.6, 0.7, 0.1, 0.25});
  const Tensor g = group_reduce(logits, v);
  ASSERT_EQ(g.shape(), (Shape{1, 2}));
  EXPECT_EQ(g.at(0, 0), 0.7);
  EXPECT_EQ(g.at(0, 1), 0.25);
  const Tensor swapped({1, 4}, {0.1, 0.6, 0.7, 0.25});
  EXPECT_EQ(group_reduce(swapped, v).at(0, 0), 0.7);
}

TEST(Argmax, PicksMaxAndBreaksTiesLow) {
  const SegmentationMask m = segment_argmax(Tensor({3, 2}, {0.2, 0.9, 0.5, 0.5, -1, -2}), 1, 3);
  EXPECT_EQ(m.width, 3u);
  EXPECT_EQ(m.height, 1u);
  EXPECT_EQ(m.labels, (std::vector<std::uint8_t>{1, 0, 0}));
  const SegmentationMask flat = segment_argmax(Tensor::full({6, 4}, 0.3), 2, 3);
  for (auto l : flat.labels) EXPECT_EQ(l, 0);
}

TEST(Argmax, PositiveEmbeddingScaleInvariance) {
  const PlantedToy toy = make_planted_toy(6, 6, 8, 0.5, 1.0, 9);
  const Tensor deb = alleviate_global_bias(toy.tokens, BiasConfig{});
  const auto base = segment_argmax(group_reduce(similarity_logits(deb, toy.vocab), toy.vocab), 6, 6);
  // Cosine ignores positive scaling of the patches.
  const auto scaled =
      segment_argmax(group_reduce(similarity_logits(ops::scale(deb, 4.25), toy.vocab), toy.vocab), 6, 6);
  EXPECT_EQ(base, scaled);
}

TEST(Vocabulary, ParseGroups) {
  const auto g = ClassVocabulary::parse_groups("# comment\n\nbuilding = building | roof |house\n  water\ntree=tree\n");
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0].name, "building");
  EXPECT_EQ(g[0].synonyms, (std::vector<std::string>{"building", "roof", "house"}));
  EXPECT_EQ(g[1].name, "water");
  EXPECT_EQ(g[1].synonyms, (std::vector<std::string>{"water"}));
  EXPECT_EQ(g[2].synonyms.size(), 1u);
}

TEST(Vocabulary, RejectsDuplicatesAndEmpty) {
  EXPECT_THROW(ClassVocabulary::parse_groups("a = x\na = y\n"), ParseError);
  EXPECT_THROW(ClassVocabulary::parse_groups("# nothing\n"), ParseError);
  EXPECT_THROW(ClassVocabulary::parse_groups("a = x | | y\n"), ParseError);
}

TEST(Vocabulary, EmbeddingsMustBeUnitNorm) {
  EXPECT_THROW(ClassVocabulary({{"a", {"a"}}}, Tensor({1, 2}, {1.0, 1.0})), ContractError);
  EXPECT_THROW(ClassVocabulary({{"a", {"a", "b"}}}, Tensor({1, 2}, {1.0, 0.0})), DimensionError);
}

TEST(Vocabulary, SynthesizedRowsAreUnitAndKeyedByText) {
  const auto v = ClassVocabulary::synthesize({{"g", {"roof", "house"}}, {"h", {"roof"}}}, 7, 10);
  for (std::size_t r = 0; r < 3; ++r) {
    double n = 0.0;
    for (std::size_t j = 0; j < 7; ++j) n += v.embeddings().at(r, j) * v.embeddings().at(r, j);
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
  for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(v.embeddings().at(0, j), v.embeddings().at(2, j));
  EXPECT_EQ(v.group_of(0), 0u);
  EXPECT_EQ(v.group_of(1), 0u);
  EXPECT_EQ(v.group_of(2), 1u);
}

TEST(Vocabulary, FromOvw1LooksUpSynonyms) {
  ParamSet ps;
  ps.add("roof", Tensor::vector({0.0, 2.0}));
  ps.add("tree", Tensor::vector({1.0, 0.0}));
  const auto v = ClassVocabulary::from_ovw1({{"tree", {"tree"}}, {"building", {"roof"}}}, ps);
  EXPECT_EQ(v.embeddings().at(0, 0), 1.0);
  EXPECT_EQ(v.embeddings().at(1, 1), 1.0);
  EXPECT_THROW(ClassVocabulary::from_ovw1({{"water", {"water"}}}, ps), InputError);
}

TEST(PlantedToy, BiasAlleviationDoesNotHurtMiou) {
  const PlantedToy toy = make_planted_toy(8, 8, 16, 0.5, 1.0, 0);
  auto score = [&](double lambda) {
    const Tensor deb = alleviate_global_bias(toy.tokens, BiasConfig{lambda});
    const auto mask = segment_argmax(group_reduce(similarity_logits(deb, toy.vocab), toy.vocab), 8, 8);
    return miou(confusion(mask, toy.gt, 2)).miou;
  };
  EXPECT_GE(score(0.3), score(0.0));
}
