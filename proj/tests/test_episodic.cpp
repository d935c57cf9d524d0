#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "fixtures.hpp"
#include "mlcn/episodic.hpp"

using namespace mlcn;

namespace {

std::vector<std::size_t> guess(const Episode& ep, Rng& rng) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < ep.query.size(); ++j) out.push_back(rng.below(ep.way));
  return out;
}

}  // namespace

TEST(EpisodeSampler, EpisodeStructure) {
  const auto ds = mlcn::testing::tiny_dataset();
  const EpisodeSampler sampler(ds, Split::kBase, {4, 2, 3});
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto ep = sampler.sample(rng);
    ASSERT_EQ(ep.classes.size(), 4u);
    ASSERT_EQ(std::set<std::size_t>(ep.classes.begin(), ep.classes.end()).size(), 4u);
    ASSERT_EQ(ep.support.size(), 8u);
    ASSERT_EQ(ep.query.size(), 12u);
    std::set<std::size_t> used(ep.support.begin(), ep.support.end());
    used.insert(ep.query.begin(), ep.query.end());
    ASSERT_EQ(used.size(), 20u) << "support and query overlap";
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      ASSERT_EQ(ds.images[ep.support[i]].label, ep.classes[i / 2]);
      ASSERT_EQ(ds.images[ep.support[i]].split, Split::kBase);
    }
    const auto local = ep.query_labels(), global = ep.query_global_labels();
    for (std::size_t j = 0; j < ep.query.size(); ++j) {
      ASSERT_EQ(local[j], j / 3);
      ASSERT_EQ(ds.images[ep.query[j]].label, global[j]);
      ASSERT_EQ(global[j], ep.classes[local[j]]);
    }
  }
}

TEST(EpisodeSampler, SameSeedSameEpisode) {
  const auto ds = mlcn::testing::tiny_dataset();
  Rng a(7), b(7), c(8);
  const auto e1 = sample_episode(ds, Split::kNovel, 3, 1, 2, a);
  const auto e2 = sample_episode(ds, Split::kNovel, 3, 1, 2, b);
  EXPECT_EQ(e1.batch_indices(), e2.batch_indices());
  bool differs = false;
  for (int t = 0; t < 5 && !differs; ++t) differs = sample_episode(ds, Split::kNovel, 3, 1, 2, c).batch_indices() != e1.batch_indices();
  EXPECT_TRUE(differs);
}

TEST(EpisodeSampler, ClassesAreDrawnUniformly) {
  const auto ds = mlcn::testing::tiny_dataset();
  const EpisodeSampler sampler(ds, Split::kBase, {2, 1, 1});
  Rng rng(2);
  std::vector<double> hits(8, 0.0);
  const int trials = 20000;
  for (int t = 0; t < trials; ++t)
    for (auto c : sampler.sample(rng).classes) hits[c] += 1;
  // Each of the 5 base classes appears in 2/5 of the episodes.
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(hits[c] / trials, 0.4, 0.02);
  for (std::size_t c = 5; c < 8; ++c) EXPECT_EQ(hits[c], 0.0);
}

TEST(EpisodeSampler, Errors) {
  const auto ds = mlcn::testing::tiny_dataset();
  EXPECT_THROW(EpisodeSampler(ds, Split::kNovel, {4, 1, 1}), DataError);
  try {
    auto thin = ds;
    std::erase_if(thin.images, [n = 0](const Image& im) mutable { return im.label == 6 && n++ < 3; });
    EpisodeSampler(thin, Split::kNovel, {3, 1, 4});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("class 6"), std::string::npos) << e.what();
  }
  EXPECT_THROW(EpisodeSampler(ds, Split::kBase, {0, 1, 1}), ConfigError);
  EXPECT_THROW(EpisodeSampler(ds, Split::kBase, {2, 1, 0}), ConfigError);
}

TEST(GatherImages, StacksInOrder) {
  const auto ds = mlcn::testing::tiny_dataset();
  const std::vector<std::size_t> idx{5, 0};
  const auto batch = gather_images<double>(ds, idx);
  EXPECT_EQ(batch.shape(), (Shape{2, 8, 8, 3}));
  EXPECT_EQ(batch[0], static_cast<double>(ds.images[5].pixels[0]));
  EXPECT_EQ(batch[192 + 17], static_cast<double>(ds.images[0].pixels[17]));
}

TEST(Summarize, ClosedFormInterval) {
  const std::vector<double> acc{0.2, 0.4, 0.4, 0.6, 1.0};
  const auto s = summarize(acc);
  // mean 0.52, sample variance 0.092
  EXPECT_NEAR(s.mean, 52.0, 1e-9);
  EXPECT_NEAR(s.ci95, 100 * 1.96 * std::sqrt(0.092) / std::sqrt(5.0), 1e-9);
  EXPECT_EQ(s.episodes, 5u);
  EXPECT_EQ(summarize({0.7}).ci95, 0.0);
  EXPECT_EQ(summarize({0.5, 0.5, 0.5}).ci95, 0.0);
  EXPECT_THROW(summarize({}), PreconditionError);
}

TEST(Summarize, IntervalShrinksWithRepetition) {
  Rng rng(3);
  std::vector<double> acc;
  for (int i = 0; i < 50; ++i) acc.push_back(rng.uniform());
  auto four = acc;
  for (int r = 0; r < 3; ++r) four.insert(four.end(), acc.begin(), acc.end());
  const auto a = summarize(acc), b = summarize(four);
  EXPECT_NEAR(a.mean, b.mean, 1e-9);
  // Four copies: squared deviations x4, n 50 -> 200, n-1 49 -> 199.
  EXPECT_NEAR(b.ci95 / a.ci95, std::sqrt(4.0 * 49 * 50 / (199.0 * 200)), 1e-9);
}

TEST(EpisodeSeed, DistinctAndStable) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(episode_seed(42, i));
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_EQ(episode_seed(42, 7), episode_seed(42, 7));
  EXPECT_NE(episode_seed(42, 7), episode_seed(43, 7));
}

TEST(EvaluateWith, OracleAndConstantPredictors) {
  const auto ds = mlcn::testing::tiny_dataset();
  const auto truth = evaluate_with(ds, Split::kNovel, {3, 1, 2}, 30, 5, [](const Episode& ep, Rng&) { return ep.query_labels(); });
  EXPECT_EQ(truth.mean, 100.0);
  EXPECT_EQ(truth.ci95, 0.0);
  const auto zero = evaluate_with(ds, Split::kNovel, {3, 1, 2}, 30, 5,
                                  [](const Episode& ep, Rng&) { return std::vector<std::size_t>(ep.query.size(), 0); });
  EXPECT_NEAR(zero.mean, 100.0 / 3, 1e-9);
  EXPECT_EQ(zero.episodes, 30u);
}

TEST(EvaluateWith, ThreadCountDoesNotChangeResults) {
  const auto ds = mlcn::testing::tiny_dataset();
  const auto one = evaluate_with(ds, Split::kBase, {3, 1, 3}, 64, 9, guess, 1);
  const auto four = evaluate_with(ds, Split::kBase, {3, 1, 3}, 64, 9, guess, 4);
  EXPECT_EQ(one.accuracies, four.accuracies);
  EXPECT_EQ(one.mean, four.mean);
  EXPECT_EQ(one.ci95, four.ci95);
}

TEST(EvaluateWith, PropagatesPredictorFailure) {
  const auto ds = mlcn::testing::tiny_dataset();
  const Predictor bad = [](const Episode&, Rng&) -> std::vector<std::size_t> { throw NumericError("boom"); };
  EXPECT_THROW(evaluate_with(ds, Split::kBase, {3, 1, 3}, 8, 1, bad, 2), NumericError);
  EXPECT_THROW(evaluate_with(ds, Split::kBase, {3, 1, 3}, 0, 1, guess), PreconditionError);
}

TEST(Evaluate, ModelRunAndDisabledInference) {
  const auto ds = mlcn::testing::tiny_dataset();
  auto cfg = mlcn::testing::tiny_config();
  Rng rng(4);
  const auto model = init_model<double>(cfg, ds.classes(Split::kBase), rng);
  const auto s = evaluate(model, ds, Split::kNovel, cfg, 6, cfg.eval.shape, 3);
  EXPECT_EQ(s.episodes, 6u);
  EXPECT_GE(s.mean, 0.0);
  EXPECT_LE(s.mean, 100.0);
  const auto again = evaluate(model, ds, Split::kNovel, cfg, 6, cfg.eval.shape, 3);
  EXPECT_EQ(s.accuracies, again.accuracies);
  cfg.eval.w_sc = cfg.eval.w_cc = cfg.eval.w_pc = 0;
  EXPECT_THROW(evaluate(model, ds, Split::kNovel, cfg, 6, cfg.eval.shape, 3), ConfigError);
}
