#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fixtures.hpp"
#include "mlcn/ablation.hpp"
#include "mlcn/grad_check.hpp"
#include "test_util.hpp"

using namespace mlcn;
using mlcn::testing::randn;

namespace {

double ce_oracle(const std::vector<double>& logits, std::size_t label) {
  long double z = 0;
  for (double l : logits) z += std::exp(static_cast<long double>(l));
  return static_cast<double>(std::log(z) - logits[label]);
}

std::vector<Tensord> constant_rows(std::size_t n, std::initializer_list<double> v) {
  return std::vector<Tensord>(n, Tensord::vector(v));
}

}  // namespace

TEST(LossCe, UniformLogitsGiveLogClassCount) {
  Rng rng(1);
  for (std::size_t classes : {2u, 5u, 8u, 64u}) {
    ClassifierHead<double> head{Tensord::zeros({classes, 6}), Tensord::zeros({classes})};
    const std::vector<std::size_t> labels{0, classes - 1, classes / 2};
    const double l = loss_ce(randn({3, 2, 2, 6}, rng), labels, head).item();
    EXPECT_NEAR(l, std::log(static_cast<double>(classes)), 1e-9);
  }
}

TEST(LossCe, MatchesScalarOracle) {
  Rng rng(2);
  auto head = init_head<double>(4, 3, rng);
  const auto f = randn({2, 2, 2, 3}, rng);
  const std::vector<std::size_t> labels{3, 1};
  double expected = 0;
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> pooled(3, 0.0), logits(4);
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 3; ++c) pooled[c] += f[(b * 4 + x) * 3 + c] / 4;
    for (std::size_t k = 0; k < 4; ++k) {
      logits[k] = head.bias[k];
      for (std::size_t c = 0; c < 3; ++c) logits[k] += head.weight[k * 3 + c] * pooled[c];
    }
    expected += ce_oracle(logits, labels[b]) / 2;
  }
  EXPECT_NEAR(loss_ce(f, labels, head).item(), expected, 1e-12);
  // A single map is a batch of one.
  EXPECT_NEAR(loss_ce(select(f, 1), std::vector<std::size_t>{1}, head).item(), loss_ce(slice(f, 1, 2), std::vector<std::size_t>{1}, head).item(), 1e-15);
  EXPECT_THROW(loss_ce(f, std::vector<std::size_t>{4, 0}, head), DataError);
}

TEST(LossCe, GradCheck) {
  Rng rng(3);
  const std::vector<std::size_t> labels{2, 0, 1};
  const auto r = grad_check<double>(
      [&](const auto& x) { return loss_ce(x[0], labels, ClassifierHead<double>{x[1], x[2]}); },
      {randn({3, 2, 2, 4}, rng), randn({3, 4}, rng), randn({3}, rng)});
  EXPECT_TRUE(r.pass) << r.worst_rel();
}

TEST(ContrastiveLosses, AllEqualSimilarityGivesLogN) {
  for (std::size_t n : {2u, 5u, 10u}) {
    const auto p = constant_rows(n, {1.0, 2.0, 0.5});
    const auto v = constant_rows(n, {-0.3, 1.0, 2.0});
    const double ln = std::log(static_cast<double>(n));
    for (std::size_t t = 0; t < n; ++t) {
      EXPECT_NEAR(loss_sc(p, v, t, 0.5).item(), ln, 1e-9);
      EXPECT_NEAR(loss_cc(p, v, t, 0.5).item(), ln, 1e-9);
      EXPECT_NEAR(loss_pc(p, v, t, 0.5).item(), ln, 1e-9);
      EXPECT_NEAR(loss_sc(p, v, t, 0.5, ContrastiveDenominator::kFixedQuery).item(), ln, 1e-9);
    }
  }
}

TEST(TotalLoss, WeightedSumOfPresentTerms) {
  const auto ce = Tensord::scalar(1.5), sc = Tensord::scalar(0.7), cc = Tensord::scalar(2.0), pc = Tensord::scalar(4.0);
  const auto all = total_loss<double>(ce, sc, cc, pc, 1.0, 0.5, 0.25);
  EXPECT_NEAR(all.l_total.item(), 1.5 + 0.7 + 1.0 + 1.0, 1e-15);
  const auto only_ce = total_loss<double>(ce, std::nullopt, std::nullopt, std::nullopt, 1.0, 0.5, 0.25);
  EXPECT_EQ(only_ce.l_total.item(), 1.5);
  EXPECT_EQ(only_ce.l_sc.item(), 0.0);
  EXPECT_EQ(only_ce.l_pc.item(), 0.0);
  const auto zero_w = total_loss<double>(ce, sc, cc, pc, 0.0, 0.0, 0.0);
  EXPECT_EQ(zero_w.l_total.item(), 1.5);
  EXPECT_THROW(total_loss<double>(ce, sc, cc, pc, -0.1, 0.5, 0.25), ConfigError);
}

TEST(TotalLoss, GradientsAreWeighted) {
  const auto a = Tensord({1}, {2.0}, true);
  const auto b = Tensord({1}, {3.0}, true);
  const auto bundle = total_loss<double>(sum(mul(a, a)), sum(mul(b, b)), std::nullopt, std::nullopt, 0.3, 1, 1);
  const auto g = backward(bundle.l_total);
  EXPECT_NEAR(g.of(a)[0], 4.0, 1e-15);
  EXPECT_NEAR(g.of(b)[0], 0.3 * 6.0, 1e-15);
}

TEST(AblationFlags, ParseRows) {
  const auto full = parse_ablation_flags("ce+sc+cc+pc");
  EXPECT_TRUE(full.sc && full.cc && full.pc);
  const auto ce = parse_ablation_flags("ce");
  EXPECT_FALSE(ce.any());
  const auto scpc = parse_ablation_flags("ce+sc+pc");
  EXPECT_TRUE(scpc.sc && !scpc.cc && scpc.pc);
  EXPECT_THROW(parse_ablation_flags("sc+cc"), ConfigError);
  EXPECT_THROW(parse_ablation_flags("ce+xx"), ConfigError);
}

TEST(AblationFlags, DisabledBranchesAreNeverComputed) {
  const auto ds = mlcn::testing::tiny_dataset();
  for (const std::string row : {"ce", "ce+sc", "ce+sc+cc", "ce+sc+pc", "ce+sc+cc+pc"}) {
    auto cfg = mlcn::testing::tiny_config();
    const auto flags = parse_ablation_flags(row);
    cfg.loss.use_sc = flags.sc;
    cfg.loss.use_cc = flags.cc;
    cfg.loss.use_pc = flags.pc;
    branch_counters().reset();
    const auto result = train<double>(cfg, ds);
    const std::size_t steps = cfg.optim.episodes_per_epoch;
    EXPECT_EQ(branch_counters().sc, flags.sc ? steps : 0u) << row;
    EXPECT_EQ(branch_counters().cc, flags.cc ? steps : 0u) << row;
    EXPECT_EQ(branch_counters().pc, flags.pc ? steps : 0u) << row;
    for (const auto& r : result.log) {
      if (!flags.sc) {
        EXPECT_EQ(r.l_sc, 0.0);
      }
      if (!flags.cc) {
        EXPECT_EQ(r.l_cc, 0.0);
      }
      if (!flags.pc) {
        EXPECT_EQ(r.l_pc, 0.0);
      }
      const double expect = r.l_ce + cfg.loss.alpha * r.l_sc + cfg.loss.beta * r.l_cc + cfg.loss.gamma * r.l_pc;
      EXPECT_NEAR(r.l_total, expect, 1e-12);
    }
  }
}

TEST(ClassifyQuery, WeightedCosineVote) {
  const std::vector<Tensord> p1{Tensord::vector({1, 0}), Tensord::vector({0, 1})};
  const std::vector<Tensord> v1{Tensord::vector({1, 0.1}), Tensord::vector({1, 0.1})};
  const std::vector<Tensord> p2{Tensord::vector({1, 0}), Tensord::vector({0, 1})};
  const std::vector<Tensord> v2{Tensord::vector({0, 1}), Tensord::vector({0, 1})};
  // Branch one alone favors class 0, branch two alone class 1.
  std::vector<BranchVote<double>> votes{{p1, v1, 1.0}, {p2, v2, 0.0}};
  EXPECT_EQ(classify_query<double>(votes), 0u);
  votes = {{p1, v1, 0.0}, {p2, v2, 1.0}};
  EXPECT_EQ(classify_query<double>(votes), 1u);
  votes = {{p1, v1, 1.0}, {p2, v2, 2.0}};
  EXPECT_EQ(classify_query<double>(votes), 1u);
  votes = {{p1, v1, 0.0}, {p2, v2, -1.0}};
  EXPECT_THROW(classify_query<double>(votes), ConfigError);
}

TEST(ClassifyQuery, ZeroNormScoresZero) {
  const std::vector<Tensord> p{Tensord::vector({0, 0}), Tensord::vector({-1, 0})};
  const std::vector<Tensord> v{Tensord::vector({1, 0}), Tensord::vector({1, 0})};
  std::vector<BranchVote<double>> votes{{p, v, 1.0}};
  EXPECT_EQ(classify_query<double>(votes), 0u);
}

TEST(InferenceWeights, DefaultToLossWeights) {
  Config cfg;
  auto w = inference_weights(cfg);
  EXPECT_EQ(w.sc, cfg.loss.alpha);
  EXPECT_EQ(w.cc, cfg.loss.beta);
  EXPECT_EQ(w.pc, cfg.loss.gamma);
  cfg.eval.w_cc = 0;
  cfg.eval.w_pc = 3;
  w = inference_weights(cfg);
  EXPECT_FALSE(w.branches().cc);
  EXPECT_EQ(w.pc, 3.0);
}

TEST(ForwardEpisode, DuplicatedSupportIsRecognizedByEveryBranch) {
  const auto ds = mlcn::testing::tiny_dataset();
  const auto cfg = mlcn::testing::tiny_config();
  Rng rng(5);
  const auto model = init_model<double>(cfg, ds.classes(Split::kBase), rng);
  const std::vector<std::size_t> support{0, 6, 12};
  for (std::size_t target = 0; target < 3; ++target) {
    std::vector<std::size_t> idx = support;
    idx.push_back(support[target]);
    const EpisodeLayout layout{3, 1, {target}};
    for (auto [w, b] : {std::pair{InferenceWeights{1, 0, 0}, Branches{true, false, false}},
                        std::pair{InferenceWeights{0, 1, 0}, Branches{false, true, false}},
                        std::pair{InferenceWeights{0, 0, 1}, Branches{false, false, true}}}) {
      const auto fw = forward_episode(model, gather_images<double>(ds, idx), layout, b, branch_options(cfg),
                                      NormMode::kRunning, rng);
      EXPECT_EQ(predict_queries(fw, 1, w)[0], target);
    }
  }
}

TEST(ForwardEpisode, LayoutMismatchIsShapeError) {
  const auto ds = mlcn::testing::tiny_dataset();
  const auto cfg = mlcn::testing::tiny_config();
  Rng rng(6);
  const auto model = init_model<double>(cfg, ds.classes(Split::kBase), rng);
  const EpisodeLayout layout{3, 1, {0, 1}};
  EXPECT_THROW(forward_episode(model, gather_images<double>(ds, std::vector<std::size_t>{0, 6, 12, 1}), layout, Branches{true, true, true},
                               branch_options(cfg), NormMode::kRunning, rng),
               ShapeError);
}
