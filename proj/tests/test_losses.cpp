#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "galn/losses.hpp"
#include "oracle/brute_force.hpp"
#include "test_util.hpp"

using namespace galn;
using galn::testing::columns;
using galn::testing::random_batch;
using galn::testing::random_leaf;
using galn::testing::rel_err;

namespace {

oracle::Item to_oracle(const PairedItem& it) {
  return {columns(it.local.features), columns(it.text.sentences), it.global.feature.column_values(0),
          it.text.report.column_values(0)};
}

std::vector<oracle::Item> to_oracle(const PairedBatch& b) {
  std::vector<oracle::Item> out;
  for (const auto& it : b.items) out.push_back(to_oracle(it));
  return out;
}

FeatureGrid grid_of(const Node& f) { return FeatureGrid{f, 1, f.cols(), 1}; }

LossConfig cfg_default() { return LossConfig{}; }

std::vector<double> components(const LossBreakdown& l) {
  return {l.g_v_given_t.item(), l.g_t_given_v.item(), l.l_v_given_t.item(), l.l_t_given_v.item(), l.total.item()};
}

}  // namespace

TEST(GlobalLoss, SingleItemIsZero) {
  const PairedBatch b = random_batch(1, 1, 4, 3, 2);
  const auto [a, c] = global_loss(b, cfg_default());
  EXPECT_EQ(a.item(), 0.0);
  EXPECT_EQ(c.item(), 0.0);
}

TEST(GlobalLoss, HugeTemperatureGivesLogB) {
  const PairedBatch b = random_batch(2, 4, 5, 3, 2);
  LossConfig cfg;
  cfg.tau1 = 1e6;
  const auto [a, c] = global_loss(b, cfg);
  EXPECT_NEAR(a.item(), std::log(4.0), 1e-6);
  EXPECT_NEAR(c.item(), std::log(4.0), 1e-6);
}

TEST(GlobalLoss, MatchesOracle) {
  const PairedBatch b = random_batch(0, 3, 4, 4, 2);
  const auto [a, c] = global_loss(b, cfg_default());
  const auto [oa, oc] = oracle::global_losses(to_oracle(b), 0.1);
  EXPECT_LT(rel_err(a.item(), oa), 1e-10);
  EXPECT_LT(rel_err(c.item(), oc), 1e-10);
}

TEST(GlobalLoss, ZeroNormNamesBatchIndex) {
  PairedBatch b = random_batch(3, 3, 4, 2, 1);
  b.items[2].global.feature = Node::leaf({4, 1}, {0, 0, 0, 0});
  try {
    global_loss(b, cfg_default());
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("batch index 2"), std::string::npos) << e.what();
  }
}

TEST(GlobalLoss, ScaleInvariance) {
  PairedBatch b = random_batch(4, 3, 4, 2, 2);
  const auto [a0, c0] = global_loss(b, cfg_default());
  b.items[1].global.feature = scale(b.items[1].global.feature, 7.5);
  b.items[0].text.report = scale(b.items[0].text.report, 0.01);
  const auto [a1, c1] = global_loss(b, cfg_default());
  EXPECT_NEAR(a0.item(), a1.item(), 1e-12);
  EXPECT_NEAR(c0.item(), c1.item(), 1e-12);
}

TEST(GlobalLoss, ModalitySwap) {
  PairedBatch b = random_batch(5, 4, 4, 2, 2);
  const auto [a0, c0] = global_loss(b, cfg_default());
  for (auto& it : b.items) std::swap(it.global.feature, it.text.report);
  const auto [a1, c1] = global_loss(b, cfg_default());
  EXPECT_EQ(a0.item(), c1.item());
  EXPECT_EQ(c0.item(), a1.item());
}

TEST(LocalSimilarity, HandComputed) {
  const FeatureGrid v = grid_of(Node::constant({2, 2}, {1, 0, 0, 1}));
  const Node s = local_similarity(v, Node::constant({2, 1}, {1, 0}));
  EXPECT_EQ(s.shape(), (Shape{2, 1}));
  EXPECT_EQ(s.at(0, 0), 1.0);
  EXPECT_EQ(s.at(1, 0), 0.0);
}

TEST(LocalSimilarity, IdenticalColumnAndRange) {
  Rng rng(6);
  const Node f = random_leaf(rng, 5, 6);
  const Node t = concat_cols({random_leaf(rng, 5, 1), transpose(gather_rows(transpose(f), std::vector<std::size_t>{3}))});
  const Node s = local_similarity(grid_of(f), t);
  EXPECT_NEAR(s.at(3, 1), 1.0, 1e-15);
  for (double v : s.values()) {
    EXPECT_LE(v, 1.0 + 1e-15);
    EXPECT_GE(v, -1.0 - 1e-15);
  }
}

TEST(LocalSimilarity, ZeroNormIsDomainError) {
  const FeatureGrid v = grid_of(Node::constant({2, 2}, {1, 0, 0, 0}));
  EXPECT_THROW(local_similarity(v, Node::constant({2, 1}, {1, 0})), DomainError);
  EXPECT_THROW(local_similarity(grid_of(Node::constant({2, 1}, {1, 1})), Node::constant({3, 1}, {1, 0, 1})),
               DimensionError);
}

TEST(ContextFeatures, UniformAttentionGivesMean) {
  Rng rng(7);
  const Node f = random_leaf(rng, 3, 4);
  const Node s = Node::constant({4, 1}, {0.2, 0.2, 0.2, 0.2});
  const Node c = context_features(s, grid_of(f), 0.1);
  const Node fn = l2_normalize_cols(f);
  for (std::size_t d = 0; d < 3; ++d) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 4; ++j) mean += fn.at(d, j);
    EXPECT_NEAR(c.at(d, 0), mean / 4.0, 1e-15);
  }
}

TEST(ContextFeatures, SmallTemperatureSelectsArgmax) {
  Rng rng(8);
  const Node f = random_leaf(rng, 3, 4);
  const Node s = Node::constant({4, 1}, {0.1, 0.5, 0.3, -0.2});
  const Node c = context_features(s, grid_of(f), 1e-3);
  const Node fn = l2_normalize_cols(f);
  for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(c.at(d, 0), fn.at(d, 1), 1e-12);
}

TEST(ContextFeatures, MatchesDoubleLoop) {
  Rng rng(9);
  const Node f = random_leaf(rng, 3, 4);
  const Node s = random_leaf(rng, 4, 2);
  const Node c = context_features(s, grid_of(f), 1.0);
  const auto regions = columns(f);
  for (std::size_t i = 0; i < 2; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 4; ++j) z += std::exp(s.at(j, i));
    for (std::size_t d = 0; d < 3; ++d) {
      double acc = 0.0;
      for (std::size_t j = 0; j < 4; ++j) acc += std::exp(s.at(j, i)) / z * oracle::unit(regions[j])[d];
      EXPECT_NEAR(c.at(d, i), acc, 1e-12);
    }
  }
}

TEST(ContextFeatures, AttentionRowsSumToOne) {
  Rng rng(10);
  const Node a = attention_weights(random_leaf(rng, 6, 3), 0.1);
  EXPECT_EQ(a.shape(), (Shape{3, 6}));
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += a.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(MatchScore, SingleSentenceIsCosine) {
  Rng rng(11);
  const Node c = random_leaf(rng, 4, 1), t = random_leaf(rng, 4, 1);
  const double z = match_score(c, t, 10.0).item();
  EXPECT_NEAR(z, oracle::cosine(c.column_values(0), t.column_values(0)), 1e-12);
}

TEST(MatchScore, EqualScoresAddLogP) {
  Rng rng(12);
  const Node c = random_leaf(rng, 4, 1);
  const Node c3 = concat_cols({c, scale(c, 2.0), scale(c, 0.5)});
  const Node t = random_leaf(rng, 4, 1);
  const Node t3 = concat_cols({t, t, t});
  const double m = oracle::cosine(c.column_values(0), t.column_values(0));
  EXPECT_NEAR(match_score(c3, t3, 10.0).item(), m + 10.0 * std::log(3.0), 1e-12);
}

TEST(MatchScore, LogSumExpBounds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Node c = random_leaf(rng, 5, 3), t = random_leaf(rng, 5, 3);
    double mx = -2.0;
    for (std::size_t i = 0; i < 3; ++i) mx = std::max(mx, oracle::cosine(c.column_values(i), t.column_values(i)));
    const double z = match_score(c, t, 10.0).item();
    EXPECT_GE(z, mx - 1e-12);
    EXPECT_LE(z, mx + 10.0 * std::log(3.0) + 1e-12);
  }
}

TEST(MatchScore, ZeroNormContextIsDomainError) {
  const Node c = Node::constant({2, 1}, {0, 0});
  EXPECT_THROW(match_score(c, Node::constant({2, 1}, {1, 0}), 10.0), DomainError);
}

TEST(LocalLoss, SingleItemIsZero) {
  const PairedBatch b = random_batch(13, 1, 4, 4, 2);
  const auto [a, c] = local_loss(b, cfg_default());
  EXPECT_EQ(a.item(), 0.0);
  EXPECT_EQ(c.item(), 0.0);
}

TEST(LocalLoss, IndistinguishableReportsGiveLogB) {
  PairedBatch b = random_batch(14, 4, 4, 5, 2);
  for (auto& it : b.items) it.text.sentences = b.items[0].text.sentences;
  const auto [a, c] = local_loss(b, cfg_default());
  EXPECT_NEAR(a.item(), std::log(4.0), 1e-9);
  EXPECT_GE(c.item(), -1e-12);
}

TEST(LocalLoss, MatchesOracle) {
  const PairedBatch b = random_batch(15, 3, 4, 4, 2);
  const auto [a, c] = local_loss(b, cfg_default());
  const auto [oa, oc] = oracle::local_losses(to_oracle(b), 0.1, 0.1, 10.0);
  EXPECT_LT(rel_err(a.item(), oa), 1e-9);
  EXPECT_LT(rel_err(c.item(), oc), 1e-9);
}

TEST(LocalLoss, LogWeightVariantMatchesOracle) {
  const PairedBatch b = random_batch(16, 3, 4, 5, 3);
  LossConfig cfg;
  cfg.strict_eq4_log = true;
  const auto [a, c] = local_loss(b, cfg);
  const auto [oa, oc] = oracle::local_losses(to_oracle(b), 0.1, 0.1, 10.0, true);
  EXPECT_LT(rel_err(a.item(), oa), 1e-9);
  EXPECT_LT(rel_err(c.item(), oc), 1e-9);
  const auto [pa, pc] = local_loss(b, cfg_default());
  EXPECT_NE(a.item(), pa.item());
}

TEST(LocalLoss, MatchMatrixEntriesMatchOracle) {
  const PairedBatch b = random_batch(17, 3, 5, 6, 3);
  const Node z = match_matrix(b, cfg_default());
  const auto ob = to_oracle(b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_LT(rel_err(z.at(i, k), oracle::match(ob[i].regions, ob[k].sentences, 0.1, 10.0)), 1e-12);
  EXPECT_LT(rel_err(match_function(b.items[1].local, b.items[2].text.sentences, cfg_default()).item(), z.at(1, 2)),
            1e-15);
}

TEST(TotalLoss, SingleItemIsZero) {
  const PairedBatch b = random_batch(18, 1, 4, 4, 3);
  EXPECT_EQ(total_loss(b, cfg_default()).total.item(), 0.0);
}

TEST(TotalLoss, ExactSumOfComponents) {
  const PairedBatch b = random_batch(19, 4, 4, 4, 2);
  const LossBreakdown l = total_loss(b, cfg_default());
  const double sum = l.g_v_given_t.item() + l.g_t_given_v.item() + l.l_v_given_t.item() + l.l_t_given_v.item();
  EXPECT_EQ(l.total.item(), sum);
  for (double v : components(l)) EXPECT_GE(v, -1e-12);
}

TEST(TotalLoss, BatchPermutationInvariance) {
  PairedBatch b = random_batch(20, 4, 4, 3, 2);
  const auto base = components(total_loss(b, cfg_default()));
  std::swap(b.items[0], b.items[3]);
  std::swap(b.items[1], b.items[2]);
  std::swap(b.items[0], b.items[1]);
  const auto perm = components(total_loss(b, cfg_default()));
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], perm[i], 1e-12);
}

TEST(TotalLoss, GradCheckOnLeafFeatures) {
  const PairedBatch b = random_batch(21, 3, 4, 4, 2);
  auto with = [&](std::size_t item, int which, const Node& leaf) {
    PairedBatch c = b;
    auto& it = c.items[item];
    if (which == 0) it.local.features = leaf;
    if (which == 1) it.global.feature = leaf;
    if (which == 2) it.text.sentences = leaf;
    if (which == 3) it.text.report = leaf;
    return total_loss(c, cfg_default()).total;
  };
  for (std::size_t item = 0; item < 3; ++item) {
    const auto& it = b.items[item];
    const Node* targets[] = {&it.local.features, &it.global.feature, &it.text.sentences, &it.text.report};
    for (int which = 0; which < 4; ++which) {
      const GradReport rep =
          grad_check("total_loss", [&](const Node& x) { return with(item, which, x); }, *targets[which]);
      EXPECT_LT(rep.max_rel_err, 1e-4) << "item " << item << " input " << which;
    }
  }
}

TEST(LossConfigTest, NonPositiveTemperatureIsConfigError) {
  LossConfig c;
  c.tau2 = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = LossConfig{};
  c.tau3 = std::nan("");
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(global_loss(random_batch(1, 2, 3, 2, 1), c), ConfigError);
}

TEST(LossBatch, EmptyAndMixedWidth) {
  EXPECT_THROW(global_loss(PairedBatch{}, cfg_default()), ContractError);
  PairedBatch b = random_batch(22, 2, 4, 2, 1);
  b.items[1].global.feature = Node::leaf({3, 1}, {1, 2, 3});
  EXPECT_THROW(total_loss(b, cfg_default()), DimensionError);
}
