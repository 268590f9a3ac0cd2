#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "galn/grounding.hpp"
#include "galn/synthbench.hpp"

using namespace galn;

namespace {

SimilarityMap flat_map(std::size_t w, std::size_t h, std::vector<double> values) {
  SimilarityMap m;
  m.grid_h = h;
  m.grid_w = w;
  m.grid = values;
  m.width = w;
  m.height = h;
  m.upsampled = std::move(values);
  return m;
}

BinaryMask random_mask(Rng& rng, std::size_t w, std::size_t h, double p) {
  BinaryMask m = BinaryMask::empty(w, h);
  for (auto& b : m.bits) b = rng.uniform() < p;
  return m;
}

Model small_model(const Vocab& v) { return init_model(3, v, ModelConfig{8, 16, 4}); }

}  // namespace

TEST(Upsample, ConstantGridStaysConstant) {
  const std::vector<double> g(6, 0.25);
  for (auto mode : {Upsample::bilinear, Upsample::nearest}) {
    const auto up = upsample_grid(g, 2, 3, 12, 8, mode);
    for (double v : up) EXPECT_EQ(v, 0.25);
  }
}

TEST(Upsample, CellCentresReproduceGrid) {
  const std::vector<double> g{0.1, -0.4, 0.9, 0.3};
  const auto up = upsample_grid(g, 2, 2, 4, 4);
  // Centres of 2x2 cells sit between pixel centres 0/1 and 2/3; corner pixels clamp.
  EXPECT_DOUBLE_EQ(up[0], 0.1);
  EXPECT_DOUBLE_EQ(up[3], -0.4);
  EXPECT_DOUBLE_EQ(up[12], 0.9);
  EXPECT_DOUBLE_EQ(up[15], 0.3);
  // Pixel (1, 0) lies a quarter cell from the left centre toward the right one.
  EXPECT_NEAR(up[1], 0.75 * 0.1 + 0.25 * -0.4, 1e-15);
  for (double v : up) {
    EXPECT_LE(v, 0.9);
    EXPECT_GE(v, -0.4);
  }
}

TEST(Upsample, NearestCopiesCells) {
  const std::vector<double> g{1, 2, 3, 4};
  const auto up = upsample_grid(g, 2, 2, 4, 4, Upsample::nearest);
  EXPECT_EQ(up[0], 1);
  EXPECT_EQ(up[1], 1);
  EXPECT_EQ(up[2], 2);
  EXPECT_EQ(up[15], 4);
  EXPECT_THROW(upsample_grid(g, 3, 2, 4, 4), DimensionError);
}

TEST(SimilarityGrid, MatchingColumnScoresOne) {
  Rng rng(1);
  std::vector<double> f(5 * 4);
  for (auto& v : f) v = rng.uniform(-1, 1);
  const Node feats = Node::constant({5, 4}, f);
  const std::vector<double> sentence = feats.column_values(2);
  const auto grid = similarity_grid(feats, sentence);
  EXPECT_NEAR(grid[2], 1.0, 1e-15);
  SimilarityMap m = make_map(grid, FeatureGrid{feats, 2, 2, 1}, 2, 2, Upsample::bilinear);
  EXPECT_EQ(m.argmax_cell(), (std::pair<std::size_t, std::size_t>{1, 0}));
  for (double v : grid) EXPECT_LE(std::abs(v), 1.0);
}

TEST(SimilarityGrid, Errors) {
  const Node feats = Node::constant({2, 2}, {1, 0, 0, 0});
  EXPECT_THROW(similarity_grid(feats, std::vector<double>{1, 0, 0}), DimensionError);
  EXPECT_THROW(similarity_grid(feats, std::vector<double>{0, 0}), DomainError);
  EXPECT_THROW(similarity_grid(feats, std::vector<double>{1, 1}), DomainError);
}

TEST(Ground, UntrainedMapIsBounded) {
  SynthSpec spec;
  spec.train_count = 1;
  spec.test_count = 0;
  const SynthDataset ds = generate(spec);
  const Model model = small_model(ds.vocab);
  const SimilarityMap m = ground("large blob upper left", ds.train[0].image, model);
  EXPECT_EQ(m.grid_h, 16u);
  EXPECT_EQ(m.width, 64u);
  for (double v : m.grid) EXPECT_LE(std::abs(v), 1.0 + 1e-9);
  for (double v : m.upsampled) EXPECT_LE(std::abs(v), 1.0 + 1e-9);
}

TEST(Ground, QueryTakesElementwiseMax) {
  SynthSpec spec;
  spec.train_count = 1;
  spec.test_count = 0;
  const SynthDataset ds = generate(spec);
  const Model model = small_model(ds.vocab);
  const auto& img = ds.train[0].image;
  const SimilarityMap a = ground("large blob upper left", img, model);
  const SimilarityMap b = ground("small ring lower right", img, model);
  const SimilarityMap q = ground_query("large blob upper left. small ring lower right.", img, model);
  for (std::size_t i = 0; i < q.grid.size(); ++i) EXPECT_EQ(q.grid[i], std::max(a.grid[i], b.grid[i]));
  for (std::size_t i = 0; i < q.upsampled.size(); ++i) EXPECT_EQ(q.upsampled[i], std::max(a.upsampled[i], b.upsampled[i]));
}

TEST(Ground, EmptySentenceAndGeometryErrors) {
  const Vocab v = Vocab::from_words({"blob"});
  const Model model = small_model(v);
  const ImageSample img{16, 16, std::vector<double>(256, 0.5)};
  EXPECT_THROW(ground("  ...  ", img, model), InputError);
  EXPECT_THROW(ground_query(" . ", img, model), InputError);
  const ImageSample odd{18, 16, std::vector<double>(18 * 16, 0.5)};
  EXPECT_THROW(ground("blob", odd, model), GeometryError);
  Model broken = model;
  broken.params.text.w2 = Tensor::zeros({5, 16});
  EXPECT_THROW(ground("blob", img, broken), DimensionError);
}

TEST(Threshold, ExtremesAndHalfMap) {
  std::vector<double> v(8, 0.0);
  for (std::size_t i = 0; i < 4; ++i) v[i] = 0.6;
  const SimilarityMap m = flat_map(4, 2, v);
  EXPECT_EQ(threshold_mask(m, -1.1).count(), 8u);
  EXPECT_EQ(threshold_mask(m, 1.1).count(), 0u);
  const BinaryMask half = threshold_mask(m, 0.3);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(half.bits[i] != 0, i < 4);
  EXPECT_EQ(threshold_mask(m, 0.6).count(), 0u);  // strict inequality
}

TEST(Threshold, MonotoneInT) {
  Rng rng(4);
  std::vector<double> v(100);
  for (auto& x : v) x = rng.uniform(-1, 1);
  const SimilarityMap m = flat_map(10, 10, v);
  std::size_t prev = 101;
  for (double t = -1.0; t <= 1.0; t += 0.05) {
    const std::size_t c = threshold_mask(m, t).count();
    EXPECT_LE(c, prev);
    prev = c;
  }
}

TEST(Metrics, Examples) {
  BinaryMask a = BinaryMask::empty(4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 2; ++x) a.set(x, y);
  BinaryMask full = BinaryMask::empty(4, 4);
  for (auto& b : full.bits) b = 1;
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(dice(a, a), 1.0);
  BinaryMask right = BinaryMask::empty(4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 2; x < 4; ++x) right.set(x, y);
  EXPECT_EQ(iou(a, right), 0.0);
  EXPECT_EQ(dice(a, right), 0.0);
  EXPECT_EQ(iou(a, full), 0.5);
  EXPECT_EQ(dice(a, full), 2.0 / 3.0);
  const BinaryMask e = BinaryMask::empty(4, 4);
  EXPECT_EQ(iou(e, e), 1.0);
  EXPECT_EQ(dice(e, e), 1.0);
  EXPECT_EQ(iou(e, a), 0.0);
  EXPECT_EQ(dice(e, a), 0.0);
  EXPECT_THROW(iou(a, BinaryMask::empty(2, 8)), DimensionError);
  EXPECT_THROW(dice(a, BinaryMask::empty(4, 3)), DimensionError);
}

TEST(Metrics, DiceIouIdentityAndSymmetry) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const BinaryMask a = random_mask(rng, 9, 7, rng.uniform()), b = random_mask(rng, 9, 7, rng.uniform());
    const double j = iou(a, b), d = dice(a, b);
    EXPECT_NEAR(d, 2.0 * j / (1.0 + j), 1e-12);
    EXPECT_EQ(j, iou(b, a));
    EXPECT_EQ(d, dice(b, a));
    EXPECT_LE(j, d);
  }
}

TEST(Evaluate, PerfectMapScoresOne) {
  BinaryMask truth = BinaryMask::empty(4, 4);
  truth.set(1, 1);
  truth.set(2, 1);
  std::vector<double> v(16, -1.0);
  v[1 * 4 + 1] = v[1 * 4 + 2] = 1.0;
  auto s = score_map(flat_map(4, 4, v), truth, kDefaultThresholds);
  const GroundingMetrics g = aggregate_scores({s}, kDefaultThresholds);
  EXPECT_EQ(g.mean_iou, 1.0);
  EXPECT_EQ(g.mean_dice, 1.0);
  ASSERT_EQ(g.per_threshold.size(), 5u);
}

TEST(Evaluate, ZeroMapScoresZero) {
  BinaryMask truth = BinaryMask::empty(4, 4);
  truth.set(0, 0);
  const auto s = score_map(flat_map(4, 4, std::vector<double>(16, 0.0)), truth, kDefaultThresholds);
  const GroundingMetrics g = aggregate_scores({s}, kDefaultThresholds);
  EXPECT_EQ(g.mean_iou, 0.0);
  EXPECT_EQ(g.mean_dice, 0.0);
}

TEST(Evaluate, MeansOverSamplesThenThresholds) {
  SampleScores a{0, "x", {1.0, 0.0}, {1.0, 0.0}}, b{1, "x", {0.5, 0.25}, {0.6, 0.4}};
  const std::vector<double> th{0.1, 0.2};
  const GroundingMetrics g = aggregate_scores({b, a}, th);
  EXPECT_DOUBLE_EQ(g.per_threshold[0].iou, 0.75);
  EXPECT_DOUBLE_EQ(g.per_threshold[1].iou, 0.125);
  EXPECT_DOUBLE_EQ(g.mean_iou, (0.75 + 0.125) / 2);
  EXPECT_DOUBLE_EQ(g.mean_dice, (0.8 + 0.2) / 2);
  EXPECT_EQ(g.samples, 2u);
}

TEST(Evaluate, OrderInvariantWithCategories) {
  SynthSpec spec;
  spec.train_count = 0;
  spec.test_count = 8;
  spec.shapes = {"blob", "ring", "bar"};
  const SynthDataset ds = generate(spec);
  const Model model = small_model(ds.vocab);
  const EvaluationReport r1 = evaluate(ds.test, model);
  std::vector<SynthSample> shuffled = ds.test;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[1], shuffled[4]);
  const EvaluationReport r2 = evaluate(shuffled, model);
  EXPECT_EQ(to_json(r1).dump(), to_json(r2).dump());
  std::size_t total = 0;
  for (const auto& [cat, g] : r1.per_category) {
    EXPECT_TRUE(cat == "blob" || cat == "ring" || cat == "bar");
    total += g.samples;
  }
  EXPECT_EQ(total, 8u);
  for (const auto& row : r1.overall.per_threshold) {
    EXPECT_GE(row.iou, 0.0);
    EXPECT_LE(row.iou, row.dice);
    EXPECT_LE(row.dice, 1.0);
  }
  const auto j = to_json(r1);
  for (const char* k : {"per_threshold", "mean_iou", "mean_dice", "per_category"}) EXPECT_TRUE(j.contains(k));
}

TEST(Evaluate, MissingMaskNamesSample) {
  SynthSpec spec;
  spec.train_count = 0;
  spec.test_count = 2;
  SynthDataset ds = generate(spec);
  ds.test[1].masks.clear();
  try {
    evaluate(ds.test, small_model(ds.vocab));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(ds.test[1].id)), std::string::npos);
  }
  EXPECT_THROW(evaluate(ds.test, small_model(ds.vocab), std::vector<double>{}), ConfigError);
}

TEST(Heatmap, ByteMapping) {
  const SimilarityMap m = flat_map(3, 1, {-1.0, 0.0, 1.0});
  const GreyRaster r = heatmap_raster(m);
  EXPECT_EQ(r.data[0], 0);
  EXPECT_EQ(r.data[1], 128);
  EXPECT_EQ(r.data[2], 255);
}
