#pragma once

// Zero-shot localization: sentence/region cosine heatmaps, thresholded
// masks, and IoU / Dice averaged over a threshold sweep.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "galn/diffmath.hpp"
#include "galn/errors.hpp"
#include "galn/image.hpp"
#include "galn/model.hpp"
#include "galn/synthbench.hpp"
#include "galn/textenc.hpp"
#include "galn/visenc.hpp"

namespace galn {

inline const std::vector<double> kDefaultThresholds = {0.1, 0.2, 0.3, 0.4, 0.5};

enum class Upsample { bilinear, nearest };

struct SimilarityMap {
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<double> grid;  // row-major cosines
  std::size_t width = 0, height = 0;
  std::vector<double> upsampled;

  double grid_at(std::size_t r, std::size_t c) const { return grid[r * grid_w + c]; }
  double at(std::size_t x, std::size_t y) const { return upsampled[y * width + x]; }

  /// (row, col) of the highest-scoring grid cell; first one on ties.
  std::pair<std::size_t, std::size_t> argmax_cell() const {
    const auto it = std::max_element(grid.begin(), grid.end());
    const auto idx = static_cast<std::size_t>(it - grid.begin());
    return {idx / grid_w, idx % grid_w};
  }
};

/// Interpolate a grid of cell values to width x height pixels. Cell centres
/// sit at patch centres; pixels outside the outermost centres clamp.
inline std::vector<double> upsample_grid(std::span<const double> grid, std::size_t gh, std::size_t gw,
                                         std::size_t width, std::size_t height, Upsample mode = Upsample::bilinear) {
  if (grid.size() != gh * gw || gh == 0 || gw == 0) throw DimensionError("upsample_grid: grid size mismatch");
  std::vector<double> out(width * height);
  const double sx = static_cast<double>(width) / static_cast<double>(gw);
  const double sy = static_cast<double>(height) / static_cast<double>(gh);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      if (mode == Upsample::nearest) {
        const auto cx = std::min(gw - 1, static_cast<std::size_t>(static_cast<double>(x) / sx));
        const auto cy = std::min(gh - 1, static_cast<std::size_t>(static_cast<double>(y) / sy));
        out[y * width + x] = grid[cy * gw + cx];
        continue;
      }
      const double gx = std::clamp((static_cast<double>(x) + 0.5) / sx - 0.5, 0.0, static_cast<double>(gw - 1));
      const double gy = std::clamp((static_cast<double>(y) + 0.5) / sy - 0.5, 0.0, static_cast<double>(gh - 1));
      const auto x0 = static_cast<std::size_t>(gx), y0 = static_cast<std::size_t>(gy);
      const std::size_t x1 = std::min(x0 + 1, gw - 1), y1 = std::min(y0 + 1, gh - 1);
      const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
      const double top = (1.0 - fx) * grid[y0 * gw + x0] + fx * grid[y0 * gw + x1];
      const double bottom = (1.0 - fx) * grid[y1 * gw + x0] + fx * grid[y1 * gw + x1];
      out[y * width + x] = (1.0 - fy) * top + fy * bottom;
    }
  return out;
}

/// Cosine of `sentence` (D values) with every column of the D x M grid.
inline std::vector<double> similarity_grid(const Node& features, std::span<const double> sentence) {
  if (features.rows() != sentence.size()) {
    throw DimensionError("similarity_grid: sentence of width " + std::to_string(sentence.size()) +
                         " against features " + to_string(features.shape()));
  }
  double sn = 0.0;
  for (double v : sentence) sn += v * v;
  sn = std::sqrt(sn);
  if (!(sn > 1e-10)) throw DomainError("similarity_grid: zero-norm sentence embedding");
  std::vector<double> out(features.cols());
  for (std::size_t j = 0; j < features.cols(); ++j) {
    double dot = 0.0, fn = 0.0;
    for (std::size_t d = 0; d < features.rows(); ++d) {
      dot += features.at(d, j) * sentence[d];
      fn += features.at(d, j) * features.at(d, j);
    }
    fn = std::sqrt(fn);
    if (!(fn > 1e-10)) throw DomainError("similarity_grid: zero-norm region " + std::to_string(j));
    out[j] = std::clamp(dot / (fn * sn), -1.0, 1.0);
  }
  return out;
}

inline SimilarityMap make_map(std::vector<double> grid, const FeatureGrid& g, std::size_t width, std::size_t height,
                              Upsample mode) {
  SimilarityMap m;
  m.grid_h = g.grid_h;
  m.grid_w = g.grid_w;
  m.grid = std::move(grid);
  m.width = width;
  m.height = height;
  m.upsampled = upsample_grid(m.grid, m.grid_h, m.grid_w, width, height, mode);
  return m;
}

namespace detail {

inline void check_model_image(const Model& model, const ImageSample& img) {
  if (model.params.image.w1.shape.cols != model.config.patch_size * model.config.patch_size) {
    throw GeometryError("checkpoint patch encoder does not match its patch size");
  }
  if (model.params.text.w2.shape.rows != model.params.image.w2.shape.rows) {
    throw DimensionError("checkpoint text and image embedding widths differ");
  }
  check_geometry(img, model.config.patch_size);
}

}  // namespace detail

/// Heatmap for one sentence: every word belongs to a single sentence embedding.
inline SimilarityMap ground(const std::string& sentence, const ImageSample& img, const Model& model,
                            Upsample mode = Upsample::bilinear) {
  detail::check_model_image(model, img);
  const auto words = tokenize(sentence, model.vocab);
  if (words.empty()) throw InputError("query sentence has no words");
  TokenizedReport tok;
  for (const auto& w : words) {
    tok.piece_ids.insert(tok.piece_ids.end(), w.begin(), w.end());
    tok.word_boundaries.push_back(w.size());
  }
  tok.sentence_boundaries.push_back(words.size());
  const ModelNodes nodes = make_nodes(model.params, false);
  const auto text = embed_report(tok, nodes.text);
  const auto enc = encode_image(img, nodes.image, model.config.patch_size);
  return make_map(similarity_grid(enc.local.features, text.sentences.values()), enc.local, img.width, img.height,
                  mode);
}

/// Multi-sentence query: grounded per sentence, combined by element-wise max.
inline SimilarityMap ground_query(const std::string& query, const ImageSample& img, const Model& model,
                                  Upsample mode = Upsample::bilinear) {
  std::vector<std::string> sentences;
  try {
    sentences = split_sentences(query);
  } catch (const DataError&) {
    throw InputError("query has no words");
  }
  SimilarityMap out = ground(sentences[0], img, model, mode);
  for (std::size_t s = 1; s < sentences.size(); ++s) {
    const SimilarityMap m = ground(sentences[s], img, model, mode);
    for (std::size_t i = 0; i < out.grid.size(); ++i) out.grid[i] = std::max(out.grid[i], m.grid[i]);
    for (std::size_t i = 0; i < out.upsampled.size(); ++i) out.upsampled[i] = std::max(out.upsampled[i], m.upsampled[i]);
  }
  return out;
}

/// Pixel set iff its upsampled score is strictly greater than `t`.
inline BinaryMask threshold_mask(const SimilarityMap& map, double t) {
  BinaryMask m = BinaryMask::empty(map.width, map.height);
  for (std::size_t i = 0; i < map.upsampled.size(); ++i) m.bits[i] = map.upsampled[i] > t;
  return m;
}

namespace detail {

struct Overlap {
  std::size_t inter = 0, uni = 0, a = 0, b = 0;
};

inline Overlap overlap(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height || a.bits.size() != b.bits.size()) {
    throw DimensionError("mask dimensions differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                         " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
  }
  Overlap o;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i] != 0, y = b.bits[i] != 0;
    o.inter += x && y;
    o.uni += x || y;
    o.a += x;
    o.b += y;
  }
  return o;
}

}  // namespace detail

/// |a and b| / |a or b|; two empty masks score 1.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  const auto o = detail::overlap(a, b);
  if (o.uni == 0) return 1.0;
  return static_cast<double>(o.inter) / static_cast<double>(o.uni);
}

/// 2 |a and b| / (|a| + |b|); two empty masks score 1.
inline double dice(const BinaryMask& a, const BinaryMask& b) {
  const auto o = detail::overlap(a, b);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.a + o.b);
}

struct ThresholdScore {
  double threshold = 0.0;
  double iou = 0.0;
  double dice = 0.0;
};

struct GroundingMetrics {
  std::vector<ThresholdScore> per_threshold;
  double mean_iou = 0.0;
  double mean_dice = 0.0;
  std::size_t samples = 0;
};

struct EvaluationReport {
  GroundingMetrics overall;
  std::map<std::string, GroundingMetrics> per_category;
};

struct SampleScores {
  std::size_t id = 0;
  std::string category;
  std::vector<double> iou;   // per threshold
  std::vector<double> dice;  // per threshold
};

inline BinaryMask union_mask(const std::vector<BinaryMask>& masks) {
  BinaryMask u = BinaryMask::empty(masks.at(0).width, masks.at(0).height);
  for (const auto& m : masks) {
    if (m.bits.size() != u.bits.size()) throw DimensionError("union_mask: mask dimensions differ");
    for (std::size_t i = 0; i < m.bits.size(); ++i) u.bits[i] = u.bits[i] || m.bits[i];
  }
  return u;
}

inline SampleScores score_map(const SimilarityMap& map, const BinaryMask& truth, std::span<const double> thresholds) {
  SampleScores s;
  for (double t : thresholds) {
    const auto pred = threshold_mask(map, t);
    s.iou.push_back(iou(pred, truth));
    s.dice.push_back(dice(pred, truth));
  }
  return s;
}

/// Means over samples per threshold (reduced in id order), then over thresholds.
inline GroundingMetrics aggregate_scores(std::vector<SampleScores> scores, std::span<const double> thresholds) {
  std::sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  GroundingMetrics g;
  g.samples = scores.size();
  if (scores.empty()) return g;
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    ThresholdScore row{thresholds[k], 0.0, 0.0};
    for (const auto& s : scores) {
      row.iou += s.iou[k];
      row.dice += s.dice[k];
    }
    row.iou /= static_cast<double>(scores.size());
    row.dice /= static_cast<double>(scores.size());
    g.per_threshold.push_back(row);
    g.mean_iou += row.iou;
    g.mean_dice += row.dice;
  }
  g.mean_iou /= static_cast<double>(thresholds.size());
  g.mean_dice /= static_cast<double>(thresholds.size());
  return g;
}

/// Each sample's report is grounded as a query against the union of its masks.
inline EvaluationReport evaluate(std::span<const SynthSample> samples, const Model& model,
                                 std::span<const double> thresholds = kDefaultThresholds,
                                 Upsample mode = Upsample::bilinear) {
  if (thresholds.empty()) throw ConfigError("evaluate: empty threshold list");
  for (double t : thresholds)
    if (!std::isfinite(t)) throw ConfigError("evaluate: thresholds must be finite");
  std::vector<SampleScores> all;
  std::map<std::string, std::vector<SampleScores>> by_cat;
  for (const auto& s : samples) {
    if (s.masks.empty()) throw DataError("sample " + std::to_string(s.id) + ": missing ground-truth mask");
    const auto map = ground_query(s.report, s.image, model, mode);
    auto sc = score_map(map, union_mask(s.masks), thresholds);
    sc.id = s.id;
    sc.category = s.category;
    by_cat[s.category].push_back(sc);
    all.push_back(std::move(sc));
  }
  EvaluationReport r;
  r.overall = aggregate_scores(std::move(all), thresholds);
  for (auto& [cat, list] : by_cat) r.per_category[cat] = aggregate_scores(std::move(list), thresholds);
  return r;
}

inline nlohmann::json to_json(const GroundingMetrics& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : g.per_threshold) rows.push_back({{"threshold", r.threshold}, {"iou", r.iou}, {"dice", r.dice}});
  return {{"per_threshold", rows}, {"mean_iou", g.mean_iou}, {"mean_dice", g.mean_dice}, {"samples", g.samples}};
}

inline nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json j = to_json(r.overall);
  j["per_category"] = nlohmann::json::object();
  for (const auto& [cat, g] : r.per_category) j["per_category"][cat] = to_json(g);
  return j;
}

/// Heatmap as 8-bit grey: round(255 (v + 1) / 2).
inline GreyRaster heatmap_raster(const SimilarityMap& m) {
  GreyRaster r{m.width, m.height, std::vector<std::uint8_t>(m.upsampled.size())};
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const double v = std::clamp(m.upsampled[i], -1.0, 1.0);
    r.data[i] = static_cast<std::uint8_t>(std::lround(255.0 * (v + 1.0) / 2.0));
  }
  return r;
}

}  // namespace galn
