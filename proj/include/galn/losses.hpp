#pragma once

// Joint global + sentence-level local contrastive objective.
//
// Global: InfoNCE over cosine similarities of report and image embeddings.
// Local: each sentence attends over image regions, the attended context is
// matched against the sentence, and per-sentence match scores are pooled
// with a scaled log-sum-exp into one image/report score Z that feeds a
// second InfoNCE.

#include <cmath>
#include <sstream>
#include <tuple>
#include <utility>
#include <vector>

#include "galn/diffmath.hpp"
#include "galn/errors.hpp"
#include "galn/textenc.hpp"
#include "galn/visenc.hpp"

namespace galn {

struct LossConfig {
  double tau1 = 0.1;   // global and instance-level temperature
  double tau2 = 0.1;   // region attention temperature
  double tau3 = 10.0;  // match aggregation scale
  // Use log-softmax region weights in the context features instead of softmax.
  bool strict_eq4_log = false;

  void validate() const {
    auto check = [](const char* name, double v) {
      if (!(v > 0.0) || !std::isfinite(v)) {
        std::ostringstream os;
        os << "loss." << name << " must be positive and finite, got " << v;
        throw ConfigError(os.str());
      }
    };
    check("tau1", tau1);
    check("tau2", tau2);
    check("tau3", tau3);
  }
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct PairedItem {
  TextEmbeddings text;
  FeatureGrid local;
  GlobalFeature global;
};

struct PairedBatch {
  std::vector<PairedItem> items;
  std::size_t size() const { return items.size(); }
};

struct LossBreakdown {
  Node g_v_given_t;
  Node g_t_given_v;
  Node l_v_given_t;
  Node l_t_given_v;
  Node total;
};

namespace detail {

inline void check_batch(const PairedBatch& batch) {
  if (batch.items.empty()) throw ContractError("loss: empty batch");
  const std::size_t d = batch.items[0].global.feature.rows();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& it = batch.items[i];
    if (it.global.feature.rows() != d || it.text.report.rows() != d || it.local.features.rows() != d ||
        it.text.sentences.rows() != d) {
      throw DimensionError("loss: batch item " + std::to_string(i) + " does not share embedding width " +
                           std::to_string(d));
    }
  }
}

inline Node normalize_checked(const Node& x, const char* what, std::size_t index) {
  try {
    return l2_normalize_cols(x);
  } catch (const DomainError& e) {
    std::ostringstream os;
    os << what << " at batch index " << index << ": " << e.what();
    throw DomainError(os.str());
  }
}

inline Node identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Node::constant({n, n}, std::move(v));
}

}  // namespace detail

/// Mean over rows of -log softmax(logits row)[diagonal]; logits are B x B
/// with positives on the diagonal. Each row is shifted by its diagonal entry
/// first, so a row's loss is log sum_k exp(L_ik - L_ii) without cancellation.
inline Node info_nce_rows(const Node& logits) {
  const std::size_t b = logits.rows();
  if (logits.cols() != b) throw DimensionError("info_nce_rows: logits must be square, got " + to_string(logits.shape()));
  const Node diag = sum_axis(elementwise_mul(logits, detail::identity(b)), 1);
  return mean_axis(logsumexp_rows(sub(logits, diag)), 0);
}

/// (image-given-text, text-given-image) global losses. Row i of the
/// similarity matrix is image i against every report k.
inline std::pair<Node, Node> global_loss(const PairedBatch& batch, const LossConfig& cfg) {
  cfg.validate();
  detail::check_batch(batch);
  std::vector<Node> v, t;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    v.push_back(detail::normalize_checked(batch.items[i].global.feature, "zero-norm global image feature", i));
    t.push_back(detail::normalize_checked(batch.items[i].text.report, "zero-norm report embedding", i));
  }
  const Node sim = matmul(transpose(concat_cols(v)), concat_cols(t));
  const Node logits = scale(sim, 1.0 / cfg.tau1);
  return {info_nce_rows(logits), info_nce_rows(transpose(logits))};
}

/// Cosine similarity of every region (rows, M) with every sentence (cols, P).
inline Node local_similarity(const FeatureGrid& v_l, const Node& sentences) {
  if (v_l.features.rows() != sentences.rows()) {
    detail::shape_mismatch("local_similarity", v_l.features.shape(), sentences.shape());
  }
  return matmul(transpose(l2_normalize_cols(v_l.features)), l2_normalize_cols(sentences));
}

/// P x M region weights; row i is the softmax over regions of s[:, i] / tau2.
inline Node attention_weights(const Node& s, double tau2) {
  return softmax_rows(transpose(s), tau2);
}

namespace detail {

inline Node context_from_normalized(const Node& s, const Node& regions_norm, double tau2, bool log_weights) {
  if (s.rows() != regions_norm.cols()) shape_mismatch("context_features", s.shape(), regions_norm.shape());
  Node weights;
  if (log_weights) {
    const Node st = transpose(s);
    weights = sub(scale(st, 1.0 / tau2), logsumexp_rows(st, tau2));
  } else {
    weights = attention_weights(s, tau2);
  }
  return matmul(regions_norm, transpose(weights));
}

inline Node match_from_normalized(const Node& c, const Node& sentences_norm, double tau3) {
  check_temperature("match_score", tau3);
  if (!(c.shape() == sentences_norm.shape())) shape_mismatch("match_score", c.shape(), sentences_norm.shape());
  const Node cos = sum_axis(elementwise_mul(l2_normalize_cols(c), sentences_norm), 0);
  return scale(logsumexp_rows(cos, tau3), tau3);
}

}  // namespace detail

/// D x P sentence-conditioned context: attention-weighted sum of the
/// normalized region features.
inline Node context_features(const Node& s, const FeatureGrid& v_l, double tau2, bool log_weights = false) {
  detail::check_temperature("context_features", tau2);
  return detail::context_from_normalized(s, l2_normalize_cols(v_l.features), tau2, log_weights);
}

/// Z = tau3 * log sum_i exp(cos(c_i, t_si) / tau3), pooled over sentences.
inline Node match_score(const Node& c, const Node& sentences, double tau3) {
  return detail::match_from_normalized(c, l2_normalize_cols(sentences), tau3);
}

/// Z for one image/report pair.
inline Node match_function(const FeatureGrid& v_l, const Node& sentences, const LossConfig& cfg) {
  const Node s = local_similarity(v_l, sentences);
  return match_score(context_features(s, v_l, cfg.tau2, cfg.strict_eq4_log), sentences, cfg.tau3);
}

/// B x B matrix of Z(image i, report k).
inline Node match_matrix(const PairedBatch& batch, const LossConfig& cfg) {
  cfg.validate();
  detail::check_batch(batch);
  const std::size_t b = batch.size();
  std::vector<Node> regions, sents;
  for (std::size_t i = 0; i < b; ++i) {
    regions.push_back(detail::normalize_checked(batch.items[i].local.features, "zero-norm region feature", i));
    sents.push_back(detail::normalize_checked(batch.items[i].text.sentences, "zero-norm sentence embedding", i));
  }
  std::vector<Node> columns;
  for (std::size_t k = 0; k < b; ++k) {
    std::vector<Node> z;
    for (std::size_t i = 0; i < b; ++i) {
      const Node s = matmul(transpose(regions[i]), sents[k]);
      const Node c = detail::context_from_normalized(s, regions[i], cfg.tau2, cfg.strict_eq4_log);
      z.push_back(detail::match_from_normalized(c, sents[k], cfg.tau3));
    }
    columns.push_back(transpose(concat_cols(z)));
  }
  return concat_cols(columns);
}

inline std::pair<Node, Node> local_loss(const PairedBatch& batch, const LossConfig& cfg) {
  const Node logits = scale(match_matrix(batch, cfg), 1.0 / cfg.tau1);
  return {info_nce_rows(logits), info_nce_rows(transpose(logits))};
}

inline LossBreakdown total_loss(const PairedBatch& batch, const LossConfig& cfg) {
  LossBreakdown out;
  std::tie(out.g_v_given_t, out.g_t_given_v) = global_loss(batch, cfg);
  std::tie(out.l_v_given_t, out.l_t_given_v) = local_loss(batch, cfg);
  out.total = add(add(add(out.g_v_given_t, out.g_t_given_v), out.l_v_given_t), out.l_t_given_v);
  return out;
}

}  // namespace galn
