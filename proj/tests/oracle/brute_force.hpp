#pragma once

// Scalar-loop reimplementation of the contrastive objective, used only as a
// test oracle. Works on plain vectors and shares no code with galn::losses.

#include <cmath>
#include <utility>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

struct Item {
  std::vector<Vec> regions;    // M vectors of length D
  std::vector<Vec> sentences;  // P vectors of length D
  Vec image_global;
  Vec report_global;
};

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const Vec& a, const Vec& b) { return dot(a, b) / (norm(a) * norm(b)); }

inline Vec unit(const Vec& a) {
  Vec out(a);
  const double n = norm(a);
  for (auto& x : out) x /= n;
  return out;
}

/// -(1/B) sum_i log( exp(L_ii) / sum_k exp(L_ik) ) with L given row-wise,
/// evaluated as log1p(sum_{k != i} exp(L_ik - L_ii)) so tiny losses keep
/// their relative precision.
inline double nce(const std::vector<Vec>& logits) {
  const std::size_t b = logits.size();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double rest = 0.0;
    for (std::size_t k = 0; k < b; ++k)
      if (k != i) rest += std::exp(logits[i][k] - logits[i][i]);
    total += std::log1p(rest);
  }
  return total / static_cast<double>(b);
}

inline std::vector<Vec> transposed(const std::vector<Vec>& m) {
  std::vector<Vec> t(m[0].size(), Vec(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t k = 0; k < m[i].size(); ++k) t[k][i] = m[i][k];
  return t;
}

/// (image|text, text|image) global losses.
inline std::pair<double, double> global_losses(const std::vector<Item>& batch, double tau1) {
  const std::size_t b = batch.size();
  std::vector<Vec> l(b, Vec(b));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < b; ++k) l[i][k] = cosine(batch[i].image_global, batch[k].report_global) / tau1;
  return {nce(l), nce(transposed(l))};
}

/// Attention-weighted context for every sentence: D values per sentence.
inline std::vector<Vec> contexts(const std::vector<Vec>& regions, const std::vector<Vec>& sentences, double tau2,
                                 bool log_weights = false) {
  std::vector<Vec> out;
  for (const auto& sent : sentences) {
    Vec weights(regions.size());
    double z = 0.0;
    for (std::size_t j = 0; j < regions.size(); ++j) {
      weights[j] = std::exp(cosine(regions[j], sent) / tau2);
      z += weights[j];
    }
    Vec c(sent.size(), 0.0);
    for (std::size_t j = 0; j < regions.size(); ++j) {
      const double a = log_weights ? std::log(weights[j] / z) : weights[j] / z;
      const Vec r = unit(regions[j]);
      for (std::size_t d = 0; d < c.size(); ++d) c[d] += a * r[d];
    }
    out.push_back(c);
  }
  return out;
}

inline double match(const std::vector<Vec>& regions, const std::vector<Vec>& sentences, double tau2, double tau3,
                    bool log_weights = false) {
  const auto c = contexts(regions, sentences, tau2, log_weights);
  double acc = 0.0;
  for (std::size_t i = 0; i < sentences.size(); ++i) acc += std::exp(cosine(c[i], sentences[i]) / tau3);
  return tau3 * std::log(acc);
}

inline std::pair<double, double> local_losses(const std::vector<Item>& batch, double tau1, double tau2, double tau3,
                                              bool log_weights = false) {
  const std::size_t b = batch.size();
  std::vector<Vec> l(b, Vec(b));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < b; ++k)
      l[i][k] = match(batch[i].regions, batch[k].sentences, tau2, tau3, log_weights) / tau1;
  return {nce(l), nce(transposed(l))};
}

}  // namespace oracle
