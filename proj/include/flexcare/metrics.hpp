// SPDX-License-Identifier: Apache-2.0
//
// Ranking and classification metrics. AUROC uses the pairwise definition
// (ties count one half); AUPRC is step-sum average precision with tied
// scores grouped into a single threshold.
#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace flexcare {

class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct MetricBundle {
  std::map<std::string, double> values;
  std::size_t count = 0;
  std::size_t skipped_labels = 0;

  double at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw std::out_of_range("metric not present: " + name);
    return it->second;
  }
};

inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: size mismatch");
  std::size_t pos = 0;
  for (int y : labels) pos += y != 0;
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc: both classes must be present");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of mid-ranks of positives (Mann-Whitney U).
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * (double(i + 1) + double(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) rank_sum += mid;
    i = j;
  }
  const double u = rank_sum - double(pos) * double(pos + 1) / 2.0;
  return u / (double(pos) * double(neg));
}

inline double auprc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auprc: size mismatch");
  std::size_t total_pos = 0;
  for (int y : labels) total_pos += y != 0;
  if (total_pos == 0) throw UndefinedMetricError("auprc: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] != 0 ? tp : fp) += 1;
      ++j;
    }
    const double recall = double(tp) / double(total_pos);
    const double precision = double(tp) / double(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

/// (macro F1, micro F1) for single-label predictions over `n_classes`.
inline std::pair<double, double> f1_scores(std::span<const int> predicted, std::span<const int> truth,
                                           std::size_t n_classes) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("f1_scores: size mismatch");
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int p = predicted[i], t = truth[i];
    if (p < 0 || t < 0 || std::size_t(p) >= n_classes || std::size_t(t) >= n_classes)
      throw std::out_of_range("f1_scores: label out of range");
    if (p == t) {
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  const auto f1 = [](std::size_t tp, std::size_t fp, std::size_t fn) {
    const std::size_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * double(tp) / double(denom);
  };
  double macro = 0.0;
  std::size_t stp = 0, sfp = 0, sfn = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    macro += f1(tp[c], fp[c], fn[c]);
    stp += tp[c], sfp += fp[c], sfn += fn[c];
  }
  macro = n_classes ? macro / double(n_classes) : 0.0;
  return {macro, f1(stp, sfp, sfn)};
}

struct MultilabelAuroc {
  double macro = 0.0;
  double micro = 0.0;
  std::size_t skipped = 0;  // columns lacking one of the two classes
};

/// Row-major score and label matrices of shape n x n_labels.
inline MultilabelAuroc multilabel_auroc(std::span<const double> scores, std::span<const int> labels,
                                        std::size_t n_labels) {
  if (n_labels == 0 || scores.size() != labels.size() || scores.size() % n_labels != 0)
    throw std::invalid_argument("multilabel_auroc: shape mismatch");
  const std::size_t n = scores.size() / n_labels;
  MultilabelAuroc out;
  std::size_t valid = 0;
  std::vector<double> col_s(n);
  std::vector<int> col_y(n);
  for (std::size_t j = 0; j < n_labels; ++j) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      col_s[i] = scores[i * n_labels + j];
      col_y[i] = labels[i * n_labels + j];
      pos += col_y[i] != 0;
    }
    if (pos == 0 || pos == n) {
      ++out.skipped;
      continue;
    }
    out.macro += auroc(col_s, col_y);
    ++valid;
  }
  if (valid == 0) throw UndefinedMetricError("multilabel_auroc: no label column has both classes");
  out.macro /= double(valid);
  out.micro = auroc(scores, labels);
  return out;
}

}  // namespace flexcare
