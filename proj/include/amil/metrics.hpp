#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "amil/error.hpp"

namespace amil::evalx {

/// Area under the ROC curve via the rank-sum statistic with midranks, i.e.
/// P(score_pos > score_neg) + 0.5 P(score_pos == score_neg).
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("roc_auc: " + std::to_string(scores.size()) + " scores for " + std::to_string(labels.size()) +
                     " labels");
  }
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("roc_auc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(y);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("roc_auc: AUC undefined, only one class present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of doubled midranks of the positives keeps everything integral.
  std::uint64_t rank_sum_x2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t tied_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) tied_pos += static_cast<std::size_t>(labels[order[j++]]);
    // Ranks i+1 .. j share the midrank (i + 1 + j) / 2.
    rank_sum_x2 += tied_pos * (i + 1 + j);
    i = j;
  }
  const double u = static_cast<double>(rank_sum_x2) / 2.0 - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct MetricsReport {
  double auc = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t fold = 0;
  std::size_t repetition = 0;
  std::string model_kind;
  std::string config_digest;
};

/// Predicted positive when score >= threshold. Precision and recall are 0
/// when their denominators are empty.
inline MetricsReport confusion_metrics(std::span<const double> scores, std::span<const int> labels,
                                       double threshold = 0.5) {
  if (scores.size() != labels.size()) throw ShapeError("confusion_metrics: scores and labels differ in length");
  MetricsReport r;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i] == 1) {
      (predicted ? r.tp : r.fn)++;
    } else {
      (predicted ? r.fp : r.tn)++;
    }
  }
  const std::size_t n = r.tp + r.fp + r.tn + r.fn;
  r.accuracy = n == 0 ? 0.0 : static_cast<double>(r.tp + r.tn) / static_cast<double>(n);
  r.precision = r.tp + r.fp == 0 ? 0.0 : static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
  r.recall = r.tp + r.fn == 0 ? 0.0 : static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  return r;
}

}  // namespace amil::evalx
