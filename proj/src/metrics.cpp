#include "falldet/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace falldet {

BinaryMetrics binary_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                             double threshold) {
  if (scores.empty()) throw ContractError("binary_metrics: empty input");
  if (scores.size() != labels.size())
    throw DimensionError("binary_metrics: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  BinaryMetrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool truth = labels[i] != 0;
    if (pred && truth)
      ++m.tp;
    else if (pred && !truth)
      ++m.fp;
    else if (!pred && truth)
      ++m.fn;
    else
      ++m.tn;
  }
  m.precision = (m.tp + m.fp) > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = (m.tp + m.fn) > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
                                        : 0.0;
  return m;
}

RocResult auc_roc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw DimensionError("auc_roc: score/label count mismatch");
  std::int64_t pos = 0, neg = 0;
  for (int y : labels) (y != 0 ? pos : neg) += 1;
  if (pos == 0 || neg == 0)
    throw MetricError("auc_roc: undefined with a single class (" + std::to_string(pos) +
                      " positives, " + std::to_string(neg) + " negatives)");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult r;
  r.points.emplace_back(0.0, 0.0);
  double area = 0.0;
  std::int64_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    // advance over one tied-score group so ties earn the trapezoid's half credit
    const double s = scores[order[i]];
    std::int64_t dtp = 0, dfp = 0;
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] != 0 ? dtp : dfp) += 1;
      ++i;
    }
    const double tpr0 = static_cast<double>(tp) / static_cast<double>(pos);
    tp += dtp;
    fp += dfp;
    const double tpr1 = static_cast<double>(tp) / static_cast<double>(pos);
    const double dfpr = static_cast<double>(dfp) / static_cast<double>(neg);
    area += dfpr * 0.5 * (tpr0 + tpr1);
    r.points.emplace_back(static_cast<double>(fp) / static_cast<double>(neg), tpr1);
  }
  r.auc = area;
  return r;
}

std::vector<std::vector<std::int64_t>> confusion_matrix(const std::vector<int>& pred,
                                                        const std::vector<int>& truth,
                                                        int n_classes) {
  if (pred.size() != truth.size())
    throw DimensionError("confusion_matrix: prediction/truth count mismatch");
  std::vector<std::vector<std::int64_t>> counts(
      static_cast<std::size_t>(n_classes),
      std::vector<std::int64_t>(static_cast<std::size_t>(n_classes), 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= n_classes || truth[i] < 0 || truth[i] >= n_classes)
      throw ContractError("confusion_matrix: class index out of range at sample " +
                          std::to_string(i));
    counts[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])] += 1;
  }
  return counts;
}

}  // namespace falldet
