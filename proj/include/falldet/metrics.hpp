#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "falldet/error.hpp"

namespace falldet {

struct BinaryMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

// Threshold rule: score >= threshold predicts positive. Empty denominators
// yield 0 by convention.
BinaryMetrics binary_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                             double threshold = 0.5);

struct RocResult {
  double auc = 0.0;
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), (0,0) .. (1,1)
};

// Threshold sweep over unique scores with trapezoid integration, which equals
// the pairwise ranking probability with half credit for ties. Both classes
// must be present.
RocResult auc_roc(const std::vector<double>& scores, const std::vector<int>& labels);

// counts[truth][pred]
std::vector<std::vector<std::int64_t>> confusion_matrix(const std::vector<int>& pred,
                                                        const std::vector<int>& truth,
                                                        int n_classes = 6);

}  // namespace falldet
