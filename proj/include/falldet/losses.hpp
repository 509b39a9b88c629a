#pragma once

#include <vector>

#include "falldet/tensor.hpp"

namespace falldet {

struct LossConfig {
  double lambda1 = 1.0;  // weight of the main (fall) loss
  double lambda2 = 0.3;  // weight of the auxiliary activity loss
  double alpha = 0.25;
  double gamma = 2.0;
  enum class Main { focal, bce };
  Main main_loss = Main::focal;

  void validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("LossConfig: lambda weights must be >= 0");
    if (alpha <= 0.0 || alpha >= 1.0) throw ConfigError("LossConfig: alpha must lie in (0, 1)");
    if (gamma < 0.0) throw ConfigError("LossConfig: gamma must be >= 0");
  }
};

// Labels for one mini-batch. When mixup ran, each sample carries a second
// label set and a blending coefficient; the loss is then evaluated on both
// sets and mixed per sample.
struct BatchLabels {
  std::vector<double> y_fall;  // 0/1 per sample
  std::vector<int> y_act;      // 0..5 per sample
  bool mixed = false;
  std::vector<double> y_fall_b;
  std::vector<int> y_act_b;
  std::vector<double> lambda_mix;  // per sample, in (0,1)
};

// Mean focal loss over a batch of probabilities (clamped to [1e-7, 1-1e-7]).
// alpha_t is alpha for positives and 1-alpha for negatives. `weights`, when
// non-empty, scales each sample's contribution (the mean stays over B).
Tensor focal_loss(const Tensor& p, const std::vector<double>& y, double alpha, double gamma,
                  const std::vector<double>& weights = {});

// Mean binary cross-entropy over probabilities, same clamping and weights.
Tensor bce_loss(const Tensor& p, const std::vector<double>& y,
                const std::vector<double>& weights = {});

// Mean categorical cross-entropy from logits (log-sum-exp form).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& y,
                     const std::vector<double>& weights = {});

// lambda1 * main(p_fall) + lambda2 * aux CE. Either head tensor may be
// undefined; its term is then skipped (the aux term additionally requires
// lambda2 > 0). Mixup labels blend both terms per sample.
Tensor composite_loss(const Tensor& p_fall, const Tensor& activity_logits,
                      const BatchLabels& labels, const LossConfig& cfg);

}  // namespace falldet
