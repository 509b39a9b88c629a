#include "falldet/losses.hpp"

#include <cmath>

#include "falldet/ops.hpp"

namespace falldet {

namespace {

constexpr double kProbEps = 1e-7;

using detail::Node;

void check_labels(const Tensor& p, const std::vector<double>& y) {
  if (p.size() != y.size())
    throw DimensionError("loss: " + std::to_string(y.size()) + " labels for " +
                         std::to_string(p.size()) + " scores");
  for (double v : y)
    if (v != 0.0 && v != 1.0)
      throw ContractError("loss: binary label " + std::to_string(v) + " outside {0,1}");
}

std::vector<double> effective_weights(const std::vector<double>& weights, std::size_t n) {
  if (weights.empty()) return std::vector<double>(n, 1.0);
  if (weights.size() != n) throw DimensionError("loss: weight count does not match batch");
  return weights;
}

}  // namespace

Tensor focal_loss(const Tensor& p, const std::vector<double>& y, double alpha, double gamma,
                  const std::vector<double>& weights) {
  check_labels(p, y);
  if (alpha <= 0.0 || alpha >= 1.0) throw ConfigError("focal_loss: alpha must lie in (0, 1)");
  if (gamma < 0.0) throw ConfigError("focal_loss: gamma must be >= 0");
  const std::size_t n = p.size();
  const auto w = effective_weights(weights, n);
  const auto& pv = p.data();

  double total = 0.0;
  std::vector<double> dldp(n);  // d(sum contribution)/dp per sample, before /n
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::min(1.0 - kProbEps, std::max(kProbEps, pv[i]));
    const bool pos = y[i] == 1.0;
    const double pt = pos ? pc : 1.0 - pc;
    const double at = pos ? alpha : 1.0 - alpha;
    const double one_m = 1.0 - pt;
    const double mod = gamma == 0.0 ? 1.0 : std::pow(one_m, gamma);
    total += w[i] * (-at * mod * std::log(pt));
    // d/dpt of -at*(1-pt)^g*log(pt)
    double dpt = -at * (mod / pt);
    if (gamma > 0.0) dpt += at * gamma * std::pow(one_m, gamma - 1.0) * std::log(pt);
    if (pv[i] <= kProbEps || pv[i] >= 1.0 - kProbEps) dpt = 0.0;  // clamp kills the slope
    dldp[i] = w[i] * (pos ? dpt : -dpt);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto pp = p.node_ptr();
  return Tensor(detail::make_op({1}, {total * inv_n}, {pp},
                                [pp, dldp = std::move(dldp), inv_n](Node& self) {
                                  pp->ensure_grad();
                                  const double g = self.grad[0] * inv_n;
                                  for (std::size_t i = 0; i < dldp.size(); ++i)
                                    pp->grad[i] += g * dldp[i];
                                }));
}

Tensor bce_loss(const Tensor& p, const std::vector<double>& y, const std::vector<double>& weights) {
  check_labels(p, y);
  const std::size_t n = p.size();
  const auto w = effective_weights(weights, n);
  const auto& pv = p.data();

  double total = 0.0;
  std::vector<double> dldp(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::min(1.0 - kProbEps, std::max(kProbEps, pv[i]));
    total += w[i] * -(y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc));
    double d = -(y[i] / pc) + (1.0 - y[i]) / (1.0 - pc);
    if (pv[i] <= kProbEps || pv[i] >= 1.0 - kProbEps) d = 0.0;
    dldp[i] = w[i] * d;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto pp = p.node_ptr();
  return Tensor(detail::make_op({1}, {total * inv_n}, {pp},
                                [pp, dldp = std::move(dldp), inv_n](Node& self) {
                                  pp->ensure_grad();
                                  const double g = self.grad[0] * inv_n;
                                  for (std::size_t i = 0; i < dldp.size(); ++i)
                                    pp->grad[i] += g * dldp[i];
                                }));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& y,
                     const std::vector<double>& weights) {
  if (logits.rank() != 2)
    throw DimensionError("cross_entropy: logits must be B x C, got " + shape_str(logits.shape()));
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (y.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(y.size()) + " labels for " +
                         std::to_string(n) + " rows");
  for (int cls : y)
    if (cls < 0 || static_cast<std::size_t>(cls) >= c)
      throw ContractError("cross_entropy: class index " + std::to_string(cls) +
                          " outside [0, " + std::to_string(c) + ")");
  const auto w = effective_weights(weights, n);
  const auto& lv = logits.data();

  double total = 0.0;
  std::vector<double> softmax(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    total += w[i] * (lse - row[static_cast<std::size_t>(y[i])]);
    for (std::size_t j = 0; j < c; ++j) softmax[i * c + j] = std::exp(row[j] - lse);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto pl = logits.node_ptr();
  return Tensor(detail::make_op(
      {1}, {total * inv_n}, {pl},
      [pl, softmax = std::move(softmax), y, w, inv_n, n, c](Node& self) {
        pl->ensure_grad();
        const double g = self.grad[0] * inv_n;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double onehot = static_cast<std::size_t>(y[i]) == j ? 1.0 : 0.0;
            pl->grad[i * c + j] += g * w[i] * (softmax[i * c + j] - onehot);
          }
      }));
}

Tensor composite_loss(const Tensor& p_fall, const Tensor& activity_logits,
                      const BatchLabels& labels, const LossConfig& cfg) {
  cfg.validate();
  auto main_term = [&](const std::vector<double>& y, const std::vector<double>& w) {
    return cfg.main_loss == LossConfig::Main::focal ? focal_loss(p_fall, y, cfg.alpha, cfg.gamma, w)
                                                    : bce_loss(p_fall, y, w);
  };

  Tensor total;
  const bool use_main = p_fall.defined() && cfg.lambda1 != 0.0;
  const bool use_aux = activity_logits.defined() && cfg.lambda2 != 0.0;
  if (!use_main && !use_aux)
    throw ContractError("composite_loss: no loss term active (missing heads or zero weights)");

  if (use_main) {
    Tensor main;
    if (labels.mixed) {
      std::vector<double> wb(labels.lambda_mix.size());
      for (std::size_t i = 0; i < wb.size(); ++i) wb[i] = 1.0 - labels.lambda_mix[i];
      main = ops::add(main_term(labels.y_fall, labels.lambda_mix), main_term(labels.y_fall_b, wb));
    } else {
      main = main_term(labels.y_fall, {});
    }
    total = ops::mul_scalar(main, cfg.lambda1);
  }
  if (use_aux) {
    Tensor aux;
    if (labels.mixed) {
      std::vector<double> wb(labels.lambda_mix.size());
      for (std::size_t i = 0; i < wb.size(); ++i) wb[i] = 1.0 - labels.lambda_mix[i];
      aux = ops::add(cross_entropy(activity_logits, labels.y_act, labels.lambda_mix),
                     cross_entropy(activity_logits, labels.y_act_b, wb));
    } else {
      aux = cross_entropy(activity_logits, labels.y_act, {});
    }
    aux = ops::mul_scalar(aux, cfg.lambda2);
    total = total.defined() ? ops::add(total, aux) : aux;
  }
  return total;
}

}  // namespace falldet
