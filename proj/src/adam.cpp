#include "falldet/adam.hpp"

#include <cmath>

namespace falldet {

void adam_step(std::map<std::string, Tensor>& params, const std::set<std::string>& frozen,
               AdamState& state) {
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));

  for (auto& [name, param] : params) {
    if (frozen.count(name)) continue;
    if (!param.requires_grad()) continue;
    const auto& g = param.grad();
    if (g.empty())
      throw ContractError("adam_step: missing gradient for trainable parameter '" + name + "'");

    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) m.assign(param.size(), 0.0);
    if (v.empty()) v.assign(param.size(), 0.0);
    if (m.size() != param.size() || v.size() != param.size())
      throw ContractError("adam_step: moment arrays for '" + name +
                          "' are not shape-congruent with the parameter");

    auto& w = param.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

}  // namespace falldet
