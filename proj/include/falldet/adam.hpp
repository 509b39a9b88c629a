#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "falldet/tensor.hpp"

namespace falldet {

// Per-parameter first/second moment estimates keyed by parameter name.
struct AdamState {
  std::int64_t step_count = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

// One bias-corrected Adam update over every trainable (non-frozen) parameter.
// Each such parameter must carry a populated gradient. Frozen parameters are
// left untouched, moments included.
void adam_step(std::map<std::string, Tensor>& params, const std::set<std::string>& frozen,
               AdamState& state);

}  // namespace falldet
