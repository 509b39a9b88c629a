#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "falldet/tensor.hpp"

namespace falldet {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::size_t checked_coords = 0;
  std::string worst_coord;  // "tensor <i> index <j>"
};

// Compares reverse-mode gradients of a scalar-valued tensor program against
// central finite differences at `point`. The program is re-evaluated with
// single coordinates perturbed by +/-epsilon; at least `min_samples`
// coordinates are sampled (all of them when fewer exist). The program must be
// deterministic across calls: re-seed any internal rng per invocation.
GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& program,
                           std::vector<Tensor> point, double epsilon = 1e-4,
                           double tolerance = 1e-3, std::size_t min_samples = 100,
                           std::uint64_t seed = 0);

}  // namespace falldet
