#include "falldet/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "falldet/rng.hpp"

namespace falldet {

GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& program,
                           std::vector<Tensor> point, double epsilon, double tolerance,
                           std::size_t min_samples, std::uint64_t seed) {
  // leaves must be differentiable for the analytic pass
  for (auto& p : point)
    if (!p.requires_grad())
      throw ContractError("grad_check: every point tensor must require gradients");

  for (auto& p : point) p.zero_grad();
  std::vector<double> analytic;
  {
    Tensor root = program(point);
    if (root.size() != 1)
      throw ContractError("grad_check: program must be scalar-valued, got " +
                          shape_str(root.shape()));
    if (!std::isfinite(root.value()))
      throw NumericError("grad_check: program is non-finite at the base point");
    root.backward();
    for (const auto& p : point)
      analytic.insert(analytic.end(), p.grad().begin(), p.grad().end());
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;  // (tensor, element)
  for (std::size_t ti = 0; ti < point.size(); ++ti)
    for (std::size_t ei = 0; ei < point[ti].size(); ++ei) coords.emplace_back(ti, ei);

  Rng rng(mix_seed(seed, 0x6c6f));
  if (coords.size() > min_samples) {
    rng.shuffle(coords);
    coords.resize(min_samples);
  }

  auto eval = [&](std::size_t ti, std::size_t ei, double delta) {
    auto& data = point[ti].mutable_data();
    const double saved = data[ei];
    data[ei] = saved + delta;
    double v;
    {
      NoGradGuard ng;
      v = program(point).value();
    }
    data[ei] = saved;
    if (!std::isfinite(v))
      throw NumericError("grad_check: non-finite evaluation at tensor " + std::to_string(ti) +
                         " index " + std::to_string(ei));
    return v;
  };

  GradCheckReport report;
  report.checked_coords = coords.size();
  std::size_t flat_offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : point) {
    offsets.push_back(flat_offset);
    flat_offset += p.size();
  }

  for (const auto& [ti, ei] : coords) {
    const double plus = eval(ti, ei, epsilon);
    const double minus = eval(ti, ei, -epsilon);
    const double numeric = (plus - minus) / (2.0 * epsilon);
    const double a = analytic[offsets[ti] + ei];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_coord = "tensor " + std::to_string(ti) + " index " + std::to_string(ei);
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace falldet
