#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "unips/numkit/nn.hpp"
#include "unips/numkit/rng.hpp"

namespace unips::nk {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
};

/// Compares analytic gradients of `loss()` with respect to `params` against
/// central finite differences at `n_probe` randomly chosen coordinates
/// (all coordinates when n_probe <= 0). Relative error uses
/// |a - n| / max(|a| + |n|, floor).
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& loss, ParamList<double> params,
                                  std::uint64_t seed, int n_probe = -1, double step = 1e-5,
                                  double floor = 1e-6) {
  for (auto& p : params) p.tensor->zero_grad();
  loss().backward();
  struct Coord {
    std::size_t param;
    std::size_t index;
  };
  std::vector<Coord> coords;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < static_cast<std::size_t>(params[k].tensor->numel()); ++i) coords.push_back({k, i});
  Rng rng(seed);
  if (n_probe > 0 && static_cast<std::size_t>(n_probe) < coords.size()) {
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(static_cast<std::size_t>(n_probe));
  }
  std::vector<double> analytic;
  for (const auto& c : coords) {
    auto* t = params[c.param].tensor;
    analytic.push_back(t->has_grad() ? t->grad()[c.index] : 0.0);
  }
  GradCheckResult res;
  NoGradGuard guard;
  for (std::size_t j = 0; j < coords.size(); ++j) {
    auto x = params[coords[j].param].tensor->data();
    const double orig = x[coords[j].index];
    x[coords[j].index] = orig + step;
    const double fp = loss().item();
    x[coords[j].index] = orig - step;
    const double fm = loss().item();
    x[coords[j].index] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double rel = std::abs(analytic[j] - numeric) / std::max(std::abs(analytic[j]) + std::abs(numeric), floor);
    res.max_rel_error = std::max(res.max_rel_error, rel);
    ++res.checked;
  }
  return res;
}

}  // namespace unips::nk
