#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cpdet/errors.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// Central-difference gradient verification. The builder must reconstruct the
// whole forward graph from the current leaf values on every call; any data-
// dependent discrete choices (matching, top-k, assignments) must be baked in
// as constants by the caller so perturbed evaluations stay on the same branch.
// Runs in 64-bit only; returns the max over all leaf coordinates of
// |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                         std::vector<Tensor<double>>& leaves, double h = 1e-4) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }

  Tensor<double> loss = f(leaves);
  if (loss.numel() != 1) throw ContractError("grad_check builder must return a scalar");
  if (!std::isfinite(loss.item())) throw NumericError("grad_check loss is not finite");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) analytic.push_back(leaf.grad());

  double max_err = 0.0;
  {
    NoGradGuard ng;
    for (size_t li = 0; li < leaves.size(); ++li) {
      auto& vals = leaves[li].data();
      for (size_t i = 0; i < vals.size(); ++i) {
        double saved = vals[i];
        vals[i] = saved + h;
        double lp = f(leaves).item();
        vals[i] = saved - h;
        double lm = f(leaves).item();
        vals[i] = saved;
        if (!std::isfinite(lp) || !std::isfinite(lm))
          throw NumericError("grad_check produced a non-finite perturbed loss");
        double fd = (lp - lm) / (2.0 * h);
        double a = analytic[li][i];
        double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
        if (err > max_err) max_err = err;
      }
    }
  }
  return max_err;
}

}  // namespace cpdet
