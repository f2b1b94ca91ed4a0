#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "epd/params.hpp"
#include "epd/tensor.hpp"

namespace epd {

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool pass = false;
};

// Central-difference check of an analytic gradient. loss_fn must read the
// (temporarily perturbed) params and be deterministic; grads holds the
// analytic gradient for every entry of params.
inline FiniteDiffReport finite_diff_check(ParamStore& params,
                                          const std::function<double()>& loss_fn,
                                          const ParamStore& grads, double step,
                                          double tolerance) {
  if (!(step > 0.0) || step > 1e-3)
    throw NumericError("finite_diff_check: step must be in (0, 1e-3]");
  FiniteDiffReport rep;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params.item(i);
    const Tensor& g = grads.at(name);
    require_same_shape(p, g, "finite_diff_check");
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double saved = p.data[j];
      p.data[j] = saved + step;
      const double lp = loss_fn();
      p.data[j] = saved - step;
      const double lm = loss_fn();
      p.data[j] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw NumericError("finite_diff_check: non-finite loss when perturbing '" +
                           name + "'[" + std::to_string(j) + "] by " +
                           std::to_string(step));
      const double gfd = (lp - lm) / (2.0 * step);
      const double gad = g.data[j];
      const double rel = std::fabs(gad - gfd) /
                         std::max({std::fabs(gad), std::fabs(gfd), 1e-8});
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = name;
        rep.worst_index = j;
      }
    }
  }
  rep.pass = rep.max_rel_error < tolerance;
  return rep;
}

}  // namespace epd
