#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lcp/params.hpp"
#include "lcp/rng.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

struct GradCheckEntry {
  std::string name;
  double max_rel = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel = 0.0;
};

// Compare analytic gradients against central finite differences in 64-bit.
//
// `loss` must be a pure function of the parameter store (any internal
// randomness pinned).  `analytic` aligns with params.items.  For each
// tensor, `per_tensor` coordinates are probed (all when 0).  The relative
// error uses a denominator floor: differential rounding noise in the loss
// (~1e-11 here) makes an unfloored ratio meaningless for near-zero
// gradient entries; the floor plays the role of an absolute tolerance of
// floor x rel_tol.
inline GradCheckReport grad_check(
    const std::function<double(const ParamStore<double>&)>& loss,
    ParamStore<double>& params, const std::vector<Tensor<double>>& analytic,
    double h, std::size_t per_tensor, Rng& rng, double floor = 1e-3) {
  GradCheckReport report;
  for (std::size_t ti = 0; ti < params.items.size(); ++ti) {
    auto& [name, tensor] = params.items[ti];
    GradCheckEntry entry;
    entry.name = name;
    std::vector<std::size_t> coords;
    if (per_tensor == 0 || per_tensor >= tensor.numel()) {
      coords.resize(tensor.numel());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      for (std::size_t k = 0; k < per_tensor; ++k)
        coords.push_back(static_cast<std::size_t>(
            rng.next_below(tensor.numel())));
    }
    for (std::size_t j : coords) {
      const double orig = tensor.data[j];
      tensor.data[j] = orig + h;
      const double fp = loss(params);
      tensor.data[j] = orig - h;
      const double fm = loss(params);
      tensor.data[j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[ti].data[j];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), floor});
      entry.max_rel = std::max(entry.max_rel, rel);
      ++entry.checked;
    }
    report.max_rel = std::max(report.max_rel, entry.max_rel);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace lcp
