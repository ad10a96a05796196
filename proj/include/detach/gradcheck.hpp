#pragma once

#include <functional>
#include <string>
#include <vector>

#include "detach/params.hpp"
#include "detach/rng.hpp"

namespace detach {
namespace nn {

struct GradCheckEntry {
  std::string param;
  int64_t coord;
  double analytic;
  double numeric;
  double rel_error;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  int64_t coords_checked = 0;
  bool pass(double tol) const { return max_rel_error < tol; }
};

// Central-difference oracle against the analytic gradients. `f(params,
// want_grad)` returns the scalar loss; when want_grad it must zero the grad
// buffers and fill them. Coordinates are subsampled for large tensors
// (at least min_coords per tensor). The loss is evaluated twice up front; a
// mismatch means nondeterminism and aborts the check.
inline GradCheckReport finite_difference_check(
    ParamSet<double>& params, const std::function<double(ParamSet<double>&, bool)>& f,
    double eps = 1e-5, int64_t min_coords = 32, uint64_t coord_seed = 0) {
  double l1 = f(params, false);
  double l2 = f(params, false);
  if (l1 != l2)
    throw std::runtime_error("finite_difference_check: loss is nondeterministic (" +
                             std::to_string(l1) + " vs " + std::to_string(l2) + ")");
  f(params, true);  // fill analytic grads
  // snapshot analytic grads before perturbing
  std::unordered_map<std::string, Tensor<double>> analytic;
  for (auto& name : params.order) analytic[name] = params.grads.at(name);

  GradCheckReport report;
  Rng rng(coord_seed ^ 0x5bd1e995u);
  for (auto& name : params.order) {
    Tensor<double>& t = params.value(name);
    int64_t n = t.size();
    std::vector<int64_t> coords;
    if (n <= min_coords) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::vector<int64_t> all(size_t(n), 0);
      for (int64_t i = 0; i < n; ++i) all[size_t(i)] = i;
      rng.shuffle(all);
      coords.assign(all.begin(), all.begin() + min_coords);
    }
    for (int64_t c : coords) {
      double orig = t.data[size_t(c)];
      t.data[size_t(c)] = orig + eps;
      double lp = f(params, false);
      t.data[size_t(c)] = orig - eps;
      double lm = f(params, false);
      t.data[size_t(c)] = orig;
      double numeric = (lp - lm) / (2.0 * eps);
      double a = analytic[name].data[size_t(c)];
      double scale = std::max(std::max(std::abs(a), std::abs(numeric)), 1e-6);
      double rel = std::abs(a - numeric) / scale;
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = {name, c, a, numeric, rel};
      }
    }
  }
  return report;
}

}  // namespace nn
}  // namespace detach
