#pragma once

// Central finite differences on a 64-bit copy of the inputs, compared with
// the 32-bit reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "fairdistill/tensor.hpp"

namespace fd::testing {

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst;  // "input[i] element j"
  std::size_t checked = 0;
};

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng,
                                         double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Relative error against the reference gradient, with the denominator floored
// at floor_frac * max|reference| over the same tensor.
inline double rel_err(double analytic, double reference, double floor) {
  return std::abs(analytic - reference) / std::max(std::abs(reference), floor);
}

// f maps a vector of tensors (float or double) to a scalar tensor. When
// max_elems_per_input is nonzero, only that many evenly spaced entries of
// each input are checked.
template <typename F>
GradCheckResult check_gradients(F f, const std::vector<Shape>& shapes,
                                const std::vector<std::vector<double>>& values,
                                double h = 1e-3, double floor_frac = 1e-2,
                                std::size_t max_elems_per_input = 0) {
  std::vector<Tensor> xs;
  for (std::size_t i = 0; i < shapes.size(); ++i)
    xs.emplace_back(shapes[i], std::vector<float>(values[i].begin(), values[i].end()),
                    true);
  f(xs).backward();

  GradCheckResult r;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    std::vector<Tensor64> xd;
    for (std::size_t k = 0; k < shapes.size(); ++k) xd.emplace_back(shapes[k], values[k]);
    const std::size_t n = values[i].size();
    const std::size_t stride =
        max_elems_per_input && n > max_elems_per_input ? n / max_elems_per_input : 1;
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < n; j += stride) idx.push_back(j);
    std::vector<double> ref(idx.size());
    for (std::size_t t = 0; t < idx.size(); ++t) {
      auto data = xd[i].mutable_data();
      const double orig = data[idx[t]];
      data[idx[t]] = orig + h;
      const double fp = f(xd).item();
      data[idx[t]] = orig - h;
      const double fm = f(xd).item();
      data[idx[t]] = orig;
      ref[t] = (fp - fm) / (2 * h);
    }
    double max_ref = 0;
    for (double g : ref) max_ref = std::max(max_ref, std::abs(g));
    const double floor = std::max(floor_frac * max_ref, 1e-7);
    const auto analytic = xs[i].grad();
    for (std::size_t t = 0; t < idx.size(); ++t) {
      const double e = rel_err(analytic[idx[t]], ref[t], floor);
      ++r.checked;
      if (e > r.max_rel_err) {
        r.max_rel_err = e;
        r.worst = "input[" + std::to_string(i) + "] element " + std::to_string(idx[t]);
      }
    }
  }
  return r;
}

}  // namespace fd::testing
