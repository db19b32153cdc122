#pragma once

// Shared helpers for the test binaries: random tensors and an independent
// central-difference oracle (does not go through amil::autograd::gradcheck).

#include <cmath>
#include <functional>
#include <vector>

#include "amil/autograd.hpp"
#include "amil/rng.hpp"

namespace amil::testing {

namespace ag = amil::autograd;

inline ag::Tensor random_tensor(Rng& rng, ag::Shape shape, double lo = -1.0, double hi = 1.0,
                                bool requires_grad = true) {
  std::vector<double> v(ag::numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return ag::Tensor(std::move(shape), std::move(v), requires_grad);
}

/// d f / d x by central differences, perturbing x in place.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, ag::Tensor& x, double h = 1e-5) {
  auto values = x.mutable_data();
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f();
    values[i] = saved - h;
    const double down = f();
    values[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                                 double floor = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

/// Projects a tensor onto a fixed random direction so every output element
/// contributes to the scalar under test.
inline double weighted_sum(const ag::Tensor& y, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

}  // namespace amil::testing
