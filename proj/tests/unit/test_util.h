#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "geclip/tensor/tensor.h"

namespace geclip::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng,
                            Real lo = -1.0, Real hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<Real> u(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (Real& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Elementwise relative error with a small absolute floor on the denominator
// so that near-zero gradients do not dominate.
inline Real max_rel_err(std::span<const Real> a, std::span<const Real> b,
                        Real floor = 1e-3) {
  Real worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline Real max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  Real worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace geclip::testing
