#pragma once
// Central finite-difference directional derivatives on complex domains,
// with one Richardson extrapolation level and an error estimate.

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "joyce/core.hpp"

namespace joyce {

struct FdResult {
  cplx value{};
  double error_estimate = 0.0;
};

namespace detail {

// First directional derivative with step h (no Richardson).
template <typename F>
cplx central_diff1(const F& f, const std::vector<cplx>& x,
                   const std::vector<cplx>& dir, double h) {
  std::vector<cplx> xp = x, xm = x;
  for (size_t i = 0; i < x.size(); ++i) {
    xp[i] += h * dir[i];
    xm[i] -= h * dir[i];
  }
  return (f(xp) - f(xm)) / (2.0 * h);
}

}  // namespace detail

// Mixed directional derivative of order = directions.size() (1..4), computed
// by nesting central differences, with one Richardson level (h and h/2).
template <typename F>
FdResult fd_derivative(const F& f, const std::vector<cplx>& point,
                       const std::vector<std::vector<cplx>>& directions,
                       const Tolerances& tol = {}) {
  const int order = static_cast<int>(directions.size());
  if (order < 1 || order > 4) throw DegenerateInput("fd_derivative: order must be 1..4");
  // Balance O(h^4) truncation (after Richardson) against roundoff/noise
  // amplification ~ noise / h^order: h* ~ noise^(1/(order+4)).
  const double h0 = std::max(tol.fd_step, std::pow(1e-13, 1.0 / (order + 4.0)));
  if (h0 / 2.0 < 1e-8)
    throw StepUnderflow("fd_derivative: step below 1e-8");

  // Recursive nested central difference in the given directions.
  std::function<cplx(const std::vector<cplx>&, int, double)> nested =
      [&](const std::vector<cplx>& x, int k, double h) -> cplx {
    if (k == order) return f(x);
    auto g = [&](const std::vector<cplx>& y) { return nested(y, k + 1, h); };
    return detail::central_diff1(g, x, directions[k], h);
  };

  const cplx d_h = nested(point, 0, h0);
  const cplx d_h2 = nested(point, 0, h0 / 2.0);
  // central differences have O(h^2) error: Richardson with factor 4/3.
  const cplx extrap = (4.0 * d_h2 - d_h) / 3.0;
  return {extrap, std::abs(d_h2 - d_h) / 3.0};
}

// Convenience scalar-domain wrapper.
template <typename F>
FdResult fd_derivative_1d(const F& f, cplx point, cplx direction, int order,
                          const Tolerances& tol = {}) {
  std::vector<std::vector<cplx>> dirs(order, std::vector<cplx>{direction});
  auto g = [&](const std::vector<cplx>& x) { return f(x[0]); };
  return fd_derivative(g, {point}, dirs, tol);
}

}  // namespace joyce
