#pragma once
// Adaptive embedded Runge-Kutta (Dormand-Prince 5(4)) integration of complex
// ODE systems along a real parameter, with blow-up detection.  The parameter
// may trace a piecewise-linear path in the complex plane via an embedding
// supplied by the caller.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "joyce/core.hpp"

namespace joyce {

using StateVec = std::vector<cplx>;

struct OdeOptions {
  double rel_tol = 1e-10;
  double abs_tol = 1e-12;
  double blowup_ceiling = 1e8;  // max-norm ceiling
  double h_init = 1e-3;
  double h_min = 1e-14;
  std::size_t max_steps = 2'000'000;
};

namespace detail {

inline double max_norm(const StateVec& y) {
  double m = 0.0;
  for (const auto& v : y) m = std::max(m, std::abs(v));
  return m;
}

// Dormand-Prince coefficients.
struct Dopri5 {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5,
                          c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                          a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33,
                          a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                          b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695,
                          e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
};

}  // namespace detail

// One Dormand-Prince step.  f(x, y) -> dy/dx.  Returns the 5th-order value
// and an error estimate; also outputs the end-derivative (FSAL k7).
template <typename F>
double dopri5_step(const F& f, double x, const StateVec& y, double h,
                   const StateVec& k1, StateVec& y_out, StateVec& k7_out,
                   double rel_tol, double abs_tol) {
  using D = detail::Dopri5;
  const std::size_t n = y.size();
  StateVec tmp(n);
  auto axpy = [&](std::initializer_list<std::pair<double, const StateVec*>> terms) {
    for (std::size_t i = 0; i < n; ++i) {
      cplx acc = y[i];
      for (const auto& [a, k] : terms) acc += h * a * (*k)[i];
      tmp[i] = acc;
    }
  };
  axpy({{D::a21, &k1}});
  StateVec k2 = f(x + D::c2 * h, tmp);
  axpy({{D::a31, &k1}, {D::a32, &k2}});
  StateVec k3 = f(x + D::c3 * h, tmp);
  axpy({{D::a41, &k1}, {D::a42, &k2}, {D::a43, &k3}});
  StateVec k4 = f(x + D::c4 * h, tmp);
  axpy({{D::a51, &k1}, {D::a52, &k2}, {D::a53, &k3}, {D::a54, &k4}});
  StateVec k5 = f(x + D::c5 * h, tmp);
  axpy({{D::a61, &k1}, {D::a62, &k2}, {D::a63, &k3}, {D::a64, &k4}, {D::a65, &k5}});
  StateVec k6 = f(x + h, tmp);
  y_out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    y_out[i] = y[i] + h * (D::b1 * k1[i] + D::b3 * k3[i] + D::b4 * k4[i] +
                           D::b5 * k5[i] + D::b6 * k6[i]);
  }
  k7_out = f(x + h, y_out);
  double err = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const cplx e = h * (D::e1 * k1[i] + D::e3 * k3[i] + D::e4 * k4[i] +
                        D::e5 * k5[i] + D::e6 * k6[i] + D::e7 * k7_out[i]);
    const double sc =
        abs_tol + rel_tol * std::max(std::abs(y[i]), std::abs(y_out[i]));
    err = std::max(err, std::abs(e) / sc);
  }
  return err;
}

// Adaptive driver from x0 to x1 (real parameter, either direction).
// `on_step(x, y, dydx)` is called at the initial point and after every
// accepted step.  Throws Blowup when the state max-norm exceeds the ceiling.
template <typename F, typename Callback>
void ode_drive(const F& f, double x0, double x1, StateVec y,
               const OdeOptions& opt, Callback&& on_step) {
  const double dir = (x1 >= x0) ? 1.0 : -1.0;
  double x = x0;
  double h = std::min(opt.h_init, std::abs(x1 - x0)) * dir;
  if (h == 0.0) h = dir * opt.h_init;
  StateVec k1 = f(x, y);
  on_step(x, y, k1);
  std::size_t steps = 0;
  while ((x1 - x) * dir > 0.0) {
    if (++steps > opt.max_steps)
      throw NonConvergence("ode_drive: step budget exhausted");
    if ((x + h - x1) * dir > 0.0) h = x1 - x;
    StateVec y_new, k7;
    double err;
    try {
      err = dopri5_step(f, x, y, h, k1, y_new, k7, opt.rel_tol, opt.abs_tol);
    } catch (const Error&) {
      // field evaluation failed inside the trial step; retry smaller
      h *= 0.25;
      if (std::abs(h) < opt.h_min)
        throw Blowup("ode_drive: field evaluation failed at minimal step");
      continue;
    }
    if (err <= 1.0) {
      x += h;
      y = std::move(y_new);
      k1 = std::move(k7);
      if (detail::max_norm(y) > opt.blowup_ceiling)
        throw Blowup("ode_drive: state norm exceeded ceiling");
      on_step(x, y, k1);
      const double grow = 0.9 * std::pow(std::max(err, 1e-10), -0.2);
      h *= std::min(5.0, std::max(0.2, grow));
    } else {
      h *= std::max(0.1, 0.9 * std::pow(err, -0.2));
      if (std::abs(h) < opt.h_min)
        throw NonConvergence("ode_drive: step size underflow");
    }
  }
}

struct OdeSample {
  double x = 0.0;
  StateVec y;
};

// Integrates y' = f(x, y) from x0 to x1 and returns the state at the
// requested sample points (which must be monotone between x0 and x1; the
// endpoints are always included).  Sampling is exact: steps are clamped to
// land on every sample point.
template <typename F>
std::vector<OdeSample> ode_integrate(const F& f, const StateVec& y0, double x0,
                                     double x1,
                                     std::vector<double> sample_points,
                                     const OdeOptions& opt = {}) {
  sample_points.push_back(x1);
  std::sort(sample_points.begin(), sample_points.end());
  if (x1 < x0) std::reverse(sample_points.begin(), sample_points.end());
  std::vector<OdeSample> out;
  out.push_back({x0, y0});
  StateVec y = y0;
  double x = x0;
  for (double target : sample_points) {
    if ((target - x) * (x1 >= x0 ? 1.0 : -1.0) <= 0.0) continue;
    StateVec y_end;
    ode_drive(
        f, x, target, y, opt,
        [&](double xs, const StateVec& ys, const StateVec&) {
          y_end = ys;
          (void)xs;
        });
    x = target;
    y = y_end;
    out.push_back({x, y});
  }
  return out;
}

}  // namespace joyce
