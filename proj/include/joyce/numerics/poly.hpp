#pragma once
// Complex polynomial utilities: evaluation, derivative and root finding
// (Durand-Kerner iteration with Newton polishing), degrees up to 6.

#include <algorithm>
#include <cmath>
#include <vector>

#include "joyce/core.hpp"

namespace joyce {

// Coefficients are stored lowest-degree first: p(x) = sum c[k] x^k.
using Poly = std::vector<cplx>;

inline cplx poly_eval(const Poly& c, const cplx& x) {
  cplx acc{};
  for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * x + *it;
  return acc;
}

inline Poly poly_derivative(const Poly& c) {
  Poly d;
  for (std::size_t k = 1; k < c.size(); ++k) d.push_back(double(k) * c[k]);
  return d;
}

inline std::vector<cplx> poly_roots(Poly c) {
  // strip trailing (leading-coefficient) zeros
  while (!c.empty() && std::abs(c.back()) == 0.0) c.pop_back();
  if (c.empty()) throw DegenerateInput("poly_roots: zero polynomial");
  const int deg = static_cast<int>(c.size()) - 1;
  if (deg == 0) return {};
  if (deg > 6) throw DegenerateInput("poly_roots: degree > 6 unsupported");

  // normalize to monic
  Poly m(c.size());
  for (std::size_t k = 0; k < c.size(); ++k) m[k] = c[k] / c.back();

  // Durand-Kerner from a non-symmetric spiral of initial guesses
  double radius = 0.0;
  for (int k = 0; k < deg; ++k)
    radius = std::max(radius, std::pow(std::abs(m[k]), 1.0 / (deg - k)));
  radius = 2.0 * std::max(radius, 0.5);
  std::vector<cplx> z(deg);
  for (int k = 0; k < deg; ++k) {
    const double th = 2.0 * kPi * k / deg + 0.4;
    z[k] = radius * cplx{std::cos(th), std::sin(th)};
  }
  for (int iter = 0; iter < 500; ++iter) {
    double shift = 0.0;
    for (int i = 0; i < deg; ++i) {
      cplx denom{1.0, 0.0};
      for (int j = 0; j < deg; ++j)
        if (j != i) denom *= (z[i] - z[j]);
      const cplx dz = poly_eval(m, z[i]) / denom;
      z[i] -= dz;
      shift = std::max(shift, std::abs(dz));
    }
    if (shift < 1e-14 * std::max(1.0, radius)) break;
  }

  // Newton polish against the original (un-normalized) polynomial
  const Poly d = poly_derivative(c);
  for (auto& root : z) {
    for (int it = 0; it < 40; ++it) {
      const cplx fv = poly_eval(c, root);
      const cplx dv = poly_eval(d, root);
      if (std::abs(dv) == 0.0) break;  // multiple root: keep DK value
      const cplx step = fv / dv;
      root -= step;
      if (std::abs(step) < 1e-15 * std::max(1.0, std::abs(root))) break;
    }
  }
  std::sort(z.begin(), z.end(), [](const cplx& a, const cplx& b) {
    if (a.real() != b.real()) return a.real() > b.real();
    return a.imag() > b.imag();
  });
  return z;
}

}  // namespace joyce
