#pragma once
// Weierstrass elliptic layer: half-periods by complex AGM on root
// differences, p/p'/zeta evaluation by lattice reduction + Laurent series +
// duplication, quasi-periods, and the Abel map (X,Y) -> u.

#include <array>
#include <cmath>
#include <vector>

#include "joyce/core.hpp"
#include "joyce/numerics/poly.hpp"

namespace joyce {

struct EllipticData {
  cplx g2{};
  cplx g3{};
  cplx omega1{};  // half-period
  cplx omega2{};  // half-period, Im(omega2/omega1) > 0
  cplx eta1{};    // zeta(omega1)
  cplx eta2{};    // zeta(omega2)
  std::array<cplx, 3> roots{};  // e1,e2,e3 of 4x^3-g2x-g3, sorted
};

struct WeierstrassValues {
  cplx p{};   // p(u)
  cplx dp{};  // p'(u)
  cplx z{};   // zeta(u)
};

namespace elliptic_detail {

inline cplx agm(cplx a, cplx b) {
  for (int it = 0; it < 80; ++it) {
    const cplx a1 = 0.5 * (a + b);
    cplx b1 = std::sqrt(a * b);
    // principal AGM branch: |a1 - b1| <= |a1 + b1|, ties by Im(b1/a1) > 0
    if (std::abs(a1 - b1) > std::abs(a1 + b1) ||
        (std::abs(std::abs(a1 - b1) - std::abs(a1 + b1)) <
             1e-14 * std::abs(a1 + b1) &&
         (b1 / a1).imag() < 0.0))
      b1 = -b1;
    a = a1;
    b = b1;
    if (std::abs(a - b) < 1e-16 * std::abs(a)) break;
  }
  return a;
}

// Laurent-series coefficients c_k of p(u) = u^-2 + sum_{k>=2} c_k u^{2k-2}.
inline std::array<cplx, 14> laurent_coeffs(const cplx& g2, const cplx& g3) {
  std::array<cplx, 14> c{};
  c[2] = g2 / 20.0;
  c[3] = g3 / 28.0;
  for (int k = 4; k < 14; ++k) {
    cplx s{};
    for (int m = 2; m <= k - 2; ++m) s += c[m] * c[k - m];
    c[k] = 3.0 * s / ((2.0 * k + 1.0) * (k - 3.0));
  }
  return c;
}

// Series evaluation valid for small |u| (relative to the lattice).
inline WeierstrassValues series_eval(const cplx& u, const cplx& g2,
                                     const cplx& g3) {
  const auto c = laurent_coeffs(g2, g3);
  const cplx u2 = u * u;
  cplx P = 1.0 / u2, dP = -2.0 / (u2 * u), Z = 1.0 / u;
  cplx upow = u2;  // u^{2k-2} for k=2
  for (int k = 2; k < 14; ++k) {
    P += c[k] * upow;
    dP += (2.0 * k - 2.0) * c[k] * upow / u;
    Z -= c[k] * upow * u / (2.0 * k - 1.0);
    upow *= u2;
  }
  return {P, dP, Z};
}

inline WeierstrassValues duplicate(const WeierstrassValues& w, const cplx& g2) {
  const cplx P2nd = 6.0 * w.p * w.p - 0.5 * g2;  // p''
  const cplx lam = P2nd / (2.0 * w.dp);
  WeierstrassValues out;
  out.p = lam * lam - 2.0 * w.p;
  out.dp = P2nd * (12.0 * w.p * w.dp * w.dp - P2nd * P2nd) /
               (4.0 * w.dp * w.dp * w.dp) -
           w.dp;
  out.z = 2.0 * w.z + lam;
  return out;
}

// Series + repeated duplication; |u| must already be bounded by the caller
// (no lattice reduction here).  `scale` is a lattice size scale.
inline WeierstrassValues eval_by_duplication(cplx u, const cplx& g2,
                                             const cplx& g3, double scale) {
  int halvings = 0;
  cplx v = u;
  while (std::abs(v) > 0.35 * scale && halvings < 40) {
    v *= 0.5;
    ++halvings;
  }
  WeierstrassValues w = series_eval(v, g2, g3);
  for (int i = 0; i < halvings; ++i) w = duplicate(w, g2);
  return w;
}

}  // namespace elliptic_detail

inline std::array<cplx, 3> weierstrass_roots(const cplx& g2, const cplx& g3) {
  const cplx disc = g2 * g2 * g2 - 27.0 * g3 * g3;
  if (std::abs(disc) < 1e-14 * std::max({std::abs(g2 * g2 * g2), 1e-30}))
    throw SingularCurve("vanishing discriminant g2^3 - 27 g3^2");
  auto roots = poly_roots({-g3, -g2, 0.0, 4.0});
  // poly_roots sorts by descending real part, ties by descending imag.
  return {roots[0], roots[1], roots[2]};
}

inline EllipticData half_periods(const cplx& g2, const cplx& g3) {
  using namespace elliptic_detail;
  EllipticData ed;
  ed.g2 = g2;
  ed.g3 = g3;
  ed.roots = weierstrass_roots(g2, g3);
  const cplx e1 = ed.roots[0], e2 = ed.roots[1], e3 = ed.roots[2];
  ed.omega1 = kPi / (2.0 * agm(std::sqrt(e1 - e3), std::sqrt(e1 - e2)));
  ed.omega2 = kI * kPi / (2.0 * agm(std::sqrt(e1 - e3), std::sqrt(e2 - e3)));
  if ((ed.omega2 / ed.omega1).imag() < 0.0) ed.omega2 = -ed.omega2;

  const double scale =
      std::min(std::abs(2.0 * ed.omega1), std::abs(2.0 * ed.omega2));
  auto zeta_at = [&](const cplx& w) {
    return eval_by_duplication(w, g2, g3, scale).z;
  };
  // Candidate bases (omega1, omega2 + k omega1); pick the one satisfying the
  // Legendre relation, which certifies a genuine oriented lattice basis.
  for (int k : {0, 1, -1, 2, -2}) {
    cplx w2 = ed.omega2 + double(k) * ed.omega1;
    if ((w2 / ed.omega1).imag() < 0.0) continue;
    const cplx h1 = zeta_at(ed.omega1);
    const cplx h2 = zeta_at(w2);
    const cplx leg = h1 * w2 - h2 * ed.omega1;
    if (std::abs(leg - kI * kPi / 2.0) < 1e-8) {
      ed.omega2 = w2;
      ed.eta1 = h1;
      ed.eta2 = (h1 * w2 - kI * kPi / 2.0) / ed.omega1;
      return ed;
    }
  }
  throw NonConvergence("half_periods: could not certify a lattice basis");
}

namespace elliptic_detail {

// Gauss-reduces the basis (a, b); returns reduced basis.
inline std::pair<cplx, cplx> reduce_basis(cplx a, cplx b) {
  for (int it = 0; it < 64; ++it) {
    if (std::abs(a) < std::abs(b)) std::swap(a, b);
    const double mu =
        (a.real() * b.real() + a.imag() * b.imag()) / std::norm(b);
    const double k = std::round(mu);
    if (k == 0.0) break;
    a -= k * b;
  }
  return {a, b};
}

// integer coordinates of lattice vector L = 2 m omega1 + 2 n omega2
inline std::pair<double, double> lattice_coords(const cplx& L, const cplx& w1,
                                                const cplx& w2) {
  const double det = w1.real() * w2.imag() - w1.imag() * w2.real();
  const double m = (L.real() * w2.imag() - L.imag() * w2.real()) / det;
  const double n = (w1.real() * L.imag() - w1.imag() * L.real()) / det;
  return {m, n};
}

}  // namespace elliptic_detail

// Reduces u modulo the period lattice to a small representative; returns the
// representative and the integer lattice coordinates (m, n) of the removed
// vector u - u_red = 2 m omega1 + 2 n omega2.
inline std::tuple<cplx, long, long> lattice_reduce(const cplx& u,
                                                   const EllipticData& ed) {
  using namespace elliptic_detail;
  const cplx W1 = 2.0 * ed.omega1, W2 = 2.0 * ed.omega2;
  auto [r1, r2] = reduce_basis(W1, W2);
  cplx v = u;
  for (int pass = 0; pass < 8; ++pass) {
    bool moved = false;
    for (const cplx& w : {r1, r2}) {
      const double proj =
          (v.real() * w.real() + v.imag() * w.imag()) / std::norm(w);
      const double k = std::round(proj);
      if (k != 0.0) {
        v -= k * w;
        moved = true;
      }
    }
    if (!moved) break;
  }
  // local search for the minimal representative
  cplx best = v;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j) {
      const cplx cand = v - double(i) * r1 - double(j) * r2;
      if (std::abs(cand) < std::abs(best)) best = cand;
    }
  auto [m, n] = lattice_coords(u - best, W1, W2);
  const long mi = std::lround(m), ni = std::lround(n);
  return {best, mi, ni};
}

inline WeierstrassValues weierstrass_eval(const cplx& u,
                                          const EllipticData& ed) {
  auto [v, m, n] = lattice_reduce(u, ed);
  const double scale =
      std::min(std::abs(2.0 * ed.omega1), std::abs(2.0 * ed.omega2));
  if (std::abs(v) < 1e-9)
    throw LatticePoint("weierstrass_eval: u on the period lattice");
  WeierstrassValues w =
      elliptic_detail::eval_by_duplication(v, ed.g2, ed.g3, scale);
  w.z += 2.0 * double(m) * ed.eta1 + 2.0 * double(n) * ed.eta2;
  return w;
}

// Abel map: finds u with p(u) = X, p'(u) = Y.  Grid seed + Newton.
inline cplx abel_map(const cplx& X, const cplx& Y, const EllipticData& ed) {
  const cplx curve = Y * Y - (4.0 * X * X * X - ed.g2 * X - ed.g3);
  const double curve_scale =
      std::max({std::abs(Y * Y), std::abs(4.0 * X * X * X), 1.0});
  if (std::abs(curve) > 1e-8 * curve_scale)
    throw OffCurve("abel_map: point does not satisfy the Weierstrass cubic");

  auto newton = [&](cplx u) -> cplx {
    for (int it = 0; it < 60; ++it) {
      WeierstrassValues w;
      try {
        w = weierstrass_eval(u, ed);
      } catch (const LatticePoint&) {
        return cplx{1e30, 1e30};
      }
      const cplx fu = w.p - X;
      if (std::abs(w.dp) < 1e-13) break;
      const cplx du = fu / w.dp;
      u -= du;
      if (std::abs(du) < 1e-13 * std::max(1.0, std::abs(u))) break;
    }
    return u;
  };

  cplx best{};
  double best_res = 1e300;
  auto consider = [&](cplx seed) {
    const cplx u = newton(seed);
    if (std::abs(u) > 1e20) return;
    WeierstrassValues w;
    try {
      w = weierstrass_eval(u, ed);
    } catch (const LatticePoint&) {
      return;
    }
    const double res = std::abs(w.p - X) / std::max(1.0, std::abs(X)) +
                       std::abs(w.dp - Y) / std::max(1.0, std::abs(Y));
    if (res < best_res) {
      best_res = res;
      best = u;
    }
    // also try the parity partner
    const double res_m = std::abs(w.p - X) / std::max(1.0, std::abs(X)) +
                         std::abs(-w.dp - Y) / std::max(1.0, std::abs(Y));
    if (res_m < best_res) {
      best_res = res_m;
      best = -u;
    }
  };
  // asymptotic seeds near the lattice point: p(u) ~ 1/u^2 for large |X|, so
  // u ~ +-1/sqrt(X) (the grid below cannot resolve this region)
  if (std::abs(X) > 25.0) {
    const cplx u0 = 1.0 / std::sqrt(X);
    consider(u0);
    if (best_res > 1e-11) consider(-u0);
  }
  const int N = 14;
  for (int i = 0; i < N && best_res > 1e-11; ++i)
    for (int j = 0; j < N && best_res > 1e-11; ++j)
      consider(2.0 * ed.omega1 * ((i + 0.5) / N) +
               2.0 * ed.omega2 * ((j + 0.5) / N));
  if (best_res > 1e-7)
    throw NonConvergence("abel_map: Newton search failed to converge");
  auto [v, m, n] = lattice_reduce(best, ed);
  (void)m;
  (void)n;
  return v;
}

}  // namespace joyce
