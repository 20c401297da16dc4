#pragma once
// Pencils of flat connections for the three Painleve families: Higgs field,
// reference connection, deformation matrices, the gauge transform to a scalar
// oper potential, apparent-singularity checks, the extended isomonodromic
// vector fields, flow integration with pole-chart switching, and local
// analysis of movable poles.

#include <array>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "joyce/core.hpp"
#include "joyce/families.hpp"
#include "joyce/numerics/fd.hpp"
#include "joyce/numerics/ode.hpp"

namespace joyce {

// ---------------------------------------------------------------------------
// 2x2 complex matrices
// ---------------------------------------------------------------------------
struct Matrix2 {
  cplx m[2][2]{};

  cplx trace() const { return m[0][0] + m[1][1]; }
  cplx det() const { return m[0][0] * m[1][1] - m[0][1] * m[1][0]; }
  double max_norm() const {
    double v = 0.0;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) v = std::max(v, std::abs(m[i][j]));
    return v;
  }
};

inline Matrix2 operator+(const Matrix2& a, const Matrix2& b) {
  Matrix2 c;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) c.m[i][j] = a.m[i][j] + b.m[i][j];
  return c;
}

inline Matrix2 operator-(const Matrix2& a, const Matrix2& b) {
  Matrix2 c;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) c.m[i][j] = a.m[i][j] - b.m[i][j];
  return c;
}

inline Matrix2 operator*(const Matrix2& a, const Matrix2& b) {
  Matrix2 c;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      c.m[i][j] = a.m[i][0] * b.m[0][j] + a.m[i][1] * b.m[1][j];
  return c;
}

inline Matrix2 operator*(const cplx& s, const Matrix2& a) {
  Matrix2 c;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) c.m[i][j] = s * a.m[i][j];
  return c;
}

inline Matrix2 commutator(const Matrix2& a, const Matrix2& b) {
  return a * b - b * a;
}

// ---------------------------------------------------------------------------
// Higgs field, pencil, deformation matrix
// ---------------------------------------------------------------------------

// Traceless Higgs field Phi(x); satisfies (1/2) tr Phi(x)^2 = Q0(x).
inline Matrix2 higgs_matrix(const FiberPoint& fp, cplx x) {
  const BasePoint& b = fp.base;
  Matrix2 A;
  switch (b.family) {
    case FamilyId::PI: {
      A.m[0][0] = fp.p;
      A.m[0][1] = x - fp.q;
      A.m[1][0] = x * x + x * fp.q + fp.q * fp.q + b.t;
      A.m[1][1] = -fp.p;
      break;
    }
    case FamilyId::PII: {
      const cplx w = b.t - 2.0 * fp.p + 2.0 * fp.q * fp.q;
      A.m[0][0] = x * x + fp.p - fp.q * fp.q;
      A.m[0][1] = x - fp.q;
      A.m[1][0] = (x + fp.q) * w - 2.0 * b.alpha;
      A.m[1][1] = -A.m[0][0];
      break;
    }
    case FamilyId::PIII3: {
      if (std::abs(x) < 1e-12 || std::abs(fp.q) < 1e-12)
        throw PoleHit("higgs_matrix: evaluation at a pole of the connection");
      A.m[0][0] = fp.p * fp.q / x;
      A.m[0][1] = (x - fp.q) / (x * x);
      A.m[1][0] = (b.t * x - 1.0 / fp.q) / x;
      A.m[1][1] = -A.m[0][0];
      break;
    }
  }
  return A;
}

// The pencil A_eps = A_inf + Phi/eps.  Equivalently Phi/eps evaluated with
// the shifted fiber data p -> p + eps*r (PI, PII; p -> p + eps*r/q for
// PIII3) and alpha -> alpha + eps*(s + 1/2) (PII).
inline Matrix2 pencil_matrix(const FiberPoint& fp, cplx x) {
  FiberPoint sh = fp;
  switch (fp.base.family) {
    case FamilyId::PI:
      sh.p += fp.epsilon * fp.r;
      break;
    case FamilyId::PII:
      sh.p += fp.epsilon * fp.r;
      sh.base.alpha += fp.epsilon * (fp.s + 0.5);
      break;
    case FamilyId::PIII3:
      if (std::abs(fp.q) < 1e-12)
        throw PoleHit("pencil_matrix: q at the pole of the connection");
      sh.p += fp.epsilon * fp.r / fp.q;
      break;
  }
  return (1.0 / fp.epsilon) * higgs_matrix(sh, x);
}

// Deformation matrix B_eps generating the time flow.
inline Matrix2 deformation_matrix(const FiberPoint& fp, cplx x) {
  const BasePoint& b = fp.base;
  const cplx e = fp.epsilon;
  Matrix2 B;
  switch (b.family) {
    case FamilyId::PI: {
      B.m[0][1] = 1.0 / e;
      B.m[1][0] = (x + 2.0 * fp.q) / e;
      break;
    }
    case FamilyId::PII: {
      B.m[0][0] = (fp.q + x) / (2.0 * e);
      B.m[0][1] = 1.0 / (2.0 * e);
      B.m[1][0] = -fp.r + (-2.0 * fp.p + 2.0 * fp.q * fp.q + b.t) / (2.0 * e);
      B.m[1][1] = -(fp.q + x) / (2.0 * e);
      break;
    }
    case FamilyId::PIII3: {
      const cplx d = (fp.p * fp.q + e * fp.r) / (e * b.t);
      B.m[0][0] = d;
      B.m[0][1] = 1.0 / (e * b.t);
      B.m[1][0] = x / e;
      B.m[1][1] = -d;
      break;
    }
  }
  return B;
}

// ---------------------------------------------------------------------------
// Oper potential
// ---------------------------------------------------------------------------

// Scalar potential of the oper obtained from the pencil by the singular
// gauge transform built from A_12(x)^{1/2}:
//   Q = A11^2 + A12*A21 + A11' - A11*(A12'/A12)
//       + (3/4)(A12'/A12)^2 - A12''/(2*A12).
// Equals eps^{-2} Q0 + eps^{-1} Q1 + Q2 with simple closed forms.
inline cplx oper_potential(const FiberPoint& fp, cplx x) {
  const Matrix2 A = pencil_matrix(fp, x);
  const cplx e = fp.epsilon;
  cplx a = A.m[0][0], b = A.m[0][1], c = A.m[1][0];
  cplx da{}, db{}, d2b{};
  switch (fp.base.family) {
    case FamilyId::PI:
      da = 0.0;
      db = 1.0 / e;
      d2b = 0.0;
      break;
    case FamilyId::PII:
      da = 2.0 * x / e;
      db = 1.0 / e;
      d2b = 0.0;
      break;
    case FamilyId::PIII3:
      da = -a / x;
      db = (2.0 * fp.q - x) / (e * x * x * x);
      d2b = (2.0 * x - 6.0 * fp.q) / (e * x * x * x * x);
      break;
  }
  if (std::abs(b) < 1e-12 * (1.0 + std::abs(x - fp.q)))
    throw GaugeSingular("oper_potential: A_12 vanishes at evaluation point");
  const cplx L = db / b;
  return a * a + b * c + da - a * L + 0.75 * L * L - d2b / (2.0 * b);
}

// ---------------------------------------------------------------------------
// Apparent-singularity extraction
// ---------------------------------------------------------------------------
namespace iso_detail {

// Laurent coefficients f_k, k in [k_min, k_max], of f around x0 from a
// circle of radius delta (trapezoid rule; geometric accuracy).
template <typename F>
inline std::vector<cplx> laurent_coeffs(const F& f, cplx x0, double delta,
                                        int k_min, int k_max, int n = 64) {
  std::vector<cplx> vals(n);
  for (int j = 0; j < n; ++j) {
    const double phi = 2.0 * kPi * j / n;
    vals[j] = f(x0 + delta * std::exp(cplx(0.0, phi)));
  }
  std::vector<cplx> out;
  for (int k = k_min; k <= k_max; ++k) {
    cplx acc = 0.0;
    for (int j = 0; j < n; ++j) {
      const double phi = 2.0 * kPi * j / n;
      acc += vals[j] * std::exp(cplx(0.0, -phi * k));
    }
    out.push_back(acc / (static_cast<double>(n) * std::pow(cplx(delta), k)));
  }
  return out;
}

// Split the potential into (Q0, Q1, Q2) by evaluating the pencil potential
// at three values of epsilon and solving the quadratic dependence on 1/eps.
inline std::array<cplx, 3> potential_parts(const FiberPoint& fp, cplx x) {
  static const cplx es[3] = {cplx(1.0), cplx(-1.0), cplx(0.0, 1.0)};
  cplx qv[3];
  for (int k = 0; k < 3; ++k) {
    FiberPoint g = fp;
    g.epsilon = es[k];
    qv[k] = oper_potential(g, x);
  }
  // Vandermonde in u = 1/eps with nodes u = 1, -1, -i for
  // Q(u) = A u^2 + B u + C:
  //   B = (f(1) - f(-1))/2,
  //   f(1) + f(-1) = 2A + 2C,  f(-i) = -A - iB + C
  //   =>  A = ((f(1) + f(-1))/2 - f(-i) - iB) / 2.
  const cplx B = (qv[0] - qv[1]) / 2.0;
  const cplx A = ((qv[0] + qv[1]) / 2.0 - qv[2] - cplx(0, 1) * B) / 2.0;
  const cplx C = (qv[0] + qv[1]) / 2.0 - A;
  return {A, B, C};
}

}  // namespace iso_detail

// Local expansion of the potential at x = q:
//   Q1 = -P/(x-q) + u + O(x-q),   Q2 = 3/(4(x-q)^2) - R/(x-q) + v + O(x-q).
// The singularity is apparent iff the residue and constant term of the full
// potential satisfy (P/eps + R)^2 = Q0(q)/eps^2 + u/eps + v.  The first
// returned value collects the eps^{-2} and eps^{-1} parts of that
// obstruction, (P^2 - Q0(q))/eps^2 + (u - 2 P R)/eps, which detects both a
// sheet violation and a defect of the subleading term; the second value is
// the eps^0 part v - R^2.  Both vanish for valid fiber points.
inline std::pair<cplx, cplx> apparent_singularity_residual(
    const FiberPoint& fp) {
  double delta = 0.3 * std::max(1.0, std::abs(fp.q));
  if (fp.base.family == FamilyId::PIII3)
    delta = std::min(delta, 0.4 * std::abs(fp.q));
  auto f1 = [&](cplx x) { return iso_detail::potential_parts(fp, x)[1]; };
  auto f2 = [&](cplx x) { return iso_detail::potential_parts(fp, x)[2]; };
  const auto c1 = iso_detail::laurent_coeffs(f1, fp.q, delta, -1, 0);
  const auto c2 = iso_detail::laurent_coeffs(f2, fp.q, delta, -1, 0);
  const cplx P = -c1[0], u = c1[1];
  const cplx R = -c2[0], v = c2[1];
  const cplx e = fp.epsilon;
  const cplx first =
      (P * P - q0_eval(fp.base, fp.q)) / (e * e) + (u - 2.0 * P * R) / e;
  return {first, v - R * R};
}

// ---------------------------------------------------------------------------
// Extended isomonodromic vector fields
// ---------------------------------------------------------------------------
enum class FlowId { w1, w2, w3, w1_reference };

// Rates of change of (t, H, alpha, q, p, r, s) per unit flow time.
struct FlowRate {
  cplx dt{}, dH{}, dalpha{}, dq{}, dp{}, dr{}, ds{};
};

namespace iso_detail {

struct Q0Partials {
  cplx dq{}, dt{}, dH{}, dalpha{};
};

inline Q0Partials q0_partials(const BasePoint& b, cplx q) {
  Q0Partials g;
  switch (b.family) {
    case FamilyId::PI:
      g.dq = 3.0 * q * q + b.t;
      g.dt = q;
      g.dH = 1.0;
      break;
    case FamilyId::PII:
      g.dq = 4.0 * q * q * q + 2.0 * b.t * q - 2.0 * b.alpha;
      g.dt = q * q;
      g.dH = 2.0;
      g.dalpha = -2.0 * q;
      break;
    case FamilyId::PIII3: {
      const cplx iq = 1.0 / q;
      g.dq = -(b.t + (2.0 * b.H + 3.0 * iq) * iq) * iq * iq;
      g.dt = iq;
      g.dH = iq * iq;
      break;
    }
  }
  return g;
}

}  // namespace iso_detail

inline FlowRate flow_field(const FiberPoint& fp, FlowId id) {
  const BasePoint& b = fp.base;
  const cplx e = fp.epsilon, q = fp.q, p = fp.p, r = fp.r;
  if (std::abs(p) < 1e-12 * (1.0 + std::abs(q * q)))
    throw SheetSingular("flow_field: fiber point at a branch point (p = 0)");
  if (id == FlowId::w3 && b.family != FamilyId::PII)
    throw FamilyMismatch("flow_field: w3 exists only for the PII family");
  const auto g = iso_detail::q0_partials(b, q);
  FlowRate f;
  switch (id) {
    case FlowId::w1:
    case FlowId::w1_reference: {
      f.dt = 1.0;
      switch (b.family) {
        case FamilyId::PI:
          f.dq = 2.0 * p / e + 2.0 * r;
          f.dr = -((3.0 * q * q + b.t) * r + q / 2.0) / (e * p);
          break;
        case FamilyId::PII:
          f.dq = r + p / e;
          f.dr = -(fp.s + q * q / (2.0 * p) +
                   (r / p) * (2.0 * q * q * q + b.t * q - b.alpha)) /
                 e;
          break;
        case FamilyId::PIII3:
          f.dq = (2.0 * p * q * q / e + 2.0 * q * r) / b.t;
          f.dr = -(2.0 * r * q * q * b.t - 2.0 * r + q * q * b.t) /
                 (2.0 * e * p * q * q * b.t);
          break;
      }
      f.dp = (g.dq * f.dq + g.dt) / (2.0 * p);
      if (id == FlowId::w1_reference) {
        // Painleve-Hamiltonian normalization: add kappa * w2 with
        // kappa = -dQ0/dt / dQ0/dH so that dH/dt = dH/dt|_{q,p}; the r = 0
        // locus is preserved.
        const cplx kappa = -g.dt / g.dH;
        const FlowRate w2 = flow_field(fp, FlowId::w2);
        f.dH += kappa * w2.dH;
        f.dr += kappa * w2.dr;
        f.dp += kappa * w2.dp;
      }
      break;
    }
    case FlowId::w2: {
      f.dH = 1.0;
      switch (b.family) {
        case FamilyId::PI:
          f.dr = -1.0 / (2.0 * e * p);
          break;
        case FamilyId::PII:
          f.dr = -1.0 / (e * p);
          break;
        case FamilyId::PIII3:
          f.dr = -1.0 / (2.0 * e * p * q);
          break;
      }
      f.dp = g.dH / (2.0 * p);
      break;
    }
    case FlowId::w3: {
      f.dalpha = 1.0;
      f.ds = -1.0 / e;
      f.dr = q / (e * p);
      f.dp = g.dalpha / (2.0 * p);
      break;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Zero-curvature residual
// ---------------------------------------------------------------------------

// Max-norm of d/dt A_eps(x) - d/dx B_eps(x) + [A_eps(x), B_eps(x)] with the
// time derivative taken along the w1 flow by finite differences.
inline double zero_curvature_residual(const FiberPoint& fp, cplx x,
                                      FlowId id = FlowId::w1,
                                      const Tolerances& tol = {}) {
  if (id != FlowId::w1)
    throw ConfigError(
        "zero_curvature_residual: only the w1 time flow carries a "
        "deformation matrix");
  const FlowRate f = flow_field(fp, id);
  auto advanced = [&](cplx h) {
    FiberPoint g = fp;
    g.base.t += h * f.dt;
    g.base.H += h * f.dH;
    g.base.alpha += h * f.dalpha;
    g.q += h * f.dq;
    g.p += h * f.dp;
    g.r += h * f.dr;
    g.s += h * f.ds;
    return g;
  };
  Matrix2 dA;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      auto entry = [&](cplx h) { return pencil_matrix(advanced(h), x).m[i][j]; };
      dA.m[i][j] = fd_derivative_1d(entry, 0.0, 1.0, 1, tol).value;
    }
  const Matrix2 A = pencil_matrix(fp, x);
  const Matrix2 B = deformation_matrix(fp, x);
  Matrix2 dBdx{};  // the deformation matrices are affine in x
  switch (fp.base.family) {
    case FamilyId::PI:
    case FamilyId::PIII3:
      dBdx.m[1][0] = 1.0 / fp.epsilon;
      break;
    case FamilyId::PII:
      dBdx.m[0][0] = 1.0 / (2.0 * fp.epsilon);
      dBdx.m[1][1] = -1.0 / (2.0 * fp.epsilon);
      break;
  }
  return (dA - dBdx + commutator(A, B)).max_norm();
}

// ---------------------------------------------------------------------------
// Flow integration with pole-chart switching
// ---------------------------------------------------------------------------
struct FlowControls {
  OdeOptions ode;
  double pole_switch = 1e4;  // |q| above which the pole chart takes over
  double pole_return = 5e3;  // |q| below which the main chart resumes
  bool project_sheet = true;
  bool record_all_steps = true;
};

struct TrajectorySample {
  double tau = 0.0;  // arc parameter along the flow time
  cplx t, H, alpha, q, p, r, s;
  int chart = 0;  // 0 = main chart, 1 = pole chart
};

struct Trajectory {
  FamilyId family = FamilyId::PIII3;
  cplx epsilon{1.0};
  FlowId flow = FlowId::w1;
  std::vector<TrajectorySample> samples;
  bool pole_passed = false;
  bool stopped_at_branch = false;

  // Columns: t, H, q, p, r, s as Re/Im pairs, then the chart flag.
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "t_re,t_im,H_re,H_im,q_re,q_im,p_re,p_im,r_re,r_im,s_re,s_im,"
          "chart\n";
    for (const auto& sm : samples) {
      os << sm.t.real() << ',' << sm.t.imag() << ',' << sm.H.real() << ','
         << sm.H.imag() << ',' << sm.q.real() << ',' << sm.q.imag() << ','
         << sm.p.real() << ',' << sm.p.imag() << ',' << sm.r.real() << ','
         << sm.r.imag() << ',' << sm.s.real() << ',' << sm.s.imag() << ','
         << sm.chart << '\n';
    }
    return os.str();
  }
};

namespace iso_detail {

// State layout (7 complex entries):
//   main chart: (t, H, alpha, q,        p,        r, s)
//   pole chart: (t, H, alpha, 1/q,      p/q^2,    r, s)   (PI, PII)
//               (t, H, alpha, 1/(q t),  p,        r, s)   (PIII3)
// Near a movable pole of q the chart variables stay O(1) or cross zero
// transversally, so absolute error control keeps them accurate; in
// particular p/q^2 tends to +-1 at a PII pole while 1/p would shrink far
// below any absolute tolerance and lose all relative accuracy.
inline FiberPoint unpack_state(FamilyId fam, const StateVec& y, int chart,
                               cplx eps) {
  FiberPoint fp;
  fp.base.family = fam;
  fp.base.t = y[0];
  fp.base.H = y[1];
  fp.base.alpha = y[2];
  fp.r = y[5];
  fp.s = y[6];
  fp.epsilon = eps;
  if (chart == 0) {
    fp.q = y[3];
    fp.p = y[4];
  } else if (fam == FamilyId::PIII3) {
    fp.q = 1.0 / (y[3] * y[0]);
    fp.p = y[4];
  } else {
    fp.q = 1.0 / y[3];
    fp.p = y[4] / (y[3] * y[3]);
  }
  return fp;
}

inline StateVec pack_state(const FiberPoint& fp, int chart) {
  StateVec y(7);
  y[0] = fp.base.t;
  y[1] = fp.base.H;
  y[2] = fp.base.alpha;
  y[5] = fp.r;
  y[6] = fp.s;
  if (chart == 0) {
    y[3] = fp.q;
    y[4] = fp.p;
  } else if (fp.base.family == FamilyId::PIII3) {
    y[3] = 1.0 / (fp.q * fp.base.t);
    y[4] = fp.p;
  } else {
    y[3] = 1.0 / fp.q;
    y[4] = fp.p * y[3] * y[3];
  }
  return y;
}

}  // namespace iso_detail

// Integrates the selected flow from `start`, moving the flow time (t for w1,
// H for w2, alpha for w3) along the straight segment of complex length
// `span`.  Near a movable pole of q the integration switches to an inverse
// chart and continues through it.  Stops and reports (rather than guessing a
// continuation) if the trajectory runs into a branch point p = 0.
inline Trajectory integrate_flow(const FiberPoint& start, FlowId id, cplx span,
                                 const FlowControls& ctl = {}) {
  require_on_sheet(start);
  const FamilyId fam = start.base.family;
  const cplx eps = start.epsilon;
  const double total = std::abs(span);
  if (total == 0.0) throw ConfigError("integrate_flow: zero span");
  const cplx dir = span / total;

  Trajectory traj;
  traj.family = fam;
  traj.epsilon = eps;
  traj.flow = id;

  int chart = 0;
  auto field = [&](double, const StateVec& y) -> StateVec {
    const FiberPoint fp = iso_detail::unpack_state(fam, y, chart, eps);
    const FlowRate f = flow_field(fp, id);
    StateVec dy(7);
    dy[0] = dir * f.dt;
    dy[1] = dir * f.dH;
    dy[2] = dir * f.dalpha;
    dy[5] = dir * f.dr;
    dy[6] = dir * f.ds;
    if (chart == 0) {
      dy[3] = dir * f.dq;
      dy[4] = dir * f.dp;
    } else if (fam == FamilyId::PIII3) {
      // y3 = 1/(q t):  y3' = -y3^2 (q' t + q t')
      dy[3] = -y[3] * y[3] * dir * (f.dq * y[0] + fp.q * f.dt);
      dy[4] = dir * f.dp;
    } else {
      // y3 = 1/q, y4 = p/q^2.  The naive chain rule
      //   y4' = p' y3^2 + 2 p y3 y3'
      // subtracts two O(1/y3) terms that cancel to O(y3) near the pole, so
      // we use the identity 2 p dp = dQ0(q; t, H, alpha) along the flow to
      // eliminate the cancellation analytically.
      const cplx Q = y[3], V = y[4];
      const cplx tt = y[0], HH = y[1], aa = y[2];
      dy[3] = -Q * Q * dir * f.dq;
      if (fam == FamilyId::PI) {
        // V^2 = Q (1 + t Q^2 + H Q^3)
        const cplx eb = -1.0 - 3.0 * tt * Q * Q - 4.0 * HH * Q * Q * Q;
        dy[4] = dir * (eb / eps +
                       (2.0 * fp.r * Q * Q * eb + Q * Q * Q * f.dt +
                        Q * Q * Q * Q * f.dH) /
                           (2.0 * V));
      } else {
        // PII: V^2 = 1 + t Q^2 - 2 alpha Q^3 + 2 H Q^4
        const cplx g = -2.0 * tt + 6.0 * aa * Q - 8.0 * HH * Q * Q;
        dy[4] = dir * (Q * g / (2.0 * eps) +
                       (fp.r * Q * Q * Q * g + Q * Q * f.dt +
                        2.0 * Q * Q * Q * Q * f.dH -
                        2.0 * Q * Q * Q * f.dalpha) /
                           (2.0 * V));
      }
    }
    return dy;
  };

  auto record = [&](double x, const StateVec& y) {
    const FiberPoint fp = iso_detail::unpack_state(fam, y, chart, eps);
    traj.samples.push_back({x, fp.base.t, fp.base.H, fp.base.alpha, fp.q, fp.p,
                            fp.r, fp.s, chart});
  };

  StateVec y = iso_detail::pack_state(start, chart);
  double x = 0.0;
  double h = std::min(ctl.ode.h_init, total);
  StateVec k1 = field(x, y);
  record(x, y);
  std::size_t steps = 0;

  while (x < total) {
    if (++steps > ctl.ode.max_steps)
      throw NonConvergence("integrate_flow: step budget exhausted");
    if (x + h > total) h = total - x;
    StateVec y_new, k7;
    double err;
    try {
      err = dopri5_step(field, x, y, h, k1, y_new, k7, ctl.ode.rel_tol,
                        ctl.ode.abs_tol);
    } catch (const SheetSingular&) {
      h *= 0.25;
      if (h < ctl.ode.h_min) {
        traj.stopped_at_branch = true;
        return traj;
      }
      continue;
    } catch (const Error&) {
      h *= 0.25;
      if (h < ctl.ode.h_min)
        throw Blowup("integrate_flow: field evaluation failed at minimal step");
      continue;
    }
    if (err <= 1.0) {
      x += h;
      y = std::move(y_new);
      if (chart == 0 && ctl.project_sheet) {
        // Newton projection of p onto p^2 = Q0(q), seeded by the prediction.
        FiberPoint fp = iso_detail::unpack_state(fam, y, chart, eps);
        if (std::abs(fp.p) > 1e-8 * (1.0 + std::abs(fp.q * fp.q))) {
          for (int it = 0; it < 2; ++it) {
            const cplx q0v = q0_eval(fp.base, fp.q);
            fp.p -= (fp.p * fp.p - q0v) / (2.0 * fp.p);
          }
          y[4] = fp.p;
        }
      }
      const double qa =
          (chart == 0)
              ? std::abs(y[3])
              : (fam == FamilyId::PIII3 ? 1.0 / std::abs(y[3] * y[0])
                                        : 1.0 / std::abs(y[3]));
      if (chart == 0 && qa > ctl.pole_switch) {
        const FiberPoint fp = iso_detail::unpack_state(fam, y, 0, eps);
        chart = 1;
        y = iso_detail::pack_state(fp, 1);
        traj.pole_passed = true;
      } else if (chart == 1 && qa < ctl.pole_return) {
        const FiberPoint fp = iso_detail::unpack_state(fam, y, 1, eps);
        chart = 0;
        y = iso_detail::pack_state(fp, 0);
      }
      k1 = field(x, y);
      if (ctl.record_all_steps || x >= total) record(x, y);
      const double grow = 0.9 * std::pow(std::max(err, 1e-10), -0.2);
      h *= std::min(5.0, std::max(0.2, grow));
      h = std::min(h, total - x + 1e-300);
      if (h <= 0.0) break;
    } else {
      h *= std::max(0.1, 0.9 * std::pow(err, -0.2));
      if (h < ctl.ode.h_min)
        throw NonConvergence("integrate_flow: step size underflow");
    }
  }
  if (!ctl.record_all_steps) record(x, y);
  return traj;
}

// ---------------------------------------------------------------------------
// Pole analysis
// ---------------------------------------------------------------------------
struct PoleFit {
  cplx t0{};
  int order = 0;     // pole order of q: 2 for PIII3, 1 for PII
  cplx leading{};    // coefficient of (t - t0)^{-order} in q
  cplx sub1{}, sub2{};  // free parameters: (rho, q0) PIII3; (c, q0) PII
  cplx H0{};
  double residual = 0.0;
};

namespace iso_detail {

// Complex linear least squares by Householder QR with column scaling.
// Pole-window fits mix basis columns spanning many orders of magnitude
// (e.g. tau^-3 against tau^2), where normal equations lose all accuracy in
// the small coefficients; QR on the column-scaled matrix keeps them.
inline std::vector<cplx> lsq_solve(const std::vector<std::vector<cplx>>& A,
                                   const std::vector<cplx>& rhs) {
  const std::size_t m = A.size(), n = m ? A[0].size() : 0;
  if (m < n || n == 0)
    throw JacobianSingular("lsq_solve: underdetermined system");
  std::vector<std::vector<cplx>> R(m, std::vector<cplx>(n));
  std::vector<cplx> b = rhs;
  std::vector<double> scale(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < m; ++k) scale[j] += std::norm(A[k][j]);
    scale[j] = std::sqrt(scale[j]);
    if (scale[j] < 1e-300)
      throw JacobianSingular("lsq_solve: zero column in design matrix");
    for (std::size_t k = 0; k < m; ++k) R[k][j] = A[k][j] / scale[j];
  }
  for (std::size_t col = 0; col < n; ++col) {
    double nrm = 0.0;
    for (std::size_t k = col; k < m; ++k) nrm += std::norm(R[k][col]);
    nrm = std::sqrt(nrm);
    if (nrm < 1e-14)
      throw JacobianSingular("lsq_solve: rank-deficient design matrix");
    // Householder vector v = x + sign(x0) |x| e1 (phase of x0 for complex).
    const cplx x0 = R[col][col];
    const cplx phase =
        (std::abs(x0) > 0.0) ? x0 / std::abs(x0) : cplx(1.0, 0.0);
    std::vector<cplx> v(m - col);
    v[0] = x0 + phase * nrm;
    for (std::size_t k = col + 1; k < m; ++k) v[k - col] = R[k][col];
    double vsq = 0.0;
    for (const cplx& vi : v) vsq += std::norm(vi);
    if (vsq < 1e-300) continue;
    auto reflect = [&](auto get, auto set) {
      cplx dot{};
      for (std::size_t k = col; k < m; ++k) dot += std::conj(v[k - col]) * get(k);
      const cplx f = 2.0 * dot / vsq;
      for (std::size_t k = col; k < m; ++k) set(k, get(k) - f * v[k - col]);
    };
    for (std::size_t j = col; j < n; ++j)
      reflect([&](std::size_t k) { return R[k][j]; },
              [&](std::size_t k, cplx val) { R[k][j] = val; });
    reflect([&](std::size_t k) { return b[k]; },
            [&](std::size_t k, cplx val) { b[k] = val; });
  }
  std::vector<cplx> out(n);
  for (std::size_t i = n; i-- > 0;) {
    cplx acc = b[i];
    for (std::size_t j = i + 1; j < n; ++j) acc -= R[i][j] * out[j];
    if (std::abs(R[i][i]) < 1e-14)
      throw JacobianSingular("lsq_solve: rank-deficient design matrix");
    out[i] = acc / R[i][i];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= scale[j];
  return out;
}

// RMS of |q_data - q_model| / |q_data| for the pole-window fit at a given t0.
struct WindowFit {
  std::vector<cplx> coeffs;
  double rms = 0.0;
};

inline WindowFit fit_q_window(FamilyId fam, const std::vector<cplx>& ts,
                              const std::vector<cplx>& qs, cplx t0) {
  const std::size_t m = ts.size();
  std::vector<std::vector<cplx>> A(m);
  std::vector<cplx> rhs(m);
  for (std::size_t k = 0; k < m; ++k) {
    const cplx tau = ts[k] - t0;
    // The leading extra column (one degree more singular than the pole)
    // absorbs the first-order effect of an error e in t0:
    //   L/(tau-e)^2 ~ L/tau^2 + 2 L e/tau^3,  -eps/(tau-e) ~ -eps/tau
    //   - eps e/tau^2,
    // so e can be read off the fitted coefficients and iterated to
    // convergence instead of minimizing the cone-shaped rms directly.
    if (fam == FamilyId::PIII3)
      A[k] = {1.0 / (tau * tau * tau), 1.0 / (tau * tau), cplx(1.0), tau,
              tau * tau};
    else
      A[k] = {1.0 / (tau * tau), 1.0 / tau, cplx(1.0), tau, tau * tau,
              tau * tau * tau, tau * tau * tau * tau};
    rhs[k] = qs[k];
    // Integration errors are relative to |q|, which varies by many orders
    // of magnitude across the window; weight rows accordingly so the fit
    // minimizes relative residuals.
    const double wgt = 1.0 / std::abs(qs[k]);
    for (auto& e : A[k]) e *= wgt;
    rhs[k] *= wgt;
  }
  WindowFit w;
  w.coeffs = lsq_solve(A, rhs);
  double acc = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    cplx model{};
    for (std::size_t j = 0; j < A[k].size(); ++j)
      model += A[k][j] * w.coeffs[j];
    const double rel = std::abs(model - rhs[k]) / std::abs(rhs[k]);
    acc += rel * rel;
  }
  w.rms = std::sqrt(acc / static_cast<double>(m));
  return w;
}

}  // namespace iso_detail

// Fits the local expansion of a movable pole flagged by integrate_flow.
//   PIII3: q = t0 eps^2/(t-t0)^2 + q0 + ...,  r = -1/2 + rho (t-t0) + ...,
//          H0 = H - 2 t0 rho  (satisfies H0 = -3 q0 t0 + eps^2/4).
//   PII:   q = -eps/(t-t0) + t0 (t-t0)/(6 eps) + (t-t0)^2/(4 eps)
//              + q0 (t-t0)^3 + ...,  r = (t-t0)/(2 eps) + c (t-t0)^2 + ...
inline PoleFit pole_fit(const Trajectory& traj, double window_lo = 1e-4,
                        double window_hi = 1e-2) {
  if (traj.family == FamilyId::PI)
    throw FamilyMismatch("pole_fit: supported for the PII and PIII3 families");
  if (!traj.pole_passed)
    throw NoPoleInSpan("pole_fit: trajectory never entered the pole chart");

  // Initial estimate of t0: near the sample of largest |q|, fit the inverse
  // coordinate w = 1/q (PII) or 1/(q t) (PIII3) by a local polynomial.
  std::size_t m_best = 0;
  double best = 0.0;
  for (std::size_t k = 0; k < traj.samples.size(); ++k) {
    const double a = std::abs(traj.samples[k].q);
    if (traj.samples[k].chart == 1 && a > best) {
      best = a;
      m_best = k;
    }
  }
  if (best == 0.0) throw NoPoleInSpan("pole_fit: no pole-chart samples");
  const std::size_t lo = (m_best >= 4) ? m_best - 4 : 0;
  const std::size_t hi =
      std::min(traj.samples.size() - 1, m_best + 4);
  std::vector<std::vector<cplx>> A;
  std::vector<cplx> rhs;
  for (std::size_t k = lo; k <= hi; ++k) {
    const auto& sm = traj.samples[k];
    const cplx w = (traj.family == FamilyId::PIII3) ? 1.0 / (sm.q * sm.t)
                                                    : 1.0 / sm.q;
    const cplx dt = sm.t - traj.samples[m_best].t;
    A.push_back({cplx(1.0), dt, dt * dt});
    rhs.push_back(w);
  }
  const auto c = iso_detail::lsq_solve(A, rhs);
  cplx t0 = traj.samples[m_best].t;
  if (traj.family == FamilyId::PIII3) {
    t0 += -c[1] / (2.0 * c[2]);  // critical point of the parabola
  } else {
    t0 += -c[0] / c[1];  // root of the linear term
  }

  // Collect window samples and refine t0 by Gauss-Newton on the fit rms.
  auto window_data = [&](cplx t0g, std::vector<cplx>& ts,
                         std::vector<cplx>& qs, std::vector<cplx>& rs) {
    ts.clear();
    qs.clear();
    rs.clear();
    for (const auto& sm : traj.samples) {
      const double d = std::abs(sm.t - t0g);
      if (d >= window_lo && d <= window_hi) {
        ts.push_back(sm.t);
        qs.push_back(sm.q);
        rs.push_back(sm.r);
      }
    }
  };
  std::vector<cplx> ts, qs, rs;
  window_data(t0, ts, qs, rs);
  if (ts.size() < 8)
    throw FitRejected("pole_fit: too few samples inside the fit window");

  for (int it = 0; it < 20; ++it) {
    const auto fit = iso_detail::fit_q_window(traj.family, ts, qs, t0);
    const cplx e = (traj.family == FamilyId::PIII3)
                       ? fit.coeffs[0] / (2.0 * fit.coeffs[1])
                       : fit.coeffs[0] / fit.coeffs[1];
    t0 += e;
    if (std::abs(e) < 1e-13 * (1.0 + std::abs(t0))) break;
    window_data(t0, ts, qs, rs);
    if (ts.size() < 8)
      throw FitRejected("pole_fit: too few samples inside the fit window");
  }

  const auto qfit = iso_detail::fit_q_window(traj.family, ts, qs, t0);

  // r-window fit: polynomial in tau.  Two numerical effects make this fit
  // more delicate than the q fit: (a) the quadratic Taylor coefficient of r
  // is extremely sensitive to the single integration step that crosses the
  // pole (a step error delta at |tau| ~ h shifts it by delta/h^2), so only
  // samples on the incoming side of the pole are used; (b) the next
  // singularity of the solution can sit not far outside the window, making
  // the Taylor coefficients grow quickly, so the sub-window is kept as
  // narrow as the sample density allows.
  std::vector<std::vector<cplx>> Ar;
  std::vector<cplx> rr;
  auto collect_r = [&](bool pre, double hi_lim) {
    Ar.clear();
    rr.clear();
    const std::size_t lo_k = pre ? 0 : m_best;
    const std::size_t hi_k = pre ? m_best : traj.samples.size();
    for (std::size_t k = lo_k; k < hi_k; ++k) {
      const auto& sm = traj.samples[k];
      const double d = std::abs(sm.t - t0);
      if (d < window_lo || d > hi_lim) continue;
      const cplx tau = sm.t - t0;
      Ar.push_back({cplx(1.0), tau, tau * tau, tau * tau * tau});
      rr.push_back(sm.r);
    }
  };
  for (bool pre : {true, false}) {
    double r_hi = std::sqrt(window_lo * window_hi);
    collect_r(pre, r_hi);
    while (rr.size() < 8 && r_hi < window_hi) {
      r_hi = std::min(1.6 * r_hi, window_hi);
      collect_r(pre, r_hi);
    }
    if (rr.size() >= 6) break;
  }
  if (rr.size() < 6)
    throw FitRejected("pole_fit: too few samples inside the fit window");
  const auto rfit = iso_detail::lsq_solve(Ar, rr);
  double racc = 0.0;
  for (std::size_t k = 0; k < rr.size(); ++k) {
    cplx model{};
    for (std::size_t j = 0; j < 4; ++j) model += Ar[k][j] * rfit[j];
    racc = std::max(racc, std::abs(model - rr[k]));
  }

  PoleFit out;
  out.t0 = t0;
  const cplx eps = traj.epsilon;
  const cplx Hval = traj.samples.front().H;
  if (traj.family == FamilyId::PIII3) {
    out.order = 2;
    out.leading = qfit.coeffs[1];
    out.sub1 = rfit[1];                      // rho
    out.sub2 = qfit.coeffs[2];               // q0
    out.H0 = Hval - 2.0 * t0 * out.sub1;
    // structural checks: r(t0) = -1/2
    racc = std::max(racc, std::abs(rfit[0] + 0.5));
  } else {
    out.order = 1;
    out.leading = qfit.coeffs[1];
    out.sub1 = rfit[2];                      // c
    out.sub2 = qfit.coeffs[5];               // q0 (tau^3 coefficient)
    out.H0 = Hval;
    racc = std::max(racc, std::abs(rfit[0]));
    racc = std::max(racc, std::abs(rfit[1] - 1.0 / (2.0 * eps)));
  }
  out.residual = std::max(qfit.rms, racc);
  if (out.residual > 1e-5)
    throw FitRejected("pole_fit: expansion residual exceeds tolerance");
  return out;
}

}  // namespace joyce
