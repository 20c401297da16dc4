#pragma once

// Theta coordinates on the extended fiber bundle, the Plebanski function W,
// heavenly-equation residuals, the prepotential S, the linear connection on
// the base, and the PIII3 fiber involution.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "joyce/core.hpp"
#include "joyce/elliptic.hpp"
#include "joyce/families.hpp"
#include "joyce/isomonodromy.hpp"
#include "joyce/spectral.hpp"

namespace joyce {

// ---------------------------------------------------------------------------
// Theta coordinates
// ---------------------------------------------------------------------------

enum class ThetaBackend : std::uint8_t { periods, uniformization };

// Ambiguity lattice of the theta pair (theta_first, theta_H): the map is
// well-defined modulo integer combinations of g_i = scale * (omega_i, -beta_i)
// where omega_i / beta_i are the omega- and beta-periods over the cycle basis.
struct ThetaLattice {
  std::array<cplx, 2> omega{};
  std::array<cplx, 2> beta{};
  double scale = 0.5;
};

struct ThetaCoords {
  FamilyId family = FamilyId::PI;
  cplx theta_first{};  // conjugate to s = log t (PIII3) or to t (PI, PII)
  cplx theta_H{};
  cplx theta_alpha{};  // PII only: 1/2 - s exactly
  ThetaLattice lattice;
  std::string lattice_note;
};

// Abel image v of (q, p) plus the regularized fiber parameter w.
struct UniformizedFiber {
  cplx v{};
  cplx w{};
};

namespace theta_detail {

// Least-squares integer fit of d = m g1 + n g2 over the ambiguity lattice.
// Comparisons run at half the nominal scale (1/4 of the cycle periods for
// PIII3/PI whose basis is a -+ b, 1/2 for PII): this is half the *primitive*
// period lattice, which absorbs the half-shifts coming from the choice of
// folding branch point in the periods backend and from the involution.
inline std::array<long, 2> lattice_fit(const ThetaLattice& lat, cplx d1, cplx d2) {
  const double c = lat.scale / 2.0;
  const cplx g[2][2] = {{c * lat.omega[0], -c * lat.beta[0]},
                        {c * lat.omega[1], -c * lat.beta[1]}};
  auto dot = [](cplx a1, cplx a2, cplx b1, cplx b2) {
    return (std::conj(a1) * b1 + std::conj(a2) * b2).real();
  };
  const double A11 = dot(g[0][0], g[0][1], g[0][0], g[0][1]);
  const double A12 = dot(g[0][0], g[0][1], g[1][0], g[1][1]);
  const double A22 = dot(g[1][0], g[1][1], g[1][0], g[1][1]);
  const double r1 = dot(g[0][0], g[0][1], d1, d2);
  const double r2 = dot(g[1][0], g[1][1], d1, d2);
  const double det = A11 * A22 - A12 * A12;
  if (!(std::abs(det) > 1e-12 * (std::abs(A11 * A22) + 1e-300))) return {0, 0};
  const double m0 = (A22 * r1 - A12 * r2) / det;
  const double n0 = (A11 * r2 - A12 * r1) / det;
  std::array<long, 2> best{std::lround(m0), std::lround(n0)};
  double best_res = std::numeric_limits<double>::infinity();
  for (long dm = -1; dm <= 1; ++dm)
    for (long dn = -1; dn <= 1; ++dn) {
      const double m = double(std::lround(m0) + dm), n = double(std::lround(n0) + dn);
      const cplx e1 = d1 - m * g[0][0] - n * g[1][0];
      const cplx e2 = d2 - m * g[0][1] - n * g[1][1];
      const double res = std::abs(e1) + std::abs(e2);
      if (res < best_res) {
        best_res = res;
        best = {std::lround(m0) + dm, std::lround(n0) + dn};
      }
    }
  return best;
}

}  // namespace theta_detail

// Difference (a - b) of the theta pairs reduced modulo the ambiguity lattice.
inline std::pair<cplx, cplx> theta_reduce_difference(const ThetaLattice& lat,
                                                     cplx d_first, cplx d_H) {
  const auto mn = theta_detail::lattice_fit(lat, d_first, d_H);
  const double c = lat.scale / 2.0;
  const double m = double(mn[0]), n = double(mn[1]);
  return {d_first - c * (m * lat.omega[0] + n * lat.omega[1]),
          d_H + c * (m * lat.beta[0] + n * lat.beta[1])};
}

inline bool theta_equivalent(const ThetaCoords& a, const ThetaCoords& b,
                             double tol = 1e-7) {
  if (a.family != b.family) return false;
  const auto [d1, d2] = theta_reduce_difference(
      a.lattice, a.theta_first - b.theta_first, a.theta_H - b.theta_H);
  const double scale = 1.0 + std::abs(a.theta_first) + std::abs(a.theta_H);
  bool ok = std::abs(d1) < tol * scale && std::abs(d2) < tol * scale;
  if (a.family == FamilyId::PII)
    ok = ok && std::abs(a.theta_alpha - b.theta_alpha) < tol;
  return ok;
}

// ---------------------------------------------------------------------------
// Uniformization chart (v, w)
// ---------------------------------------------------------------------------

namespace theta_detail {

inline void require_theta_ready(const FiberPoint& fp) {
  require_regular(fp.base);
  require_on_sheet(fp);
  if (std::abs(fp.p) < 1e-12 * (1.0 + std::abs(fp.q)))
    throw SheetSingular("theta chart: fiber point at a branch point (p = 0)");
  if (fp.base.family == FamilyId::PII && std::abs(fp.base.alpha) > 1e-13)
    throw ConfigError("theta chart: the PII structure is built at alpha = 0");
}

struct Components {
  cplx first{}, H{}, alpha{};
  UniformizedFiber vw;
};

// Closed-form theta components through the Weierstrass uniformization.
inline Components components_uniformization(const WeierstrassChart& chart,
                                            const FiberPoint& fp) {
  const BasePoint& b = fp.base;
  const CurvePoint F = chart.forward({fp.q, fp.p});
  const cplx v = abel_map(F.x, F.y, chart.ed);
  const cplx zeta = weierstrass_eval(v, chart.ed).z;
  Components out;
  out.vw.v = v;
  switch (b.family) {
    case FamilyId::PIII3:
      out.first = v;
      out.H = zeta + b.H * v / 3.0 - 2.0 * fp.p * fp.q * fp.r;
      out.vw.w = (1.0 + 2.0 * fp.r) / v;
      break;
    case FamilyId::PII:
      out.first = v;
      out.H = zeta + b.t * v / 12.0 + fp.q / 2.0 - fp.p * fp.r - fp.q * fp.s;
      out.alpha = 0.5 - fp.s;
      out.vw.w = (v / 2.0 + b.t * v * v * v / 12.0 - fp.r) / (v * v);
      break;
    case FamilyId::PI:
      out.first = v;
      out.H = zeta - 2.0 * fp.p * fp.r;
      out.vw.w = out.H;
      break;
  }
  return out;
}

// Same formulas but trusting the supplied chart parameter v (no Abel
// inversion) -- used inside Newton loops where the lattice representative of
// v must not jump between iterations.
inline Components components_from_vw(const WeierstrassChart& chart,
                                     const FiberPoint& fp,
                                     const UniformizedFiber& vw) {
  const BasePoint& b = fp.base;
  const cplx v = vw.v;
  const cplx zeta = weierstrass_eval(v, chart.ed).z;
  Components out;
  out.vw = vw;
  out.first = v;
  switch (b.family) {
    case FamilyId::PIII3:
      out.H = zeta + b.H * v / 3.0 - 2.0 * fp.p * fp.q * fp.r;
      break;
    case FamilyId::PII:
      out.H = zeta + b.t * v / 12.0 + fp.q / 2.0 - fp.p * fp.r - fp.q * fp.s;
      out.alpha = 0.5 - fp.s;
      break;
    case FamilyId::PI:
      out.H = zeta - 2.0 * fp.p * fp.r;
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Periods backend: incomplete integrals along sheet-tracked polylines
// ---------------------------------------------------------------------------

// Piecewise-linear path from `from` to `to`, bent away from the avoid points.
inline void route_rec(cplx a, cplx b, const std::vector<cplx>& avoid, int depth,
                      std::vector<cplx>& out) {
  const double len = std::abs(b - a);
  if (len < 1e-14) return;
  double worst = std::numeric_limits<double>::infinity();
  cplx offender{};
  for (const cplx& z : avoid) {
    if (std::abs(z - a) < 1e-12 * (1.0 + len) || std::abs(z - b) < 1e-12 * (1.0 + len))
      continue;
    const double d = spectral_detail::segment_distance(z, a, b);
    if (d < worst) {
      worst = d;
      offender = z;
    }
  }
  if (worst > 0.18 * len || depth >= 4) {
    out.push_back(b);
    return;
  }
  // project the offender onto the chord and step sideways
  const cplx u = (b - a) / len;
  double sproj = ((offender - a) / u).real() / len;
  sproj = std::min(0.85, std::max(0.15, sproj));
  const cplx base = a + sproj * len * u;
  const cplx n = kI * u;
  const cplx cand1 = base + 0.45 * len * n;
  const cplx cand2 = base - 0.45 * len * n;
  const cplx detour = (std::abs(cand1 - offender) >= std::abs(cand2 - offender))
                          ? cand1
                          : cand2;
  route_rec(a, detour, avoid, depth + 1, out);
  route_rec(detour, b, avoid, depth + 1, out);
}

inline std::vector<cplx> route(cplx from, cplx to, const std::vector<cplx>& avoid) {
  std::vector<cplx> out{from};
  route_rec(from, to, avoid, 0, out);
  if (out.size() == 1) out.push_back(to);
  return out;
}

using FormFn = std::function<cplx(cplx, cplx)>;  // dx-coefficient f(x, y)

struct TrackedResult {
  std::vector<cplx> vals;
  cplx y_end{};
};

// Integrate the forms along a polyline on the curve y^2 = Q0(x), continuing
// y by per-segment square-root anchoring.  If branch_start, the first vertex
// is a branch point (y = 0 there) and sgn picks the sheet just past it;
// otherwise y_start is the sheet value at the first vertex.
inline TrackedResult tracked_line_integral(const BasePoint& b,
                                           const std::vector<cplx>& verts,
                                           bool branch_start, int sgn, cplx y_start,
                                           const std::vector<FormFn>& forms,
                                           const Tolerances& tol) {
  if (verts.size() < 2)
    throw DegenerateInput("tracked_line_integral: need at least two vertices");
  std::vector<cplx> vs;
  const int kSub = 12;
  for (std::size_t i = 0; i + 1 < verts.size(); ++i)
    for (int k = 0; k < kSub; ++k)
      vs.push_back(verts[i] + (verts[i + 1] - verts[i]) * (double(k) / kSub));
  vs.push_back(verts.back());
  const std::size_t n = vs.size();
  std::vector<cplx> ys(n);
  std::size_t first = 0;
  if (branch_start) {
    ys[0] = cplx(0.0);
    ys[1] = double(sgn) * std::sqrt(q0_eval(b, vs[1]));
    first = 1;
  } else {
    ys[0] = y_start;
  }
  for (std::size_t k = first + 1; k < n; ++k)
    ys[k] = ys[k - 1] * std::sqrt(q0_eval(b, vs[k]) / q0_eval(b, vs[k - 1]));
  TrackedResult out;
  out.vals.assign(forms.size(), cplx{});
  out.y_end = ys[n - 1];
  for (std::size_t k = 0; k + 1 < n; ++k) {
    const std::size_t anchor = (branch_start && k == 0) ? 1 : k;
    const cplx qa = q0_eval(b, vs[anchor]);
    const cplx ya = ys[anchor];
    auto ycont = [&b, ya, qa](cplx x) { return ya * std::sqrt(q0_eval(b, x) / qa); };
    const PathSegment seg{vs[k], vs[k + 1],
                          (branch_start && k == 0) ? SingularityHint::inverse_sqrt_at_start
                                                   : SingularityHint::none};
    for (std::size_t j = 0; j < forms.size(); ++j)
      out.vals[j] += quad_segment([&](cplx x) { return forms[j](x, ycont(x)); }, seg, tol);
  }
  return out;
}

// Half of the anti-invariant integral: from a fold point down to (q, p).
// For PIII3/PI the fold point is the branch point nearest to q; for PII the
// path is folded at the even-involution fixed point over x = 0.
inline std::vector<cplx> fold_integrals(const FiberPoint& fp,
                                        const std::vector<FormFn>& forms,
                                        const Tolerances& tol) {
  const BasePoint& b = fp.base;
  std::vector<cplx> bps = branch_points(b);
  if (b.family == FamilyId::PIII3) {
    // keep only the zeros of t x^2 + H x + 1 as fold candidates; x = 0 is a
    // ramification point but the chart is singular there
    std::vector<cplx> nz;
    for (const cplx& z : bps)
      if (std::abs(z) > 1e-10) nz.push_back(z);
    bps = nz;
  }
  std::vector<cplx> avoid = bps;
  if (b.family == FamilyId::PIII3) avoid.push_back(cplx(0.0));

  if (b.family == FamilyId::PII) {
    // start at (0, sqrt(2H)); flip the start sheet so the path ends at +p
    const cplx y0 = std::sqrt(q0_eval(b, cplx(0.0)));
    TrackedResult res = tracked_line_integral(b, route(cplx(0.0), fp.q, avoid),
                                              false, +1, y0, forms, tol);
    if (std::abs(res.y_end - fp.p) > std::abs(res.y_end + fp.p))
      for (cplx& v : res.vals) v = -v;  // all folded forms are odd in y
    return res.vals;
  }

  // nearest branch point to q
  cplx xb = bps.front();
  for (const cplx& z : bps)
    if (std::abs(z - fp.q) < std::abs(xb - fp.q)) xb = z;
  TrackedResult res = tracked_line_integral(b, route(xb, fp.q, avoid), true, +1,
                                            cplx{}, forms, tol);
  if (std::abs(res.y_end - fp.p) > std::abs(res.y_end + fp.p))
    for (cplx& v : res.vals) v = -v;
  return res.vals;
}

// Theta components by quadrature of the incomplete period integrals.
inline Components components_periods(const FiberPoint& fp, const Tolerances& tol) {
  const BasePoint& b = fp.base;
  Components out;
  switch (b.family) {
    case FamilyId::PIII3: {
      const auto vals = fold_integrals(
          fp,
          {[](cplx x, cplx y) { return 1.0 / (2.0 * x * x * y); },
           [&b](cplx x, cplx y) { return b.t / (2.0 * x * y); }},
          tol);
      out.first = vals[0];
      out.H = -vals[1] - 2.0 * fp.p * fp.q * fp.r;
      break;
    }
    case FamilyId::PI: {
      const auto vals = fold_integrals(
          fp,
          {[](cplx x, cplx y) { return 1.0 / (2.0 * y); },
           [](cplx x, cplx y) { return x / (2.0 * y); }},
          tol);
      out.first = vals[0];
      out.H = -vals[1] - 2.0 * fp.p * fp.r;
      break;
    }
    case FamilyId::PII: {
      const auto vals = fold_integrals(
          fp,
          {[](cplx x, cplx y) { return 1.0 / y; },
           [](cplx x, cplx y) { return x * x / (2.0 * y); }},
          tol);
      // the regularized contributions from the two points over x = infinity
      // form a half-lattice vector, absorbed by the ambiguity reduction at
      // scale 1/2 (verified against the uniformization backend at random
      // base and fiber points); the fold integrals alone represent theta
      out.first = vals[0];
      out.H = -vals[1] - fp.p * fp.r - fp.q * fp.s;
      out.alpha = 0.5 - fp.s;
      break;
    }
  }
  return out;
}

}  // namespace theta_detail

// ---------------------------------------------------------------------------
// theta_map / uniformize / theta_inverse
// ---------------------------------------------------------------------------

inline UniformizedFiber uniformize(const FiberPoint& fp) {
  theta_detail::require_theta_ready(fp);
  const WeierstrassChart chart = reduce_to_weierstrass(fp.base);
  return theta_detail::components_uniformization(chart, fp).vw;
}

inline ThetaCoords theta_map(const FiberPoint& fp,
                             ThetaBackend backend = ThetaBackend::uniformization,
                             const Tolerances& tol = {}) {
  theta_detail::require_theta_ready(fp);
  const BasePoint& b = fp.base;
  ThetaCoords th;
  th.family = b.family;

  const CycleBasis cb = cycle_basis(b);
  for (int i = 0; i < 2; ++i) {
    th.lattice.omega[i] = period(cb, DiffForm::omega, i, nullptr, tol);
    th.lattice.beta[i] = period(cb, DiffForm::beta_t_or_s, i, nullptr, tol);
  }
  th.lattice.scale = (b.family == FamilyId::PII) ? 1.0 : 0.5;
  th.lattice_note =
      "theta pair defined modulo integer combinations of g_i = scale * "
      "(omega_i, -beta_i); comparisons use half that scale";

  theta_detail::Components c;
  if (backend == ThetaBackend::uniformization) {
    const WeierstrassChart chart = reduce_to_weierstrass(b);
    c = theta_detail::components_uniformization(chart, fp);
  } else {
    c = theta_detail::components_periods(fp, tol);
  }
  th.theta_first = c.first;
  th.theta_H = c.H;
  th.theta_alpha = c.alpha;
  return th;
}

// Fiber point over `base` determined by the uniformization chart (v, w).
inline FiberPoint fiber_from_uniformized(const BasePoint& base,
                                         const UniformizedFiber& vw,
                                         cplx epsilon = cplx(1.0)) {
  require_regular(base);
  const WeierstrassChart chart = reduce_to_weierstrass(base);
  const WeierstrassValues wv = weierstrass_eval(vw.v, chart.ed);
  const CurvePoint pt = chart.inverse({wv.p, wv.dp});
  FiberPoint fp;
  fp.base = base;
  fp.epsilon = epsilon;
  fp.q = pt.x;
  fp.p = pt.y;
  fp.s = cplx(0.0);
  const cplx v = vw.v, w = vw.w;
  switch (base.family) {
    case FamilyId::PIII3:
      fp.r = (w * v - 1.0) / 2.0;
      break;
    case FamilyId::PII:
      fp.r = v / 2.0 - w * v * v + base.t * v * v * v / 12.0;
      break;
    case FamilyId::PI:
      fp.r = (wv.z - w) / (2.0 * fp.p);
      break;
  }
  return fp;
}

inline FiberPoint involution_piii(const FiberPoint& fp) {
  if (fp.base.family != FamilyId::PIII3)
    throw FamilyMismatch("involution_piii: defined for the PIII3 family only");
  if (std::abs(fp.q) < 1e-300)
    throw DenominatorZero("involution_piii: q = 0");
  FiberPoint out = fp;
  out.q = 1.0 / (fp.q * fp.base.t);
  out.p = -fp.base.t * fp.p * fp.q * fp.q;
  out.r = -(fp.r + 0.5);
  return out;
}

struct ThetaInverseResult {
  FiberPoint fiber;
  UniformizedFiber chart;
  int newton_steps = 0;
  bool has_involution_partner = false;
  FiberPoint involution_partner;  // PIII3: the second preimage
};

inline ThetaInverseResult theta_inverse(const BasePoint& base, cplx theta_first,
                                        cplx theta_H, cplx epsilon = cplx(1.0),
                                        const Tolerances& tol = {}) {
  require_regular(base);
  if (base.family == FamilyId::PII && std::abs(base.alpha) > 1e-13)
    throw ConfigError("theta_inverse: the PII structure is built at alpha = 0");
  ThetaInverseResult out;

  // theta = 0 is the zero section: q, p run off to infinity with a finite r
  if (std::abs(theta_first) < 1e-9) {
    const double inf = std::numeric_limits<double>::infinity();
    out.chart = {theta_first, theta_H};
    out.fiber.base = base;
    out.fiber.epsilon = epsilon;
    out.fiber.q = cplx(inf);
    out.fiber.p = cplx(inf);
    out.fiber.s = cplx(0.0);
    out.fiber.r = (base.family == FamilyId::PIII3) ? cplx(-0.5) : cplx(0.0);
    return out;
  }

  const WeierstrassChart chart = reduce_to_weierstrass(base);
  UniformizedFiber vw{theta_first, theta_H};
  if (base.family == FamilyId::PI) {
    out.chart = vw;  // the chart parameters are the theta coordinates exactly
    out.fiber = fiber_from_uniformized(base, vw, epsilon);
    return out;
  }

  FiberPoint fp;
  for (int it = 0;; ++it) {
    if (it >= 50)
      throw NoConvergenceNewton("theta_inverse: Newton did not converge in 50 steps");
    fp = fiber_from_uniformized(base, vw, epsilon);
    const auto c = theta_detail::components_from_vw(chart, fp, vw);
    const cplx r1 = c.first - theta_first;
    const cplx r2 = c.H - theta_H;
    out.newton_steps = it + 1;
    if (std::abs(r1) + std::abs(r2) <
        1e-12 * (1.0 + std::abs(theta_first) + std::abs(theta_H)))
      break;
    // theta_first = v exactly; theta_H is affine in w at fixed v
    const cplx dH_dw = (base.family == FamilyId::PIII3)
                           ? -fp.p * fp.q * vw.v
                           : fp.p * vw.v * vw.v;
    if (std::abs(dH_dw) < 1e-300)
      throw JacobianSingular("theta_inverse: degenerate w-derivative");
    vw.v -= r1;
    vw.w -= r2 / dH_dw;
  }
  out.chart = vw;
  out.fiber = fp;
  if (base.family == FamilyId::PIII3) {
    out.has_involution_partner = true;
    out.involution_partner = involution_piii(fp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plebanski function W
// ---------------------------------------------------------------------------

namespace theta_detail {

inline void check_denominator(cplx value, double scale, const char* locus) {
  if (std::abs(value) < 1e-12 * std::max(1.0, scale))
    throw DenominatorZero(std::string("plebanski_w: vanishing denominator ") + locus);
}

}  // namespace theta_detail

// PII value for general alpha and s (also used at alpha = 0 when s != 0).
inline cplx plebanski_w_pii_general(const FiberPoint& fp) {
  if (fp.base.family != FamilyId::PII)
    throw FamilyMismatch("plebanski_w_pii_general: PII only");
  const cplx t = fp.base.t, H = fp.base.H, al = fp.base.alpha;
  const cplx q = fp.q, p = fp.p, r = fp.r, s = fp.s;
  const cplx c1 = -t * t * t + 8.0 * H * t - 18.0 * al * al;
  const cplx c2 = -al * (t * t + 24.0 * H);
  const cplx t2m8H = t * t - 8.0 * H;
  const cplx Delta = 16.0 * (-27.0 * al * al * al * al -
                             al * al * t * (t * t - 72.0 * H) +
                             2.0 * H * t2m8H * t2m8H);
  theta_detail::check_denominator(
      Delta, std::pow(std::abs(t) + std::abs(H) + std::abs(al) + 1.0, 4), "Delta");
  const cplx w00 = p * (2.0 / 3.0 * c1 * q + 2.0 * c2);
  const cplx w01 =
      q * (4.0 * c1 * q * q + 4.0 * c2 * q +
           4.0 / 3.0 * (96.0 * H * H + 4.0 * H * t * t - 2.0 * t * t * t * t -
                        27.0 * al * al * t));
  const cplx w02 = 8.0 * p * (c1 * q - c2);
  const cplx w03 = 16.0 * q * (c1 / 3.0 * q * q - c2 * q + 4.0 * H * t * t -
                               3.0 * al * al * t - 32.0 * H * H);
  const cplx w10 =
      4.0 * p * (c1 * q * q + 2.0 * c2 * q +
                 (1.0 / 3.0) * (-96.0 * H * H + 28.0 * H * t * t -
                                2.0 * t * t * t * t - 45.0 * al * al * t));
  const cplx w11 = 16.0 * c1 * p * p;
  const cplx w12 = 16.0 * p * (c1 * q * q - 2.0 * c2 * q + 4.0 * H * t * t -
                               3.0 * al * al * t - 32.0 * H * H);
  const cplx w20 =
      8.0 * p * (c1 * q * q * q + c2 * q * q +
                 q * (-32.0 * H * H + 12.0 * H * t * t - 21.0 * t * al * al -
                      t * t * t * t) +
                 al * (27.0 * al * al - 24.0 * H * t + t * t * t));
  const cplx w21 = 16.0 * p * p * (c1 * q - c2);
  const cplx w30 = 16.0 / 3.0 * p * p * p * c1;
  return (w00 + s * (w01 + s * (w02 + s * w03)) +
          r * (w10 + s * (w11 + s * w12)) + r * r * (w20 + s * w21) +
          r * r * r * w30) /
         Delta;
}

inline cplx plebanski_w(const FiberPoint& fp) {
  const BasePoint& b = fp.base;
  const cplx t = b.t, H = b.H, q = fp.q, p = fp.p, r = fp.r;
  switch (b.family) {
    case FamilyId::PIII3: {
      const cplx D = H * H - 4.0 * t;
      theta_detail::check_denominator(D, std::abs(H * H) + std::abs(t), "H^2 - 4t");
      return p * q *
             (t * q + (H + 6.0 * t * q) * r + (6.0 * H + 12.0 * t * q) * r * r +
              8.0 * p * p * q * q * r * r * r) /
             (6.0 * D);
    }
    case FamilyId::PI: {
      const cplx D = 4.0 * t * t * t + 27.0 * H * H;
      theta_detail::check_denominator(D, std::abs(t * t * t) + std::abs(H * H),
                                      "4t^3 + 27H^2");
      return p *
             (t - (9.0 * H - 6.0 * t * q) * r +
              (8.0 * t * t - 18.0 * H * q + 12.0 * t * q * q) * r * r +
              8.0 * t * p * p * r * r * r) /
             (2.0 * D);
    }
    case FamilyId::PII: {
      if (std::abs(b.alpha) > 1e-13 || std::abs(fp.s) > 1e-13)
        return plebanski_w_pii_general(fp);
      const cplx D = 48.0 * H * (t * t - 8.0 * H);
      theta_detail::check_denominator(D, std::abs(H) * (std::abs(t * t) + std::abs(H)),
                                      "48 H (t^2 - 8H)");
      return p *
             (-t * q - 2.0 * r * (2.0 * t * t + 3.0 * q * q * t - 12.0 * H) +
              12.0 * r * r * q * (-t * t - q * q * t + 4.0 * H) -
              8.0 * r * r * r * p * p * t) /
             D;
    }
  }
  throw FamilyMismatch("plebanski_w: unknown family");
}

// Euler-rescaled fiber point (weights per family; W has weight -1).
inline FiberPoint euler_scaled(const FiberPoint& fp, cplx lambda) {
  double wt, wH, wq, wr, wp, wa;
  switch (fp.base.family) {
    case FamilyId::PIII3: wt = 4; wH = 2; wq = -2; wr = 0; wp = 3; wa = 0; break;
    case FamilyId::PII:
      wt = 2.0 / 3; wH = 4.0 / 3; wq = 1.0 / 3; wr = -1.0 / 3; wp = 2.0 / 3; wa = 1;
      break;
    case FamilyId::PI:
      wt = 4.0 / 5; wH = 6.0 / 5; wq = 2.0 / 5; wr = -2.0 / 5; wp = 3.0 / 5; wa = 0;
      break;
    default: throw FamilyMismatch("euler_scaled: unknown family");
  }
  const cplx L = std::log(lambda);
  auto scl = [&](double w) { return std::exp(w * L); };
  FiberPoint out = fp;
  out.base.t = scl(wt) * fp.base.t;
  out.base.H = scl(wH) * fp.base.H;
  out.base.alpha = scl(wa) * fp.base.alpha;
  out.q = scl(wq) * fp.q;
  out.p = scl(wp) * fp.p;
  out.r = scl(wr) * fp.r;
  out.epsilon = lambda * fp.epsilon;
  return out;
}

// ---------------------------------------------------------------------------
// Vertical fields and the third derivatives of K
// ---------------------------------------------------------------------------

// Coefficients of the inverted theta-coordinate fields on the fiber
// directions (q, r, s); p follows from the sheet constraint.
struct VerticalField {
  cplx dq{}, dr{}, ds{};
};

// fields[0] = d/dtheta_first, fields[1] = d/dtheta_H, fields[2] (PII) = d/dtheta_alpha
inline std::vector<VerticalField> vertical_fields(const FiberPoint& fp) {
  theta_detail::require_theta_ready(fp);
  const BasePoint& b = fp.base;
  const cplx q = fp.q, p = fp.p, r = fp.r, s = fp.s;
  std::vector<VerticalField> out;
  switch (b.family) {
    case FamilyId::PIII3:
      out.push_back({2.0 * q * q * p,
                     (2.0 * r - 2.0 * b.t * r * q * q - b.t * q * q) / (2.0 * p * q * q),
                     cplx(0.0)});
      out.push_back({cplx(0.0), -1.0 / (2.0 * q * p), cplx(0.0)});
      break;
    case FamilyId::PII: {
      const cplx A = 2.0 * q * q * q + b.t * q - b.alpha;
      out.push_back({p, -(r / p * A + s + q * q / (2.0 * p)), cplx(0.0)});
      out.push_back({cplx(0.0), -1.0 / p, cplx(0.0)});
      out.push_back({cplx(0.0), q / p, cplx(-1.0)});
      break;
    }
    case FamilyId::PI:
      out.push_back({2.0 * p, -(q / (2.0 * p) + r * (3.0 * q * q + b.t) / p), cplx(0.0)});
      out.push_back({cplx(0.0), -1.0 / (2.0 * p), cplx(0.0)});
      break;
  }
  return out;
}

// Move along a vertical field keeping the point on its p-sheet.
inline FiberPoint advance_vertical(const FiberPoint& fp, const VerticalField& V,
                                   cplx h) {
  FiberPoint out = fp;
  out.q = fp.q + h * V.dq;
  out.r = fp.r + h * V.dr;
  out.s = fp.s + h * V.ds;
  const cplx gq = iso_detail::q0_partials(fp.base, fp.q).dq;
  out.p = sheet_y(fp.base, out.q, fp.p + h * V.dq * gq / (2.0 * fp.p));
  return out;
}

// Closed-form third derivatives of the fiberwise potential K over the theta
// directions ('t' = theta_first, 'H' = theta_H, 'a' = theta_alpha for PII).
struct ThirdDerivatives {
  FamilyId family = FamilyId::PI;
  cplx ttt{}, ttH{}, tHH{}, HHH{};
  cplx att{}, atH{}, aHH{}, aat{}, aaH{};  // PII only
};

inline ThirdDerivatives k_third_derivatives(const FiberPoint& fp) {
  theta_detail::require_theta_ready(fp);
  const BasePoint& b = fp.base;
  const cplx t = b.t, H = b.H, q = fp.q, p = fp.p, r = fp.r, s = fp.s;
  const cplx p2 = p * p;
  ThirdDerivatives kd;
  kd.family = b.family;
  switch (b.family) {
    case FamilyId::PIII3: {
      const cplx q2 = q * q, q3 = q2 * q, q4 = q2 * q2;
      kd.ttt = -3.0 * t * t / (2.0 * p2) + q * t +
               2.0 * r * t / (p2 * q2) * (3.0 - 3.0 * t * q2 + 2.0 * p2 * q3) +
               2.0 * r * r / (p2 * q4) *
                   (-1.0 + 2.0 * H * q + 10.0 * t * q2 + 2.0 * H * t * q3 -
                    t * t * q4);
      kd.ttH = -t / (p2 * q) + 2.0 * r / (p2 * q3) * (1.0 - t * q2);
      kd.tHH = -1.0 / (2.0 * q2 * p2);
      kd.HHH = cplx(0.0);
      break;
    }
    case FamilyId::PII: {
      const cplx A = 2.0 * q * q * q + t * q - b.alpha;
      kd.HHH = cplx(0.0);
      kd.tHH = -1.0 / p2;
      kd.ttH = -2.0 * r * A / p2 - q * q / p2 - s / p;
      kd.ttt = -3.0 * q * q * q * q / (4.0 * p2) +
               r * (2.0 * q - 3.0 * q * q * A / p2) +
               r * r * (6.0 * q * q + t - 3.0 * A * A / p2) -
               3.0 * s * q * q / (2.0 * p) - 3.0 * s * r * A / p - s * s;
      kd.aHH = cplx(0.0);
      kd.atH = q / p2;
      kd.att = q * q * q / p2 - r + s * q / p + 2.0 * r * q / p2 * A;
      kd.aaH = cplx(0.0);
      kd.aat = -q * q / p2;
      break;
    }
    case FamilyId::PI:
      throw FamilyMismatch(
          "k_third_derivatives: closed forms are provided for PIII3 and PII");
  }
  return kd;
}

// Order-insensitive accessor.
inline cplx k_third(const ThirdDerivatives& kd, char a, char b, char c) {
  char d[3] = {a, b, c};
  std::sort(d, d + 3);  // 'H' < 'a' < 't'
  auto is = [&](const char* tag) {
    char e[3] = {tag[0], tag[1], tag[2]};
    std::sort(e, e + 3);
    return d[0] == e[0] && d[1] == e[1] && d[2] == e[2];
  };
  if (is("ttt")) return kd.ttt;
  if (is("ttH")) return kd.ttH;
  if (is("tHH")) return kd.tHH;
  if (is("HHH")) return kd.HHH;
  if (kd.family == FamilyId::PII) {
    if (is("att")) return kd.att;
    if (is("atH")) return kd.atH;
    if (is("aHH")) return kd.aHH;
    if (is("aat")) return kd.aat;
    if (is("aaH")) return kd.aaH;
  }
  throw DegenerateInput("k_third: unknown direction triple");
}

// ---------------------------------------------------------------------------
// Flow-directional second derivatives of K (the (a, b, c) data)
// ---------------------------------------------------------------------------

namespace theta_detail {

// Advance the full extended state along a flow rate and snap p to the sheet.
inline FiberPoint advance_flow(const FiberPoint& fp, const FlowRate& f, double h) {
  FiberPoint out = fp;
  out.base.t = fp.base.t + h * f.dt;
  out.base.H = fp.base.H + h * f.dH;
  out.base.alpha = fp.base.alpha + h * f.dalpha;
  out.q = fp.q + h * f.dq;
  out.r = fp.r + h * f.dr;
  out.s = fp.s + h * f.ds;
  out.p = sheet_y(out.base, out.q, fp.p + h * f.dp);
  return out;
}

// Lattice-safe central difference of the theta pair along a flow, in the
// family time normalization (per unit s for PIII3, per unit t otherwise).
inline std::pair<cplx, cplx> flow_theta_derivative(const FiberPoint& fp, FlowId id,
                                                   const ThetaLattice& lat,
                                                   double h = 1e-5) {
  FlowRate f = flow_field(fp, id);
  // only the time flow is re-normalized to the log-time s = log t for PIII3
  if (fp.base.family == FamilyId::PIII3 &&
      (id == FlowId::w1 || id == FlowId::w1_reference)) {
    const cplx t = fp.base.t;
    f.dt *= t; f.dH *= t; f.dalpha *= t;
    f.dq *= t; f.dp *= t; f.dr *= t; f.ds *= t;
  }
  const FiberPoint fplus = advance_flow(fp, f, h);
  const FiberPoint fminus = advance_flow(fp, f, -h);
  const WeierstrassChart cp = reduce_to_weierstrass(fplus.base);
  const WeierstrassChart cm = reduce_to_weierstrass(fminus.base);
  const Components a = components_uniformization(cp, fplus);
  const Components b = components_uniformization(cm, fminus);
  const auto [d1, d2] =
      theta_reduce_difference(lat, a.first - b.first, a.H - b.H);
  return {d1 / (2.0 * h), d2 / (2.0 * h)};
}

}  // namespace theta_detail

// Second derivatives of K recovered from the extended flows: the pushforward
// of the w1 flow is (1/eps) d/dtheta_first + a d/dtheta_first + ... giving
//   K_tt = -(w1 . theta_H), K_tH = (w1 . theta_first) - 1/eps,
//   K_HH = (w2 . theta_first).
// (The w3 flow moves alpha off the alpha = 0 chart, so the alpha row is not
// probed this way; its closed forms are covered by the integrability checks.)
struct KSecondDerivatives {
  cplx tt{}, tH{}, HH{};
};

inline KSecondDerivatives k_second_derivatives_fd(const FiberPoint& fp,
                                                  const ThetaLattice& lat,
                                                  double h = 1e-5) {
  KSecondDerivatives out;
  const auto w1 = theta_detail::flow_theta_derivative(fp, FlowId::w1, lat, h);
  const auto w2 = theta_detail::flow_theta_derivative(fp, FlowId::w2, lat, h);
  out.tH = w1.first - 1.0 / fp.epsilon;
  out.tt = -w1.second;
  out.HH = w2.first;
  return out;
}

namespace theta_detail {

// Fourth-order five-point variant of flow_theta_derivative (lattice-safe).
inline std::pair<cplx, cplx> flow_theta_derivative4(const FiberPoint& fp, FlowId id,
                                                    const ThetaLattice& lat,
                                                    double h) {
  FlowRate f = flow_field(fp, id);
  if (fp.base.family == FamilyId::PIII3 &&
      (id == FlowId::w1 || id == FlowId::w1_reference)) {
    const cplx t = fp.base.t;
    f.dt *= t; f.dH *= t; f.dalpha *= t;
    f.dq *= t; f.dp *= t; f.dr *= t; f.ds *= t;
  }
  auto th = [&](double s) {
    const FiberPoint g = advance_flow(fp, f, s);
    const WeierstrassChart c = reduce_to_weierstrass(g.base);
    const Components comp = components_uniformization(c, g);
    return std::pair<cplx, cplx>{comp.first, comp.H};
  };
  const auto p1 = th(h), m1 = th(-h), p2 = th(2 * h), m2 = th(-2 * h);
  const auto [a1, a2] =
      theta_reduce_difference(lat, p1.first - m1.first, p1.second - m1.second);
  const auto [b1, b2] =
      theta_reduce_difference(lat, p2.first - m2.first, p2.second - m2.second);
  return {(8.0 * a1 - b1) / (12.0 * h), (8.0 * a2 - b2) / (12.0 * h)};
}

}  // namespace theta_detail

// Third derivatives of K by a five-point vertical finite difference of the
// flow-recovered second derivatives (independent of the closed forms): the
// derivative along d/dtheta_first supplies ttt / ttH, the one along
// d/dtheta_H supplies tHH / HHH.  Step sizes tuned so that both the h^4
// truncation and the quadrature noise stay below ~5e-7.
inline ThirdDerivatives k_third_derivatives_fd(const FiberPoint& fp,
                                               const ThetaLattice& lat,
                                               double h_flow = 1e-3,
                                               double h_vert = 2.5e-3) {
  const auto V = vertical_fields(fp);
  auto k2 = [&](const FiberPoint& g) {
    const auto w1 = theta_detail::flow_theta_derivative4(g, FlowId::w1, lat, h_flow);
    const auto w2 = theta_detail::flow_theta_derivative4(g, FlowId::w2, lat, h_flow);
    return std::array<cplx, 3>{-w1.second, w1.first - 1.0 / g.epsilon, w2.first};
  };
  auto d4 = [&](const VerticalField& dir) {
    const auto p1 = k2(advance_vertical(fp, dir, h_vert));
    const auto m1 = k2(advance_vertical(fp, dir, -h_vert));
    const auto p2 = k2(advance_vertical(fp, dir, 2 * h_vert));
    const auto m2 = k2(advance_vertical(fp, dir, -2 * h_vert));
    std::array<cplx, 3> out;
    for (int i = 0; i < 3; ++i)
      out[i] = (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * h_vert);
    return out;
  };
  const auto dt = d4(V[0]);
  const auto dH = d4(V[1]);
  ThirdDerivatives kd;
  kd.family = fp.base.family;
  kd.ttt = dt[0];
  kd.ttH = dt[1];
  kd.tHH = dH[1];
  kd.HHH = dH[2];
  return kd;
}

// ---------------------------------------------------------------------------
// Heavenly equation residual
// ---------------------------------------------------------------------------

// Canonical coordinates around a base point: theta_i = beta_i theta_first +
// omega_i theta_H over the frozen cycle basis, z-derivatives through the
// period Jacobian dz_i = (beta_i, omega_i) d(b1, H) with b1 = s (PIII3) or t.
class CanonicalCoords {
 public:
  explicit CanonicalCoords(const BasePoint& b, const Tolerances& tol = {})
      : b0_(b), tol_(tol) {
    require_regular(b);
    const CycleBasis cb = cycle_basis(b);
    if (!cb.elliptic)
      throw ConfigError("CanonicalCoords: elliptic reduction required (PII needs alpha = 0)");
    gamma_in_ab_ = cb.gamma_in_ab;
    pairing_ = cb.pairing;
  }

  cplx eta12() const { return kTwoPiI * double(pairing_); }

  // rows: dz_i = jac[i][0] d b1 + jac[i][1] dH
  std::array<std::array<cplx, 2>, 2> jacobian(const BasePoint& b) const {
    CycleBasis cb;  // minimal shell for period_fast
    cb.base = b;
    cb.elliptic = true;
    cb.chart = reduce_to_weierstrass(b);
    cb.gamma_in_ab = gamma_in_ab_;
    std::array<std::array<cplx, 2>, 2> J;
    for (int i = 0; i < 2; ++i) {
      J[i][0] = period_fast(cb, DiffForm::beta_t_or_s, i);
      J[i][1] = period_fast(cb, DiffForm::omega, i);
    }
    return J;
  }

  // W as a function of the base point and the canonical theta pair.
  cplx w_at(const BasePoint& b, cplx th1, cplx th2, cplx epsilon = cplx(1.0)) const {
    const auto J = jacobian(b);
    const cplx det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
    if (std::abs(det) < 1e-10 * (std::abs(J[0][0] * J[1][1]) +
                                 std::abs(J[0][1] * J[1][0]) + 1e-300))
      throw JacobianSingular("CanonicalCoords: period Jacobian is singular");
    const cplx tf = (J[1][1] * th1 - J[0][1] * th2) / det;
    const cplx tH = (-J[1][0] * th1 + J[0][0] * th2) / det;
    return plebanski_w(theta_inverse(b, tf, tH, epsilon, tol_).fiber);
  }

  // Shift the base along the b-coordinates (b1, H); b1 = log t for PIII3.
  BasePoint shifted(double d1, double d2) const {
    BasePoint b = b0_;
    if (b.family == FamilyId::PIII3)
      b.t = b0_.t * std::exp(cplx(d1));
    else
      b.t = b0_.t + d1;
    b.H = b0_.H + d2;
    return b;
  }

  const BasePoint& center() const { return b0_; }

 private:
  BasePoint b0_;
  Tolerances tol_;
  std::array<std::array<long, 2>, 2> gamma_in_ab_{};
  int pairing_ = 2;
};

// Residual of the second heavenly equation in the canonical pair (i, j):
//   W_{theta_i z_j} - W_{theta_j z_i} - eta_12 (W_{theta_i theta_1} W_{theta_j theta_2}
//                                              - W_{theta_i theta_2} W_{theta_j theta_1}).
inline cplx heavenly_residual(const BasePoint& base, const std::array<cplx, 2>& theta,
                              int i, int j, cplx epsilon = cplx(1.0),
                              const Tolerances& tol = {}) {
  if (i < 1 || i > 2 || j < 1 || j > 2)
    throw ConfigError("heavenly_residual: indices must be 1 or 2");
  if (i == j) return cplx(0.0);
  const CanonicalCoords cc(base, tol);
  const double hb = 1e-3;  // base-coordinate step
  const double ht = 1e-3;  // theta step

  auto w = [&](double d1, double d2, cplx s1, cplx s2) {
    return cc.w_at(cc.shifted(d1, d2), theta[0] + s1, theta[1] + s2, epsilon);
  };

  // dW/dtheta_k at base shifted by (d1, d2)
  auto w_theta = [&](int k, double d1, double d2) {
    const cplx e1 = (k == 1) ? cplx(ht) : cplx(0.0);
    const cplx e2 = (k == 2) ? cplx(ht) : cplx(0.0);
    return (w(d1, d2, e1, e2) - w(d1, d2, -e1, -e2)) / (2.0 * ht);
  };

  // mixed W_{theta_k z_l} by chain rule through the period Jacobian at center
  const auto J0 = cc.jacobian(cc.center());
  const cplx det0 = J0[0][0] * J0[1][1] - J0[0][1] * J0[1][0];
  if (std::abs(det0) < 1e-10 * (std::abs(J0[0][0] * J0[1][1]) +
                                std::abs(J0[0][1] * J0[1][0]) + 1e-300))
    throw JacobianSingular("heavenly_residual: period Jacobian is singular");
  // db/dz = J^{-1}: columns give (db1/dz_l, dH/dz_l)
  const cplx Jinv[2][2] = {{J0[1][1] / det0, -J0[0][1] / det0},
                           {-J0[1][0] / det0, J0[0][0] / det0}};

  auto w_theta_z = [&](int k, int l) {
    const cplx d_b1 = (w_theta(k, hb, 0.0) - w_theta(k, -hb, 0.0)) / (2.0 * hb);
    const cplx d_b2 = (w_theta(k, 0.0, hb) - w_theta(k, 0.0, -hb)) / (2.0 * hb);
    return Jinv[0][l - 1] * d_b1 + Jinv[1][l - 1] * d_b2;
  };

  // second theta derivatives at the center
  const cplx w0 = w(0, 0, cplx(0.0), cplx(0.0));
  auto w_tt = [&](int k, int l) {
    const cplx ek1 = (k == 1) ? cplx(ht) : cplx(0.0);
    const cplx ek2 = (k == 2) ? cplx(ht) : cplx(0.0);
    const cplx el1 = (l == 1) ? cplx(ht) : cplx(0.0);
    const cplx el2 = (l == 2) ? cplx(ht) : cplx(0.0);
    if (k == l)
      return (w(0, 0, ek1, ek2) - 2.0 * w0 + w(0, 0, -ek1, -ek2)) / (ht * ht);
    return (w(0, 0, ek1 + el1, ek2 + el2) - w(0, 0, ek1 - el1, ek2 - el2) -
            w(0, 0, -ek1 + el1, -ek2 + el2) + w(0, 0, -ek1 - el1, -ek2 - el2)) /
           (4.0 * ht * ht);
  };

  const cplx mixed = w_theta_z(i, j) - w_theta_z(j, i);
  const cplx quad = cc.eta12() * (w_tt(i, 1) * w_tt(j, 2) - w_tt(i, 2) * w_tt(j, 1));
  return mixed - quad;
}

inline cplx heavenly_residual(const FiberPoint& fp, int i, int j,
                              const Tolerances& tol = {}) {
  const ThetaCoords th = theta_map(fp, ThetaBackend::uniformization, tol);
  // canonical theta_i = beta_i theta_first + omega_i theta_H
  const CanonicalCoords cc(fp.base, tol);
  const auto J = cc.jacobian(fp.base);
  const std::array<cplx, 2> theta{
      J[0][0] * th.theta_first + J[0][1] * th.theta_H,
      J[1][0] * th.theta_first + J[1][1] * th.theta_H};
  return heavenly_residual(fp.base, theta, i, j, fp.epsilon, tol);
}

// ---------------------------------------------------------------------------
// Prepotential S and the linear connection at theta = 0
// ---------------------------------------------------------------------------

struct Prepotential {
  cplx value{};                 // S
  cplx grad_first{}, grad_H{};  // closed-form gradient (d/ds or d/dt, d/dH)
  cplx fd_first{}, fd_H{};      // FD of W through theta_inverse at theta -> 0
};

inline Prepotential prepotential_s(const BasePoint& b, const Tolerances& tol = {}) {
  require_regular(b);
  Prepotential out;
  const cplx t = b.t, H = b.H;
  switch (b.family) {
    case FamilyId::PIII3: {
      const cplx D = H * H - 4.0 * t;
      theta_detail::check_denominator(D, std::abs(H * H) + std::abs(t), "H^2 - 4t");
      out.value = -std::log(D) / 24.0;
      out.grad_first = t / (6.0 * D);  // d/ds with s = log t
      out.grad_H = -H / (12.0 * D);
      break;
    }
    case FamilyId::PII: {
      const cplx D = H * H * (8.0 * H - t * t);
      theta_detail::check_denominator(D, std::pow(std::abs(H) + std::abs(t), 3),
                                      "H^2 (8H - t^2)");
      out.value = -std::log(D) / 48.0;
      out.grad_first = t / (24.0 * (8.0 * H - t * t));
      out.grad_H = -(12.0 * H - t * t) / (24.0 * H * (8.0 * H - t * t));
      break;
    }
    case FamilyId::PI: {
      const cplx D = 4.0 * t * t * t + 27.0 * H * H;
      theta_detail::check_denominator(D, std::abs(t * t * t) + std::abs(H * H),
                                      "4t^3 + 27H^2");
      out.value = -std::log(D) / 24.0;
      out.grad_first = -t * t / (2.0 * D);
      out.grad_H = -9.0 * H / (4.0 * D);
      break;
    }
  }
  // fourth-order central FD of W(theta) at theta -> 0 through theta_inverse;
  // the theta_H direction carries a small theta_first offset to stay off the
  // zero section (the fiber point runs to infinity at theta_first = 0), which
  // biases the result only at O(offset^2).
  const double h = 1e-2, off = 1e-3;
  auto W = [&](cplx tf, cplx tH) {
    return plebanski_w(theta_inverse(b, tf, tH, cplx(1.0), tol).fiber);
  };
  auto d4 = [&](bool first) {
    auto f = [&](double x) {
      return first ? W(cplx(x), cplx(0.0)) : W(cplx(off), cplx(x));
    };
    return (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
  };
  out.fd_first = d4(true);
  out.fd_H = d4(false);
  return out;
}

// Linear connection on the base at theta = 0, from the limits of the closed
// third derivatives of K along the zero section of the (v, w) chart:
//   nabla_{d_i} d_j = Gamma^1_{ij} d_{b1} + Gamma^2_{ij} d_H,
//   Gamma^1_{ij} = -K_{theta_i theta_j theta_H}|_0,
//   Gamma^2_{ij} = +K_{theta_i theta_j theta_first}|_0.
struct JoyceConnection {
  cplx k3_ttt{}, k3_ttH{}, k3_tHH{}, k3_HHH{};  // limits at theta = 0
  std::array<std::array<std::array<cplx, 2>, 2>, 2> gamma{};  // gamma[k][i][j]
  double flat_residual = 0.0;  // max connection coefficient in the flat frame
  const char* flat_coords = "";
};

inline JoyceConnection joyce_connection(const BasePoint& b,
                                        const Tolerances& tol = {}) {
  require_regular(b);
  if (b.family == FamilyId::PI)
    throw FamilyMismatch("joyce_connection: provided for PIII3 and PII");
  const double v0 = 0.02;
  auto k3_at = [&](double v) {
    const FiberPoint fp = fiber_from_uniformized(b, {cplx(v), cplx(0.0)});
    return k_third_derivatives(fp);
  };
  // even-part Richardson along the w = 0 section: f0 = (4 E(h) - E(2h)) / 3
  auto limit = [&](auto pick) {
    auto E = [&](double h) { return (pick(k3_at(h)) + pick(k3_at(-h))) / 2.0; };
    return (4.0 * E(v0 / 2.0) - E(v0)) / 3.0;
  };
  JoyceConnection jc;
  jc.k3_ttt = limit([](const ThirdDerivatives& k) { return k.ttt; });
  jc.k3_ttH = limit([](const ThirdDerivatives& k) { return k.ttH; });
  jc.k3_tHH = limit([](const ThirdDerivatives& k) { return k.tHH; });
  jc.k3_HHH = limit([](const ThirdDerivatives& k) { return k.HHH; });

  auto k3 = [&](int i, int j, int k) -> cplx {
    const int n = i + j + k;  // number of H-directions among the three
    switch (n) {
      case 0: return jc.k3_ttt;
      case 1: return jc.k3_ttH;
      case 2: return jc.k3_tHH;
      default: return jc.k3_HHH;
    }
  };
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      jc.gamma[0][i][j] = -k3(i, j, 1);  // coefficient on d_{b1}
      jc.gamma[1][i][j] = k3(i, j, 0);   // coefficient on d_H
    }

  // flat frame: PIII3 (d_s, d_H); PII (d_t + (t/4) d_H, d_H)
  if (b.family == FamilyId::PIII3) {
    jc.flat_coords = "(s, H)";
    double m = 0.0;
    for (int k = 0; k < 2; ++k)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) m = std::max(m, std::abs(jc.gamma[k][i][j]));
    jc.flat_residual = m;
  } else {
    jc.flat_coords = "(t, H - t^2/8)";
    const cplx c = b.t / 4.0;
    // e1 = d_t + c d_H, e2 = d_H; nabla_{e_a} e_b expanded in (d_t, d_H)
    auto G = [&](int i, int j, int k) { return jc.gamma[k][i][j]; };
    double m = 0.0;
    for (int k = 0; k < 2; ++k) {
      // nabla_{e1} e1 = (dc/dt) d_H + G(t,t) + c G(H,t) + c G(t,H) + c^2 G(H,H)
      cplx v11 = G(0, 0, k) + c * (G(1, 0, k) + G(0, 1, k)) + c * c * G(1, 1, k);
      if (k == 1) v11 += 0.25;  // derivative of the frame coefficient t/4
      const cplx v12 = G(0, 1, k) + c * G(1, 1, k);
      const cplx v21 = G(1, 0, k) + c * G(1, 1, k);
      const cplx v22 = G(1, 1, k);
      m = std::max({m, std::abs(v11), std::abs(v12), std::abs(v21), std::abs(v22)});
    }
    jc.flat_residual = m;
  }
  return jc;
}

}  // namespace joyce
