#pragma once
// Spectral-curve periods: meromorphic differentials, homology cycle basis
// with a normalized intersection pairing, contour quadrature with sheet
// tracking, fast elliptic-closed-form period routes, and the z-coordinates.

#include <joyce/core.hpp>
#include <joyce/families.hpp>
#include <joyce/numerics/quadrature.hpp>

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

namespace joyce {

enum class DiffForm : std::uint8_t { lambda, omega, beta_t_or_s, beta_alpha, theta_form };

// First subleading gauge potential Q1(x) of the oper normal form; the
// regularizing differential is theta = -Q1(x) dx / (2y).
inline cplx oper_q1(const FiberPoint& fp, cplx x) {
    const cplx q = fp.q, p = fp.p, r = fp.r, s = fp.s;
    switch (fp.base.family) {
        case FamilyId::PI:  return -p / (x - q) + 2.0 * p * r;
        case FamilyId::PII: return -p / (x - q) + 2.0 * p * r - 2.0 * s * (x - q);
        case FamilyId::PIII3:
            return -p * q * q / (x * x * (x - q)) + 2.0 * p * q * r / (x * x);
    }
    throw FamilyMismatch("oper_q1: unknown family");
}

// Second subleading gauge potential Q2(x) of the oper normal form.
inline cplx oper_q2(const FiberPoint& fp, cplx x) {
    const cplx q = fp.q, r = fp.r;
    const cplx d = x - q;
    switch (fp.base.family) {
        case FamilyId::PI:
        case FamilyId::PII:
            return 0.75 / (d * d) - r / d + r * r;
        case FamilyId::PIII3:
            return 0.75 / (d * d) - (x + r * q) / (x * x * d) + r * r / (x * x);
    }
    throw FamilyMismatch("oper_q2: unknown family");
}

// Coefficient of the requested differential against dx at a sheet-explicit
// curve point.  theta_form needs the fiber data (q, p, r, s).
inline cplx differential_eval(DiffForm form, const BasePoint& b, const CurvePoint& pt,
                              const FiberPoint* fp = nullptr) {
    require_on_curve(b, pt);
    const cplx x = pt.x, y = pt.y;
    const double xscale = std::max(1.0, std::abs(x));
    auto pole_guard = [&](cplx at, const char* what) {
        if (std::abs(x - at) < 1e-9 * xscale) throw PoleHit(std::string("differential_eval: ") + what);
    };
    switch (form) {
        case DiffForm::lambda:
            if (b.family == FamilyId::PIII3) pole_guard(cplx(0.0), "lambda has a pole at x = 0");
            return y;
        case DiffForm::omega:
            if (std::abs(y) < 1e-9) throw PoleHit("differential_eval: omega ~ dx/y at a branch point");
            switch (b.family) {
                case FamilyId::PI:  return 1.0 / (2.0 * y);
                case FamilyId::PII: return 1.0 / y;
                case FamilyId::PIII3: pole_guard(cplx(0.0), "omega pole at x = 0");
                    return 1.0 / (2.0 * x * x * y);
            }
            break;
        case DiffForm::beta_t_or_s:
            if (std::abs(y) < 1e-9) throw PoleHit("differential_eval: beta ~ dx/y at a branch point");
            switch (b.family) {
                case FamilyId::PI:  return x / (2.0 * y);
                case FamilyId::PII: return x * x / (2.0 * y);
                case FamilyId::PIII3: pole_guard(cplx(0.0), "beta pole at x = 0");
                    return b.t / (2.0 * x * y);
            }
            break;
        case DiffForm::beta_alpha:
            if (b.family != FamilyId::PII)
                throw FamilyMismatch("differential_eval: beta_alpha exists only for PII");
            if (std::abs(y) < 1e-9) throw PoleHit("differential_eval: beta_alpha at a branch point");
            return -x / y;
        case DiffForm::theta_form: {
            if (fp == nullptr) throw ConfigError("differential_eval: theta_form needs a FiberPoint");
            pole_guard(fp->q, "theta_form has simple poles at x = q");
            if (b.family == FamilyId::PIII3) pole_guard(cplx(0.0), "theta_form pole at x = 0");
            if (std::abs(y) < 1e-9) throw PoleHit("differential_eval: theta_form at a branch point");
            return -oper_q1(*fp, x) / (2.0 * y);
        }
    }
    throw FamilyMismatch("differential_eval: unknown form/family");
}

namespace spectral_detail {

// Integrates f(Z, Y) dZ around a closed polygon on the double cover
// Y^2 = P(Z), tracking the sheet by analytic continuation of the square
// root along the polygon.  Checks that the sheet closes up.
template <typename F>
cplx loop_integral(const Poly& P, const std::vector<cplx>& verts, const F& f,
                   const Tolerances& tol = {}) {
    if (verts.size() < 4 || std::abs(verts.front() - verts.back()) > 1e-14)
        throw DegenerateInput("loop_integral: polygon must be closed");
    cplx y0 = std::sqrt(poly_eval(P, verts[0]));
    cplx y_run = y0;
    cplx total{};
    for (std::size_t i = 0; i + 1 < verts.size(); ++i) {
        const cplx z0 = verts[i], z1 = verts[i + 1];
        const cplx p0 = poly_eval(P, z0);
        const cplx anchor = y_run;
        auto g = [&](cplx z) {
            const cplx yz = anchor * std::sqrt(poly_eval(P, z) / p0);
            return f(z, yz);
        };
        total += quad_segment(g, PathSegment{z0, z1, SingularityHint::none}, tol);
        y_run = anchor * std::sqrt(poly_eval(P, z1) / p0);
    }
    if (std::abs(y_run - y0) > 1e-6 * std::abs(y0))
        throw NonConvergence("loop_integral: sheet did not close up around the loop");
    return total;
}

// Distance from z to the segment [a, b].
inline double segment_distance(const cplx& z, const cplx& a, const cplx& b) {
    const cplx d = b - a;
    const double L2 = std::norm(d);
    if (L2 == 0.0) return std::abs(z - a);
    double s = ((z - a).real() * d.real() + (z - a).imag() * d.imag()) / L2;
    s = std::min(1.0, std::max(0.0, s));
    return std::abs(z - (a + s * d));
}

// Closed "stadium" contour around the segment [f1, f2]: two straight sides
// offset by rho and semicircular caps of radius rho around the endpoints.
// Works for arbitrarily close third roots since rho adapts to the clearance.
inline std::vector<cplx> clear_loop(const cplx& f1, const cplx& f2,
                                    const std::vector<cplx>& avoid, int n_arc = 24) {
    const double L = std::abs(f2 - f1);
    if (L == 0.0) throw DegenerateInput("clear_loop: coincident foci");
    double rho = 0.4 * L;
    for (const cplx& z : avoid)
        rho = std::min(rho, 0.45 * segment_distance(z, f1, f2));
    if (rho < 1e-9 * L)
        throw DegenerateInput("clear_loop: could not separate the root pair from the other roots");
    const cplx u = (f2 - f1) / L;
    const cplx n = kI * u;
    std::vector<cplx> v;
    v.reserve(4 * n_arc + 1);
    auto arc = [&](const cplx& c, double th0, double th1) {
        for (int k = 0; k <= n_arc; ++k) {
            const double th = th0 + (th1 - th0) * k / n_arc;
            v.push_back(c + rho * u * std::exp(kI * th));
        }
    };
    auto side = [&](const cplx& a, const cplx& b) {
        for (int k = 1; k < n_arc; ++k) v.push_back(a + (b - a) * (double(k) / n_arc));
    };
    // counter-clockwise in the local frame (u, n)
    v.push_back(f1 - rho * n);
    side(f1 - rho * n, f2 - rho * n);
    arc(f2, -kPi / 2.0, kPi / 2.0);
    side(f2 + rho * n, f1 + rho * n);
    arc(f1, kPi / 2.0, 3.0 * kPi / 2.0);
    v.push_back(v.front());  // exact closure
    return v;
}

} // namespace spectral_detail

// Homology cycle basis gamma_1, gamma_2 (plus the residue cycle gamma_3 for
// PII) realized as closed polygons in a pole-free chart of the curve.
//
// Chart conventions: PIII3 uses the Weierstrass X-chart (Y^2 = 4X^3-g2X-g3),
// which keeps representatives away from x = 0 and x = infinity; PI and PII
// use the x-chart with Y^2 = Q0(x) (PI: Y = y of the model polynomial).
struct CycleBasis {
    BasePoint base;
    bool x_chart = false;           // true -> loops live in the family x-plane
    bool elliptic = false;          // Weierstrass data available
    WeierstrassChart chart;         // valid when elliptic
    Poly loop_poly;                 // Y^2 = P(Z) in the loop chart
    std::array<std::vector<cplx>, 2> loops;        // raw root-pair loops
    std::array<std::array<long, 2>, 2> gamma_in_loops{};  // gamma_i = sum_j c_ij loop_j
    std::array<std::array<long, 2>, 2> gamma_in_ab{};     // gamma_i in (A, B); elliptic only
    int pairing = 2;                // <gamma_1, gamma_2>
};

namespace spectral_detail {

// Generic dZ-coefficient of a family differential in the loop chart.
template <typename Basis>
cplx form_in_loop_chart(const Basis& cb, DiffForm form, cplx Z, cplx Y,
                        const FiberPoint* fp) {
    if (cb.x_chart) {
        // loop chart is the family x-plane; Y = y directly (PI model Y^2 = Q0).
        return differential_eval(form, cb.base, CurvePoint{Z, Y}, fp);
    }
    // PIII3 Weierstrass X-chart: x = (X - H/3)/t, y = Y/(2 t x^2), dx/dX = 1/t.
    const CurvePoint pt = cb.chart.inverse({Z, Y});
    return differential_eval(form, cb.base, pt, fp) / cb.base.t;
}

} // namespace spectral_detail

inline cplx period_quadrature(const CycleBasis& cb, DiffForm form, int i,
                              const FiberPoint* fp = nullptr,
                              const Tolerances& tol = {});

inline CycleBasis cycle_basis(const BasePoint& b) {
    require_regular(b);
    CycleBasis cb;
    cb.base = b;
    cb.x_chart = (b.family != FamilyId::PIII3);
    cb.pairing = (b.family == FamilyId::PII) ? 1 : 2;
    cb.elliptic = (b.family != FamilyId::PII) || std::abs(b.alpha) < 1e-13;
    if (cb.elliptic) cb.chart = reduce_to_weierstrass(b);

    std::vector<cplx> roots;
    if (cb.x_chart) {
        cb.loop_poly = model_poly(b);
        roots = poly_roots(cb.loop_poly);
    } else {
        cb.loop_poly = Poly{-cb.chart.ed.g3, -cb.chart.ed.g2, cplx(0.0), cplx(4.0)};
        roots = {cb.chart.ed.roots[0], cb.chart.ed.roots[1], cb.chart.ed.roots[2]};
    }
    // pairwise-distinct roots required for the dumbbell construction
    for (std::size_t i = 0; i < roots.size(); ++i)
        for (std::size_t j = i + 1; j < roots.size(); ++j)
            if (std::abs(roots[i] - roots[j]) <
                1e-7 * std::max(1.0, std::abs(roots[i])))
                throw SingularCurve("cycle_basis: coincident branch points");

    auto others = [&](std::size_t a, std::size_t c) {
        std::vector<cplx> out;
        for (std::size_t k = 0; k < roots.size(); ++k)
            if (k != a && k != c) out.push_back(roots[k]);
        return out;
    };
    cb.loops[0] = spectral_detail::clear_loop(roots[0], roots[1], others(0, 1));
    cb.loops[1] = spectral_detail::clear_loop(roots[1], roots[2], others(1, 2));

    if (!cb.elliptic) {
        // Quadrature-only basis (PII, alpha != 0): the raw loops intersect in
        // one point; normalize the orientation so that <omega, beta_t> = 2 pi i
        // (the pairing equals the residue sum, independent of alpha).
        cb.gamma_in_loops = {{{1, 0}, {0, 1}}};
        cb.gamma_in_ab = {{{1, 0}, {0, 1}}};
        const cplx w0 = period_quadrature(cb, DiffForm::omega, 0, nullptr, {});
        const cplx w1 = period_quadrature(cb, DiffForm::omega, 1, nullptr, {});
        const cplx b0 = period_quadrature(cb, DiffForm::beta_t_or_s, 0, nullptr, {});
        const cplx b1 = period_quadrature(cb, DiffForm::beta_t_or_s, 1, nullptr, {});
        const cplx pair = w0 * b1 - w1 * b0;
        if (std::abs(pair - kTwoPiI) > std::abs(pair + kTwoPiI))
            cb.gamma_in_loops[1] = {0, -1};
        return cb;
    }

    // Decompose the loop du-periods over the period lattice.
    const EllipticData& ed = cb.chart.ed;
    auto du_coeff = [&](cplx Z, cplx Y) -> cplx {
        if (cb.x_chart) {
            // PI: du = dx/(2y); PII(alpha=0): du = dx/y
            return (b.family == FamilyId::PI) ? 0.5 / Y : 1.0 / Y;
        }
        return 1.0 / Y;  // Weierstrass chart: du = dX/Y
    };
    long mn[2][2];
    for (int k = 0; k < 2; ++k) {
        const cplx per = spectral_detail::loop_integral(cb.loop_poly, cb.loops[k], du_coeff);
        const auto [m, n] =
            elliptic_detail::lattice_coords(per, 2.0 * ed.omega1, 2.0 * ed.omega2);
        const long mi = std::lround(m), ni = std::lround(n);
        if (std::abs(m - mi) > 1e-6 || std::abs(n - ni) > 1e-6)
            throw NonConvergence("cycle_basis: loop period is not a lattice vector");
        mn[k][0] = mi;
        mn[k][1] = ni;
    }
    const long det = mn[0][0] * mn[1][1] - mn[0][1] * mn[1][0];
    if (det != 1 && det != -1)
        throw NonConvergence("cycle_basis: root-pair loops do not form a unimodular basis");
    // [A; B] = M^{-1} [L1; L2] with A the cycle of du-period 2*omega1 etc.
    const long a_in[2] = {det * mn[1][1], -det * mn[0][1]};
    const long b_in[2] = {-det * mn[1][0], det * mn[0][0]};
    if (b.family == FamilyId::PII) {
        cb.gamma_in_ab = {{{1, 0}, {0, 1}}};
        cb.gamma_in_loops = {{{a_in[0], a_in[1]}, {b_in[0], b_in[1]}}};
    } else {
        // gamma_1 = A - B, gamma_2 = A + B: intersection pairing 2.
        cb.gamma_in_ab = {{{1, -1}, {1, 1}}};
        cb.gamma_in_loops = {{{a_in[0] - b_in[0], a_in[1] - b_in[1]},
                              {a_in[0] + b_in[0], a_in[1] + b_in[1]}}};
    }
    return cb;
}

// Quadrature route: contour integral of the form over gamma_i (i = 0 or 1).
inline cplx period_quadrature(const CycleBasis& cb, DiffForm form, int i,
                              const FiberPoint* fp, const Tolerances& tol) {
    cplx total{};
    for (int j = 0; j < 2; ++j) {
        const long c = cb.gamma_in_loops[i][j];
        if (c == 0) continue;
        const cplx val = spectral_detail::loop_integral(
            cb.loop_poly, cb.loops[j],
            [&](cplx Z, cplx Y) {
                return spectral_detail::form_in_loop_chart(cb, form, Z, Y, fp);
            },
            tol);
        total += double(c) * val;
    }
    return total;
}

// Closed-form route for omega and beta periods through the elliptic data.
// Over a cycle with du-period 2(m omega1 + n omega2):
//   omega-period = 2 (m omega1 + n omega2)
//   beta-period  = m bh1 + n bh2,  bh_j = -2 eta_j + c_beta * omega_j
// with c_beta = -2H/3 (PIII3), -t/6 (PII), 0 (PI).
inline cplx period_fast(const CycleBasis& cb, DiffForm form, int i) {
    if (!cb.elliptic)
        throw ConfigError("period_fast: no elliptic reduction for this base point");
    const EllipticData& ed = cb.chart.ed;
    const double m = double(cb.gamma_in_ab[i][0]);
    const double n = double(cb.gamma_in_ab[i][1]);
    if (form == DiffForm::omega) return 2.0 * (m * ed.omega1 + n * ed.omega2);
    if (form == DiffForm::beta_t_or_s) {
        cplx c_beta{};
        switch (cb.base.family) {
            case FamilyId::PIII3: c_beta = -2.0 * cb.base.H / 3.0; break;
            case FamilyId::PII:   c_beta = -cb.base.t / 6.0; break;
            case FamilyId::PI:    c_beta = cplx(0.0); break;
        }
        const cplx bh1 = -2.0 * ed.eta1 + c_beta * ed.omega1;
        const cplx bh2 = -2.0 * ed.eta2 + c_beta * ed.omega2;
        return m * bh1 + n * bh2;
    }
    throw ConfigError("period_fast: closed form available only for omega and beta");
}

// Period of a form over gamma_i; i = 2 selects the PII residue cycle around
// infinity_+, which is evaluated analytically.
inline cplx period(const CycleBasis& cb, DiffForm form, int i,
                   const FiberPoint* fp = nullptr, const Tolerances& tol = {}) {
    if (i == 2) {
        if (cb.base.family != FamilyId::PII)
            throw FamilyMismatch("period: gamma_3 exists only for PII");
        switch (form) {
            case DiffForm::lambda:     return kTwoPiI * cb.base.alpha;
            case DiffForm::beta_alpha: return kTwoPiI;
            case DiffForm::omega:
            case DiffForm::beta_t_or_s: return cplx(0.0);
            case DiffForm::theta_form: {
                if (fp == nullptr) throw ConfigError("period: theta_form needs a FiberPoint");
                return kTwoPiI * (0.5 - fp->s);
            }
        }
    }
    if (cb.elliptic && (form == DiffForm::omega || form == DiffForm::beta_t_or_s))
        return period_fast(cb, form, i);
    return period_quadrature(cb, form, i, fp, tol);
}

// Riemann bilinear pairing <f1, f2> = P1(g1) P2(g2) - P1(g2) P2(g1).
inline cplx bilinear_pairing(const CycleBasis& cb, DiffForm f1, DiffForm f2,
                             const FiberPoint* fp = nullptr) {
    return period(cb, f1, 0, fp) * period(cb, f2, 1, fp) -
           period(cb, f1, 1, fp) * period(cb, f2, 0, fp);
}

// z-coordinates: lambda-periods over the cycle basis (plus z3 = 2 pi i alpha
// for PII, computed as a residue).
inline std::vector<cplx> z_coords(const BasePoint& b) {
    CycleBasis cb = cycle_basis(b);
    std::vector<cplx> z;
    z.push_back(period(cb, DiffForm::lambda, 0));
    z.push_back(period(cb, DiffForm::lambda, 1));
    if (b.family == FamilyId::PII) z.push_back(kTwoPiI * b.alpha);
    return z;
}

} // namespace joyce
