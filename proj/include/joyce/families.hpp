#pragma once
// Family-specific data for the three spectral-curve families:
// defining polynomials, regularity tests, branch points, and the reduction
// of each curve to Weierstrass normal form Y^2 = 4X^3 - g2 X - g3.

#include <joyce/core.hpp>
#include <joyce/numerics/poly.hpp>
#include <joyce/elliptic.hpp>

#include <array>
#include <cmath>
#include <vector>

namespace joyce {

// Potential Q0(x) such that the spectral curve is y^2 = Q0(x).
//   PI    : Q0 = x^3 + t x + H
//   PII   : Q0 = x^4 + t x^2 - 2 alpha x + 2 H
//   PIII3 : Q0 = t/x + H/x^2 + 1/x^3   (poles at x = 0)
inline cplx q0_eval(const BasePoint& b, cplx x) {
    switch (b.family) {
        case FamilyId::PI:  return x * x * x + b.t * x + b.H;
        case FamilyId::PII: return ((x * x + b.t) * x - 2.0 * b.alpha) * x + 2.0 * b.H;
        case FamilyId::PIII3: {
            if (std::abs(x) < 1e-300) throw DenominatorZero("q0_eval: x = 0 is a pole of Q0 (PIII3)");
            return b.t / x + b.H / (x * x) + 1.0 / (x * x * x);
        }
    }
    throw FamilyMismatch("q0_eval: unknown family");
}

inline cplx q0_dH(const BasePoint& b, cplx x) {
    switch (b.family) {
        case FamilyId::PI:  return cplx(1.0);
        case FamilyId::PII: return cplx(2.0);
        case FamilyId::PIII3: return 1.0 / (x * x);
    }
    throw FamilyMismatch("q0_dH: unknown family");
}

// Derivative with respect to the family time (t for PI/PII, s = log t for PIII3).
inline cplx q0_dtime(const BasePoint& b, cplx x) {
    switch (b.family) {
        case FamilyId::PI:  return x;
        case FamilyId::PII: return x * x;
        case FamilyId::PIII3: return b.t / x;  // d/ds with s = log t
    }
    throw FamilyMismatch("q0_dtime: unknown family");
}

inline cplx q0_dalpha(const BasePoint& b, cplx x) {
    if (b.family != FamilyId::PII) throw FamilyMismatch("q0_dalpha: alpha is a PII parameter");
    return -2.0 * x;
}

// Polynomial model of the curve: Ym^2 = P(Xm) in a chart without poles.
//   PI    : Xm = x,  Ym = y,      P = x^3 + t x + H
//   PII   : Xm = x,  Ym = y,      P = x^4 + t x^2 - 2 alpha x + 2 H
//   PIII3 : Xm = x,  Ym = x^2 y,  P = x (t x^2 + H x + 1)
inline Poly model_poly(const BasePoint& b) {
    switch (b.family) {
        case FamilyId::PI:  return Poly{b.H, b.t, cplx(0.0), cplx(1.0)};
        case FamilyId::PII: return Poly{2.0 * b.H, -2.0 * b.alpha, b.t, cplx(0.0), cplx(1.0)};
        case FamilyId::PIII3: return Poly{cplx(0.0), cplx(1.0), b.H, b.t};
    }
    throw FamilyMismatch("model_poly: unknown family");
}

// Finite branch points of x -> y: zeros of the model polynomial.
// (PIII3 additionally ramifies over x = 0 -- included, being a root of P --
// and over x = infinity; PI ramifies over infinity as well.)
inline std::vector<cplx> branch_points(const BasePoint& b) {
    return poly_roots(model_poly(b));
}

// Regularity of the base point: the spectral curve must be smooth, i.e. the
// relevant discriminant-type expression must not vanish.
//   PIII3 : t (H^2 - 4t) != 0
//   PII   : discriminant of the quartic != 0
//   PI    : 4 t^3 + 27 H^2 != 0
inline cplx regularity_value(const BasePoint& b) {
    switch (b.family) {
        case FamilyId::PI:  return 4.0 * b.t * b.t * b.t + 27.0 * b.H * b.H;
        case FamilyId::PIII3: return b.t * (b.H * b.H - 4.0 * b.t);
        case FamilyId::PII: {
            // Discriminant of x^4 + c x^2 + d x + e with c=t, d=-2a, e=2H.
            const cplx c = b.t, d = -2.0 * b.alpha, e = 2.0 * b.H;
            return 256.0 * e * e * e - 128.0 * c * c * e * e + 144.0 * c * d * d * e
                 - 27.0 * d * d * d * d + 16.0 * c * c * c * c * e - 4.0 * c * c * c * d * d;
        }
    }
    throw FamilyMismatch("regularity_value: unknown family");
}

inline bool is_regular(const BasePoint& b, double tol = 1e-12) {
    return std::abs(regularity_value(b)) > tol;
}

inline void require_regular(const BasePoint& b) {
    if (!is_regular(b))
        throw SingularCurve("base point is on the discriminant locus for family " +
                            std::string(family_name(b.family)));
}

// Weierstrass reduction of the spectral curve: an elliptic chart (X, Y) with
// Y^2 = 4X^3 - g2 X - g3, together with the forward and inverse maps to the
// family chart (x, y).  Valid for PI, PIII3, and PII with alpha = 0.
struct WeierstrassChart {
    BasePoint base;
    EllipticData ed;

    // family (x, y) -> Weierstrass (X, Y)
    CurvePoint forward(const CurvePoint& pt) const {
        const cplx x = pt.x, y = pt.y;
        switch (base.family) {
            case FamilyId::PI:  return {x, 2.0 * y};
            case FamilyId::PII: return {base.t / 12.0 + 0.5 * (y + x * x),
                                        0.5 * base.t * x + x * y + x * x * x};
            case FamilyId::PIII3: return {base.t * x + base.H / 3.0,
                                          2.0 * base.t * x * x * y};
        }
        throw FamilyMismatch("WeierstrassChart::forward");
    }

    // Weierstrass (X, Y) -> family (x, y)
    CurvePoint inverse(const CurvePoint& PT) const {
        const cplx X = PT.x, Y = PT.y;
        switch (base.family) {
            case FamilyId::PI:  return {X, 0.5 * Y};
            case FamilyId::PII: {
                const cplx den = 6.0 * X + base.t;
                if (std::abs(den) < 1e-13)
                    throw DenominatorZero("WeierstrassChart::inverse: 6X + t = 0 (point over x = infinity)");
                const cplx x = 3.0 * Y / den;
                const cplx y = (144.0 * X * X + 48.0 * X * base.t + 72.0 * base.H
                                - 5.0 * base.t * base.t) / (24.0 * den);
                return {x, y};
            }
            case FamilyId::PIII3: {
                const cplx x = (X - base.H / 3.0) / base.t;
                if (std::abs(x) < 1e-13)
                    throw DenominatorZero("WeierstrassChart::inverse: X = H/3 (point over x = 0)");
                return {x, Y / (2.0 * base.t * x * x)};
            }
        }
        throw FamilyMismatch("WeierstrassChart::inverse");
    }

    // dX/dx along the curve, used to convert dx-coefficients to dX-coefficients.
    cplx dXdx(const CurvePoint& pt) const {
        const cplx x = pt.x, y = pt.y;
        switch (base.family) {
            case FamilyId::PI:  return cplx(1.0);
            case FamilyId::PII: {
                if (std::abs(y) < 1e-13) throw SheetSingular("dXdx: y = 0 at a branch point");
                return x * (2.0 * x * x + base.t + 2.0 * y) / (2.0 * y);
            }
            case FamilyId::PIII3: return base.t;
        }
        throw FamilyMismatch("WeierstrassChart::dXdx");
    }
};

inline std::array<cplx, 2> weierstrass_invariants(const BasePoint& b) {
    switch (b.family) {
        case FamilyId::PI:
            return {-4.0 * b.t, -4.0 * b.H};
        case FamilyId::PII:
            if (std::abs(b.alpha) > 1e-13)
                throw FamilyMismatch("weierstrass_invariants: PII reduction requires alpha = 0");
            return {(24.0 * b.H + b.t * b.t) / 12.0,
                    (b.t / 216.0) * (72.0 * b.H - b.t * b.t)};
        case FamilyId::PIII3:
            return {(4.0 * b.H * b.H - 12.0 * b.t) / 3.0,
                    (4.0 * b.H / 27.0) * (9.0 * b.t - 2.0 * b.H * b.H)};
    }
    throw FamilyMismatch("weierstrass_invariants: unknown family");
}

inline WeierstrassChart reduce_to_weierstrass(const BasePoint& b) {
    require_regular(b);
    const auto [g2, g3] = weierstrass_invariants(b);
    WeierstrassChart chart;
    chart.base = b;
    chart.ed = half_periods(g2, g3);
    return chart;
}

// Sheet value of y over x on the curve closest to a hint, with residual check.
inline cplx sheet_y(const BasePoint& b, cplx x, cplx y_hint) {
    const cplx y = std::sqrt(q0_eval(b, x));
    return (std::abs(y - y_hint) <= std::abs(-y - y_hint)) ? y : -y;
}

inline void require_on_curve(const BasePoint& b, const CurvePoint& pt, double tol = 1e-8) {
    const cplx q0 = q0_eval(b, pt.x);
    const double scale = std::max({1.0, std::abs(q0), std::abs(pt.y * pt.y)});
    if (std::abs(pt.y * pt.y - q0) > tol * scale)
        throw OffCurve("point does not satisfy y^2 = Q0(x)");
}

inline void require_on_sheet(const FiberPoint& fp, double tol = 1e-8) {
    require_on_curve(fp.base, {fp.q, fp.p}, tol);
}

// Conserved Hamiltonian recovered from (q, p) via the sheet constraint p^2 = Q0(q).
inline cplx hamiltonian_from_qp(FamilyId fam, cplx t, cplx alpha, cplx q, cplx p) {
    switch (fam) {
        case FamilyId::PI:  return p * p - q * q * q - t * q;
        case FamilyId::PII: return 0.5 * (p * p - q * q * q * q - t * q * q + 2.0 * alpha * q);
        case FamilyId::PIII3: {
            if (std::abs(q) < 1e-300) throw DenominatorZero("hamiltonian_from_qp: q = 0");
            return q * q * p * p - t * q - 1.0 / q;
        }
    }
    throw FamilyMismatch("hamiltonian_from_qp: unknown family");
}

} // namespace joyce
