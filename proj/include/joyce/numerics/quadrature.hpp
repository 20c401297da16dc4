#pragma once
// Adaptive Gauss-Kronrod path quadrature for complex line integrals.
// Inverse-square-root endpoint singularities are removed by the
// substitution u^2 = (z - endpoint) before the adaptive rule sees them.

#include <cmath>
#include <functional>
#include <vector>

#include "joyce/core.hpp"

namespace joyce {

enum class SingularityHint : std::uint8_t {
  none,
  inverse_sqrt_at_start,
  inverse_sqrt_at_end,
};

struct PathSegment {
  cplx start{};
  cplx end{};
  SingularityHint singularity_hint = SingularityHint::none;
};

using Path = std::vector<PathSegment>;

namespace detail {

// 15-point Kronrod nodes/weights on [-1,1] with embedded 7-point Gauss rule.
inline constexpr double kKronrodNodes[15] = {
    -0.991455371120813, -0.949107912342759, -0.864864423359769,
    -0.741531185599394, -0.586087235467691, -0.405845151377397,
    -0.207784955007898, 0.0,                0.207784955007898,
    0.405845151377397,  0.586087235467691,  0.741531185599394,
    0.864864423359769,  0.949107912342759,  0.991455371120813};
inline constexpr double kKronrodWeights[15] = {
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728, 0.204432940075298,
    0.190350578064785, 0.169004726639267, 0.140653259715525,
    0.104790010322250, 0.063092092629979, 0.022935322010529};
inline constexpr double kGaussWeights[7] = {
    0.129484966168870, 0.279705391489277, 0.381830050505119,
    0.417959183673469, 0.381830050505119, 0.279705391489277,
    0.129484966168870};

struct GK15Result {
  cplx value;
  double error;
};

template <typename F>
GK15Result gk15(const F& f, double a, double b) {
  const double mid = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  cplx kron{};
  cplx gauss{};
  for (int i = 0; i < 15; ++i) {
    const cplx fv = f(mid + half * kKronrodNodes[i]);
    kron += kKronrodWeights[i] * fv;
    if (i % 2 == 1) gauss += kGaussWeights[i / 2] * fv;
  }
  kron *= half;
  gauss *= half;
  const double diff = std::abs(kron - gauss);
  // standard QUADPACK-style error inflation
  const double err = diff * std::min(1.0, std::pow(200.0 * diff, 1.5) + 1.0);
  return {kron, std::max(err, diff)};
}

template <typename F>
cplx adaptive_gk(const F& f, double a, double b, double rel_tol,
                 double abs_scale, int depth) {
  const auto r = gk15(f, a, b);
  const double tol = rel_tol * std::max(abs_scale, std::abs(r.value));
  if (r.error <= tol || r.error <= 1e-16 * abs_scale) return r.value;
  if (depth > 48) {
    throw NonConvergence(
        "quad_path: adaptive refinement exceeded depth bound (singularity on "
        "path or mis-declared endpoint?)");
  }
  const double mid = 0.5 * (a + b);
  return adaptive_gk(f, a, mid, rel_tol, abs_scale, depth + 1) +
         adaptive_gk(f, mid, b, rel_tol, abs_scale, depth + 1);
}

}  // namespace detail

// Integrates f(z) dz along a single segment.
template <typename F>
cplx quad_segment(const F& f, const PathSegment& seg, const Tolerances& tol) {
  const cplx d = seg.end - seg.start;
  switch (seg.singularity_hint) {
    case SingularityHint::none: {
      auto g = [&](double s) { return f(seg.start + s * d) * d; };
      return detail::adaptive_gk(g, 0.0, 1.0, tol.quad_rel, 1e-300, 0);
    }
    case SingularityHint::inverse_sqrt_at_start: {
      // z = start + u^2 d, dz = 2 u d du, u in [0,1]
      auto g = [&](double u) { return f(seg.start + (u * u) * d) * (2.0 * u * d); };
      return detail::adaptive_gk(g, 1e-300, 1.0, tol.quad_rel, 1e-300, 0);
    }
    case SingularityHint::inverse_sqrt_at_end: {
      // z = end - u^2 d, dz = -2 u d du mapped so the path still runs
      // start -> end: integrate u from 1 to 0 of f * (-2 u d), i.e. u in
      // [0,1] with positive sign.
      auto g = [&](double u) { return f(seg.end - (u * u) * d) * (2.0 * u * d); };
      return detail::adaptive_gk(g, 1e-300, 1.0, tol.quad_rel, 1e-300, 0);
    }
  }
  return {};
}

// Integrates f(z) dz along a piecewise-linear path.
template <typename F>
cplx quad_path(const F& f, const Path& path, const Tolerances& tol = {}) {
  cplx total{};
  for (const auto& seg : path) total += quad_segment(f, seg, tol);
  return total;
}

inline Path reversed(const Path& path) {
  Path out;
  out.reserve(path.size());
  for (auto it = path.rbegin(); it != path.rend(); ++it) {
    SingularityHint h = it->singularity_hint;
    if (h == SingularityHint::inverse_sqrt_at_start)
      h = SingularityHint::inverse_sqrt_at_end;
    else if (h == SingularityHint::inverse_sqrt_at_end)
      h = SingularityHint::inverse_sqrt_at_start;
    out.push_back({it->end, it->start, h});
  }
  return out;
}

// Closed ellipse-ish loop around two foci, as a polygon with `n` vertices.
// Counter-clockwise; `pad` scales the semi-axes beyond the focal distance.
inline std::vector<cplx> loop_vertices(const cplx& f1, const cplx& f2,
                                       double pad, int n) {
  const cplx c = 0.5 * (f1 + f2);
  const cplx h = 0.5 * (f2 - f1);
  const double a = std::abs(h) * (1.0 + pad);
  const double b = std::abs(h) * pad * 1.2 + 0.25 * std::abs(h);
  const cplx dir = (std::abs(h) > 0) ? h / std::abs(h) : cplx{1.0, 0.0};
  std::vector<cplx> v;
  v.reserve(n + 1);
  for (int k = 0; k <= n; ++k) {
    const double th = 2.0 * kPi * k / n;
    const cplx local{a * std::cos(th), b * std::sin(th)};
    v.push_back(c + dir * local);
  }
  v.back() = v.front();  // exact closure
  return v;
}

}  // namespace joyce
