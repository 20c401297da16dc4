#pragma once
// Core value types shared across the library: complex scalar alias,
// family tags, base/fiber points, tolerances and error types.

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace joyce {

using cplx = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846264338327950288;
inline const cplx kI{0.0, 1.0};
inline const cplx kTwoPiI{0.0, 2.0 * kPi};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define JOYCE_DEFINE_ERROR(Name)                              \
  struct Name : Error {                                       \
    explicit Name(const std::string& what) : Error(what) {}   \
  }

JOYCE_DEFINE_ERROR(NonConvergence);
JOYCE_DEFINE_ERROR(StepUnderflow);
JOYCE_DEFINE_ERROR(Blowup);
JOYCE_DEFINE_ERROR(DegenerateInput);
JOYCE_DEFINE_ERROR(SingularCurve);
JOYCE_DEFINE_ERROR(LatticePoint);
JOYCE_DEFINE_ERROR(OffCurve);
JOYCE_DEFINE_ERROR(PoleHit);
JOYCE_DEFINE_ERROR(GaugeSingular);
JOYCE_DEFINE_ERROR(SheetSingular);
JOYCE_DEFINE_ERROR(DenominatorZero);
JOYCE_DEFINE_ERROR(JacobianSingular);
JOYCE_DEFINE_ERROR(NoConvergenceNewton);
JOYCE_DEFINE_ERROR(FitRejected);
JOYCE_DEFINE_ERROR(OffLagrangian);
JOYCE_DEFINE_ERROR(NoPoleInSpan);
JOYCE_DEFINE_ERROR(FamilyMismatch);
JOYCE_DEFINE_ERROR(ConfigError);

#undef JOYCE_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Tolerances
// ---------------------------------------------------------------------------
struct Tolerances {
  double quad_rel = 1e-10;
  double ode_rel = 1e-10;
  double fd_step = 1e-4;
  double identity_tol = 1e-6;
};

// ---------------------------------------------------------------------------
// Families and base/fiber points
// ---------------------------------------------------------------------------
enum class FamilyId : std::uint8_t { PI, PII, PIII3 };

inline const char* family_name(FamilyId f) {
  switch (f) {
    case FamilyId::PI: return "pi";
    case FamilyId::PII: return "pii";
    case FamilyId::PIII3: return "piii3";
  }
  return "?";
}

struct BasePoint {
  FamilyId family = FamilyId::PIII3;
  cplx t{};
  cplx H{};
  cplx alpha{};  // PII only; must be 0 for Joyce-structure operations.
};

struct CurvePoint {
  cplx x{};
  cplx y{};  // explicit sheet: y^2 = Q0(x)
};

struct FiberPoint {
  BasePoint base;
  cplx q{};
  cplx p{};  // sheet: p^2 = Q0(q)
  cplx r{};
  cplx s{};  // PII only; 0 for Joyce-structure use
  cplx epsilon{1.0, 0.0};
};

inline double abs2(const cplx& z) { return std::norm(z); }

}  // namespace joyce
