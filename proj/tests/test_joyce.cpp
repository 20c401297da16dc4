#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "joyce/joyce.hpp"

using namespace joyce;

namespace {

// Random on-sheet fiber points with regular base and q away from branch
// points.
std::vector<FiberPoint> random_fibers(FamilyId fam, int n, unsigned seed,
                                      bool zero_s = true) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<FiberPoint> out;
  while (static_cast<int>(out.size()) < n) {
    FiberPoint fp;
    fp.base.family = fam;
    fp.base.t = cplx(2.0 + 1.2 * u(rng), 1.2 * u(rng));
    fp.base.H = cplx(2.5 + 1.2 * u(rng), 1.2 * u(rng));
    fp.base.alpha = cplx(0.0);
    if (!is_regular(fp.base, 1e-3)) continue;
    fp.q = cplx(1.0 + 0.6 * u(rng), 0.6 * u(rng));
    const cplx q0v = q0_eval(fp.base, fp.q);
    if (std::abs(q0v) < 0.2) continue;
    fp.p = std::sqrt(q0v);
    if (u(rng) > 0.0) fp.p = -fp.p;
    fp.r = cplx(0.3 * u(rng), 0.3 * u(rng));
    fp.s = (fam == FamilyId::PII && !zero_s) ? cplx(0.3 * u(rng), 0.3 * u(rng))
                                             : cplx(0.0);
    out.push_back(fp);
  }
  return out;
}

FiberPoint make_fp(FamilyId fam, cplx t, cplx H, cplx q, int sign, cplx r,
                   cplx s = 0.0) {
  FiberPoint fp;
  fp.base = {fam, t, H, cplx(0.0)};
  fp.q = q;
  fp.p = double(sign) * std::sqrt(q0_eval(fp.base, q));
  fp.r = r;
  fp.s = s;
  return fp;
}

const FamilyId kFamilies[3] = {FamilyId::PIII3, FamilyId::PII, FamilyId::PI};

}  // namespace

TEST_CASE("plebanski potential: worked values") {
  const FiberPoint f3 = make_fp(FamilyId::PIII3, 1.0, 3.0, 1.0, +1, 0.0);
  CHECK(std::abs(plebanski_w(f3) - std::sqrt(5.0) / 30.0) < 1e-14);
  const FiberPoint f2 = make_fp(FamilyId::PII, 1.0, 1.0, 1.0, +1, 0.0);
  CHECK(std::abs(plebanski_w(f2) - 1.0 / 168.0) < 1e-14);
}

TEST_CASE("plebanski potential: general-parameter form reduces to the plain one") {
  for (const auto& fp : random_fibers(FamilyId::PII, 5, 101)) {
    CHECK(std::abs(plebanski_w_pii_general(fp) - plebanski_w(fp)) < 1e-10);
  }
}

TEST_CASE("plebanski potential: odd under the sheet involution at r = 0") {
  unsigned seed = 301;
  for (FamilyId fam : kFamilies) {
    for (auto fp : random_fibers(fam, 5, seed++)) {
      fp.r = cplx(0.0);
      FiberPoint fm = fp;
      fm.p = -fp.p;
      CHECK(std::abs(plebanski_w(fm) + plebanski_w(fp)) < 1e-12);
    }
  }
}

TEST_CASE("plebanski potential: degenerate base points are rejected") {
  FiberPoint fp = make_fp(FamilyId::PIII3, 1.0, 3.0, 1.0, +1, 0.1);
  fp.base.H = 2.0;  // H^2 = 4t
  fp.p = std::sqrt(q0_eval(fp.base, fp.q));
  CHECK_THROWS_AS(plebanski_w(fp), DenominatorZero);
}

TEST_CASE("plebanski potential: degree -1 homogeneity under the scaling action") {
  std::mt19937 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  unsigned seed = 401;
  for (FamilyId fam : kFamilies) {
    for (const auto& fp : random_fibers(fam, 5, seed++)) {
      const double phi = 3.0 * u(rng);
      const cplx lambda = std::exp(cplx(0.0, phi));
      const FiberPoint sc = euler_scaled(fp, lambda);
      CHECK(std::abs(plebanski_w(sc) * lambda - plebanski_w(fp)) < 1e-10);
    }
  }
}

TEST_CASE("uniformization chart: round trip through (v, w)") {
  unsigned seed = 501;
  for (FamilyId fam : kFamilies) {
    for (const auto& fp : random_fibers(fam, 5, seed++)) {
      const UniformizedFiber vw = uniformize(fp);
      const FiberPoint back = fiber_from_uniformized(fp.base, vw);
      CHECK(std::abs(back.q - fp.q) < 1e-8 * (1.0 + std::abs(fp.q)));
      CHECK(std::abs(back.p - fp.p) < 1e-8 * (1.0 + std::abs(fp.p)));
      CHECK(std::abs(back.r - fp.r) < 1e-8);
    }
  }
}

TEST_CASE("theta pair vanishes with the chart coordinates") {
  for (FamilyId fam : kFamilies) {
    BasePoint b{fam, cplx(1.1, 0.2), cplx(2.4, -0.3), cplx(0.0)};
    const UniformizedFiber vw{cplx(1e-3, 5e-4), cplx(-8e-4, 3e-4)};
    const FiberPoint fp = fiber_from_uniformized(b, vw);
    const ThetaCoords th = theta_map(fp);
    CHECK(std::abs(th.theta_first) < 1e-2);
    CHECK(std::abs(th.theta_H) < 1e-2);
  }
}

TEST_CASE("theta backends agree modulo the ambiguity lattice") {
  unsigned seed = 601;
  for (FamilyId fam : kFamilies) {
    for (const auto& fp : random_fibers(fam, 6, seed++, /*zero_s=*/false)) {
      const ThetaCoords tu = theta_map(fp, ThetaBackend::uniformization);
      const ThetaCoords tp = theta_map(fp, ThetaBackend::periods);
      CHECK(theta_equivalent(tu, tp, 1e-7));
      if (fam == FamilyId::PII) {
        CHECK(std::abs(tu.theta_alpha - (0.5 - fp.s)) < 1e-14);
        CHECK(std::abs(tp.theta_alpha - (0.5 - fp.s)) < 1e-14);
      }
    }
  }
}

TEST_CASE("theta pair is odd under (q, p) -> (q, -p) for PIII3") {
  for (auto fp : random_fibers(FamilyId::PIII3, 5, 701)) {
    fp.r = cplx(0.0);
    FiberPoint fm = fp;
    fm.p = -fp.p;
    const ThetaCoords ta = theta_map(fp);
    const ThetaCoords tb = theta_map(fm);
    const auto [d1, d2] = theta_reduce_difference(
        ta.lattice, ta.theta_first + tb.theta_first, ta.theta_H + tb.theta_H);
    CHECK(std::abs(d1) < 1e-8);
    CHECK(std::abs(d2) < 1e-8);
  }
}

TEST_CASE("theta_map and theta_inverse are mutually inverse") {
  unsigned seed = 801;
  for (FamilyId fam : kFamilies) {
    for (const auto& fp : random_fibers(fam, 5, seed++)) {
      const ThetaCoords th = theta_map(fp);
      const ThetaInverseResult inv =
          theta_inverse(fp.base, th.theta_first, th.theta_H);
      const FiberPoint& g =
          (fam == FamilyId::PIII3 &&
           std::abs(inv.fiber.q - fp.q) > std::abs(inv.involution_partner.q - fp.q))
              ? inv.involution_partner
              : inv.fiber;
      CHECK(std::abs(g.q - fp.q) < 1e-8 * (1.0 + std::abs(fp.q)));
      CHECK(std::abs(g.p - fp.p) < 1e-8 * (1.0 + std::abs(fp.p)));
      CHECK(std::abs(g.r - fp.r) < 1e-8);
      // and back again from arbitrary theta values
      const cplx t1 = th.theta_first * 0.37 + cplx(0.11, -0.06);
      const cplx t2 = th.theta_H * 0.29 + cplx(-0.08, 0.05);
      const ThetaInverseResult inv2 = theta_inverse(fp.base, t1, t2);
      const ThetaCoords back = theta_map(inv2.fiber);
      const auto [d1, d2] = theta_reduce_difference(back.lattice,
                                                    back.theta_first - t1,
                                                    back.theta_H - t2);
      CHECK(std::abs(d1) < 1e-8);
      CHECK(std::abs(d2) < 1e-8);
    }
  }
}

TEST_CASE("theta_inverse on the zero section") {
  const BasePoint b3{FamilyId::PIII3, cplx(1.2, 0.1), cplx(2.8, -0.2), cplx(0.0)};
  const ThetaInverseResult r3 = theta_inverse(b3, cplx(0.0), cplx(0.22, 0.1));
  CHECK(std::abs(r3.fiber.r + 0.5) < 1e-12);
  const BasePoint b2{FamilyId::PII, cplx(1.0, 0.2), cplx(1.5, 0.1), cplx(0.0)};
  const ThetaInverseResult r2 = theta_inverse(b2, cplx(0.0), cplx(0.22, 0.1));
  CHECK(std::abs(r2.fiber.r) < 1e-12);
}

TEST_CASE("PIII3 involution: square, curve, potential, theta class") {
  for (const auto& fp : random_fibers(FamilyId::PIII3, 5, 901)) {
    const FiberPoint im = involution_piii(fp);
    // involutive
    const FiberPoint back = involution_piii(im);
    CHECK(std::abs(back.q - fp.q) < 1e-12 * (1.0 + std::abs(fp.q)));
    CHECK(std::abs(back.p - fp.p) < 1e-12 * (1.0 + std::abs(fp.p)));
    CHECK(std::abs(back.r - fp.r) < 1e-12);
    // image stays on the spectral curve
    CHECK(std::abs(im.p * im.p - q0_eval(im.base, im.q)) <
          1e-10 * (1.0 + std::abs(im.p * im.p)));
    // potential is invariant
    CHECK(std::abs(plebanski_w(im) - plebanski_w(fp)) < 1e-10);
    // theta pairs agree modulo the lattice
    CHECK(theta_equivalent(theta_map(fp), theta_map(im), 1e-7));
  }
}

TEST_CASE("vertical fields invert the theta differential") {
  unsigned seed = 1001;
  for (FamilyId fam : kFamilies) {
    for (const auto& fp : random_fibers(fam, 3, seed++)) {
      const ThetaCoords th0 = theta_map(fp);
      const auto V = vertical_fields(fp);
      const double h = 1e-5;
      for (std::size_t j = 0; j < V.size(); ++j) {
        const FiberPoint fplus = advance_vertical(fp, V[j], h);
        const FiberPoint fminus = advance_vertical(fp, V[j], -h);
        // stays on the sheet
        CHECK(std::abs(fplus.p * fplus.p - q0_eval(fplus.base, fplus.q)) <
              1e-8 * (1.0 + std::abs(fplus.p * fplus.p)));
        const ThetaCoords ta = theta_map(fplus);
        const ThetaCoords tb = theta_map(fminus);
        const auto [d1, d2] = theta_reduce_difference(
            th0.lattice, ta.theta_first - tb.theta_first, ta.theta_H - tb.theta_H);
        const cplx dt1 = d1 / (2.0 * h), dt2 = d2 / (2.0 * h);
        const cplx da = (ta.theta_alpha - tb.theta_alpha) / (2.0 * h);
        const cplx want1 = (j == 0) ? 1.0 : 0.0;
        const cplx want2 = (j == 1) ? 1.0 : 0.0;
        CHECK(std::abs(dt1 - want1) < 1e-6);
        CHECK(std::abs(dt2 - want2) < 1e-6);
        if (fam == FamilyId::PII) {
          const cplx wanta = (j == 2) ? 1.0 : 0.0;
          CHECK(std::abs(da - wanta) < 1e-6);
        }
      }
    }
  }
}

TEST_CASE("third derivatives of K: structural closed-form facts") {
  for (const auto& fp : random_fibers(FamilyId::PIII3, 3, 1101)) {
    const ThirdDerivatives kd = k_third_derivatives(fp);
    CHECK(std::abs(kd.HHH) == 0.0);
    CHECK(std::abs(kd.tHH + 1.0 / (2.0 * fp.q * fp.q * fp.p * fp.p)) < 1e-14);
  }
  for (const auto& fp : random_fibers(FamilyId::PII, 3, 1102, /*zero_s=*/false)) {
    const ThirdDerivatives kd = k_third_derivatives(fp);
    CHECK(std::abs(kd.HHH) == 0.0);
    CHECK(std::abs(kd.aHH) == 0.0);
    CHECK(std::abs(kd.aaH) == 0.0);
    CHECK(std::abs(kd.tHH + 1.0 / (fp.p * fp.p)) < 1e-14);
    CHECK(std::abs(kd.atH - fp.q / (fp.p * fp.p)) < 1e-14);
  }
  // order-insensitive accessor
  const FiberPoint fp = make_fp(FamilyId::PII, 1.0, 1.5, 1.0, +1, 0.1);
  const ThirdDerivatives kd = k_third_derivatives(fp);
  CHECK(k_third(kd, 't', 'H', 't') == kd.ttH);
  CHECK(k_third(kd, 'H', 'H', 't') == kd.tHH);
  CHECK(k_third(kd, 'a', 't', 'H') == kd.atH);
  // no closed forms for PI
  const FiberPoint f1 = make_fp(FamilyId::PI, 0.8, 1.1, 0.9, +1, 0.1);
  CHECK_THROWS_AS(k_third_derivatives(f1), FamilyMismatch);
}

TEST_CASE("third derivatives of K: closed forms match the flow-based FD") {
  unsigned seed = 1201;
  for (FamilyId fam : {FamilyId::PIII3, FamilyId::PII}) {
    for (const auto& fp : random_fibers(fam, 4, seed++)) {
      const ThetaCoords th = theta_map(fp);
      const ThirdDerivatives fd = k_third_derivatives_fd(fp, th.lattice);
      const ThirdDerivatives cl = k_third_derivatives(fp);
      auto rel = [](cplx a, cplx b) { return std::abs(a - b) / (1.0 + std::abs(b)); };
      CHECK(rel(fd.ttt, cl.ttt) < 1e-6);
      CHECK(rel(fd.ttH, cl.ttH) < 1e-6);
      CHECK(rel(fd.tHH, cl.tHH) < 1e-6);
      CHECK(rel(fd.HHH, cl.HHH) < 1e-6);
    }
  }
}

TEST_CASE("flow-recovered second derivatives of K are symmetric") {
  unsigned seed = 1301;
  for (FamilyId fam : kFamilies) {
    for (const auto& fp : random_fibers(fam, 4, seed++)) {
      const ThetaCoords th = theta_map(fp);
      // K_tH two ways: (w1 . theta_first) - 1/eps and 1/eps - (w2 . theta_H)
      const auto w1 = theta_detail::flow_theta_derivative(fp, FlowId::w1, th.lattice);
      const auto w2 = theta_detail::flow_theta_derivative(fp, FlowId::w2, th.lattice);
      CHECK(std::abs(w1.first + w2.second - 2.0 / fp.epsilon) < 1e-6);
    }
  }
}

TEST_CASE("fourth derivatives: potential and fiberwise K agree") {
  unsigned seed = 1401;
  for (FamilyId fam : {FamilyId::PIII3, FamilyId::PII}) {
    for (const auto& fp : random_fibers(fam, 2, seed++)) {
      const ThetaCoords th = theta_map(fp);
      auto Phi = [&](cplx dt1, cplx dt2) {
        return plebanski_w(
            theta_inverse(fp.base, th.theta_first + dt1, th.theta_H + dt2).fiber);
      };
      // mixed (2,2) derivative of the potential over (theta_first, theta_H)
      auto w4_at = [&](double h) {
        const double c[3] = {1.0, -2.0, 1.0};
        cplx acc = 0;
        for (int i = -1; i <= 1; ++i)
          for (int j = -1; j <= 1; ++j)
            acc += c[i + 1] * c[j + 1] * Phi(cplx(i * h), cplx(j * h));
        return acc / (h * h * h * h);
      };
      const cplx w4 = (4.0 * w4_at(0.02) - w4_at(0.04)) / 3.0;
      // same derivative as one vertical step of the closed K_tHH
      const auto V = vertical_fields(fp);
      const double h2 = 1e-5;
      const cplx k4 = (k_third_derivatives(advance_vertical(fp, V[0], h2)).tHH -
                       k_third_derivatives(advance_vertical(fp, V[0], -h2)).tHH) /
                      (2.0 * h2);
      CHECK(std::abs(w4 - k4) / (1.0 + std::abs(k4)) < 1e-4);
    }
  }
}

TEST_CASE("heavenly equation residual") {
  struct HCase { FamilyId fam; cplx t, H; };
  const HCase hc[] = {{FamilyId::PIII3, cplx(1.1, 0.2), cplx(2.6, -0.3)},
                      {FamilyId::PII, cplx(0.8, 0.1), cplx(1.3, 0.2)},
                      {FamilyId::PI, cplx(0.9, -0.1), cplx(1.2, 0.3)}};
  for (const auto& c : hc) {
    const BasePoint b{c.fam, c.t, c.H, cplx(0.0)};
    const std::array<cplx, 2> theta{cplx(0.31, 0.12), cplx(-0.22, 0.18)};
    CHECK(std::abs(heavenly_residual(b, theta, 1, 2)) < 1e-5);
    CHECK(std::abs(heavenly_residual(b, theta, 2, 1)) < 1e-5);
    // the diagonal form of the equation is trivially satisfied
    CHECK(std::abs(heavenly_residual(b, theta, 1, 1)) == 0.0);
    CHECK(std::abs(heavenly_residual(b, theta, 2, 2)) == 0.0);
  }
}

TEST_CASE("prepotential: worked values") {
  const Prepotential p3 = prepotential_s({FamilyId::PIII3, 1.0, 3.0, 0.0});
  CHECK(std::abs(p3.grad_first - 1.0 / 30.0) < 1e-12);
  const Prepotential p2 = prepotential_s({FamilyId::PII, 0.0, 1.0, 0.0});
  CHECK(std::abs(p2.value + std::log(8.0) / 48.0) < 1e-12);
}

TEST_CASE("prepotential: gradient matches the potential limit at theta -> 0") {
  struct PCase { FamilyId fam; cplx t, H; };
  const PCase pc[] = {{FamilyId::PIII3, cplx(1.0, 0.2), cplx(3.0, -0.1)},
                      {FamilyId::PII, cplx(1.0, 0.3), cplx(1.2, 0.1)},
                      {FamilyId::PI, cplx(0.8, -0.2), cplx(1.1, 0.4)}};
  for (const auto& c : pc) {
    const Prepotential P = prepotential_s({c.fam, c.t, c.H, cplx(0.0)});
    CHECK(std::abs(P.fd_first - P.grad_first) < 1e-5);
    CHECK(std::abs(P.fd_H - P.grad_H) < 1e-5);
  }
}

TEST_CASE("linear connection at the zero section") {
  const JoyceConnection j3 = joyce_connection({FamilyId::PIII3, 1.3, 2.7, 0.0});
  CHECK(j3.flat_residual < 1e-6);
  CHECK(std::string(j3.flat_coords) == "(s, H)");
  const JoyceConnection j2 = joyce_connection({FamilyId::PII, 0.9, 1.4, 0.0});
  CHECK(std::abs(j2.k3_ttt + 0.25) < 1e-6);
  CHECK(j2.flat_residual < 1e-6);
  CHECK_THROWS_AS(joyce_connection({FamilyId::PI, 0.8, 1.1, 0.0}), FamilyMismatch);
}
