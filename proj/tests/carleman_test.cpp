#include "shlab/carleman.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

namespace shlab {
namespace {

using std::numbers::pi;

// Independent route for Psi, A, B when b does not depend on t: expanding
// the definitions by hand gives
//   Psi = lambda (D - 2 c1 - c0),            D = sum_ij (b^{ij} d_i)_j
//   A   = l_t^2 - lambda^2 q + lambda (4 c1 + c0)
//   B   = lambda^3 [(4c1 + c0) q + w.grad q - 4 (8 c1^3 + c0 c1^2)(t-T)^2]
//         - lambda^2 (4 c1 + c0)^2 - lambda/2 L(D)
// with q = b grad d . grad d, w = b grad d, L(f) = div(b grad f).
struct Oracle1D {
  double base, amp, a, x0;
  double psi, A, B;
  Oracle1D(double base_, double amp_, double a_, double x0_, const CarlemanParams& p, double t, double x)
      : base(base_), amp(amp_), a(a_), x0(x0_) {
    const double lam = p.lambda, c0 = p.c0, c1 = p.c1;
    const double b = base + amp * std::sin(pi * x);
    const double b1 = amp * pi * std::cos(pi * x);
    const double b2 = -amp * pi * pi * std::sin(pi * x);
    const double b3 = -amp * pi * pi * pi * std::cos(pi * x);
    const double d1 = 2 * a * (x - x0), d2 = 2 * a;
    const double D = b1 * d1 + b * d2;
    const double D1 = b2 * d1 + 2 * b1 * d2;
    const double D2 = b3 * d1 + 3 * b2 * d2;
    const double LD = b1 * D1 + b * D2;
    const double q = b * d1 * d1;
    const double q1 = b1 * d1 * d1 + 2 * b * d1 * d2;
    const double w = b * d1;
    const double lt = -2 * lam * c1 * (t - p.T);
    psi = lam * (D - 2 * c1 - c0);
    A = lt * lt - lam * lam * q + lam * (4 * c1 + c0);
    B = lam * lam * lam * ((4 * c1 + c0) * q + w * q1 - 4 * (8 * c1 * c1 * c1 + c0 * c1 * c1) * (t - p.T) * (t - p.T)) -
        lam * lam * (4 * c1 + c0) * (4 * c1 + c0) - 0.5 * lam * LD;
  }
};

CarlemanParams audited_params(double lambda = 1.0) { return {lambda, 0.1, 0.9, 32.0, 18.0}; }

TEST(ConditionDTest, ShiftedQuadraticGivesFourA) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 17);
  const auto f = PrincipalField::from_form(PrincipalForm::identity(), mesh, 1.0);
  for (double a : {0.5, 1.0, 8.0}) {
    const auto r = verify_condition_d(WeightFunction::shifted_quadratic(a, {-1.0, 0.0}), f, mesh);
    EXPECT_NEAR(r.mu0_max, 4 * a, 1e-12);
    EXPECT_NEAR(r.min_grad_d, 2 * a, 1e-12);
    EXPECT_EQ(r.pass, a > 1.0);
  }
}

TEST(ConditionDTest, RectangleWithGeneralConstantMatrix) {
  // b constant: M = 2 b Hess(d) b = 4a b^2, generalized eigenvalues of (4a b^2, b) = 4a eig(b)
  const auto mesh = build_mesh(Domain::rectangle({0, 0}, {1, 1}), {6, 6});
  const auto f = PrincipalField::from_form(PrincipalForm::constant(2.0, 0.5, 1.0), mesh, 0.5);
  const auto r = verify_condition_d(WeightFunction::shifted_quadratic(3.0, {-1, -1}), f, mesh);
  const double emin = 1.5 - std::sqrt(0.25 + 0.25);
  EXPECT_NEAR(r.mu0_max, 12.0 * emin, 1e-12);
}

TEST(ConditionDTest, InteriorCriticalPointFailsD2) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 9);
  const auto f = PrincipalField::from_form(PrincipalForm::identity(), mesh, 1.0);
  const auto r = verify_condition_d(WeightFunction::shifted_quadratic(8.0, {0.5, 0.0}), f, mesh);
  EXPECT_EQ(r.min_grad_d, 0.0);
  EXPECT_FALSE(r.d2_pass);
  EXPECT_FALSE(r.pass);
}

TEST(ConditionDTest, ScalingDScalesMu0) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 21);
  const auto f = PrincipalField::from_form(PrincipalForm::sine_diagonal(2.0, 0.5), mesh, 1.0);
  const auto d = WeightFunction::shifted_quadratic(2.0, {-1.5, 0.0});
  const double base = verify_condition_d(d, f, mesh).mu0_max;
  for (double s : {1.0, 2.5, 7.0}) EXPECT_NEAR(verify_condition_d(d.scaled(s), f, mesh).mu0_max, s * base, 1e-10 * s);
}

TEST(ConditionDTest, NonPositiveFieldThrows) {
  const auto mesh = build_mesh(Domain::rectangle({0, 0}, {1, 1}), {5, 5});
  const auto f = PrincipalField::from_form(PrincipalForm::constant(1.0, 0.0, -1.0), mesh, 0.1);
  EXPECT_THROW(verify_condition_d(WeightFunction::shifted_quadratic(1, {-1, -1}), f, mesh), InvalidFieldError);
}

TEST(ConditionParamsTest, AuditedConfigurationPasses) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 33);
  const auto f = PrincipalField::from_form(PrincipalForm::identity(), mesh, 1.0);
  const auto d = WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0});
  const auto r = verify_condition_params(audited_params(), d, f, mesh);
  // hand arithmetic: q = 256 (x+1)^2
  EXPECT_DOUBLE_EQ(r.q_inf, 256.0);
  EXPECT_DOUBLE_EQ(r.q_sup, 1024.0);
  EXPECT_NEAR(r.part1_margin, 28.3, 1e-12);
  EXPECT_NEAR(r.upper_bound, 32.0 * 256.0 / 7.3, 1e-9);
  EXPECT_NEAR(r.middle, 4 * 0.81 * 324, 1e-9);
  EXPECT_TRUE(r.pass);
}

TEST(ConditionParamsTest, ShortHorizonFailsLowerBound) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 33);
  const auto f = PrincipalField::from_form(PrincipalForm::identity(), mesh, 1.0);
  auto p = audited_params();
  p.T = 16.0;
  const auto r = verify_condition_params(p, WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0}), f, mesh);
  EXPECT_NEAR(r.middle, 829.44, 1e-9);
  EXPECT_LT(r.part2_lower_margin, 0.0);
  EXPECT_FALSE(r.pass);
}

TEST(ConditionParamsTest, SmallMu0FailsPartOne) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 9);
  const auto f = PrincipalField::from_form(PrincipalForm::identity(), mesh, 1.0);
  CarlemanParams p{1.0, 0.5, 0.9, 4.0, 18.0};
  const auto r = verify_condition_params(p, WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0}), f, mesh);
  EXPECT_NEAR(r.part1_margin, 4.0 - 3.6 - 0.5, 1e-12);
  EXPECT_FALSE(r.pass);
}

TEST(WeightEvalTest, TerminalTimeValues) {
  const auto d = WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0});
  const auto p = audited_params(0.7);
  for (double x : {0.0, 0.3, 1.0}) {
    const auto w = weight_eval(p, d, PrincipalForm::identity(), 1, p.T, {x, 0.0});
    EXPECT_EQ(w.ell_t, 0.0);
    EXPECT_NEAR(w.ell, 0.7 * 8 * (x + 1) * (x + 1), 1e-12);
    EXPECT_NEAR(w.theta, std::exp(w.ell), 1e-12 * w.theta);
    EXPECT_NEAR(std::log(w.theta), w.ell, 1e-12 * w.ell);
  }
}

TEST(WeightEvalTest, PsiAtTerminalOrigin) {
  const auto w = weight_eval(audited_params(1.0), WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0}),
                             PrincipalForm::identity(), 1, 18.0, {0.0, 0.0});
  EXPECT_NEAR(w.psi, 14.1, 1e-12);
  EXPECT_NEAR(w.ell_tt, -1.8, 1e-15);
  // A = (0 + 1.8) - q + lambda d_xx - Psi with q = 256, d_xx = 16
  EXPECT_NEAR(w.A, 1.8 - 256.0 + 16.0 - 14.1, 1e-10);
}

TEST(WeightEvalTest, MatchesHandExpansionOnVariableCoefficient) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ut(0.0, 3.0), ux(0.0, 1.0), ul(0.2, 5.0);
  const auto form = PrincipalForm::sine_diagonal(2.0, 0.7);
  const auto d = WeightFunction::shifted_quadratic(1.5, {-0.4, 0.0});
  for (int trial = 0; trial < 50; ++trial) {
    CarlemanParams p{ul(rng), 0.2, 0.6, 10.0, 3.0};
    const double t = ut(rng), x = ux(rng);
    const auto w = weight_eval(p, d, form, 1, t, {x, 0.0});
    const Oracle1D o(2.0, 0.7, 1.5, -0.4, p, t, x);
    EXPECT_NEAR(w.psi, o.psi, 1e-12 * std::max(1.0, std::abs(o.psi)));
    EXPECT_NEAR(w.A, o.A, 1e-12 * std::max(1.0, std::abs(o.A)));
    EXPECT_NEAR(w.B, o.B, 1e-11 * std::max(1.0, std::abs(o.B)));
  }
}

TEST(WeightEvalTest, LeadingOrderOfAMatchesExpansion) {
  // A = lambda^2 [4 c1^2 (t-T)^2 - q] + O(lambda)
  const auto form = PrincipalForm::sine_diagonal(1.5, 0.3);
  const auto d = WeightFunction::shifted_quadratic(2.0, {-1.0, 0.0});
  const double t = 0.7, x = 0.45;
  const double q = (1.5 + 0.3 * std::sin(pi * x)) * 16 * (x + 1) * (x + 1);
  double prev = 1e300;
  for (double lam : {1e2, 1e3, 1e4}) {
    CarlemanParams p{lam, 0.1, 0.5, 10.0, 2.0};
    const auto w = weight_eval(p, d, form, 1, t, {x, 0.0});
    const double lead = lam * lam * (4 * 0.25 * (t - 2.0) * (t - 2.0) - q);
    const double rel = std::abs(w.A - lead) / std::abs(lead);
    EXPECT_LT(rel, prev);
    prev = rel;
  }
  EXPECT_LT(prev, 1e-3);
}

TEST(WeightEvalTest, RectangleConstantMatrixMatchesExpansion) {
  // b constant: D = 2a tr(b), L(D) = 0, q = grad d.b grad d, w.grad q = 4a |b grad d|^2
  const double a = 1.3;
  const Point x0{-0.5, -0.8};
  const auto form = PrincipalForm::constant(1.5, 0.4, 0.8);
  const auto d = WeightFunction::shifted_quadratic(a, x0);
  CarlemanParams p{2.5, 0.1, 0.7, 10.0, 4.0};
  const double t = 1.1;
  const Point x{0.3, 0.6};
  const double g0 = 2 * a * (x[0] - x0[0]), g1 = 2 * a * (x[1] - x0[1]);
  const double bg0 = 1.5 * g0 + 0.4 * g1, bg1 = 0.4 * g0 + 0.8 * g1;
  const double q = g0 * bg0 + g1 * bg1;
  const double wq = 4 * a * (bg0 * bg0 + bg1 * bg1);
  const double lam = p.lambda, c0 = p.c0, c1 = p.c1, s = t - p.T;
  const double lt = -2 * lam * c1 * s;
  const double B = lam * lam * lam * ((4 * c1 + c0) * q + wq - 4 * (8 * c1 * c1 * c1 + c0 * c1 * c1) * s * s) -
                   lam * lam * (4 * c1 + c0) * (4 * c1 + c0);
  const auto w = weight_eval(p, d, form, 2, t, x);
  EXPECT_NEAR(w.psi, lam * (2 * a * 2.3 - 2 * c1 - c0), 1e-12);
  EXPECT_NEAR(w.A, lt * lt - lam * lam * q + lam * (4 * c1 + c0), 1e-11);
  EXPECT_NEAR(w.B, B, 1e-10 * std::abs(B));
}

TEST(WeightEvalTest, TimeOutsideHorizonThrows) {
  const auto d = WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0});
  EXPECT_THROW(weight_eval(audited_params(), d, PrincipalForm::identity(), 1, -0.1, {0.5, 0}), DomainError);
  EXPECT_THROW(weight_eval(audited_params(), d, PrincipalForm::identity(), 1, 18.5, {0.5, 0}), DomainError);
}

TEST(WeightEvalTest, ThetaPeaksAtTerminalTime) {
  const auto d = WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0});
  const auto p = audited_params(0.01);
  double prev = -1e300;
  for (int s = 0; s <= 36; ++s) {
    const double t = 0.5 * s;
    const auto w = weight_eval(p, d, PrincipalForm::identity(), 1, t, {0.4, 0.0});
    EXPECT_GT(w.ell, prev);
    if (s < 36) {
      EXPECT_GT(w.ell_t, 0.0);
    }
    prev = w.ell;
  }
}

// Nested one-sided stencils lose order near the ends; measure on the middle half.
double fd_error(std::size_t n, double lo = 0.25, double hi = 0.75) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), n);
  const auto form = PrincipalForm::sine_diagonal(2.0, 0.7);
  const auto analytic = PrincipalField::from_form(form, mesh, 1.0);
  const auto table = PrincipalField::tabulated(analytic.values, 1.0);
  const auto d = WeightFunction::shifted_quadratic(1.5, {-0.4, 0.0});
  CarlemanParams p{1.0, 0.2, 0.6, 10.0, 3.0};
  double err = 0.0;
  for (double t : {0.0, 1.3, 3.0}) {
    const auto ex = weight_eval_mesh(p, d, analytic, mesh, t);
    const auto fd = weight_eval_mesh(p, d, table, mesh, t);
    for (std::size_t k = 0; k < mesh.size(); ++k) {
      const double x = mesh.coord(k)[0];
      if (x >= lo && x <= hi) err = std::max(err, std::abs(ex[k].B - fd[k].B));
    }
  }
  return err;
}

TEST(WeightEvalTest, FiniteDifferencePathIsFourthOrder) {
  const double e1 = fd_error(33), e2 = fd_error(65), e3 = fd_error(129);
  EXPECT_GT(e1 / e2, 12.0);
  EXPECT_GT(e2 / e3, 12.0);
  EXPECT_LT(e3, 1e-3);
  // whole interval still converges, at second order
  const double w1 = fd_error(65, 0.0, 1.0), w2 = fd_error(129, 0.0, 1.0);
  EXPECT_GT(w1 / w2, 3.5);
}

TEST(AuditTest, AuditedConfigurationFindsThresholds) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 33);
  const auto f = PrincipalField::from_form(PrincipalForm::identity(), mesh, 1.0);
  const auto d = WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0});
  const auto r = audit_proof_coefficients(audited_params(), d, f, mesh, doubling_grid(1.0, 11));
  EXPECT_LT(r.psi_residual_max, 1e-12);
  EXPECT_EQ(r.cross_term_max, 0.0);
  ASSERT_TRUE(r.lambda0.has_value());
  ASSERT_TRUE(r.lambda1.has_value());
  EXPECT_LE(*r.lambda0, 1024.0);
  EXPECT_NEAR(r.b_margin_constant, 0.5 * 3.7 * 256, 1e-9);
}

TEST(AuditTest, ThresholdNotFoundReportsWorstPoint) {
  // T too short: 4 c1^2 T^2 < sup q, so the t = 0 form is indefinite for all lambda.
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 17);
  const auto f = PrincipalField::from_form(PrincipalForm::identity(), mesh, 1.0);
  const auto d = WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0});
  auto p = audited_params();
  p.T = 10.0;
  const auto r = audit_proof_coefficients(p, d, f, mesh, doubling_grid(1.0, 6));
  EXPECT_FALSE(r.lambda1.has_value());
  EXPECT_LE(r.worst_t0.value, 0.0);
  EXPECT_EQ(r.worst_t0.lambda, 32.0);
}

TEST(AuditTest, TabulatedFieldUsesFiniteDifferences) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 33);
  const auto f = PrincipalField::tabulated(std::vector<Sym2>(mesh.size(), Sym2{1, 0, 0, 1}), 1.0);
  const auto r = audit_proof_coefficients(audited_params(), WeightFunction::shifted_quadratic(8.0, {-1.0, 0.0}),
                                          f, mesh, doubling_grid(1.0, 11));
  EXPECT_LT(r.psi_residual_max, 1e-9);
  EXPECT_TRUE(r.lambda0.has_value());
  EXPECT_TRUE(r.lambda1.has_value());
}

}  // namespace
}  // namespace shlab
