#include "shlab/spde.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

namespace shlab {
namespace {

using std::numbers::pi;

Field sine_field(const SpatialMesh& mesh, double k = 1.0) {
  return zero_on_boundary(mesh, mesh.sample([k](const Point& x) { return std::sin(k * pi * x[0]); }));
}

// L^2(Q) error of the eigenmode cos(pi t) sin(pi x), trapezoid in t and x.
double eigenmode_error(std::size_t nodes, double T) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), nodes);
  const auto c = wave_coefficients(mesh);
  const double dt = 0.5 * mesh.spacing(0);
  const auto traj = solve_deterministic(c, sine_field(mesh), Field(mesh.size(), 0.0), mesh, T, dt);
  const auto wt = time_weights(traj.K, traj.dt);
  double s = 0.0;
  for (std::size_t k = 0; k <= traj.K; ++k) {
    const double t = static_cast<double>(k) * traj.dt;
    for (std::size_t n = 0; n < mesh.size(); ++n) {
      const double e = traj.z_at(k)[n] - std::cos(pi * t) * std::sin(pi * mesh.coord(n)[0]);
      s += wt[k] * mesh.weight(n) * e * e;
    }
  }
  return std::sqrt(s);
}

TEST(SimulateForwardTest, ZeroDataStaysZero) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 17);
  auto c = wave_coefficients(mesh);
  c.b4 = ScalarFunction::constant(0.7);
  c.b1 = ScalarFunction::constant(-0.3);
  SimulationOptions opt{1.0, 0.0, 4, 5};
  const auto ens = simulate_forward(c, Field(mesh.size(), 0.0), Field(mesh.size(), 0.0), mesh, opt);
  for (std::size_t p = 0; p < ens.P; ++p)
    for (double v : ens.z[p]) ASSERT_EQ(v, 0.0);
}

TEST(SimulateForwardTest, EigenmodeIsSecondOrder) {
  const double e1 = eigenmode_error(17, 1.0), e2 = eigenmode_error(33, 1.0), e3 = eigenmode_error(65, 1.0);
  EXPECT_GT(e1 / e2, 3.5);
  EXPECT_LT(e1 / e2, 4.5);
  EXPECT_GT(e2 / e3, 3.5);
  EXPECT_LT(e2 / e3, 4.5);
}

TEST(SimulateForwardTest, DirichletHoldsEveryStep) {
  const auto mesh = build_mesh(Domain::rectangle({0, 0}, {1, 1}), {9, 11});
  auto c = wave_coefficients(mesh, PrincipalForm::constant(1.0, 0.2, 1.5), 0.5);
  c.b4 = ScalarFunction::constant(0.5);
  c.g = ForceSpec::separable(ScalarFunction::constant(1.0), Field(mesh.size(), 1.0));
  SimulationOptions opt{0.5, 0.0, 3, 9};
  const auto ens = simulate_forward(c, Field(mesh.size(), 0.0), Field(mesh.size(), 0.0), mesh, opt);
  for (std::size_t p = 0; p < ens.P; ++p)
    for (std::size_t k = 0; k <= ens.K; ++k)
      for (const auto& bn : mesh.boundary()) {
        ASSERT_EQ(ens.z_at(p, k)[bn.node], 0.0);
        ASSERT_EQ(ens.zt_at(p, k)[bn.node], 0.0);
      }
}

TEST(SimulateForwardTest, RejectsCflViolationAndBoundaryData) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 17);
  const auto c = wave_coefficients(mesh);
  SimulationOptions opt{1.0, 0.04, 1, 0};
  EXPECT_THROW(simulate_forward(c, sine_field(mesh), Field(mesh.size(), 0.0), mesh, opt), ConfigError);
  opt.dt = 0.01;
  Field bad(mesh.size(), 0.0);
  bad[0] = 1.0;
  EXPECT_THROW(simulate_forward(c, bad, Field(mesh.size(), 0.0), mesh, opt), DataError);
}

// Semi-discrete oracle: sin(pi x_i) is an exact eigenvector of the discrete
// operator with eigenvalue -w^2, w = (2/h) sin(pi h / 2). The mode amplitude
// solves a'' = -w^2 a + dB/dt; integrate exactly between fine grid points
// (rotation) with the increment weighted at the sub-interval midpoint.
std::vector<Field> convolution_oracle(const Field& fine_dB, double fine_dt, std::size_t stride, double w) {
  std::vector<Field> out;  // (a, a') at every coarse level
  double a = 0.0, b = 0.0;
  out.push_back({a, b});
  const double c = std::cos(w * fine_dt), s = std::sin(w * fine_dt);
  const double ch = std::cos(0.5 * w * fine_dt), sh = std::sin(0.5 * w * fine_dt);
  for (std::size_t j = 0; j < fine_dB.size(); ++j) {
    const double a1 = c * a + s / w * b, b1 = -w * s * a + c * b;
    a = a1 + sh / w * fine_dB[j];
    b = b1 + ch * fine_dB[j];
    if ((j + 1) % stride == 0) out.push_back({a, b});
  }
  return out;
}

TEST(SimulateForwardTest, AdditiveNoiseMatchesConvolutionOracleAtOrderOne) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 17);
  auto c = wave_coefficients(mesh);
  const Field phi = sine_field(mesh);
  c.g = ForceSpec::separable(ScalarFunction::constant(1.0), phi);
  const double T = 1.0, h = mesh.spacing(0);
  const double w = 2.0 / h * std::sin(0.5 * pi * h);
  const std::size_t paths = 16, fine_steps = 128 * 64;
  const double fine_dt = T / static_cast<double>(fine_steps);
  std::vector<Field> fine(paths);
  for (std::size_t p = 0; p < paths; ++p) fine[p] = brownian_increments(99, p, fine_steps, fine_dt);
  std::vector<double> err;
  for (std::size_t K : {32u, 64u, 128u}) {
    std::vector<Field> coarse(paths);
    for (std::size_t p = 0; p < paths; ++p) coarse[p] = coarsen_increments(fine[p], fine_steps / K);
    SimulationOptions opt{T, T / static_cast<double>(K), paths, 0, true, &coarse};
    const auto ens = simulate_forward(c, Field(mesh.size(), 0.0), Field(mesh.size(), 0.0), mesh, opt);
    const auto wt = time_weights(K, ens.dt);
    double ms = 0.0;
    for (std::size_t p = 0; p < paths; ++p) {
      const auto ex = convolution_oracle(fine[p], fine_dt, fine_steps / K, w);
      for (std::size_t k = 0; k <= K; ++k)
        for (std::size_t n = 0; n < mesh.size(); ++n) {
          const double e = ens.z_at(p, k)[n] - ex[k][0] * phi[n];
          ms += wt[k] * mesh.weight(n) * e * e;
        }
    }
    err.push_back(std::sqrt(ms / paths));
  }
  EXPECT_GT(err[0] / err[1], 1.7);
  EXPECT_LT(err[0] / err[1], 2.3);
  EXPECT_GT(err[1] / err[2], 1.7);
  EXPECT_LT(err[1] / err[2], 2.3);
}

TEST(SimulateForwardTest, ItoIsometryOfIncrements) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 5);
  auto c = wave_coefficients(mesh);
  c.g = ForceSpec::separable(ScalarFunction{"cos_t", 1.0, 1.0, 2.0}, sine_field(mesh));
  SimulationOptions opt{1.0, 1.0 / 16, 10000, 2024, false};
  const auto ens = simulate_forward(c, Field(mesh.size(), 0.0), Field(mesh.size(), 0.0), mesh, opt);
  double expected = 0.0;
  for (std::size_t k = 0; k < ens.K; ++k) {
    const double g1 = c.g.g1_at(static_cast<double>(k) * ens.dt);
    expected += g1 * g1 * ens.dt;
  }
  std::vector<double> sq(ens.P);
  double mean = 0.0;
  for (std::size_t p = 0; p < ens.P; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < ens.K; ++k) s += c.g.g1_at(static_cast<double>(k) * ens.dt) * ens.dB[p][k];
    sq[p] = s * s;
    mean += sq[p];
  }
  mean /= static_cast<double>(ens.P);
  double var = 0.0;
  for (double v : sq) var += (v - mean) * (v - mean);
  const double se = std::sqrt(var / static_cast<double>(ens.P - 1) / static_cast<double>(ens.P));
  EXPECT_LT(std::abs(mean - expected), 3.0 * se);
}

TEST(SimulateForwardTest, LinearInDataWithMultiplicativeNoise) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 21);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  auto rnd = [&] {
    Field f(mesh.size());
    for (auto& v : f) v = u(rng);
    return zero_on_boundary(mesh, f);
  };
  const Field a0 = rnd(), a1 = rnd(), a2 = rnd(), c0 = rnd(), c1 = rnd(), c2 = rnd();
  auto base = wave_coefficients(mesh, PrincipalForm::sine_diagonal(1.5, 0.5), 1.0);
  base.b1 = ScalarFunction::constant(-0.2);
  base.b2[0] = ScalarFunction::sine(0.3);
  base.b3 = ScalarFunction{"cos_t", 0.4, 1.0, 3.0};
  base.b4 = ScalarFunction::constant(0.8);
  SimulationOptions opt{0.5, 0.0, 3, 77};
  auto run = [&](const Field& z0, const Field& z1, const Field& g2) {
    auto c = base;
    c.g = ForceSpec::separable(ScalarFunction::constant(1.0), g2);
    return simulate_forward(c, z0, z1, mesh, opt);
  };
  const double al = 0.7, be = -1.3;
  auto comb = [&](const Field& x, const Field& y) {
    Field r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = al * x[i] + be * y[i];
    return r;
  };
  const auto eu = run(a0, a1, a2), ev = run(c0, c1, c2);
  const auto ew = run(comb(a0, c0), comb(a1, c1), comb(a2, c2));
  for (std::size_t p = 0; p < ew.P; ++p)
    for (std::size_t i = 0; i < ew.z[p].size(); ++i)
      ASSERT_NEAR(ew.z[p][i], al * eu.z[p][i] + be * ev.z[p][i], 1e-12);
}

TEST(SimulateForwardTest, EnergyDriftIsSecondOrder) {
  auto drift = [](std::size_t nodes) {
    const auto mesh = build_mesh(Domain::interval(0.0, 1.0), nodes);
    const auto c = wave_coefficients(mesh, PrincipalForm::sine_diagonal(1.0, 0.5), 1.0);
    const Field z0 = zero_on_boundary(mesh, mesh.sample([](const Point& x) { return x[0] * x[0] * (1 - x[0]); }));
    const auto traj = solve_deterministic(c, z0, Field(mesh.size(), 0.0), mesh, 1.0, cfl_limit(mesh, c.b));
    const SpatialOperators ops(mesh, c.b);
    const double e0 = discrete_energy(ops, mesh, traj.level_z(0), traj.level_zt(0));
    double worst = 0.0;
    for (std::size_t k = 0; k <= traj.K; ++k)
      worst = std::max(worst, std::abs(discrete_energy(ops, mesh, traj.level_z(k), traj.level_zt(k)) - e0));
    return worst / e0;
  };
  const double d1 = drift(33), d2 = drift(65);
  EXPECT_LT(d1, 1e-2);
  EXPECT_GT(d1 / d2, 3.0);
}

TEST(SimulateForwardTest, DeterministicForSeed) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 9);
  auto c = wave_coefficients(mesh);
  c.g = ForceSpec::separable(ScalarFunction::constant(1.0), sine_field(mesh));
  c.b4 = ScalarFunction::constant(0.3);
  SimulationOptions opt{1.0, 0.0, 4, 12345};
  const auto a = simulate_forward(c, sine_field(mesh), Field(mesh.size(), 0.0), mesh, opt);
  set_worker_count(3);
  const auto b = simulate_forward(c, sine_field(mesh), Field(mesh.size(), 0.0), mesh, opt);
  set_worker_count(1);
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(a.dB, b.dB);
  opt.seed = 12346;
  const auto d = simulate_forward(c, sine_field(mesh), Field(mesh.size(), 0.0), mesh, opt);
  EXPECT_NE(a.dB, d.dB);
  // path p only depends on (seed, p)
  EXPECT_EQ(brownian_increments(12345, 2, a.K, a.dt), a.dB[2]);
}

TEST(WaveStepperTest, AdjointStepIsExactTranspose) {
  const auto mesh = build_mesh(Domain::rectangle({0, 0}, {1, 1.2}), {7, 8});
  auto c = wave_coefficients(mesh, PrincipalForm::sine_diagonal(1.5, 0.4), 1.0);
  c.b = PrincipalField::from_form(PrincipalForm::constant(1.3, 0.3, 0.9), mesh, 0.5);
  c.b1 = ScalarFunction{"sin_t", -0.4, 1.0, 2.0};
  c.b2 = {ScalarFunction::sine(0.5), ScalarFunction::constant(-0.2)};
  c.b3 = ScalarFunction::constant(0.6);
  c.b4 = ScalarFunction{"sine_cos_t", 0.9, 1.0, 1.0};
  const WaveStepper st(mesh, c, 1.0, 30);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  auto rnd = [&] {
    Field f(mesh.size());
    for (auto& v : f) v = u(rng);
    return zero_on_boundary(mesh, f);
  };
  for (std::size_t k : {0u, 7u, 29u}) {
    const double dB = 0.13;
    Field z = rnd(), v = rnd(), zh = rnd(), vh = rnd(), kick;
    Field z1 = z, v1 = v;
    st.step(k, dB, z1, v1, nullptr);
    const double lhs = as_vec(z1).dot(as_vec(zh)) + as_vec(v1).dot(as_vec(vh));
    st.adjoint_step(k, dB, zh, vh, kick);
    const double rhs = as_vec(z).dot(as_vec(zh)) + as_vec(v).dot(as_vec(vh));
    EXPECT_NEAR(lhs, rhs, 1e-12 * std::abs(lhs));
  }
}

TEST(TraceTest, EigenmodeTraceNorm) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 65);
  const auto c = wave_coefficients(mesh);
  const double T = 1.3;
  SimulationOptions opt{T, 0.5 * mesh.spacing(0), 1, 0};
  const auto ens = simulate_forward(c, sine_field(mesh), Field(mesh.size(), 0.0), mesh, opt);
  BoundarySubset right;
  right.sigma = {-1.0, 1.0};
  right.member = {0, 1};
  right.positions = {1};
  const auto r = boundary_normal_trace(ens, right);
  const double exact = pi * pi * (T / 2 + std::sin(2 * pi * T) / (4 * pi));
  EXPECT_NEAR(r.norm * r.norm, exact, 2e-3 * exact);
  // dz/dnu(t, 1) = -pi cos(pi t)
  EXPECT_NEAR(r.series[0][0], -pi, 2e-3 * pi);
}

TEST(TraceTest, ZeroEnsembleAndEmptySubset) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 9);
  const auto c = wave_coefficients(mesh);
  SimulationOptions opt{1.0, 0.0, 3, 0};
  const auto ens = simulate_forward(c, Field(mesh.size(), 0.0), Field(mesh.size(), 0.0), mesh, opt);
  EXPECT_EQ(boundary_normal_trace(ens, full_boundary(mesh)).norm, 0.0);
  const auto r = boundary_normal_trace(ens, BoundarySubset{{0.0, 0.0}, {0, 0}, {}});
  EXPECT_TRUE(r.empty_subset);
  EXPECT_EQ(r.norm, 0.0);
}

TEST(TraceTest, NormInvariantUnderPathReordering) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 17);
  auto c = wave_coefficients(mesh);
  c.g = ForceSpec::separable(ScalarFunction::constant(1.0), sine_field(mesh));
  SimulationOptions opt{1.0, 0.0, 5, 8};
  auto ens = simulate_forward(c, Field(mesh.size(), 0.0), Field(mesh.size(), 0.0), mesh, opt);
  const double before = boundary_normal_trace(ens, full_boundary(mesh)).norm;
  std::reverse(ens.trace.begin(), ens.trace.end());
  EXPECT_DOUBLE_EQ(boundary_normal_trace(ens, full_boundary(mesh)).norm, before);
}

TEST(ReversedSolverTest, EigenmodeVanishesAtTerminalTime) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 65);
  const auto c = wave_coefficients(mesh);
  const double T = 1.5;
  const auto tr = solve_deterministic_reversed(c, sine_field(mesh), mesh, T, 0.5 * mesh.spacing(0));
  for (std::size_t n = 0; n < mesh.size(); ++n) EXPECT_EQ(tr.z_at(tr.K)[n], 0.0);
  double err = 0.0;
  for (std::size_t k = 0; k <= tr.K; ++k) {
    const double t = static_cast<double>(k) * tr.dt;
    for (std::size_t n = 0; n < mesh.size(); ++n) {
      const double ex = -std::sin(pi * (T - t)) * std::sin(pi * mesh.coord(n)[0]) / pi;
      err = std::max(err, std::abs(tr.z_at(k)[n] - ex));
    }
  }
  EXPECT_LT(err, 1e-3);
  const auto zero = solve_deterministic_reversed(c, Field(mesh.size(), 0.0), mesh, T, 0.005);
  for (double v : zero.z) ASSERT_EQ(v, 0.0);
}

TEST(ReversedSolverTest, RoundTripRecoversTerminalData) {
  auto roundtrip = [](std::size_t nodes) {
    const auto mesh = build_mesh(Domain::interval(0.0, 1.0), nodes);
    auto c = wave_coefficients(mesh, PrincipalForm::sine_diagonal(1.2, 0.3), 1.0);
    c.b1 = ScalarFunction::constant(-0.5);
    c.b3 = ScalarFunction::constant(0.7);
    const Field w = zero_on_boundary(mesh, mesh.sample([](const Point& x) { return std::sin(pi * x[0]) * (1 + x[0]); }));
    const double dt = cfl_limit(mesh, c.b);
    const auto back = solve_deterministic_reversed(c, w, mesh, 1.0, dt);
    const auto fwd = solve_deterministic(c, back.level_z(0), back.level_zt(0), mesh, 1.0, dt);
    double e = 0.0;
    for (std::size_t n = 0; n < mesh.size(); ++n)
      e = std::max({e, std::abs(fwd.z_at(fwd.K)[n]), std::abs(fwd.zt_at(fwd.K)[n] - w[n])});
    return e;
  };
  // The stepper is time-symmetric (b1 by the trapezoid rule), so the round
  // trip is exact up to rounding, well inside the O(dt^2 + dx^2) bound.
  EXPECT_LT(roundtrip(33), 1e-10);
  EXPECT_LT(roundtrip(65), 1e-10);
}

TEST(ReversedSolverTest, StochasticCoefficientsRejected) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 9);
  auto c = wave_coefficients(mesh);
  c.b4 = ScalarFunction::constant(1.0);
  EXPECT_THROW(solve_deterministic_reversed(c, Field(mesh.size(), 0.0), mesh, 1.0, 0.01), UnsupportedModeError);
}

TEST(HiddenRegularityTest, EigenmodeClosedFormAndRefinement) {
  // T = 1: trace norm^2 = 2 pi^2 / 2 over both ends; |grad z0|^2 = pi^2 / 2; ratio sqrt(2)
  std::vector<double> r;
  for (std::size_t nodes : {33u, 65u, 129u}) {
    const auto mesh = build_mesh(Domain::interval(0.0, 1.0), nodes);
    const auto c = wave_coefficients(mesh);
    SimulationOptions opt{1.0, 0.5 * mesh.spacing(0), 1, 0};
    const auto ens = simulate_forward(c, sine_field(mesh), Field(mesh.size(), 0.0), mesh, opt);
    r.push_back(hidden_regularity_ratio(ens, c));
  }
  EXPECT_NEAR(r.back(), std::sqrt(2.0), 1e-3);
  EXPECT_LT(std::abs(r[1] / r[0] - 1), 0.05);
  EXPECT_LT(std::abs(r[2] / r[1] - 1), 0.05);
}

TEST(HiddenRegularityTest, ZeroSolutionIsUndefined) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 9);
  const auto c = wave_coefficients(mesh);
  SimulationOptions opt{1.0, 0.0, 1, 0};
  const auto ens = simulate_forward(c, Field(mesh.size(), 0.0), Field(mesh.size(), 0.0), mesh, opt);
  EXPECT_THROW(hidden_regularity_ratio(ens, c), NumericalError);
}

TEST(CoefficientSetTest, ANormLiteral) {
  const auto mesh = build_mesh(Domain::interval(0.0, 1.0), 11);
  auto c = wave_coefficients(mesh);
  EXPECT_EQ(c.A_norm(mesh, 1.0), 1.0);
  c.b1 = ScalarFunction::constant(2.0);
  c.b3 = ScalarFunction::constant(3.0);  // L^1 norm on (0,1) is 3
  c.b4 = ScalarFunction::constant(-1.0);
  EXPECT_NEAR(c.A_norm(mesh, 1.0), 4.0 + 9.0 + 1.0 + 1.0, 1e-12);
}

}  // namespace
}  // namespace shlab
