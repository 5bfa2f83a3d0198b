#pragma once

// Carleman weight theta = exp(l), l = lambda [d(x) - c1 (t - T)^2], the
// Conditions on d and (c0, c1, mu0, T), pointwise evaluation of Psi, A and
// B, and the positivity audit of the estimate's proof steps.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "shlab/errors.hpp"
#include "shlab/forms.hpp"
#include "shlab/geometry.hpp"
#include "shlab/jet.hpp"

namespace shlab {

struct CarlemanParams {
  double lambda = 1.0;
  double c0 = 0.1;
  double c1 = 0.9;
  double mu0 = 32.0;
  double T = 1.0;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
    if (!(c0 > 0.0 && c0 < c1 && c1 < 1.0)) throw ConfigError("need 0 < c0 < c1 < 1");
    if (!(mu0 > 4.0)) throw ConfigError("need mu0 > 4");
    if (!(T > 0.0)) throw ConfigError("need T > 0");
  }

  CarlemanParams with_lambda(double l) const {
    CarlemanParams p = *this;
    p.lambda = l;
    return p;
  }
};

// ---------------------------------------------------------------------------
// Fourth-order finite differences on the mesh (one-sided at the ends).

namespace fd4 {

inline double derivative_1d(const double* f, std::size_t stride, std::size_t n, std::size_t i, double h) {
  auto at = [&](std::size_t k) { return f[k * stride]; };
  if (i >= 2 && i + 2 < n)
    return (-at(i + 2) + 8.0 * at(i + 1) - 8.0 * at(i - 1) + at(i - 2)) / (12.0 * h);
  if (i == 0)
    return (-25.0 * at(0) + 48.0 * at(1) - 36.0 * at(2) + 16.0 * at(3) - 3.0 * at(4)) / (12.0 * h);
  if (i == 1)
    return (-3.0 * at(0) - 10.0 * at(1) + 18.0 * at(2) - 6.0 * at(3) + at(4)) / (12.0 * h);
  if (i + 1 == n)
    return (25.0 * at(n - 1) - 48.0 * at(n - 2) + 36.0 * at(n - 3) - 16.0 * at(n - 4) + 3.0 * at(n - 5)) /
           (12.0 * h);
  return (3.0 * at(n - 1) + 10.0 * at(n - 2) - 18.0 * at(n - 3) + 6.0 * at(n - 4) - at(n - 5)) / (12.0 * h);
}

/// d f / d x_axis at every node.
inline std::vector<double> partial(const SpatialMesh& mesh, const std::vector<double>& f, int axis) {
  const std::size_t nx = mesh.nodes(0), ny = mesh.nodes(1);
  if (mesh.nodes(axis) < 5) throw ConfigError("fourth-order differences need at least 5 nodes per axis");
  std::vector<double> out(f.size());
  const double h = mesh.spacing(axis);
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const std::size_t k = mesh.index(i, j);
      if (axis == 0)
        out[k] = derivative_1d(f.data() + mesh.index(0, j), 1, nx, i, h);
      else
        out[k] = derivative_1d(f.data() + mesh.index(i, 0), nx, ny, j, h);
    }
  return out;
}

}  // namespace fd4

// ---------------------------------------------------------------------------
// Derivatives of the principal coefficients at the nodes.

struct PrincipalDerivatives {
  // db[k][i][j][m] = d b^{ij} / d x_m at node k
  std::vector<std::array<std::array<std::array<double, 2>, 2>, 2>> db;
};

inline PrincipalDerivatives principal_derivatives(const PrincipalField& field, const SpatialMesh& mesh) {
  PrincipalDerivatives out;
  out.db.resize(mesh.size());
  const int n = mesh.dim();
  if (field.form) {
    using J = Jet<2, 1>;
    for (std::size_t k = 0; k < mesh.size(); ++k) {
      const Point x = mesh.coord(k);
      PointOf<J> xs{J::variable(0, x[0]), J::variable(1, x[1])};
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const J e = field.form->entry<J>(i, j, xs);
          for (int m = 0; m < n; ++m)
            out.db[k][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)][static_cast<std::size_t>(m)] =
                e.d(m);
        }
    }
    return out;
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      std::vector<double> f(mesh.size());
      for (std::size_t k = 0; k < mesh.size(); ++k) f[k] = field.values[k](i, j);
      for (int m = 0; m < n; ++m) {
        const auto df = fd4::partial(mesh, f, m);
        for (std::size_t k = 0; k < mesh.size(); ++k)
          out.db[k][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)][static_cast<std::size_t>(m)] = df[k];
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Condition on d.

struct ConditionDReport {
  double mu0_max = 0.0;        // largest mu0 admissible in the matrix inequality
  double min_grad_d = 0.0;     // min |grad d| over the nodes
  double min_d = 0.0;          // d must stay positive
  std::size_t mu0_argmin = 0;
  bool d2_pass = false;
  bool pass = false;
};

inline ConditionDReport verify_condition_d(const WeightFunction& d, const PrincipalField& field,
                                           const SpatialMesh& mesh) {
  d.validate();
  const auto ell = check_ellipticity(field, mesh);
  if (!(ell.min_eigenvalue > 0.0))
    throw InvalidFieldError("principal field is not positive definite at node " + std::to_string(ell.argmin_node));
  const int n = mesh.dim();
  const auto dp = principal_derivatives(field, mesh);
  ConditionDReport r;
  r.mu0_max = std::numeric_limits<double>::infinity();
  r.min_grad_d = std::numeric_limits<double>::infinity();
  r.min_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < mesh.size(); ++k) {
    const Point x = mesh.coord(k);
    const Point g = d.gradient(x, n);
    const auto H = d.hessian(x, n);
    const Sym2& b = field.values[k];
    const auto& db = dp.db[k];
    auto B = [&](int i, int j) { return b(i, j); };
    auto dB = [&](int i, int j, int m) {
      return db[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)][static_cast<std::size_t>(m)];
    };
    auto G = [&](int i) { return g[static_cast<std::size_t>(i)]; };
    auto Hd = [&](int i, int j) { return H[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]; };

    Eigen::Matrix2d M = Eigen::Matrix2d::Zero();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int ip = 0; ip < n; ++ip)
          for (int jp = 0; jp < n; ++jp) {
            // (b^{i'j} d_{x_i'})_{x_j'}
            const double inner = dB(ip, j, jp) * G(ip) + B(ip, j) * Hd(ip, jp);
            s += 2.0 * B(i, jp) * inner - dB(i, j, jp) * B(ip, jp) * G(ip);
          }
        M(i, j) = s;
      }
    double mu;
    if (n == 1) {
      mu = M(0, 0) / b.m11;
    } else {
      const Eigen::Matrix2d Ms = 0.5 * (M + M.transpose());
      Eigen::Matrix2d Bm;
      Bm << b.m11, b.m12, b.m21, b.m22;
      Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::Matrix2d> es(Ms, Bm);
      mu = es.eigenvalues().minCoeff();
    }
    if (mu < r.mu0_max) {
      r.mu0_max = mu;
      r.mu0_argmin = k;
    }
    r.min_grad_d = std::min(r.min_grad_d, std::hypot(g[0], g[1]));
    r.min_d = std::min(r.min_d, d.value(x, n));
  }
  r.d2_pass = r.min_grad_d > 0.0;
  r.pass = r.mu0_max > 4.0 && r.d2_pass && r.min_d > 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Condition on (c0, c1, mu0, T), inf/sup reading over the nodes.

struct ConditionParamsReport {
  double part1_margin = 0.0;         // mu0 - 4 c1 - c0
  double q_inf = 0.0, q_sup = 0.0;   // range of q = b^{ij} d_i d_j
  double upper_bound = 0.0;          // mu0 / (8 c1 + c0) * inf q
  double middle = 0.0;               // 4 c1^2 T^2
  double part2_lower_margin = 0.0;   // 4 c1^2 T^2 - sup q
  double part2_upper_margin = 0.0;   // mu0/(8c1+c0) inf q - 4 c1^2 T^2
  bool constants_valid = false;      // 0 < c0 < c1 < 1, mu0 > 4, T > 0
  bool pass = false;
};

inline std::vector<double> gradient_form_q(const WeightFunction& d, const PrincipalField& field,
                                           const SpatialMesh& mesh) {
  std::vector<double> q(mesh.size());
  for (std::size_t k = 0; k < mesh.size(); ++k) {
    const Point g = d.gradient(mesh.coord(k), mesh.dim());
    double s = 0.0;
    for (int i = 0; i < mesh.dim(); ++i)
      for (int j = 0; j < mesh.dim(); ++j)
        s += field.values[k](i, j) * g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(j)];
    q[k] = s;
  }
  return q;
}

inline ConditionParamsReport verify_condition_params(const CarlemanParams& p, const WeightFunction& d,
                                                     const PrincipalField& field, const SpatialMesh& mesh) {
  ConditionParamsReport r;
  r.constants_valid = p.c0 > 0.0 && p.c0 < p.c1 && p.c1 < 1.0 && p.mu0 > 4.0 && p.T > 0.0;
  const auto q = gradient_form_q(d, field, mesh);
  r.q_inf = *std::min_element(q.begin(), q.end());
  r.q_sup = *std::max_element(q.begin(), q.end());
  r.part1_margin = p.mu0 - 4.0 * p.c1 - p.c0;
  r.upper_bound = p.mu0 / (8.0 * p.c1 + p.c0) * r.q_inf;
  r.middle = 4.0 * p.c1 * p.c1 * p.T * p.T;
  r.part2_upper_margin = r.upper_bound - r.middle;
  r.part2_lower_margin = r.middle - r.q_sup;
  r.pass = r.constants_valid && r.part1_margin > 0.0 && r.part2_upper_margin > 0.0 && r.part2_lower_margin > 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Pointwise weight quantities.

struct WeightEvaluation {
  double ell = 0.0;
  double theta = 0.0;
  double ell_t = 0.0;
  double ell_tt = 0.0;
  Point grad_ell{0.0, 0.0};
  double psi = 0.0;
  double psi_t = 0.0;
  double A = 0.0;
  double B = 0.0;
};

/// Jets of every Carleman quantity at one space-time point. Variable 0 is
/// t, variables 1..n are the space coordinates.
template <int NV>
struct CarlemanJets {
  using J = Jet<NV, 4>;
  static constexpr int dim = NV - 1;

  J ell, ell_t, ell_tt;
  std::array<J, 2> ell_x;
  std::array<std::array<J, 2>, 2> p;
  J psi, A, B;

  CarlemanJets(const CarlemanParams& prm, const WeightFunction& d, const PrincipalForm& form, double t,
               const Point& x) {
    const J tt = J::variable(0, t);
    PointOf<J> xs{J::variable(1, x[0]), J(x[1])};
    if constexpr (NV == 3) xs[1] = J::variable(2, x[1]);
    const double lam = prm.lambda;
    const J dj = d.eval<J>(xs, dim);
    const J s = tt - prm.T;
    ell = (dj - s * s * prm.c1) * lam;
    ell_t = ell.derivative(0);
    ell_tt = ell_t.derivative(0);
    for (int i = 0; i < dim; ++i) ell_x[static_cast<std::size_t>(i)] = ell.derivative(1 + i);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j)
        p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = form.entry<J>(i, j, xs);

    J div_p_ellx(0.0);  // sum_ij (p^{ij} l_{x_i})_{x_j}
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) div_p_ellx += (P(i, j) * Lx(i)).derivative(1 + j);
    psi = ell_tt + div_p_ellx - lam * prm.c0;

    J sum(0.0);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j)
        sum += P(i, j) * Lx(i) * Lx(j) - P(i, j).derivative(1 + j) * Lx(i) - P(i, j) * Lx(i).derivative(1 + j);
    A = (ell_t * ell_t - ell_tt) - sum - psi;

    J flux(0.0), lap_psi(0.0);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) {
        flux += (A * P(i, j) * Lx(i)).derivative(1 + j);
        lap_psi += (P(i, j) * psi.derivative(1 + i)).derivative(1 + j);
      }
    B = A * psi + (A * ell_t).derivative(0) - flux + (psi.derivative(0).derivative(0) - lap_psi) * 0.5;
  }

  const J& P(int i, int j) const { return p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]; }
  const J& Lx(int i) const { return ell_x[static_cast<std::size_t>(i)]; }

  WeightEvaluation evaluation() const {
    WeightEvaluation w;
    w.ell = ell.value();
    w.theta = std::exp(w.ell);
    w.ell_t = ell_t.value();
    w.ell_tt = ell_tt.value();
    for (int i = 0; i < dim; ++i) w.grad_ell[static_cast<std::size_t>(i)] = Lx(i).value();
    w.psi = psi.value();
    w.psi_t = psi.derivative(0).value();
    w.A = A.value();
    w.B = B.value();
    return w;
  }
};

inline void check_time(const CarlemanParams& p, double t) {
  const double tol = 1e-12 * std::max(1.0, p.T);
  if (!(t >= -tol && t <= p.T + tol)) throw DomainError("t outside [0, T]");
}

/// Analytic evaluation (closed-form d and b).
inline WeightEvaluation weight_eval(const CarlemanParams& p, const WeightFunction& d, const PrincipalForm& form,
                                    int dim, double t, const Point& x) {
  check_time(p, t);
  if (dim == 1) return CarlemanJets<2>(p, d, form, t, x).evaluation();
  return CarlemanJets<3>(p, d, form, t, x).evaluation();
}

/// Finite-difference evaluation of Psi, A, B at every node for one time:
/// spatial derivatives of composite expressions by fourth-order stencils,
/// time derivatives from the closed form of l.
inline std::vector<WeightEvaluation> weight_eval_fd(const CarlemanParams& p, const WeightFunction& d,
                                                    const PrincipalField& field, const SpatialMesh& mesh,
                                                    double t) {
  check_time(p, t);
  const int n = mesh.dim();
  const std::size_t N = mesh.size();
  const double lam = p.lambda;
  const double ell_t = -2.0 * lam * p.c1 * (t - p.T);
  const double ell_tt = -2.0 * lam * p.c1;

  std::vector<Point> grad(N);
  std::vector<std::array<std::array<double, 2>, 2>> hess(N);
  for (std::size_t k = 0; k < N; ++k) {
    grad[k] = d.gradient(mesh.coord(k), n);
    hess[k] = d.hessian(mesh.coord(k), n);
  }
  auto b = [&](std::size_t k, int i, int j) { return field.values[k](i, j); };
  auto lx = [&](std::size_t k, int i) { return lam * grad[k][static_cast<std::size_t>(i)]; };
  auto lxx = [&](std::size_t k, int i, int j) {
    return lam * hess[k][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  };

  // Psi = l_tt + sum_j d_j (sum_i b^{ij} l_i) - lambda c0
  std::vector<double> psi(N, ell_tt - lam * p.c0);
  for (int j = 0; j < n; ++j) {
    std::vector<double> flux(N);
    for (std::size_t k = 0; k < N; ++k) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += b(k, i, j) * lx(k, i);
      flux[k] = s;
    }
    const auto df = fd4::partial(mesh, flux, j);
    for (std::size_t k = 0; k < N; ++k) psi[k] += df[k];
  }

  // sum_j d_j b^{ij}
  std::vector<std::array<double, 2>> divb(N, {0.0, 0.0});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      std::vector<double> f(N);
      for (std::size_t k = 0; k < N; ++k) f[k] = b(k, i, j);
      const auto df = fd4::partial(mesh, f, j);
      for (std::size_t k = 0; k < N; ++k) divb[k][static_cast<std::size_t>(i)] += df[k];
    }

  std::vector<double> A(N);
  for (std::size_t k = 0; k < N; ++k) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      s -= divb[k][static_cast<std::size_t>(i)] * lx(k, i);
      for (int j = 0; j < n; ++j) s += b(k, i, j) * lx(k, i) * lx(k, j) - b(k, i, j) * lxx(k, i, j);
    }
    A[k] = (ell_t * ell_t - ell_tt) - s - psi[k];
  }

  std::vector<double> B(N);
  const double A_t = 2.0 * ell_t * ell_tt;  // l_ttt = 0, Psi independent of t
  for (std::size_t k = 0; k < N; ++k) B[k] = A[k] * psi[k] + (A_t * ell_t + A[k] * ell_tt);
  for (int j = 0; j < n; ++j) {
    std::vector<double> f(N);
    for (std::size_t k = 0; k < N; ++k) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += A[k] * b(k, i, j) * lx(k, i);
      f[k] = s;
    }
    const auto df = fd4::partial(mesh, f, j);
    for (std::size_t k = 0; k < N; ++k) B[k] -= df[k];
  }
  std::vector<std::vector<double>> dpsi(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) dpsi[static_cast<std::size_t>(i)] = fd4::partial(mesh, psi, i);
  for (int j = 0; j < n; ++j) {
    std::vector<double> f(N);
    for (std::size_t k = 0; k < N; ++k) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += b(k, i, j) * dpsi[static_cast<std::size_t>(i)][k];
      f[k] = s;
    }
    const auto df = fd4::partial(mesh, f, j);
    for (std::size_t k = 0; k < N; ++k) B[k] -= 0.5 * df[k];
  }

  std::vector<WeightEvaluation> out(N);
  for (std::size_t k = 0; k < N; ++k) {
    auto& w = out[k];
    w.ell = lam * (d.value(mesh.coord(k), n) - p.c1 * (t - p.T) * (t - p.T));
    w.theta = std::exp(w.ell);
    w.ell_t = ell_t;
    w.ell_tt = ell_tt;
    w.grad_ell = {lx(k, 0), n > 1 ? lx(k, 1) : 0.0};
    w.psi = psi[k];
    w.psi_t = 0.0;
    w.A = A[k];
    w.B = B[k];
  }
  return out;
}

/// Evaluation at every node: analytic when the field carries its closed
/// form, finite differences otherwise.
inline std::vector<WeightEvaluation> weight_eval_mesh(const CarlemanParams& p, const WeightFunction& d,
                                                      const PrincipalField& field, const SpatialMesh& mesh,
                                                      double t) {
  if (!field.form) return weight_eval_fd(p, d, field, mesh, t);
  std::vector<WeightEvaluation> out(mesh.size());
  for (std::size_t k = 0; k < mesh.size(); ++k)
    out[k] = weight_eval(p, d, *field.form, mesh.dim(), t, mesh.coord(k));
  return out;
}

// ---------------------------------------------------------------------------
// Audit of the proof coefficients.

struct AuditWorstPoint {
  double lambda = 0.0;
  double t = 0.0;
  std::size_t node = 0;
  double value = 0.0;  // B - target, or min eigenvalue of the t = 0 form
};

struct AuditReport {
  double psi_residual_max = 0.0;   // |l_tt + div(b grad l) - Psi - lambda c0|
  double cross_term_max = 0.0;     // coefficient of v_{x_i} v_t
  std::optional<double> lambda0;   // B >= 0.5 (4c1 + c0) inf q lambda^3
  std::optional<double> lambda1;   // t = 0 boundary form positive definite
  AuditWorstPoint worst_B;
  AuditWorstPoint worst_t0;
  double b_margin_constant = 0.0;  // 0.5 (4 c1 + c0) inf q
};

/// Smallest eigenvalue of the t = 0 quadratic form in (v_t, grad v, v).
inline double initial_form_min_eigenvalue(const WeightEvaluation& w, const Sym2& b, int n) {
  const int m = n + 2;
  Eigen::MatrixXd F = Eigen::MatrixXd::Zero(m, m);
  F(0, 0) = w.ell_t;
  for (int i = 0; i < n; ++i) {
    double wi = 0.0;  // sum_j b^{ji} l_{x_j}
    for (int j = 0; j < n; ++j) wi += b(j, i) * w.grad_ell[static_cast<std::size_t>(j)];
    F(0, 1 + i) = F(1 + i, 0) = -wi;
    for (int j = 0; j < n; ++j) F(1 + i, 1 + j) = b(i, j) * w.ell_t;
  }
  F(0, m - 1) = F(m - 1, 0) = -0.5 * w.psi;
  F(m - 1, m - 1) = w.A * w.ell_t + 0.5 * w.psi_t;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(F, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline AuditReport audit_proof_coefficients(const CarlemanParams& params, const WeightFunction& d,
                                            const PrincipalField& field, const SpatialMesh& mesh,
                                            const std::vector<double>& lambda_grid, std::size_t time_samples = 17) {
  if (lambda_grid.empty()) throw ConfigError("audit needs a nonempty lambda grid");
  if (time_samples < 2) throw ConfigError("audit needs at least two time samples");
  AuditReport r;
  const auto q = gradient_form_q(d, field, mesh);
  const double q_inf = *std::min_element(q.begin(), q.end());
  r.b_margin_constant = 0.5 * (4.0 * params.c1 + params.c0) * q_inf;
  const int n = mesh.dim();

  std::vector<double> times(time_samples);
  for (std::size_t s = 0; s < time_samples; ++s)
    times[s] = params.T * static_cast<double>(s) / static_cast<double>(time_samples - 1);

  // (i) and (ii): identities that hold for every lambda; checked at params.lambda.
  if (field.form) {
    for (double t : times)
      for (std::size_t k = 0; k < mesh.size(); ++k) {
        const Point x = mesh.coord(k);
        auto check = [&](const auto& jets) {
          using J = typename std::decay_t<decltype(jets)>::J;
          J div(0.0);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) div += (jets.P(i, j) * jets.Lx(i)).derivative(1 + j);
          const double res = (jets.ell_tt + div - jets.psi).value() - params.lambda * params.c0;
          r.psi_residual_max = std::max(r.psi_residual_max, std::abs(res));
          for (int i = 0; i < n; ++i) {
            J c(0.0);
            for (int j = 0; j < n; ++j)
              c += (jets.P(i, j) * jets.Lx(j)).derivative(0) + jets.P(i, j) * jets.Lx(j).derivative(0);
            r.cross_term_max = std::max(r.cross_term_max, std::abs(c.value()));
          }
        };
        if (n == 1)
          check(CarlemanJets<2>(params, d, *field.form, t, x));
        else
          check(CarlemanJets<3>(params, d, *field.form, t, x));
      }
  } else {
    for (double t : times) {
      const auto ev = weight_eval_fd(params, d, field, mesh, t);
      // Psi is defined from the same discrete divergence, so the residual
      // is the rounding of the subtraction.
      std::vector<double> div(mesh.size(), 0.0);
      for (int j = 0; j < n; ++j) {
        std::vector<double> f(mesh.size());
        for (std::size_t k = 0; k < mesh.size(); ++k) {
          double s = 0.0;
          for (int i = 0; i < n; ++i) s += field.values[k](i, j) * ev[k].grad_ell[static_cast<std::size_t>(i)];
          f[k] = s;
        }
        const auto df = fd4::partial(mesh, f, j);
        for (std::size_t k = 0; k < mesh.size(); ++k) div[k] += df[k];
      }
      for (std::size_t k = 0; k < mesh.size(); ++k) {
        const double res = ev[k].ell_tt + div[k] - ev[k].psi - params.lambda * params.c0;
        r.psi_residual_max = std::max(r.psi_residual_max, std::abs(res));
      }
    }
    // b independent of t and l_{t x} = 0: the coefficient vanishes identically.
    r.cross_term_max = 0.0;
  }

  // (iii) B positivity with explicit margin.
  for (double lam : lambda_grid) {
    const CarlemanParams p = params.with_lambda(lam);
    const double target = r.b_margin_constant * lam * lam * lam;
    bool ok = true;
    AuditWorstPoint worst{lam, 0.0, 0, std::numeric_limits<double>::infinity()};
    for (double t : times) {
      const auto ev = weight_eval_mesh(p, d, field, mesh, t);
      for (std::size_t k = 0; k < mesh.size(); ++k) {
        const double margin = ev[k].B - target;
        if (margin < worst.value) worst = {lam, t, k, margin};
        if (!(margin >= 0.0)) ok = false;
      }
    }
    r.worst_B = worst;
    if (ok) {
      r.lambda0 = lam;
      break;
    }
  }

  // (iv) positivity of the t = 0 endpoint form.
  for (double lam : lambda_grid) {
    const CarlemanParams p = params.with_lambda(lam);
    const auto ev = weight_eval_mesh(p, d, field, mesh, 0.0);
    bool ok = true;
    AuditWorstPoint worst{lam, 0.0, 0, std::numeric_limits<double>::infinity()};
    for (std::size_t k = 0; k < mesh.size(); ++k) {
      const double e = initial_form_min_eigenvalue(ev[k], field.values[k], n);
      if (e < worst.value) worst = {lam, 0.0, k, e};
      if (!(e > 0.0)) ok = false;
    }
    r.worst_t0 = worst;
    if (ok) {
      r.lambda1 = lam;
      break;
    }
  }
  return r;
}

/// lambda-tilde = max(lambda0, lambda1) when both thresholds were found.
inline std::optional<double> audit_threshold(const AuditReport& r) {
  if (!r.lambda0 || !r.lambda1) return std::nullopt;
  return std::max(*r.lambda0, *r.lambda1);
}

inline std::vector<double> doubling_grid(double first, std::size_t count) {
  std::vector<double> g(count);
  double v = first;
  for (auto& x : g) {
    x = v;
    v *= 2.0;
  }
  return g;
}

}  // namespace shlab
