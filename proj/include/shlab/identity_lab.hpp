#pragma once

// Weighted multiplier identity for
//   du_t - sum_ij (p^{ij} u_{x_i})_{x_j} dt,   v = theta u,  theta = e^l,
// checked pointwise with jets and in integrated form along discrete Ito
// paths, plus the Monte Carlo ratio studies built on the Carleman weight.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <vector>

#include "shlab/carleman.hpp"
#include "shlab/errors.hpp"
#include "shlab/geometry.hpp"
#include "shlab/jet.hpp"
#include "shlab/norms.hpp"
#include "shlab/parallel.hpp"
#include "shlab/spde.hpp"

namespace shlab {

// ---------------------------------------------------------------------------
// Pointwise form.

struct IdentitySides {
  double lhs = 0.0;
  double rhs = 0.0;
  double residual() const { return lhs - rhs; }
};

/// Coefficients of the right-hand side that depend only on the weight.
template <int NV>
struct IdentityCoefficients {
  using J = Jet<NV, 4>;
  static constexpr int dim = NV - 1;
  CarlemanJets<NV> cw;
  J c_vt;                                   // l_tt + div(p grad l) - Psi
  std::array<std::array<J, 2>, 2> cross{};  // (p^{ij} l_j)_t + p^{ij} l_{tj}
  std::array<std::array<J, 2>, 2> cij{};

  IdentityCoefficients(const CarlemanParams& prm, const WeightFunction& d, const PrincipalForm& form, double t,
                       const Point& x)
      : cw(prm, d, form, t, x) {
    J div(0.0);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) div += (cw.P(i, j) * cw.Lx(i)).derivative(1 + j);
    c_vt = cw.ell_tt + div - cw.psi;
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) {
        X(cross, i, j) = (cw.P(i, j) * cw.Lx(j)).derivative(0) + cw.P(i, j) * cw.ell_t.derivative(1 + j);
        J s = (cw.P(i, j) * cw.ell_t).derivative(0) + cw.psi * cw.P(i, j);
        for (int ip = 0; ip < dim; ++ip)
          for (int jp = 0; jp < dim; ++jp)
            s += 2.0 * cw.P(i, jp) * (cw.P(ip, j) * cw.Lx(ip)).derivative(1 + jp) -
                 (cw.P(i, j) * cw.P(ip, jp) * cw.Lx(ip)).derivative(1 + jp);
        X(cij, i, j) = s;
      }
  }

  static J& X(std::array<std::array<J, 2>, 2>& m, int i, int j) {
    return m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  static const J& X(const std::array<std::array<J, 2>, 2>& m, int i, int j) {
    return m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
};

/// Both sides of the identity at (t, x) for a smooth deterministic u, so
/// (du_t)^2 = 0. `u` is called with jets (t, x) and must return a jet.
template <int NV, class U>
IdentitySides pointwise_identity(const CarlemanParams& prm, const WeightFunction& d, const PrincipalForm& form,
                                 U&& u, double t, const Point& x) {
  using J = Jet<NV, 4>;
  constexpr int n = NV - 1;
  const IdentityCoefficients<NV> ic(prm, d, form, t, x);
  const auto& cw = ic.cw;
  const J tt = J::variable(0, t);
  PointOf<J> xs{J::variable(1, x[0]), J(x[1])};
  if constexpr (NV == 3) xs[1] = J::variable(2, x[1]);
  const J uj = u(tt, xs);
  const J theta = exp(cw.ell);
  const J v = theta * uj;
  const J vt = v.derivative(0);
  std::array<J, 2> vx{};
  for (int i = 0; i < n; ++i) vx[static_cast<std::size_t>(i)] = v.derivative(1 + i);
  auto V = [&](int i) -> const J& { return vx[static_cast<std::size_t>(i)]; };
  const auto& P = [&](int i, int j) -> const J& { return cw.P(i, j); };
  const auto& Lx = [&](int i) -> const J& { return cw.Lx(i); };
  const J& lt = cw.ell_t;
  const J& psi = cw.psi;
  const J& A = cw.A;

  J M = -2.0 * lt * vt + psi * v;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) M += 2.0 * P(i, j) * Lx(i) * V(j);

  J Lu(0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) Lu += (P(i, j) * uj.derivative(1 + i)).derivative(1 + j);
  J lhs = theta * M * (uj.derivative(0).derivative(0) - Lu);

  for (int j = 0; j < n; ++j) {
    J Vj(0.0);
    for (int i = 0; i < n; ++i) {
      for (int ip = 0; ip < n; ++ip)
        for (int jp = 0; jp < n; ++jp)
          Vj += 2.0 * P(i, j) * P(ip, jp) * Lx(ip) * V(i) * V(jp) - P(i, j) * P(ip, jp) * Lx(i) * V(ip) * V(jp);
      Vj += -2.0 * P(i, j) * lt * V(i) * vt + P(i, j) * Lx(i) * vt * vt + psi * P(i, j) * V(i) * v -
            (A * Lx(i) + 0.5 * psi.derivative(1 + i)) * P(i, j) * v * v;
    }
    lhs += Vj.derivative(1 + j);
  }
  J E = lt * vt * vt - psi * vt * v + (A * lt + 0.5 * psi.derivative(0)) * v * v;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) E += P(i, j) * lt * V(i) * V(j) - 2.0 * P(i, j) * Lx(i) * V(j) * vt;
  lhs += E.derivative(0);

  J rhs = ic.c_vt * vt * vt + cw.B * v * v + M * M;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      rhs += -2.0 * ic.X(ic.cross, i, j) * V(i) * vt;
      rhs += ic.X(ic.cij, i, j) * V(i) * V(j);
    }
  return {lhs.value(), rhs.value()};
}

// ---------------------------------------------------------------------------
// Manufactured processes u(t, x) = phi(x) h(t).

/// phi(x) = amp prod_i sin(k pi x_i); vanishes on the boundary of the unit interval/square.
struct SpatialProfile {
  double amp = 1.0;
  double k = 1.0;

  template <class S>
  S eval(const PointOf<S>& x, int dim) const {
    using std::sin;
    S r(amp);
    for (int i = 0; i < dim; ++i) r = r * sin(x[static_cast<std::size_t>(i)] * (k * std::numbers::pi));
    return r;
  }
};

/// Discrete time factor: h' = h1, dh1 = a dt + sigma dB.
struct TimePath {
  Field h, h1, a, sigma;  // K + 1 levels
  Field dB;               // K increments
  std::size_t K() const { return h.empty() ? 0 : h.size() - 1; }
};

inline TimePath deterministic_time_path(const std::function<double(double)>& h,
                                        const std::function<double(double)>& h1,
                                        const std::function<double(double)>& h2, double T, std::size_t K) {
  TimePath p;
  const double dt = T / static_cast<double>(K);
  for (std::size_t k = 0; k <= K; ++k) {
    const double t = static_cast<double>(k) * dt;
    p.h.push_back(h(t));
    p.h1.push_back(h1(t));
    p.a.push_back(h2(t));
    p.sigma.push_back(0.0);
  }
  p.dB.assign(K, 0.0);
  return p;
}

/// h1_{k+1} = h1_k + a_k dt + sigma_k dB_k, h_{k+1} = h_k + dt (h1_k + h1_{k+1}) / 2.
inline TimePath ito_time_path(double h0, double h1_0, const std::function<double(double)>& drift,
                              const std::function<double(double)>& diffusion, const Field& dB, double T) {
  const std::size_t K = dB.size();
  const double dt = T / static_cast<double>(K);
  TimePath p;
  p.dB = dB;
  p.h.resize(K + 1);
  p.h1.resize(K + 1);
  p.a.resize(K + 1);
  p.sigma.resize(K + 1);
  p.h[0] = h0;
  p.h1[0] = h1_0;
  for (std::size_t k = 0; k <= K; ++k) {
    const double t = static_cast<double>(k) * dt;
    p.a[k] = drift(t);
    p.sigma[k] = diffusion(t);
    if (k == K) break;
    p.h1[k + 1] = p.h1[k] + p.a[k] * dt + p.sigma[k] * dB[k];
    p.h[k + 1] = p.h[k] + 0.5 * dt * (p.h1[k] + p.h1[k + 1]);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Integrated form. For u = phi h every term is a quadratic form in
// (h, h1, a) whose coefficients depend only on (t, x); they are integrated
// over G once per time level and reused for every path.

using Quad2 = std::array<double, 4>;  // row-major 2x2

inline double quad(const Quad2& q, double a, double b) {
  return q[0] * a * a + (q[1] + q[2]) * a * b + q[3] * b * b;
}

struct LevelForms {
  std::array<double, 6> drift{};  // 2x3: theta M (h, h1) times (phi a - L phi h)
  std::array<double, 2> noise{};  // theta M phi, times sigma dB
  Quad2 energy{};                 // E
  Quad2 flux{};                   // boundary integral of V . nu
  Quad2 rhs{};                    // quadratic right-hand side
  double qv = 0.0;                // theta^2 l_t phi^2, times (dh1)^2
};

namespace detail {

using Vec2 = std::array<double, 2>;

inline Quad2 outer(const Vec2& a, const Vec2& b, double c) {
  return {c * a[0] * b[0], c * a[0] * b[1], c * a[1] * b[0], c * a[1] * b[1]};
}
inline void add(Quad2& q, const Quad2& o) {
  for (std::size_t i = 0; i < 4; ++i) q[i] += o[i];
}

struct NodeForms {
  LevelForms f;
  std::array<Quad2, 2> V{};  // V^j
};

template <int NV>
NodeForms node_forms(const CarlemanParams& prm, const WeightFunction& d, const PrincipalForm& form,
                     const SpatialProfile& phi, double t, const Point& x) {
  using J = Jet<NV, 4>;
  constexpr int n = NV - 1;
  const IdentityCoefficients<NV> ic(prm, d, form, t, x);
  const auto& cw = ic.cw;
  PointOf<J> xs{J::variable(1, x[0]), J(x[1])};
  if constexpr (NV == 3) xs[1] = J::variable(2, x[1]);
  const J ph = phi.eval<J>(xs, n);
  J Lphi(0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) Lphi += (cw.P(i, j) * ph.derivative(1 + i)).derivative(1 + j);

  const double th = std::exp(cw.ell.value());
  const double lt = cw.ell_t.value(), psi = cw.psi.value(), A = cw.A.value(), B = cw.B.value();
  const double psit = cw.psi.derivative(0).value();
  const double f = ph.value();
  double lx[2] = {0, 0}, fx[2] = {0, 0}, psix[2] = {0, 0}, p[2][2] = {{0, 0}, {0, 0}};
  for (int i = 0; i < n; ++i) {
    lx[i] = cw.Lx(i).value();
    fx[i] = ph.derivative(1 + i).value();
    psix[i] = cw.psi.derivative(1 + i).value();
    for (int j = 0; j < n; ++j) p[i][j] = cw.P(i, j).value();
  }
  // v, v_t, v_{x_i} as linear forms in (h, h1)
  const Vec2 v{th * f, 0.0};
  const Vec2 vt{th * lt * f, th * f};
  Vec2 vx[2];
  for (int i = 0; i < 2; ++i) vx[i] = {th * (lx[i] * f + fx[i]), 0.0};

  Vec2 M{-2.0 * lt * vt[0] + psi * v[0], -2.0 * lt * vt[1] + psi * v[1]};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int c = 0; c < 2; ++c) M[c] += 2.0 * p[i][j] * lx[i] * vx[j][c];

  NodeForms out;
  auto& F = out.f;
  const double second[3] = {-Lphi.value(), 0.0, f};
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) F.drift[static_cast<std::size_t>(r * 3 + c)] = th * M[r] * second[c];
  F.noise = {th * M[0] * f, th * M[1] * f};

  add(F.energy, outer(vt, vt, lt));
  add(F.energy, outer(vt, v, -psi));
  add(F.energy, outer(v, v, A * lt + 0.5 * psit));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      add(F.energy, outer(vx[i], vx[j], p[i][j] * lt));
      add(F.energy, outer(vx[j], vt, -2.0 * p[i][j] * lx[i]));
    }

  for (int j = 0; j < n; ++j) {
    Quad2& Vj = out.V[static_cast<std::size_t>(j)];
    for (int i = 0; i < n; ++i) {
      for (int ip = 0; ip < n; ++ip)
        for (int jp = 0; jp < n; ++jp) {
          add(Vj, outer(vx[i], vx[jp], 2.0 * p[i][j] * p[ip][jp] * lx[ip]));
          add(Vj, outer(vx[ip], vx[jp], -p[i][j] * p[ip][jp] * lx[i]));
        }
      add(Vj, outer(vx[i], vt, -2.0 * p[i][j] * lt));
      add(Vj, outer(vt, vt, p[i][j] * lx[i]));
      add(Vj, outer(vx[i], v, psi * p[i][j]));
      add(Vj, outer(v, v, -(A * lx[i] + 0.5 * psix[i]) * p[i][j]));
    }
  }

  add(F.rhs, outer(vt, vt, ic.c_vt.value()));
  add(F.rhs, outer(v, v, B));
  add(F.rhs, outer(M, M, 1.0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      add(F.rhs, outer(vx[i], vt, -2.0 * ic.X(ic.cross, i, j).value()));
      add(F.rhs, outer(vx[i], vx[j], ic.X(ic.cij, i, j).value()));
    }
  F.qv = th * th * lt * f * f;
  return out;
}

}  // namespace detail

struct PathSides {
  double lhs = 0.0;
  double rhs = 0.0;            // quadratic variation in model form sigma^2 dt
  double rhs_empirical = 0.0;  // quadratic variation from squared increments of h1
};

class IdentityIntegrator {
 public:
  IdentityIntegrator(const CarlemanParams& prm, const WeightFunction& d, const PrincipalForm& form,
                     const SpatialProfile& phi, const SpatialMesh& mesh, double T, std::size_t K)
      : K_(K), dt_(T / static_cast<double>(K)) {
    if (std::abs(T - prm.T) > 1e-12 * prm.T) throw ConfigError("identity horizon must equal the weight horizon T");
    double scale = 0.0, edge = 0.0;
    for (std::size_t n = 0; n < mesh.size(); ++n) {
      const double v = std::abs(phi.eval<double>(mesh.coord(n), mesh.dim()));
      scale = std::max(scale, v);
      if (mesh.on_boundary(n)) edge = std::max(edge, v);
    }
    if (edge > 1e-12 * std::max(scale, 1.0)) throw DataError("manufactured u does not vanish on the boundary");
    levels_.resize(K + 1);
    const int dim = mesh.dim();
    for (std::size_t k = 0; k <= K; ++k) {
      const double t = static_cast<double>(k) * dt_;
      LevelForms& L = levels_[k];
      std::vector<detail::NodeForms> nodes(mesh.size());
      for (std::size_t n = 0; n < mesh.size(); ++n) {
        nodes[n] = dim == 1 ? detail::node_forms<2>(prm, d, form, phi, t, mesh.coord(n))
                            : detail::node_forms<3>(prm, d, form, phi, t, mesh.coord(n));
        const double w = mesh.weight(n);
        const auto& f = nodes[n].f;
        for (std::size_t i = 0; i < 6; ++i) L.drift[i] += w * f.drift[i];
        for (std::size_t i = 0; i < 2; ++i) L.noise[i] += w * f.noise[i];
        for (std::size_t i = 0; i < 4; ++i) {
          L.energy[i] += w * f.energy[i];
          L.rhs[i] += w * f.rhs[i];
        }
        L.qv += w * f.qv;
      }
      L.flux = boundary_flux(mesh, nodes);
    }
  }

  std::size_t steps() const { return K_; }
  double dt() const { return dt_; }
  const std::vector<LevelForms>& levels() const { return levels_; }

  PathSides evaluate(const TimePath& path) const {
    if (path.K() != K_) throw ConfigError("time path does not match the integrator grid");
    const auto wt = time_weights(K_, dt_);
    PathSides s;
    for (std::size_t k = 0; k <= K_; ++k) {
      const auto& L = levels_[k];
      const double h = path.h[k], h1 = path.h1[k], a = path.a[k];
      const double y[3] = {h, h1, a};
      double drift = 0.0;
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) drift += L.drift[static_cast<std::size_t>(r * 3 + c)] * y[r] * y[c];
      s.lhs += wt[k] * (drift + quad(L.flux, h, h1));
      const double q = quad(L.rhs, h, h1);
      s.rhs += wt[k] * (q + L.qv * path.sigma[k] * path.sigma[k]);
      s.rhs_empirical += wt[k] * q;
      if (k < K_) {
        s.lhs += path.sigma[k] * path.dB[k] * (L.noise[0] * h + L.noise[1] * h1);
        const double dh1 = path.h1[k + 1] - path.h1[k];
        s.rhs_empirical += L.qv * dh1 * dh1;
      }
    }
    s.lhs += quad(levels_[K_].energy, path.h[K_], path.h1[K_]) - quad(levels_[0].energy, path.h[0], path.h1[0]);
    return s;
  }

 private:
  /// Integral of V . nu over the boundary (trapezoid along each edge in 2D).
  static Quad2 boundary_flux(const SpatialMesh& mesh, const std::vector<detail::NodeForms>& nodes) {
    Quad2 out{};
    auto acc = [&](std::size_t node, int axis, double sign, double w) {
      const auto& V = nodes[node].V[static_cast<std::size_t>(axis)];
      for (std::size_t i = 0; i < 4; ++i) out[i] += sign * w * V[i];
    };
    if (mesh.dim() == 1) {
      acc(0, 0, -1.0, 1.0);
      acc(mesh.size() - 1, 0, 1.0, 1.0);
      return out;
    }
    const std::size_t nx = mesh.nodes(0), ny = mesh.nodes(1);
    for (std::size_t j = 0; j < ny; ++j) {
      const double w = mesh.spacing(1) * ((j == 0 || j + 1 == ny) ? 0.5 : 1.0);
      acc(mesh.index(0, j), 0, -1.0, w);
      acc(mesh.index(nx - 1, j), 0, 1.0, w);
    }
    for (std::size_t i = 0; i < nx; ++i) {
      const double w = mesh.spacing(0) * ((i == 0 || i + 1 == nx) ? 0.5 : 1.0);
      acc(mesh.index(i, 0), 1, -1.0, w);
      acc(mesh.index(i, ny - 1), 1, 1.0, w);
    }
    return out;
  }

  std::size_t K_;
  double dt_;
  std::vector<LevelForms> levels_;
};

// ---------------------------------------------------------------------------
// Refinement ladders.

struct IdentityLevel {
  std::size_t level = 0;
  double dt = 0.0, dx = 0.0;
  double residual = 0.0;             // |mean over paths of (L - R)|
  double normalized_residual = 0.0;  // residual / max(mean|L|, mean|R|, 1)
  double path_rms = 0.0;             // sqrt(mean (L - R)^2)
  double empirical_residual = 0.0;   // same as residual with squared increments for (du_t)^2
  double mean_lhs = 0.0, mean_rhs = 0.0;
  std::size_t paths = 0;
};

struct IdentityReport {
  std::vector<IdentityLevel> levels;
  double observed_order = 0.0;  // least-squares slope of log residual vs log dt
};

inline double fitted_order(const std::vector<IdentityLevel>& lv) {
  if (lv.size() < 2) return 0.0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double m = static_cast<double>(lv.size());
  for (const auto& l : lv) {
    const double x = std::log(l.dt), y = std::log(std::max(l.residual, 1e-300));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

inline IdentityLevel summarize_level(std::size_t level, double dt, double dx, const std::vector<PathSides>& sides) {
  IdentityLevel out;
  out.level = level;
  out.dt = dt;
  out.dx = dx;
  out.paths = sides.size();
  double mean = 0.0, emp = 0.0, ms = 0.0, al = 0.0, ar = 0.0;
  for (const auto& s : sides) {
    const double r = s.lhs - s.rhs;
    mean += r;
    emp += s.lhs - s.rhs_empirical;
    ms += r * r;
    al += std::abs(s.lhs);
    ar += std::abs(s.rhs);
  }
  const double P = static_cast<double>(sides.size());
  out.residual = std::abs(mean / P);
  out.empirical_residual = std::abs(emp / P);
  out.path_rms = std::sqrt(ms / P);
  out.mean_lhs = al / P;
  out.mean_rhs = ar / P;
  out.normalized_residual = out.residual / std::max({out.mean_lhs, out.mean_rhs, 1.0});
  return out;
}

struct IdentityLadderSpec {
  CarlemanParams prm;
  WeightFunction d;
  PrincipalForm form;
  SpatialProfile phi;
  Domain domain = Domain::interval(0.0, 1.0);
  std::size_t base_nodes = 9;   // nodes per axis at level 0
  std::size_t base_steps = 8;   // time steps at level 0
  std::size_t levels = 4;
  bool refine_space = true;
};

/// Deterministic u = phi(x) h(t) with closed-form h, h', h''.
inline IdentityReport verify_pointwise_identity(const IdentityLadderSpec& spec,
                                                    const std::function<double(double)>& h,
                                                    const std::function<double(double)>& h1,
                                                    const std::function<double(double)>& h2) {
  IdentityReport rep;
  for (std::size_t l = 0; l < spec.levels; ++l) {
    const std::size_t scale = std::size_t{1} << l;
    const std::size_t nodes = spec.refine_space ? (spec.base_nodes - 1) * scale + 1 : spec.base_nodes;
    const std::size_t K = spec.base_steps * scale;
    const auto mesh = build_mesh(spec.domain, nodes);
    const IdentityIntegrator integ(spec.prm, spec.d, spec.form, spec.phi, mesh, spec.prm.T, K);
    const auto path = deterministic_time_path(h, h1, h2, spec.prm.T, K);
    rep.levels.push_back(summarize_level(l, integ.dt(), mesh.spacing(0), {integ.evaluate(path)}));
  }
  rep.observed_order = fitted_order(rep.levels);
  return rep;
}

/// Stochastic u = phi(x) h(t), dh' = a dt + sigma dB. Increments are drawn on
/// the finest level and summed for coarser ones, so every level sees the same
/// Brownian paths.
inline IdentityReport verify_pointwise_identity(const IdentityLadderSpec& spec, double h0, double h1_0,
                                                 const std::function<double(double)>& drift,
                                                 const std::function<double(double)>& diffusion,
                                                 std::size_t paths, std::uint64_t seed) {
  IdentityReport rep;
  const std::size_t finest = spec.base_steps << (spec.levels - 1);
  const double T = spec.prm.T;
  std::vector<Field> fine(paths);
  for (std::size_t p = 0; p < paths; ++p) fine[p] = brownian_increments(seed, p, finest, T / static_cast<double>(finest));
  for (std::size_t l = 0; l < spec.levels; ++l) {
    const std::size_t scale = std::size_t{1} << l;
    const std::size_t nodes = spec.refine_space ? (spec.base_nodes - 1) * scale + 1 : spec.base_nodes;
    const std::size_t K = spec.base_steps * scale;
    const auto mesh = build_mesh(spec.domain, nodes);
    const IdentityIntegrator integ(spec.prm, spec.d, spec.form, spec.phi, mesh, T, K);
    std::vector<PathSides> sides(paths);
    parallel_for(paths, [&](std::size_t p) {
      const auto path = ito_time_path(h0, h1_0, drift, diffusion, coarsen_increments(fine[p], finest / K), T);
      sides[p] = integ.evaluate(path);
    });
    rep.levels.push_back(summarize_level(l, integ.dt(), mesh.spacing(0), sides));
  }
  rep.observed_order = fitted_order(rep.levels);
  return rep;
}

// ---------------------------------------------------------------------------
// Weighted integrals in log space. theta^2 spans hundreds of decades on the
// audited configuration, so sums are accumulated as log-sum-exp.

class LogSum {
 public:
  /// Adds exp(log_term); terms equal to -inf are ignored.
  void add(double log_term) {
    if (log_term == -kInf) return;
    if (log_term <= max_) {
      acc_ += std::exp(log_term - max_);
    } else {
      acc_ = acc_ * std::exp(max_ - log_term) + 1.0;
      max_ = log_term;
    }
  }
  /// Adds w f^2 e^{2 l}.
  void add_weighted(double w, double f, double l) {
    if (w > 0.0 && f != 0.0) add(std::log(w) + 2.0 * std::log(std::abs(f)) + 2.0 * l);
  }
  double log() const { return max_ == -kInf ? -kInf : max_ + std::log(acc_); }
  double value() const { return std::exp(log()); }

 private:
  static constexpr double kInf = std::numeric_limits<double>::infinity();
  double max_ = -kInf;
  double acc_ = 0.0;
};

inline double log_add(double a, double b) {
  LogSum s;
  s.add(a);
  s.add(b);
  return s.log();
}

/// l(t, x) = lambda (d(x) - c1 (t - T)^2).
inline double ell_value(const CarlemanParams& prm, const WeightFunction& d, double t, const Point& x, int dim) {
  const double s = t - prm.T;
  return prm.lambda * (d.eval<double>(PointOf<double>{x[0], x[1]}, dim) - prm.c1 * s * s);
}

/// Unscaled weighted integrals of one trajectory, all as logs.
struct WeightedTerms {
  double z1 = 0.0;        // int_G theta^2(0) |z1|^2
  double grad_z0 = 0.0;   // int_G theta^2(0) |grad z0|^2
  double z0 = 0.0;        // int_G theta^2(0) |z0|^2
  double force = 0.0;     // E int_Q (T - t) theta^2 g^2
  double boundary = 0.0;  // E int_{(0,T) x Gamma0} theta^2 |dz/dnu|^2
};

inline double log_or_ninf(const LogSum& s) { return s.log(); }

/// theta^2-weighted initial-data integrals.
inline void weighted_initial_terms(const CarlemanParams& prm, const WeightFunction& d, const SpatialMesh& mesh,
                                   const Field& z0, const Field& z1, WeightedTerms& out) {
  const auto g = nodal_gradient(mesh, z0);
  LogSum s1, sg, s0;
  for (std::size_t n = 0; n < mesh.size(); ++n) {
    const double l = ell_value(prm, d, 0.0, mesh.coord(n), mesh.dim());
    const double w = mesh.weight(n);
    s1.add_weighted(w, z1[n], l);
    s0.add_weighted(w, z0[n], l);
    sg.add_weighted(w, std::hypot(g[n][0], g[n][1]), l);
  }
  out.z1 = s1.log();
  out.grad_z0 = sg.log();
  out.z0 = s0.log();
}

/// theta^2-weighted squared trace over (0, T) x Gamma0 of one trajectory
/// given as (K + 1) levels of nodal values.
template <class LevelAt>
double weighted_trace_log(const CarlemanParams& prm, const WeightFunction& d, const SpatialMesh& mesh,
                          const BoundarySubset& gamma0, std::size_t K, double dt, LevelAt&& level) {
  const auto st = trace_stencils(mesh);
  const auto wt = time_weights(K, dt);
  LogSum s;
  for (std::size_t k = 0; k <= K; ++k) {
    const double t = static_cast<double>(k) * dt;
    const double* z = level(k);
    for (std::size_t pos : gamma0.positions) {
      const auto& bn = mesh.boundary()[pos];
      const double l = ell_value(prm, d, t, mesh.coord(bn.node), mesh.dim());
      s.add_weighted(wt[k] * bn.weight, apply_trace(st[pos], z), l);
    }
  }
  return s.log();
}

/// E int_Q (T - t) theta^2 g^2 for a force with deterministic time factor or a table.
inline double weighted_force_log(const CarlemanParams& prm, const WeightFunction& d, const SpatialMesh& mesh,
                                 const ForceSpec& g, double T, std::size_t K) {
  if (g.is_zero()) return -std::numeric_limits<double>::infinity();
  const double dt = T / static_cast<double>(K);
  const auto wt = time_weights(K, dt);
  LogSum s;
  for (std::size_t k = 0; k <= K; ++k) {
    const double t = static_cast<double>(k) * dt;
    const Field gk = g.mode == ForceSpec::Mode::tabulated ? g.table[k] : g.g2;
    const double a = g.mode == ForceSpec::Mode::tabulated ? 1.0 : g.g1_at(t);
    for (std::size_t n = 0; n < mesh.size(); ++n) {
      if (mesh.on_boundary(n)) continue;
      s.add_weighted(wt[k] * (T - t) * mesh.weight(n), a * gk[n], ell_value(prm, d, t, mesh.coord(n), mesh.dim()));
    }
  }
  return s.log();
}

// ---------------------------------------------------------------------------
// Carleman ratio study on deterministic solutions with z(T) = 0.

/// w = sum c_m sin(m pi x) (products in 2D), c_m ~ N(0, 1) / |m|^2, on the unit interval/square.
inline Field random_smooth_field(const SpatialMesh& mesh, std::uint64_t seed, std::size_t sample,
                                 std::size_t modes = 8) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(sample), static_cast<std::uint32_t>(sample >> 32), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> nd(0.0, 1.0);
  Field w(mesh.size(), 0.0);
  const std::size_t my = mesh.dim() == 2 ? modes : 1;
  const double pi = std::numbers::pi;
  for (std::size_t m = 1; m <= modes; ++m)
    for (std::size_t q = 1; q <= my; ++q) {
      const double mm = static_cast<double>(m * m + (mesh.dim() == 2 ? q * q : 0));
      const double c = nd(rng) / mm;
      for (std::size_t n = 0; n < mesh.size(); ++n) {
        const Point x = mesh.coord(n);
        double v = std::sin(static_cast<double>(m) * pi * (x[0] - mesh.lo()[0]) / (mesh.hi()[0] - mesh.lo()[0]));
        if (mesh.dim() == 2)
          v *= std::sin(static_cast<double>(q) * pi * (x[1] - mesh.lo()[1]) / (mesh.hi()[1] - mesh.lo()[1]));
        w[n] += c * v;
      }
    }
  return zero_on_boundary(mesh, w);
}

struct RatioSample {
  WeightedTerms terms;
  double log_lhs = 0.0, log_rhs = 0.0, log_ratio = 0.0;
  bool trivial = false;    // LHS = RHS = 0
  bool violation = false;  // RHS = 0 < LHS
};

struct RatioRow {
  double lambda = 0.0;
  // Monte Carlo means, as logs and as plain values (the latter may underflow)
  double log_lhs_init = 0.0, log_lhs_force = 0.0, log_rhs_boundary = 0.0;
  double lhs_init = 0.0, lhs_force = 0.0, rhs_boundary = 0.0;
  double log_ratio = 0.0;    // log of the max ratio over samples
  double ratio = 0.0;        // max ratio over samples
  double stderr_ratio = 0.0; // standard error of the mean ratio
  double log_z0_term = 0.0;  // log E lambda^3 int theta^2(0) |z0|^2
  std::size_t samples = 0, trivial = 0, violations = 0;
  std::vector<RatioSample> per_sample;
};

struct RatioStudy {
  std::vector<RatioRow> rows;
  double max_ratio_spread = 0.0;  // max ratio over rows / min ratio over rows
  double log_max_ratio_spread = 0.0;
  double z0_slope = 0.0;          // least-squares slope of log_z0_term vs log lambda
  /// log(max ratio) / lambda per row; the ratio carries e^{2 lambda (l0 - lGamma)} so
  /// this stays near a constant when the weight gap dominates.
  std::vector<double> log_ratio_per_lambda;
};

inline RatioSample ratio_sample(const CarlemanParams& prm, const WeightFunction& d, const SpatialMesh& mesh,
                                const BoundarySubset& gamma0, const DeterministicTrajectory& tr,
                                const ForceSpec& force = ForceSpec::none()) {
  RatioSample s;
  weighted_initial_terms(prm, d, mesh, tr.level_z(0), tr.level_zt(0), s.terms);
  s.terms.force = weighted_force_log(prm, d, mesh, force, tr.T, tr.K);
  s.terms.boundary = weighted_trace_log(prm, d, mesh, gamma0, tr.K, tr.dt, [&](std::size_t k) { return tr.z_at(k); });
  const double ll = std::log(prm.lambda);
  LogSum lhs;
  lhs.add(ll + s.terms.z1);
  lhs.add(ll + s.terms.grad_z0);
  lhs.add(3.0 * ll + s.terms.z0);
  lhs.add(ll + s.terms.force);
  s.log_lhs = lhs.log();
  s.log_rhs = ll + s.terms.boundary;
  const double ninf = -std::numeric_limits<double>::infinity();
  if (s.log_rhs == ninf) {
    s.trivial = s.log_lhs == ninf;
    s.violation = !s.trivial;
    s.log_ratio = s.trivial ? ninf : std::numeric_limits<double>::infinity();
  } else {
    s.log_ratio = s.log_lhs - s.log_rhs;
  }
  return s;
}

inline double slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double m = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

/// Ratio LHS/RHS of the weighted estimate per lambda over a fixed set of
/// deterministic trajectories vanishing at t = T.
inline RatioStudy carleman_ratio(const std::vector<DeterministicTrajectory>& trajectories, const CarlemanParams& base,
                                 const WeightFunction& d, const SpatialMesh& mesh, const BoundarySubset& gamma0,
                                 const std::vector<double>& lambdas) {
  if (lambdas.empty()) throw ConfigError("ratio study needs a nonempty lambda grid");
  for (const auto& tr : trajectories) {
    if (tr.N != mesh.size()) throw ConfigError("trajectory does not match the mesh");
    if (std::abs(tr.T - base.T) > 1e-12 * base.T) throw ConfigError("trajectory horizon differs from the weight T");
    double zmax = 0.0, zend = 0.0;
    for (double v : tr.z) zmax = std::max(zmax, std::abs(v));
    for (std::size_t n = 0; n < tr.N; ++n) zend = std::max(zend, std::abs(tr.z_at(tr.K)[n]));
    if (zend > 1e-12 * std::max(zmax, 1.0)) throw DataError("ratio study needs trajectories with z(T) = 0");
  }
  RatioStudy study;
  const double ninf = -std::numeric_limits<double>::infinity();
  for (double lam : lambdas) {
    if (!(lam > 0.0)) throw ConfigError("ratio study needs lambda > 0");
    CarlemanParams prm = base;
    prm.lambda = lam;
    RatioRow row;
    row.lambda = lam;
    row.per_sample.resize(trajectories.size());
    parallel_for(trajectories.size(),
                 [&](std::size_t i) { row.per_sample[i] = ratio_sample(prm, d, mesh, gamma0, trajectories[i]); });
    LogSum init, force, rhs, z0;
    double max_log = ninf;
    std::vector<double> logs;
    const double ll = std::log(lam);
    for (const auto& s : row.per_sample) {
      LogSum li;
      li.add(ll + s.terms.z1);
      li.add(ll + s.terms.grad_z0);
      li.add(3.0 * ll + s.terms.z0);
      init.add(li.log());
      force.add(ll + s.terms.force);
      rhs.add(ll + s.terms.boundary);
      z0.add(3.0 * ll + s.terms.z0);
      if (s.trivial) {
        ++row.trivial;
        continue;
      }
      if (s.violation) ++row.violations;
      ++row.samples;
      logs.push_back(s.log_ratio);
      max_log = std::max(max_log, s.log_ratio);
    }
    const double logP = std::log(static_cast<double>(std::max<std::size_t>(trajectories.size(), 1)));
    row.log_lhs_init = init.log() - logP;
    row.log_lhs_force = force.log() - logP;
    row.log_rhs_boundary = rhs.log() - logP;
    row.log_z0_term = z0.log() - logP;
    row.lhs_init = std::exp(row.log_lhs_init);
    row.lhs_force = std::exp(row.log_lhs_force);
    row.rhs_boundary = std::exp(row.log_rhs_boundary);
    row.log_ratio = max_log;
    row.ratio = std::exp(max_log);
    if (logs.size() > 1 && std::isfinite(max_log)) {
      // ratios scaled by the max keep the moments representable
      double m = 0.0, m2 = 0.0;
      for (double l : logs) {
        const double r = std::exp(l - max_log);
        m += r;
        m2 += r * r;
      }
      const double P = static_cast<double>(logs.size());
      m /= P;
      const double var = std::max(0.0, m2 / P - m * m) * P / (P - 1.0);
      row.stderr_ratio = std::exp(max_log) * std::sqrt(var / P);
    }
    study.rows.push_back(std::move(row));
  }
  double lo = std::numeric_limits<double>::infinity(), hi = ninf;
  std::vector<double> x, y;
  for (const auto& r : study.rows) {
    lo = std::min(lo, r.log_ratio);
    hi = std::max(hi, r.log_ratio);
    x.push_back(std::log(r.lambda));
    y.push_back(r.log_z0_term);
    study.log_ratio_per_lambda.push_back(r.log_ratio / r.lambda);
  }
  study.log_max_ratio_spread = hi - lo;
  study.max_ratio_spread = std::exp(hi - lo);
  study.z0_slope = study.rows.size() > 1 ? slope(x, y) : 0.0;
  return study;
}

// ---------------------------------------------------------------------------
// Partial stability ratio
//   s = (|(z0, z1)|_{H^1_0 x L^2} + |sqrt(T - t) g|) / |dz/dnu|_{L^2(0,T; L^2(Gamma0))}
// with every integrand weighted by theta^2 (theta = 1 at lambda = 0).

struct StabilityRow {
  std::size_t sample = 0;
  double numerator = 0.0, denominator = 0.0, s = 0.0;
  bool admissible = true;
};

struct StabilityStudy {
  std::vector<StabilityRow> rows;
  std::size_t admissible = 0;
  double max_s = 0.0, min_s = 0.0, spread = 0.0;
};

inline StabilityRow stability_row(const CarlemanParams& prm, const WeightFunction& d, const SpatialMesh& mesh,
                                  const Field& z0, const Field& z1, const ForceSpec& force, double T, std::size_t K, double log_trace_sq) {
  WeightedTerms w;
  weighted_initial_terms(prm, d, mesh, z0, z1, w);
  LogSum data;  // H^1_0 is the gradient seminorm, as in data_norm
  data.add(w.grad_z0);
  data.add(w.z1);
  StabilityRow r;
  r.numerator = std::exp(0.5 * data.log()) + std::exp(0.5 * weighted_force_log(prm, d, mesh, force, T, K));
  r.denominator = std::exp(0.5 * log_trace_sq);
  r.admissible = r.numerator > 0.0 && r.denominator > 0.0;
  r.s = r.admissible ? r.numerator / r.denominator : 0.0;
  return r;
}

inline void finish_study(StabilityStudy& st) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& r : st.rows)
    if (r.admissible) {
      ++st.admissible;
      lo = std::min(lo, r.s);
      hi = std::max(hi, r.s);
    }
  if (st.admissible == 0) throw EmptyStudyError("stability study has no admissible trajectories");
  st.max_s = hi;
  st.min_s = lo;
  st.spread = hi / lo;
}

/// Deterministic trajectories with z(T) = 0 (g = 0).
inline StabilityStudy stability_ratio(const std::vector<DeterministicTrajectory>& trajectories,
                                      const CarlemanParams& prm, const WeightFunction& d, const SpatialMesh& mesh,
                                      const BoundarySubset& gamma0) {
  StabilityStudy st;
  st.rows.resize(trajectories.size());
  parallel_for(trajectories.size(), [&](std::size_t i) {
    const auto& tr = trajectories[i];
    const double lt =
        weighted_trace_log(prm, d, mesh, gamma0, tr.K, tr.dt, [&](std::size_t k) { return tr.z_at(k); });
    st.rows[i] = stability_row(prm, d, mesh, tr.level_z(0), tr.level_zt(0), ForceSpec::none(), tr.T, tr.K, lt);
    st.rows[i].sample = i;
  });
  finish_study(st);
  return st;
}

/// Forward stochastic paths post-selected on |z(T)|_{L^2} <= tol * max over paths of |z|_{L^2(Q)}.
/// Needs stored trajectories.
inline StabilityStudy stability_ratio(const PathEnsemble& ens, const CoefficientSet& coeffs, const CarlemanParams& prm,
                                      const WeightFunction& d, const BoundarySubset& gamma0, double tol = 1e-3) {
  if (!ens.stored) throw ConfigError("stability study needs stored trajectories");
  const auto& mesh = ens.mesh;
  const auto wt = time_weights(ens.K, ens.dt);
  std::vector<double> path_norm(ens.P, 0.0), end_norm(ens.P, 0.0);
  for (std::size_t p = 0; p < ens.P; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k <= ens.K; ++k) {
      const double* z = ens.z_at(p, k);
      s += wt[k] * l2_squared(mesh, Field(z, z + ens.N));
    }
    path_norm[p] = std::sqrt(s);
    end_norm[p] = l2_norm(mesh, ens.zT[p]);
  }
  const double scale = ens.P ? *std::max_element(path_norm.begin(), path_norm.end()) : 0.0;
  StabilityStudy st;
  for (std::size_t p = 0; p < ens.P; ++p) {
    if (!(scale > 0.0) || end_norm[p] > tol * scale) continue;
    const double lt =
        weighted_trace_log(prm, d, mesh, gamma0, ens.K, ens.dt, [&](std::size_t k) { return ens.z_at(p, k); });
    auto row = stability_row(prm, d, mesh, ens.z0, ens.z1, coeffs.g, ens.T, ens.K, lt);
    row.sample = p;
    st.rows.push_back(row);
  }
  finish_study(st);
  return st;
}

}  // namespace shlab
