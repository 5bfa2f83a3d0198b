#pragma once

// Forward simulation of
//   dz_t - div(b grad z) dt = (b1 z_t + b2.grad z + b3 z) dt + (b4 z + g) dB
// with homogeneous Dirichlet data, over ensembles of Brownian paths.
//
// Time stepping is velocity Verlet (kick-drift-kick). The stochastic
// increment (b4 z + g)(t_k) dB_k enters the first kick, so it is evaluated at
// the left end of the step. The damping term b1 z_t is treated by the
// trapezoid rule, which keeps the deterministic part second order.

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "shlab/errors.hpp"
#include "shlab/forms.hpp"
#include "shlab/geometry.hpp"
#include "shlab/norms.hpp"
#include "shlab/parallel.hpp"

namespace shlab {

using Field = std::vector<double>;

/// Random force g. Separable: g1(t) g2(x). Tabulated: g(t_k, x) on the time grid.
struct ForceSpec {
  enum class Mode { separable, tabulated };
  Mode mode = Mode::separable;
  ScalarFunction g1 = ScalarFunction::constant(1.0);
  Field g2;                       // empty means zero
  std::vector<Field> table;       // K + 1 levels when tabulated

  static ForceSpec none() { return {}; }
  static ForceSpec separable(ScalarFunction time_factor, Field space_factor) {
    ForceSpec f;
    f.g1 = std::move(time_factor);
    f.g2 = std::move(space_factor);
    return f;
  }
  static ForceSpec tabulated(std::vector<Field> levels) {
    ForceSpec f;
    f.mode = Mode::tabulated;
    f.table = std::move(levels);
    return f;
  }

  bool is_zero() const {
    if (mode == Mode::tabulated) return table.empty();
    if (g2.empty() || g1.is_zero()) return true;
    return std::all_of(g2.begin(), g2.end(), [](double v) { return v == 0.0; });
  }

  double g1_at(double t) const { return g1(t, Point{0.0, 0.0}, 1); }

  void validate(std::size_t nodes) const {
    g1.validate();
    if (g1.tag == "sine" || g1.tag == "sine_cos_t") throw ConfigError("g1 must depend on time only");
    if (mode == Mode::separable && !g2.empty() && g2.size() != nodes)
      throw DataError("g2 is not defined on every mesh node");
    for (const auto& lv : table)
      if (lv.size() != nodes) throw DataError("tabulated force level has the wrong size");
  }
};

struct CoefficientSet {
  PrincipalField b;
  ScalarFunction b1, b3, b4;
  std::array<ScalarFunction, 2> b2{};
  ForceSpec g;
  // Deterministic source added to the drift (zero for the equation proper;
  // used to drive prescribed solutions).
  std::function<double(double, const Point&)> source;
  std::vector<Field> source_table;  // per time level, takes precedence over `source`

  bool lower_order_time_dependent() const {
    return b1.time_dependent() || b3.time_dependent() || b4.time_dependent() || b2[0].time_dependent() ||
           b2[1].time_dependent();
  }
  bool has_lower_order() const {
    return !(b1.is_zero() && b3.is_zero() && b4.is_zero() && b2[0].is_zero() && b2[1].is_zero());
  }
  bool stochastic() const { return !b4.is_zero() || !g.is_zero(); }

  void validate(const SpatialMesh& mesh) const {
    for (const auto* f : {&b1, &b3, &b4, &b2[0], &b2[1]}) f->validate();
    if (b.values.size() != mesh.size()) throw InvalidFieldError("principal field is not defined on every mesh node");
    g.validate(mesh.size());
  }

  /// A = |b1|^2_inf + |b2|^2_inf + |b3|^2_{inf, L^n} + |b4|^2_inf + 1, sampled on the mesh
  /// at `time_samples` equally spaced times in [0, T].
  double A_norm(const SpatialMesh& mesh, double T, std::size_t time_samples = 65) const {
    double s1 = 0, s2 = 0, s3 = 0, s4 = 0;
    const int n = mesh.dim();
    for (std::size_t m = 0; m < time_samples; ++m) {
      const double t = time_samples > 1 ? T * static_cast<double>(m) / static_cast<double>(time_samples - 1) : 0.0;
      Field b3v(mesh.size());
      for (std::size_t k = 0; k < mesh.size(); ++k) {
        const Point x = mesh.coord(k);
        s1 = std::max(s1, std::abs(b1(t, x, n)));
        s4 = std::max(s4, std::abs(b4(t, x, n)));
        const double bx = b2[0](t, x, n), by = n > 1 ? b2[1](t, x, n) : 0.0;
        s2 = std::max(s2, std::hypot(bx, by));
        b3v[k] = b3(t, x, n);
      }
      s3 = std::max(s3, lp_norm(mesh, b3v, static_cast<double>(n)));
    }
    return s1 * s1 + s2 * s2 + s3 * s3 + s4 * s4 + 1.0;
  }
};

inline CoefficientSet wave_coefficients(const SpatialMesh& mesh, const PrincipalForm& form = PrincipalForm::identity(),
                                        double s0 = 1.0) {
  CoefficientSet c;
  c.b = PrincipalField::from_form(form, mesh, s0);
  return c;
}

/// Largest admissible step: 0.5 dx_min / sqrt(max eigenvalue of b).
inline double cfl_limit(const SpatialMesh& mesh, const PrincipalField& b) {
  double emax = 0.0;
  for (const auto& v : b.values) emax = std::max(emax, v.max_eigenvalue(mesh.dim()));
  return 0.5 * mesh.min_spacing() / std::sqrt(emax);
}

inline std::size_t time_levels_for(double T, double dt) {
  if (!(T > 0.0) || !(dt > 0.0)) throw ConfigError("T and dt must be positive");
  return static_cast<std::size_t>(std::ceil(T / dt - 1e-9));
}

// ---------------------------------------------------------------------------
// Spatial operators restricted to interior nodes.

using SparseRM = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct SpatialOperators {
  SparseRM L;       // div(b grad .)
  SparseRM D[2];    // centered first differences
  Field interior;   // 1 at interior nodes, 0 on the boundary

  SpatialOperators() = default;
  SpatialOperators(const SpatialMesh& mesh, const PrincipalField& b) {
    const std::size_t N = mesh.size();
    interior.assign(N, 1.0);
    for (const auto& bn : mesh.boundary()) interior[bn.node] = 0.0;
    std::vector<Eigen::Triplet<double>> tl, td[2];
    const int n = mesh.dim();
    auto inside = [&](std::size_t k) { return interior[k] != 0.0; };
    for (std::size_t k = 0; k < N; ++k) {
      if (!inside(k)) continue;
      const auto [i, j] = mesh.ij(k);
      auto add = [&](std::size_t c, double v) {
        if (inside(c)) tl.emplace_back(static_cast<int>(k), static_cast<int>(c), v);
      };
      for (int a = 0; a < n; ++a) {
        const double h = mesh.spacing(a);
        const std::size_t kp = a == 0 ? mesh.index(i + 1, j) : mesh.index(i, j + 1);
        const std::size_t km = a == 0 ? mesh.index(i - 1, j) : mesh.index(i, j - 1);
        const double bp = 0.5 * (b.values[k](a, a) + b.values[kp](a, a));
        const double bm = 0.5 * (b.values[k](a, a) + b.values[km](a, a));
        add(kp, bp / (h * h));
        add(km, bm / (h * h));
        add(k, -(bp + bm) / (h * h));
        if (inside(kp)) td[a].emplace_back(static_cast<int>(k), static_cast<int>(kp), 0.5 / h);
        if (inside(km)) td[a].emplace_back(static_cast<int>(k), static_cast<int>(km), -0.5 / h);
      }
      if (n == 2) {
        const double c = 1.0 / (4.0 * mesh.spacing(0) * mesh.spacing(1));
        auto b12 = [&](std::size_t ii, std::size_t jj) { return b.values[mesh.index(ii, jj)](0, 1); };
        auto node = [&](std::size_t ii, std::size_t jj) { return mesh.index(ii, jj); };
        // d_x(b12 d_y z)
        add(node(i + 1, j + 1), c * b12(i + 1, j));
        add(node(i + 1, j - 1), -c * b12(i + 1, j));
        add(node(i - 1, j + 1), -c * b12(i - 1, j));
        add(node(i - 1, j - 1), c * b12(i - 1, j));
        // d_y(b12 d_x z)
        add(node(i + 1, j + 1), c * b12(i, j + 1));
        add(node(i - 1, j + 1), -c * b12(i, j + 1));
        add(node(i + 1, j - 1), -c * b12(i, j - 1));
        add(node(i - 1, j - 1), c * b12(i, j - 1));
      }
    }
    L.resize(static_cast<int>(N), static_cast<int>(N));
    L.setFromTriplets(tl.begin(), tl.end());
    for (int a = 0; a < 2; ++a) {
      D[a].resize(static_cast<int>(N), static_cast<int>(N));
      D[a].setFromTriplets(td[a].begin(), td[a].end());
    }
  }
};

inline Eigen::Map<Eigen::VectorXd> as_vec(Field& f) { return {f.data(), static_cast<Eigen::Index>(f.size())}; }
inline Eigen::Map<const Eigen::VectorXd> as_vec(const Field& f) {
  return {f.data(), static_cast<Eigen::Index>(f.size())};
}

// ---------------------------------------------------------------------------
// One-step map and its exact transpose.

class WaveStepper {
 public:
  /// `reversed` integrates y(s) = z(T - s): coefficients are read at T - s and b1 changes sign.
  WaveStepper(const SpatialMesh& mesh, const CoefficientSet& coeffs, double T, std::size_t K, bool reversed = false)
      : mesh_(&mesh), coeffs_(&coeffs), ops_(mesh, coeffs.b), T_(T), K_(K), dt_(T / static_cast<double>(K)),
        reversed_(reversed) {
    coeffs.validate(mesh);
    if (K == 0) throw ConfigError("need at least one time step");
    if (dt_ > cfl_limit(mesh, coeffs.b) * (1.0 + 1e-12))
      throw ConfigError("CFL condition violated: dt = " + std::to_string(dt_) +
                        " exceeds 0.5 dx_min / sqrt(max eig b) = " + std::to_string(cfl_limit(mesh, coeffs.b)));
    lower_ = coeffs.has_lower_order();
    const std::size_t levels = coeffs.lower_order_time_dependent() ? K + 1 : 1;
    if (lower_) {
      level_.resize(levels);
      for (std::size_t m = 0; m < levels; ++m) level_[m] = sample_level(time(m));
    }
    has_source_ = !coeffs.source_table.empty() || static_cast<bool>(coeffs.source);
    if (!coeffs.source_table.empty() && coeffs.source_table.size() != K + 1)
      throw DataError("source table must have K + 1 levels");
  }

  std::size_t steps() const { return K_; }
  double dt() const { return dt_; }
  double horizon() const { return T_; }
  const SpatialOperators& ops() const { return ops_; }
  const SpatialMesh& mesh() const { return *mesh_; }

  /// Physical time of level k.
  double time(std::size_t k) const {
    const double s = static_cast<double>(k) * dt_;
    return reversed_ ? T_ - s : s;
  }

  /// Force g at level k (masked to the interior).
  Field force(std::size_t k) const {
    const auto& g = coeffs_->g;
    Field out(mesh_->size(), 0.0);
    if (g.is_zero()) return out;
    if (g.mode == ForceSpec::Mode::tabulated) {
      if (g.table.size() != K_ + 1) throw DataError("tabulated force must have K + 1 levels");
      out = g.table[k];
    } else {
      const double a = g.g1_at(time(k));
      for (std::size_t n = 0; n < out.size(); ++n) out[n] = a * g.g2[n];
    }
    for (std::size_t n = 0; n < out.size(); ++n) out[n] *= ops_.interior[n];
    return out;
  }

  bool has_force() const { return !coeffs_->g.is_zero(); }

  /// Advance (z, v) from level k to k + 1 with increment dB; `g` is the force at level k.
  void step(std::size_t k, double dB, Field& z, Field& v, const Field* g) const {
    const std::size_t N = z.size();
    Field a(N), tmp(N);
    apply_N(k, z, a);
    add_source(k, a);
    const Level* lk = level(k);
    for (std::size_t n = 0; n < N; ++n) {
      double acc = a[n];
      double noise = 0.0;
      if (lk) {
        acc += lk->b1[n] * v[n];
        noise = lk->b4[n] * z[n];
      }
      if (g) noise += (*g)[n];
      v[n] += 0.5 * dt_ * acc + ops_.interior[n] * dB * noise;
    }
    for (std::size_t n = 0; n < N; ++n) z[n] += dt_ * v[n];
    apply_N(k + 1, z, a);
    add_source(k + 1, a);
    const Level* l1 = level(k + 1);
    for (std::size_t n = 0; n < N; ++n) {
      const double denom = l1 ? 1.0 - 0.5 * dt_ * l1->b1[n] : 1.0;
      v[n] = (v[n] + 0.5 * dt_ * a[n]) / denom;
    }
  }

  /// Transpose of the homogeneous part of step(k): maps the adjoint state at
  /// level k + 1 to level k in place. `kick` receives the adjoint of the
  /// first-kick velocity, so the force gradient is dB * g-weight * kick.
  void adjoint_step(std::size_t k, double dB, Field& zh, Field& vh, Field& kick) const {
    const std::size_t N = zh.size();
    const Level* l1 = level(k + 1);
    kick.resize(N);
    for (std::size_t n = 0; n < N; ++n) kick[n] = l1 ? vh[n] / (1.0 - 0.5 * dt_ * l1->b1[n]) : vh[n];
    Field t(N);
    apply_NT(k + 1, kick, t);
    for (std::size_t n = 0; n < N; ++n) zh[n] += 0.5 * dt_ * t[n];
    // z' = z + dt v'
    for (std::size_t n = 0; n < N; ++n) kick[n] += dt_ * zh[n];
    apply_NT(k, kick, t);
    const Level* lk = level(k);
    for (std::size_t n = 0; n < N; ++n) {
      double zadd = 0.5 * dt_ * t[n];
      double vv = kick[n];
      if (lk) {
        vv += 0.5 * dt_ * lk->b1[n] * kick[n];
        zadd += dB * lk->b4[n] * kick[n];
      }
      zh[n] += zadd;
      vh[n] = vv;
    }
  }

 private:
  struct Level {
    Field b1, b2x, b2y, b3, b4;
  };

  Level sample_level(double t) const {
    const std::size_t N = mesh_->size();
    const int n = mesh_->dim();
    Level l;
    l.b1.resize(N);
    l.b2x.resize(N);
    l.b2y.resize(N);
    l.b3.resize(N);
    l.b4.resize(N);
    for (std::size_t k = 0; k < N; ++k) {
      const Point x = mesh_->coord(k);
      const double m = ops_.interior[k];
      l.b1[k] = m * coeffs_->b1(t, x, n) * (reversed_ ? -1.0 : 1.0);
      l.b2x[k] = m * coeffs_->b2[0](t, x, n);
      l.b2y[k] = n > 1 ? m * coeffs_->b2[1](t, x, n) : 0.0;
      l.b3[k] = m * coeffs_->b3(t, x, n);
      l.b4[k] = m * coeffs_->b4(t, x, n);
    }
    return l;
  }

  const Level* level(std::size_t k) const {
    if (!lower_) return nullptr;
    return level_.size() == 1 ? &level_[0] : &level_[k];
  }

  void apply_N(std::size_t k, const Field& z, Field& out) const {
    as_vec(out) = ops_.L * as_vec(z);
    const Level* l = level(k);
    if (!l) return;
    Field dz(z.size());
    as_vec(dz) = ops_.D[0] * as_vec(z);
    for (std::size_t n = 0; n < z.size(); ++n) out[n] += l->b2x[n] * dz[n] + l->b3[n] * z[n];
    if (mesh_->dim() == 2) {
      as_vec(dz) = ops_.D[1] * as_vec(z);
      for (std::size_t n = 0; n < z.size(); ++n) out[n] += l->b2y[n] * dz[n];
    }
  }

  void apply_NT(std::size_t k, const Field& y, Field& out) const {
    as_vec(out) = ops_.L.transpose() * as_vec(y);
    const Level* l = level(k);
    if (!l) return;
    Field w(y.size());
    for (std::size_t n = 0; n < y.size(); ++n) {
      out[n] += l->b3[n] * y[n];
      w[n] = l->b2x[n] * y[n];
    }
    as_vec(out) += ops_.D[0].transpose() * as_vec(w);
    if (mesh_->dim() == 2) {
      for (std::size_t n = 0; n < y.size(); ++n) w[n] = l->b2y[n] * y[n];
      as_vec(out) += ops_.D[1].transpose() * as_vec(w);
    }
  }

  void add_source(std::size_t k, Field& a) const {
    if (!has_source_) return;
    if (!coeffs_->source_table.empty()) {
      const Field& f = coeffs_->source_table[reversed_ ? K_ - k : k];
      for (std::size_t n = 0; n < a.size(); ++n) a[n] += ops_.interior[n] * f[n];
      return;
    }
    const double t = time(k);
    for (std::size_t n = 0; n < a.size(); ++n)
      if (ops_.interior[n] != 0.0) a[n] += coeffs_->source(t, mesh_->coord(n));
  }

  const SpatialMesh* mesh_;
  const CoefficientSet* coeffs_;
  SpatialOperators ops_;
  double T_;
  std::size_t K_;
  double dt_;
  bool reversed_;
  bool lower_ = false;
  bool has_source_ = false;
  std::vector<Level> level_;
};

// ---------------------------------------------------------------------------
// Brownian increments.

/// Independent N(0, dt) increments; (seed, path) fully determines the sequence.
inline Field brownian_increments(std::uint64_t seed, std::size_t path, std::size_t K, double dt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(path), static_cast<std::uint32_t>(static_cast<std::uint64_t>(path) >> 32)};
  std::mt19937_64 gen(seq);
  std::normal_distribution<double> normal(0.0, std::sqrt(dt));
  Field out(K);
  for (auto& x : out) x = normal(gen);
  return out;
}

/// Sums consecutive blocks of `factor` increments.
inline Field coarsen_increments(const Field& fine, std::size_t factor) {
  if (factor == 0 || fine.size() % factor != 0) throw ConfigError("increment count not divisible by factor");
  Field out(fine.size() / factor, 0.0);
  for (std::size_t k = 0; k < fine.size(); ++k) out[k / factor] += fine[k];
  return out;
}

// ---------------------------------------------------------------------------
// Boundary normal derivative.

/// Three-point one-sided stencil into the domain for each boundary node.
struct TraceStencil {
  std::size_t b, i1, i2;
  double h;
};

inline std::vector<TraceStencil> trace_stencils(const SpatialMesh& mesh) {
  std::vector<TraceStencil> out;
  for (const auto& bn : mesh.boundary()) {
    auto ij = mesh.ij(bn.node);
    const auto ax = static_cast<std::size_t>(bn.axis);
    auto step_in = [&](std::size_t s) {
      auto c = ij;
      c[ax] = bn.side > 0 ? c[ax] - s : c[ax] + s;
      return mesh.index(c[0], c[1]);
    };
    out.push_back({bn.node, step_in(1), step_in(2), mesh.spacing(bn.axis)});
  }
  return out;
}

inline double apply_trace(const TraceStencil& s, const double* z) {
  return (3.0 * z[s.b] - 4.0 * z[s.i1] + z[s.i2]) / (2.0 * s.h);
}

// ---------------------------------------------------------------------------
// Ensembles.

struct SimulationOptions {
  double T = 1.0;
  double dt = 0.0;           // 0 means the CFL limit
  std::size_t paths = 1;
  std::uint64_t seed = 0;
  bool store_trajectories = true;
  // Externally supplied increments, one vector of length K per path.
  const std::vector<Field>* increments = nullptr;
};

struct PathEnsemble {
  SpatialMesh mesh;
  std::size_t P = 0, K = 0, N = 0;
  double T = 0.0, dt = 0.0;
  std::uint64_t seed = 0;
  bool stored = false;
  Field z0, z1;
  std::vector<Field> dB;       // per path, K increments
  std::vector<Field> z, zt;    // per path, (K + 1) x N row-major
  std::vector<Field> trace;    // per path, (K + 1) x (boundary size), full boundary
  std::vector<Field> zT, ztT;  // per path terminal pair

  const double* z_at(std::size_t p, std::size_t k) const { return z[p].data() + k * N; }
  const double* zt_at(std::size_t p, std::size_t k) const { return zt[p].data() + k * N; }
  std::size_t boundary_size() const { return mesh.boundary().size(); }
};

inline void check_dirichlet_data(const SpatialMesh& mesh, const Field& f, const char* name) {
  if (f.size() != mesh.size()) throw DataError(std::string(name) + " is not defined on every mesh node");
  double scale = 1.0;
  for (double v : f) scale = std::max(scale, std::abs(v));
  for (const auto& bn : mesh.boundary())
    if (std::abs(f[bn.node]) > 1e-12 * scale)
      throw DataError(std::string(name) + " is nonzero at boundary node " + std::to_string(bn.node));
}

inline Field zero_on_boundary(const SpatialMesh& mesh, Field f) {
  for (const auto& bn : mesh.boundary()) f[bn.node] = 0.0;
  return f;
}

/// Runs one path with given increments; writes trajectories when requested.
inline void run_path(const WaveStepper& st, const Field& z0, const Field& z1, const Field& dB, bool store,
                     const std::vector<TraceStencil>& stencils, PathEnsemble& ens, std::size_t p) {
  const std::size_t N = z0.size(), K = st.steps(), nb = stencils.size();
  Field z = z0, v = z1;
  auto record = [&](std::size_t k) {
    if (store) {
      std::copy(z.begin(), z.end(), ens.z[p].begin() + static_cast<std::ptrdiff_t>(k * N));
      std::copy(v.begin(), v.end(), ens.zt[p].begin() + static_cast<std::ptrdiff_t>(k * N));
    }
    for (std::size_t b = 0; b < nb; ++b) ens.trace[p][k * nb + b] = apply_trace(stencils[b], z.data());
  };
  record(0);
  const bool forced = st.has_force();
  Field g;
  for (std::size_t k = 0; k < K; ++k) {
    if (forced) g = st.force(k);
    st.step(k, dB.empty() ? 0.0 : dB[k], z, v, forced ? &g : nullptr);
    record(k + 1);
  }
  ens.zT[p] = z;
  ens.ztT[p] = v;
}

inline PathEnsemble simulate_forward(const CoefficientSet& coeffs, const Field& z0, const Field& z1,
                                     const SpatialMesh& mesh, const SimulationOptions& opt) {
  check_dirichlet_data(mesh, z0, "z0");
  check_dirichlet_data(mesh, z1, "z1");
  if (opt.paths == 0) throw ConfigError("paths must be positive");
  const double dt_req = opt.dt > 0.0 ? opt.dt : cfl_limit(mesh, coeffs.b);
  const std::size_t K = time_levels_for(opt.T, dt_req);
  WaveStepper st(mesh, coeffs, opt.T, K);

  PathEnsemble ens;
  ens.mesh = mesh;
  ens.P = opt.paths;
  ens.K = K;
  ens.N = mesh.size();
  ens.T = opt.T;
  ens.dt = st.dt();
  ens.seed = opt.seed;
  ens.stored = opt.store_trajectories;
  ens.z0 = zero_on_boundary(mesh, z0);
  ens.z1 = zero_on_boundary(mesh, z1);
  ens.dB.resize(ens.P);
  ens.trace.assign(ens.P, Field((K + 1) * mesh.boundary().size()));
  ens.zT.resize(ens.P);
  ens.ztT.resize(ens.P);
  if (ens.stored) {
    ens.z.assign(ens.P, Field((K + 1) * ens.N));
    ens.zt.assign(ens.P, Field((K + 1) * ens.N));
  }
  if (opt.increments && opt.increments->size() < ens.P) throw ConfigError("not enough supplied increment paths");
  const bool stochastic = coeffs.stochastic();
  const auto stencils = trace_stencils(mesh);
  parallel_for(ens.P, [&](std::size_t p) {
    if (opt.increments) {
      ens.dB[p] = (*opt.increments)[p];
      if (ens.dB[p].size() != K) throw ConfigError("supplied increments do not match the time grid");
    } else {
      ens.dB[p] = brownian_increments(opt.seed, p, K, ens.dt);
    }
    run_path(st, ens.z0, ens.z1, stochastic ? ens.dB[p] : Field{}, ens.stored, stencils, ens, p);
  });
  return ens;
}

// ---------------------------------------------------------------------------
// Norms over ensembles.

struct TraceReport {
  std::vector<Field> series;  // per path, (K + 1) x |subset|
  Field path_sq;              // per path squared L^2(0,T; L^2(subset))
  double norm = 0.0;          // sqrt of the Monte Carlo mean
  bool empty_subset = false;
};

inline TraceReport boundary_normal_trace(const PathEnsemble& ens, const BoundarySubset& subset) {
  TraceReport r;
  r.empty_subset = subset.empty();
  const std::size_t nb = ens.boundary_size(), m = subset.count();
  const auto wt = time_weights(ens.K, ens.dt);
  r.series.assign(ens.P, Field((ens.K + 1) * m));
  r.path_sq.assign(ens.P, 0.0);
  double mean = 0.0;
  for (std::size_t p = 0; p < ens.P; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k <= ens.K; ++k)
      for (std::size_t q = 0; q < m; ++q) {
        const std::size_t pos = subset.positions[q];
        const double v = ens.trace[p][k * nb + pos];
        r.series[p][k * m + q] = v;
        s += wt[k] * ens.mesh.boundary()[pos].weight * v * v;
      }
    r.path_sq[p] = s;
    mean += s;
  }
  r.norm = ens.P ? std::sqrt(mean / static_cast<double>(ens.P)) : 0.0;
  return r;
}

/// |g|_{L^2_F(0,T; L^2(G))}: per path |g1|_{L^2(0,T)} |g2|_{L^2(G)}, root mean over paths.
/// g1 is deterministic here, so every path has the same value.
inline double force_norm(const CoefficientSet& c, const SpatialMesh& mesh, double T, std::size_t K,
                         const std::function<double(double)>& time_weight = {}) {
  const auto& g = c.g;
  if (g.is_zero()) return 0.0;
  const double dt = T / static_cast<double>(K);
  const auto wt = time_weights(K, dt);
  double s = 0.0;
  if (g.mode == ForceSpec::Mode::tabulated) {
    for (std::size_t k = 0; k <= K; ++k) {
      const double tw = time_weight ? time_weight(static_cast<double>(k) * dt) : 1.0;
      s += wt[k] * tw * l2_squared(mesh, zero_on_boundary(mesh, g.table[k]));
    }
    return std::sqrt(s);
  }
  for (std::size_t k = 0; k <= K; ++k) {
    const double t = static_cast<double>(k) * dt;
    const double a = g.g1_at(t);
    s += wt[k] * (time_weight ? time_weight(t) : 1.0) * a * a;
  }
  return std::sqrt(s) * l2_norm(mesh, zero_on_boundary(mesh, g.g2));
}

/// r = |dz/dnu|_{L^2_F(0,T; L^2(Gamma))} / (|(z0, z1)|_{H^1_0 x L^2} + |g|_{L^2_F(0,T; L^2(G))}).
inline double hidden_regularity_ratio(const PathEnsemble& ens, const CoefficientSet& coeffs) {
  const double num = boundary_normal_trace(ens, full_boundary(ens.mesh)).norm;
  const double den = data_norm(ens.mesh, ens.z0, ens.z1) + force_norm(coeffs, ens.mesh, ens.T, ens.K);
  if (!(den > 0.0)) throw NumericalError("hidden regularity ratio undefined: zero data and force");
  return num / den;
}

/// Discrete energy 1/2 int (z_t^2 + b grad z . grad z) with the stiffness form of L.
inline double discrete_energy(const SpatialOperators& ops, const SpatialMesh& mesh, const Field& z, const Field& v) {
  Field Lz(z.size());
  as_vec(Lz) = ops.L * as_vec(z);
  // -z^T L z carries the cell weights of the operator; scale by the node weight
  const double cell = mesh.dim() == 1 ? mesh.spacing(0) : mesh.spacing(0) * mesh.spacing(1);
  double kin = 0.0, pot = 0.0;
  for (std::size_t n = 0; n < z.size(); ++n) {
    kin += mesh.weight(n) * v[n] * v[n];
    pot -= cell * z[n] * Lz[n];
  }
  return 0.5 * (kin + pot);
}

// ---------------------------------------------------------------------------
// Deterministic solutions with z(T) = 0.

struct DeterministicTrajectory {
  std::size_t K = 0, N = 0;
  double T = 0.0, dt = 0.0;
  Field z, zt;  // (K + 1) x N, forward time order
  const double* z_at(std::size_t k) const { return z.data() + k * N; }
  const double* zt_at(std::size_t k) const { return zt.data() + k * N; }
  Field level_z(std::size_t k) const { return Field(z_at(k), z_at(k) + N); }
  Field level_zt(std::size_t k) const { return Field(zt_at(k), zt_at(k) + N); }
};

/// Integrates backward from (z(T), z_t(T)) = (0, w) through y(s) = z(T - s).
inline DeterministicTrajectory solve_deterministic_reversed(const CoefficientSet& coeffs, const Field& w,
                                                            const SpatialMesh& mesh, double T, double dt) {
  if (coeffs.stochastic()) throw UnsupportedModeError("reversed solver needs b4 = 0 and g = 0");
  check_dirichlet_data(mesh, w, "w");
  const std::size_t K = time_levels_for(T, dt);
  WaveStepper st(mesh, coeffs, T, K, true);
  DeterministicTrajectory out;
  out.K = K;
  out.N = mesh.size();
  out.T = T;
  out.dt = st.dt();
  out.z.assign((K + 1) * out.N, 0.0);
  out.zt.assign((K + 1) * out.N, 0.0);
  Field y(out.N, 0.0), ys = zero_on_boundary(mesh, w);
  for (auto& x : ys) x = -x;
  auto record = [&](std::size_t s) {
    const std::size_t k = K - s;
    for (std::size_t n = 0; n < out.N; ++n) {
      out.z[k * out.N + n] = y[n];
      out.zt[k * out.N + n] = -ys[n];
    }
  };
  record(0);
  for (std::size_t s = 0; s < K; ++s) {
    st.step(s, 0.0, y, ys, nullptr);
    record(s + 1);
  }
  return out;
}

/// Deterministic forward solve returning the full trajectory.
inline DeterministicTrajectory solve_deterministic(const CoefficientSet& coeffs, const Field& z0, const Field& z1,
                                                   const SpatialMesh& mesh, double T, double dt) {
  if (coeffs.stochastic()) throw UnsupportedModeError("deterministic solver needs b4 = 0 and g = 0");
  check_dirichlet_data(mesh, z0, "z0");
  check_dirichlet_data(mesh, z1, "z1");
  const std::size_t K = time_levels_for(T, dt);
  WaveStepper st(mesh, coeffs, T, K);
  DeterministicTrajectory out;
  out.K = K;
  out.N = mesh.size();
  out.T = T;
  out.dt = st.dt();
  out.z.resize((K + 1) * out.N);
  out.zt.resize((K + 1) * out.N);
  Field z = zero_on_boundary(mesh, z0), v = zero_on_boundary(mesh, z1);
  auto record = [&](std::size_t k) {
    std::copy(z.begin(), z.end(), out.z.begin() + static_cast<std::ptrdiff_t>(k * out.N));
    std::copy(v.begin(), v.end(), out.zt.begin() + static_cast<std::ptrdiff_t>(k * out.N));
  };
  record(0);
  for (std::size_t k = 0; k < K; ++k) {
    st.step(k, 0.0, z, v, nullptr);
    record(k + 1);
  }
  return out;
}

}  // namespace shlab
