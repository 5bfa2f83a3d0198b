#pragma once

// Recovery of (z0, z1, g2) from the normal trace on Gamma0 and the terminal
// displacement, with frozen Brownian increments; uniqueness probe; and the
// deterministic counterexample with compactly supported y.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "shlab/errors.hpp"
#include "shlab/forms.hpp"
#include "shlab/geometry.hpp"
#include "shlab/jet.hpp"
#include "shlab/norms.hpp"
#include "shlab/parallel.hpp"
#include "shlab/spde.hpp"

namespace shlab {

/// Per path: Gamma0 trace, (K + 1) x |Gamma0| row-major, and z(T) on the mesh.
struct ObservationRecord {
  std::size_t P = 0, K = 0, N = 0;
  double T = 0.0, dt = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> gamma0;  // boundary-list positions
  std::vector<Field> trace, zT;

  std::size_t m() const { return gamma0.size(); }

  ObservationRecord zeros_like() const {
    ObservationRecord r = *this;
    for (auto& f : r.trace) std::fill(f.begin(), f.end(), 0.0);
    for (auto& f : r.zT) std::fill(f.begin(), f.end(), 0.0);
    return r;
  }
  /// this += a * o
  void axpy(double a, const ObservationRecord& o) {
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t i = 0; i < trace[p].size(); ++i) trace[p][i] += a * o.trace[p][i];
      for (std::size_t i = 0; i < zT[p].size(); ++i) zT[p][i] += a * o.zT[p][i];
    }
  }
};

enum class ForceMode { separable, tabulated };

/// Unknowns: z0, z1 on the mesh and either g2 (g = g1(t) g2(x)) or g(t_k, x) per level.
struct Unknowns {
  Field z0, z1, g2;
  std::vector<Field> g_table;
};

/// Observation map with frozen increments. The force in `coeffs` is ignored;
/// g enters through the unknowns. `average` fits the path mean of the record
/// (blind mode) instead of every path.
class ObservationOperator {
 public:
  ObservationOperator(const CoefficientSet& coeffs, const SpatialMesh& mesh, const BoundarySubset& gamma0,
                      ScalarFunction g1, double T, double dt, std::size_t P, std::uint64_t seed,
                      ForceMode mode = ForceMode::separable, bool average = false)
      : coeffs_(strip_force(coeffs)), mesh_(&mesh), gamma0_(gamma0), g1_(std::move(g1)), T_(T),
        K_(time_levels_for(T, dt)), P_(P), seed_(seed), mode_(mode), average_(average),
        stepper_(mesh, coeffs_, T, K_) {
    if (P == 0) throw ConfigError("need at least one path");
    if (gamma0.empty()) throw DataError("observation subset Gamma0 is empty");
    if (coeffs_.source || !coeffs_.source_table.empty())
      throw UnsupportedModeError("observation map needs a homogeneous equation (no source term)");
    g1_.validate();
    if (mode == ForceMode::separable && g1_.is_zero()) throw ConfigError("g1 must not vanish identically");
    dt_ = stepper_.dt();
    stencils_ = trace_stencils(mesh);
    dB_.resize(P);
    for (std::size_t p = 0; p < P; ++p) dB_[p] = brownian_increments(seed, p, K_, dt_);
    twt_ = time_weights(K_, dt_);
    g1v_.resize(K_ + 1);
    for (std::size_t k = 0; k <= K_; ++k) g1v_[k] = g1_.is_zero() ? 0.0 : g1_(static_cast<double>(k) * dt_, Point{}, 1);
    N_ = mesh.size();
    mask_ = stepper_.ops().interior;
    build_stiffness();
  }

  // the stepper keeps a pointer to coeffs_
  ObservationOperator(const ObservationOperator&) = delete;
  ObservationOperator& operator=(const ObservationOperator&) = delete;

  std::size_t K() const { return K_; }
  std::size_t N() const { return N_; }
  std::size_t P() const { return P_; }
  double dt() const { return dt_; }
  double T() const { return T_; }
  ForceMode mode() const { return mode_; }
  const SpatialMesh& mesh() const { return *mesh_; }
  const Field& interior() const { return mask_; }
  const std::vector<Field>& increments() const { return dB_; }

  std::size_t force_size() const { return mode_ == ForceMode::separable ? N_ : (K_ + 1) * N_; }
  std::size_t size() const { return 2 * N_ + force_size(); }

  Eigen::VectorXd pack(const Unknowns& u) const {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size()));
    auto put = [&](const Field& f, std::size_t off) {
      if (f.empty()) return;
      if (f.size() != N_) throw DataError("unknown field has the wrong size");
      for (std::size_t n = 0; n < N_; ++n) x[static_cast<Eigen::Index>(off + n)] = mask_[n] * f[n];
    };
    put(u.z0, 0);
    put(u.z1, N_);
    if (mode_ == ForceMode::separable) {
      put(u.g2, 2 * N_);
    } else if (!u.g_table.empty()) {
      if (u.g_table.size() != K_ + 1) throw DataError("tabulated force must have K + 1 levels");
      for (std::size_t k = 0; k <= K_; ++k) put(u.g_table[k], 2 * N_ + k * N_);
    }
    return x;
  }

  Unknowns unpack(const Eigen::VectorXd& x) const {
    Unknowns u;
    auto get = [&](std::size_t off) {
      Field f(N_);
      for (std::size_t n = 0; n < N_; ++n) f[n] = x[static_cast<Eigen::Index>(off + n)];
      return f;
    };
    u.z0 = get(0);
    u.z1 = get(N_);
    if (mode_ == ForceMode::separable) {
      u.g2 = get(2 * N_);
    } else {
      for (std::size_t k = 0; k <= K_; ++k) u.g_table.push_back(get(2 * N_ + k * N_));
    }
    return u;
  }

  ObservationRecord empty_record(std::size_t paths) const {
    ObservationRecord r;
    r.P = paths;
    r.K = K_;
    r.N = N_;
    r.T = T_;
    r.dt = dt_;
    r.seed = seed_;
    r.gamma0 = gamma0_.positions;
    r.trace.assign(paths, Field((K_ + 1) * r.m(), 0.0));
    r.zT.assign(paths, Field(N_, 0.0));
    return r;
  }

  std::size_t record_paths() const { return average_ ? 1 : P_; }

  ObservationRecord apply(const Eigen::VectorXd& x) const {
    ObservationRecord all = empty_record(P_);
    parallel_for(P_, [&](std::size_t p) { forward_path(x, p, all.trace[p], all.zT[p]); });
    if (!average_) return all;
    ObservationRecord mean = empty_record(1);
    const double s = 1.0 / static_cast<double>(P_);
    for (std::size_t p = 0; p < P_; ++p) {
      for (std::size_t i = 0; i < mean.trace[0].size(); ++i) mean.trace[0][i] += s * all.trace[p][i];
      for (std::size_t i = 0; i < N_; ++i) mean.zT[0][i] += s * all.zT[p][i];
    }
    return mean;
  }

  /// <a, b>_W: (1/P) sum_p [int_0^T int_Gamma0 a b + int_G a(T) b(T)].
  double inner(const ObservationRecord& a, const ObservationRecord& b) const {
    const auto& bnd = mesh_->boundary();
    const std::size_t m = gamma0_.count();
    double s = 0.0;
    for (std::size_t p = 0; p < a.P; ++p) {
      double sp = 0.0;
      for (std::size_t k = 0; k <= K_; ++k)
        for (std::size_t q = 0; q < m; ++q)
          sp += twt_[k] * bnd[gamma0_.positions[q]].weight * a.trace[p][k * m + q] * b.trace[p][k * m + q];
      for (std::size_t n = 0; n < N_; ++n) sp += mesh_->weight(n) * a.zT[p][n] * b.zT[p][n];
      s += sp;
    }
    return s / static_cast<double>(a.P);
  }

  /// F^T W r in the Euclidean coordinates of pack().
  Eigen::VectorXd adjoint(const ObservationRecord& r) const {
    if (r.P != record_paths() || r.K != K_ || r.N != N_ || r.m() != gamma0_.count())
      throw DataError("observation record does not match the operator");
    std::vector<Eigen::VectorXd> per(P_);
    parallel_for(P_, [&](std::size_t p) {
      // 1/P comes from the W product per path, or from the path mean in blind mode
      per[p] = adjoint_path(p, r.trace[average_ ? 0 : p], r.zT[average_ ? 0 : p], 1.0 / static_cast<double>(P_));
    });
    Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size()));
    for (const auto& v : per) g += v;
    return g;
  }

  /// R u: H^1_0 seminorm (edge differences) on z0, L^2 on z1 and on the force.
  Eigen::VectorXd regularization(const Eigen::VectorXd& x) const {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(x.size());
    const auto& mesh = *mesh_;
    for (int a = 0; a < mesh.dim(); ++a) {
      const int o = 1 - a;
      for (std::size_t n = 0; n < N_; ++n) {
        const auto ij = mesh.ij(n);
        if (ij[static_cast<std::size_t>(a)] + 1 >= mesh.nodes(a)) continue;
        const std::size_t m = a == 0 ? mesh.index(ij[0] + 1, ij[1]) : mesh.index(ij[0], ij[1] + 1);
        const double w = edge_weight(a, o, ij);
        const double d = x[static_cast<Eigen::Index>(n)] - x[static_cast<Eigen::Index>(m)];
        y[static_cast<Eigen::Index>(n)] += w * d;
        y[static_cast<Eigen::Index>(m)] -= w * d;
      }
    }
    for (std::size_t n = 0; n < N_; ++n) {
      const double w = mesh.weight(n);
      y[static_cast<Eigen::Index>(N_ + n)] = w * x[static_cast<Eigen::Index>(N_ + n)];
      if (mode_ == ForceMode::separable) {
        y[static_cast<Eigen::Index>(2 * N_ + n)] = w * x[static_cast<Eigen::Index>(2 * N_ + n)];
      } else {
        for (std::size_t k = 0; k <= K_; ++k) {
          const auto i = static_cast<Eigen::Index>(2 * N_ + k * N_ + n);
          y[i] = twt_[k] * w * x[i];
        }
      }
    }
    return apply_mask(y);
  }

  /// Diagonal of the L^2 mass in each block; used as CG preconditioner.
  Eigen::VectorXd mass_diagonal() const {
    Eigen::VectorXd d(static_cast<Eigen::Index>(size()));
    for (std::size_t n = 0; n < N_; ++n) {
      d[static_cast<Eigen::Index>(n)] = mesh_->weight(n);
      d[static_cast<Eigen::Index>(N_ + n)] = mesh_->weight(n);
      if (mode_ == ForceMode::separable) {
        d[static_cast<Eigen::Index>(2 * N_ + n)] = mesh_->weight(n);
      } else {
        for (std::size_t k = 0; k <= K_; ++k)
          d[static_cast<Eigen::Index>(2 * N_ + k * N_ + n)] = std::max(twt_[k], 0.5 * dt_) * mesh_->weight(n);
      }
    }
    return d;
  }

  /// Riesz maps of the Tikhonov norms: inverse stiffness on z0, inverse
  /// lumped mass on z1 and the force.
  Eigen::VectorXd precondition(const Eigen::VectorXd& r) const {
    Eigen::VectorXd z = r.cwiseQuotient(mass_diagonal());
    Eigen::VectorXd ri(static_cast<Eigen::Index>(interior_nodes_.size()));
    for (std::size_t i = 0; i < interior_nodes_.size(); ++i)
      ri[static_cast<Eigen::Index>(i)] = r[static_cast<Eigen::Index>(interior_nodes_[i])];
    const Eigen::VectorXd zi = stiffness_->solve(ri);
    for (Eigen::Index n = 0; n < static_cast<Eigen::Index>(N_); ++n) z[n] = 0.0;
    for (std::size_t i = 0; i < interior_nodes_.size(); ++i)
      z[static_cast<Eigen::Index>(interior_nodes_[i])] = zi[static_cast<Eigen::Index>(i)];
    return apply_mask(z);
  }

  Eigen::VectorXd apply_mask(Eigen::VectorXd x) const {
    const std::size_t blocks = size() / N_;
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t n = 0; n < N_; ++n)
        if (mask_[n] == 0.0) x[static_cast<Eigen::Index>(b * N_ + n)] = 0.0;
    return x;
  }

 private:
  static CoefficientSet strip_force(CoefficientSet c) {
    c.g = ForceSpec::none();
    return c;
  }

  void build_stiffness() {
    const auto& mesh = *mesh_;
    std::vector<Eigen::Index> slot(N_, -1);
    interior_nodes_.clear();
    for (std::size_t n = 0; n < N_; ++n)
      if (mask_[n] != 0.0) {
        slot[n] = static_cast<Eigen::Index>(interior_nodes_.size());
        interior_nodes_.push_back(n);
      }
    std::vector<Eigen::Triplet<double>> t;
    for (int a = 0; a < mesh.dim(); ++a) {
      const int o = 1 - a;
      for (std::size_t n = 0; n < N_; ++n) {
        const auto ij = mesh.ij(n);
        if (ij[static_cast<std::size_t>(a)] + 1 >= mesh.nodes(a)) continue;
        const std::size_t m = a == 0 ? mesh.index(ij[0] + 1, ij[1]) : mesh.index(ij[0], ij[1] + 1);
        const double w = edge_weight(a, o, ij);
        const Eigen::Index i = slot[n], j = slot[m];
        if (i >= 0) t.emplace_back(i, i, w);
        if (j >= 0) t.emplace_back(j, j, w);
        if (i >= 0 && j >= 0) {
          t.emplace_back(i, j, -w);
          t.emplace_back(j, i, -w);
        }
      }
    }
    const auto M = static_cast<Eigen::Index>(interior_nodes_.size());
    Eigen::SparseMatrix<double> S(M, M);
    S.setFromTriplets(t.begin(), t.end());
    stiffness_ = std::make_shared<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>>(S);
  }

  double edge_weight(int a, int o, const std::array<std::size_t, 2>& ij) const {
    const auto& mesh = *mesh_;
    double w = 1.0 / mesh.spacing(a);
    if (mesh.dim() == 2) {
      const std::size_t io = ij[static_cast<std::size_t>(o)];
      w *= mesh.spacing(o) * ((io == 0 || io + 1 == mesh.nodes(o)) ? 0.5 : 1.0);
    }
    return w;
  }

  void force_at(const Eigen::VectorXd& x, std::size_t k, Field& g) const {
    for (std::size_t n = 0; n < N_; ++n)
      g[n] = mode_ == ForceMode::separable ? g1v_[k] * x[static_cast<Eigen::Index>(2 * N_ + n)]
                                           : x[static_cast<Eigen::Index>(2 * N_ + k * N_ + n)];
  }

  void record_trace(std::size_t k, const Field& z, Field& out) const {
    const std::size_t m = gamma0_.count();
    for (std::size_t q = 0; q < m; ++q) out[k * m + q] = apply_trace(stencils_[gamma0_.positions[q]], z.data());
  }

  void forward_path(const Eigen::VectorXd& x, std::size_t p, Field& trace, Field& zT) const {
    Field z(N_), v(N_), g(N_);
    for (std::size_t n = 0; n < N_; ++n) {
      z[n] = mask_[n] * x[static_cast<Eigen::Index>(n)];
      v[n] = mask_[n] * x[static_cast<Eigen::Index>(N_ + n)];
    }
    for (std::size_t k = 0; k <= K_; ++k) {
      record_trace(k, z, trace);
      if (k == K_) break;
      force_at(x, k, g);
      stepper_.step(k, dB_[p][k], z, v, &g);
    }
    zT = z;
  }

  Eigen::VectorXd adjoint_path(std::size_t p, const Field& rtrace, const Field& rT, double s) const {
    const std::size_t m = gamma0_.count();
    const auto& bnd = mesh_->boundary();
    Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size()));
    Field zh(N_), vh(N_, 0.0), kick;
    for (std::size_t n = 0; n < N_; ++n) zh[n] = s * mesh_->weight(n) * rT[n];
    auto inject = [&](std::size_t k) {
      for (std::size_t q = 0; q < m; ++q) {
        const std::size_t pos = gamma0_.positions[q];
        const auto& st = stencils_[pos];
        const double c = s * twt_[k] * bnd[pos].weight * rtrace[k * m + q] / (2.0 * st.h);
        zh[st.b] += 3.0 * c;
        zh[st.i1] -= 4.0 * c;
        zh[st.i2] += c;
      }
    };
    inject(K_);
    for (std::size_t k = K_; k-- > 0;) {
      const double db = dB_[p][k];
      stepper_.adjoint_step(k, db, zh, vh, kick);
      for (std::size_t n = 0; n < N_; ++n) {
        const double gk = mask_[n] * db * kick[n];
        if (mode_ == ForceMode::separable)
          out[static_cast<Eigen::Index>(2 * N_ + n)] += g1v_[k] * gk;
        else
          out[static_cast<Eigen::Index>(2 * N_ + k * N_ + n)] += gk;
      }
      inject(k);
    }
    for (std::size_t n = 0; n < N_; ++n) {
      out[static_cast<Eigen::Index>(n)] = mask_[n] * zh[n];
      out[static_cast<Eigen::Index>(N_ + n)] = mask_[n] * vh[n];
    }
    return out;
  }

  CoefficientSet coeffs_;
  const SpatialMesh* mesh_;
  BoundarySubset gamma0_;
  ScalarFunction g1_;
  double T_;
  std::size_t K_;
  std::size_t P_;
  std::uint64_t seed_;
  ForceMode mode_;
  bool average_;
  WaveStepper stepper_;
  double dt_ = 0.0;
  std::size_t N_ = 0;
  Field mask_;
  std::vector<TraceStencil> stencils_;
  std::vector<Field> dB_;
  Field twt_, g1v_;
  std::shared_ptr<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>> stiffness_;
  std::vector<std::size_t> interior_nodes_;
};

/// Observation of given unknowns (the forward map composed with trace/terminal extraction).
inline ObservationRecord forward_observation_map(const ObservationOperator& op, const Unknowns& u) {
  return op.apply(op.pack(u));
}

// ---------------------------------------------------------------------------
// Least squares.

struct ReconstructionOptions {
  double epsilon = 1e-6;
  double tol = 1e-8;  // relative normal-equation residual
  std::size_t max_iter = 2000;
  bool precondition = true;
};

struct ReconstructionResult {
  Unknowns estimate;
  double epsilon = 0.0;
  double misfit = 0.0;             // 1/2 |F u - y|_W^2
  double regularization = 0.0;     // 1/2 |u|_R^2 (without epsilon)
  double initial_residual = 0.0;   // |b|
  double normal_residual = 0.0;    // |b - A u|
  std::size_t iterations = 0;
  bool converged = false;
  std::optional<std::array<double, 3>> relative_errors;  // z0, z1, force
};

/// Minimizes 1/2 |F u - y|_W^2 + eps/2 |u|_R^2 by preconditioned CG on
/// (F^T W F + eps R) u = F^T W y.
inline ReconstructionResult reconstruct(const ObservationOperator& op, const ObservationRecord& obs,
                                        const ReconstructionOptions& opt = {}) {
  if (!(opt.epsilon > 0.0)) throw ConfigError("regularization epsilon must be positive");
  auto A = [&](const Eigen::VectorXd& x) { return Eigen::VectorXd(op.adjoint(op.apply(x)) + opt.epsilon * op.regularization(x)); };
  const Eigen::VectorXd b = op.adjoint(obs);
  auto prec = [&](const Eigen::VectorXd& v) { return opt.precondition ? op.precondition(v) : v; };
  ReconstructionResult res;
  res.epsilon = opt.epsilon;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(b.size());
  Eigen::VectorXd r = b;
  res.initial_residual = b.norm();
  if (res.initial_residual == 0.0) {
    res.converged = true;
  } else {
    Eigen::VectorXd z = prec(r);
    Eigen::VectorXd p = z;
    double rz = r.dot(z);
    for (std::size_t it = 0; it < opt.max_iter; ++it) {
      const Eigen::VectorXd Ap = A(p);
      const double alpha = rz / p.dot(Ap);
      x += alpha * p;
      r -= alpha * Ap;
      res.iterations = it + 1;
      if (r.norm() <= opt.tol * res.initial_residual) {
        // confirm on the true residual; restart from it if the recursion drifted
        r = b - A(x);
        if (r.norm() <= opt.tol * res.initial_residual) {
          res.converged = true;
          break;
        }
        z = prec(r);
        p = z;
        rz = r.dot(z);
        continue;
      }
      z = prec(r);
      const double rz1 = r.dot(z);
      p = z + (rz1 / rz) * p;
      rz = rz1;
    }
  }
  res.normal_residual = (b - A(x)).norm();
  res.estimate = op.unpack(x);
  ObservationRecord diff = op.apply(x);
  diff.axpy(-1.0, obs);
  res.misfit = 0.5 * op.inner(diff, diff);
  res.regularization = 0.5 * x.dot(op.regularization(x));
  return res;
}

/// |a - b|_{L^2} / max(|b|_{L^2}, scale).
inline double relative_l2_error(const SpatialMesh& mesh, const Field& a, const Field& b, double scale) {
  Field d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return l2_norm(mesh, d) / std::max(l2_norm(mesh, b), scale);
}

/// Relative L^2 errors per component. A zero truth component is measured
/// against the largest truth component norm.
inline std::array<double, 3> reconstruction_errors(const ObservationOperator& op, const Unknowns& est,
                                                   const Unknowns& truth) {
  const auto& mesh = op.mesh();
  const Eigen::VectorXd t = op.pack(truth);
  const Unknowns tu = op.unpack(t);
  auto force_norm_sq = [&](const Unknowns& u) {
    if (op.mode() == ForceMode::separable) return l2_squared(mesh, u.g2);
    const auto wt = time_weights(op.K(), op.dt());
    double s = 0.0;
    for (std::size_t k = 0; k <= op.K(); ++k) s += wt[k] * l2_squared(mesh, u.g_table[k]);
    return s;
  };
  Unknowns diff = op.unpack(op.pack(est) - t);
  const double n0 = l2_norm(mesh, tu.z0), n1 = l2_norm(mesh, tu.z1), ng = std::sqrt(force_norm_sq(tu));
  const double scale = std::max({n0, n1, ng, std::numeric_limits<double>::min()});
  return {l2_norm(mesh, diff.z0) / std::max(n0, scale * (n0 > 0 ? 0.0 : 1.0)),
          l2_norm(mesh, diff.z1) / std::max(n1, scale * (n1 > 0 ? 0.0 : 1.0)),
          std::sqrt(force_norm_sq(diff)) / std::max(ng, scale * (ng > 0 ? 0.0 : 1.0))};
}

// ---------------------------------------------------------------------------
// Uniqueness probe: observations of size delta along a fixed pattern.

struct UniquenessRow {
  double delta = 0.0;
  double estimate_norm = 0.0;  // L^2 norm of (z0, z1, force)
  double z0 = 0.0, z1 = 0.0, force = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

struct UniquenessReport {
  std::vector<UniquenessRow> rows;
  double slope = 0.0;  // log estimate norm vs log delta over delta > 0
};

/// Unit-norm (in W) random observation pattern.
inline ObservationRecord random_observation(const ObservationOperator& op, std::uint64_t seed) {
  ObservationRecord r = op.empty_record(op.record_paths());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t p = 0; p < r.P; ++p) {
    for (auto& v : r.trace[p]) v = nd(rng);
    for (std::size_t n = 0; n < r.N; ++n) r.zT[p][n] = op.interior()[n] * nd(rng);
  }
  const double s = std::sqrt(op.inner(r, r));
  for (std::size_t p = 0; p < r.P; ++p) {
    for (auto& v : r.trace[p]) v /= s;
    for (auto& v : r.zT[p]) v /= s;
  }
  return r;
}

/// Largest relative mismatch |<F u, w> - <u, F* w>| / max(|.|, |.|) over random pairs.
inline double adjoint_mismatch(const ObservationOperator& op, std::uint64_t seed, std::size_t pairs) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    const Eigen::VectorXd u =
        op.apply_mask(Eigen::VectorXd::NullaryExpr(static_cast<Eigen::Index>(op.size()), [&] { return nd(rng); }));
    const auto w = random_observation(op, rng());
    const double a = op.inner(op.apply(u), w), b = u.dot(op.adjoint(w));
    const double scale = std::max(std::abs(a), std::abs(b));
    if (scale > 0.0) worst = std::max(worst, std::abs(a - b) / scale);
  }
  return worst;
}

inline UniquenessReport uniqueness_probe(const ObservationOperator& op, const std::vector<double>& deltas,
                                         std::uint64_t pattern_seed, const ReconstructionOptions& opt = {}) {
  const ObservationRecord pattern = random_observation(op, pattern_seed);
  const Eigen::VectorXd mass = op.mass_diagonal();
  UniquenessReport rep;
  std::vector<double> lx, ly;
  for (double delta : deltas) {
    if (!(delta >= 0.0)) throw ConfigError("noise floor delta must be nonnegative");
    ObservationRecord obs = pattern.zeros_like();
    obs.axpy(delta, pattern);
    const auto res = reconstruct(op, obs, opt);
    const Eigen::VectorXd x = op.pack(res.estimate);
    UniquenessRow row;
    row.delta = delta;
    const auto N = static_cast<Eigen::Index>(op.N());
    auto block = [&](Eigen::Index off, Eigen::Index len) {
      return std::sqrt((x.segment(off, len).array().square() * mass.segment(off, len).array()).sum());
    };
    row.z0 = block(0, N);
    row.z1 = block(N, N);
    row.force = block(2 * N, x.size() - 2 * N);
    row.estimate_norm = std::sqrt(row.z0 * row.z0 + row.z1 * row.z1 + row.force * row.force);
    row.iterations = res.iterations;
    row.converged = res.converged;
    rep.rows.push_back(row);
    if (delta > 0.0 && row.estimate_norm > 0.0) {
      lx.push_back(std::log(delta));
      ly.push_back(std::log(row.estimate_norm));
    }
  }
  if (lx.size() >= 2) {
    const double m = static_cast<double>(lx.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      sx += lx[i];
      sy += ly[i];
      sxx += lx[i] * lx[i];
      sxy += lx[i] * ly[i];
    }
    rep.slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Deterministic counterexample: y smooth with compact support in Q and
// f = y_tt - div(b grad y) give zero trace and zero endpoint data.

struct BumpSpec {
  double t_center = 0.0, t_radius = 0.0;
  Point x_center{0.5, 0.5};
  Point x_radius{0.375, 0.375};
  double amplitude = 1.0;

  /// Support (T/4, 3T/4) x (G shrunk by 25% about its center).
  static BumpSpec standard(const SpatialMesh& mesh, double T) {
    BumpSpec b;
    b.t_center = 0.5 * T;
    b.t_radius = 0.25 * T;
    for (int a = 0; a < 2; ++a) {
      const auto i = static_cast<std::size_t>(a);
      b.x_center[i] = 0.5 * (mesh.lo()[i] + mesh.hi()[i]);
      b.x_radius[i] = 0.375 * (mesh.hi()[i] - mesh.lo()[i]);
    }
    return b;
  }

  /// exp(-1 / (1 - r^2)) for |r| < 1, else 0; r a jet or double.
  template <class S>
  static S cutoff(const S& r) {
    using std::exp;
    const double rv = value_of(r);
    if (std::abs(rv) >= 1.0) return S(0.0);
    return exp(-1.0 / (1.0 - r * r));
  }

  template <class S>
  S eval(const S& t, const PointOf<S>& x, int dim) const {
    S y = cutoff<S>((t - t_center) / t_radius) * amplitude;
    for (int a = 0; a < dim; ++a) {
      const auto i = static_cast<std::size_t>(a);
      y = y * cutoff<S>((x[i] - x_center[i]) / x_radius[i]);
    }
    return y;
  }
};

enum class SourceMode { discrete, analytic };

struct Counterexample {
  std::size_t K = 0, N = 0;
  double T = 0.0, dt = 0.0;
  Field y, f;  // (K + 1) x N
  double trace_norm = 0.0;      // |dy/dnu|_{L^2((0,T) x boundary)}
  double terminal_norm = 0.0;   // |y(T)|_{L^2} + |y_t(T)|_{L^2}
  double initial_norm = 0.0;    // |y(0)|_{L^2} + |y_t(0)|_{L^2}
  double f_norm = 0.0;          // |f|_{L^2(Q)}
  double y_norm = 0.0;          // |y|_{L^2(Q)}
};

/// Builds y on the solver grid and f so that the homogeneous-data solve with
/// source f returns y: discrete mode uses the scheme's own three-level
/// recursion (exact), analytic mode uses y_tt - div(b grad y) from jets.
inline Counterexample deterministic_counterexample(const BumpSpec& bump, const CoefficientSet& coeffs,
                                                   const PrincipalForm& form, const SpatialMesh& mesh, double T,
                                                   double dt, SourceMode mode = SourceMode::discrete) {
  if (coeffs.has_lower_order() || coeffs.stochastic())
    throw UnsupportedModeError("counterexample needs the pure wave operator div(b grad .)");
  const int dim = mesh.dim();
  const std::size_t K = time_levels_for(T, dt);
  const double h = T / static_cast<double>(K);
  // support margin of at least two cells from every face of Q
  bool ok = bump.t_radius > 0.0 && bump.t_center - bump.t_radius >= 2.0 * h &&
            bump.t_center + bump.t_radius <= T - 2.0 * h;
  for (int a = 0; a < dim; ++a) {
    const auto i = static_cast<std::size_t>(a);
    ok = ok && bump.x_radius[i] > 0.0 && bump.x_center[i] - bump.x_radius[i] >= mesh.lo()[i] + 2.0 * mesh.spacing(a) &&
         bump.x_center[i] + bump.x_radius[i] <= mesh.hi()[i] - 2.0 * mesh.spacing(a);
  }
  if (!ok) throw DomainError("bump support must stay two cells inside (0,T) x G");

  Counterexample out;
  out.K = K;
  out.N = mesh.size();
  out.T = T;
  out.dt = h;
  const std::size_t N = out.N;
  out.y.assign((K + 1) * N, 0.0);
  out.f.assign((K + 1) * N, 0.0);
  for (std::size_t k = 0; k <= K; ++k)
    for (std::size_t n = 0; n < N; ++n) {
      const Point x = mesh.coord(n);
      out.y[k * N + n] = bump.eval<double>(static_cast<double>(k) * h, PointOf<double>{x[0], x[1]}, dim);
    }
  const SpatialOperators ops(mesh, coeffs.b);
  Field Ly(N);
  for (std::size_t k = 0; k <= K; ++k) {
    Field yk(out.y.begin() + static_cast<std::ptrdiff_t>(k * N), out.y.begin() + static_cast<std::ptrdiff_t>((k + 1) * N));
    if (mode == SourceMode::discrete) {
      as_vec(Ly) = ops.L * as_vec(yk);
      for (std::size_t n = 0; n < N; ++n) {
        const double ym = k > 0 ? out.y[(k - 1) * N + n] : 0.0;
        const double yp = k < K ? out.y[(k + 1) * N + n] : 0.0;
        out.f[k * N + n] = ops.interior[n] * ((yp - 2.0 * yk[n] + ym) / (h * h) - Ly[n]);
      }
    } else {
      for (std::size_t n = 0; n < N; ++n) {
        if (ops.interior[n] == 0.0) continue;
        const Point x = mesh.coord(n);
        auto at = [&]<int NV>() {
          using J = Jet<NV, 2>;
          const J t = J::variable(0, static_cast<double>(k) * h);
          PointOf<J> xs{J::variable(1, x[0]), J(x[1])};
          if constexpr (NV == 3) xs[1] = J::variable(2, x[1]);
          const J y = bump.eval<J>(t, xs, NV - 1);
          J div(0.0);
          for (int i = 0; i < NV - 1; ++i)
            for (int j = 0; j < NV - 1; ++j) div += (form.entry<J>(i, j, xs) * y.derivative(1 + i)).derivative(1 + j);
          return (y.derivative(0).derivative(0) - div).value();
        };
        out.f[k * N + n] = dim == 1 ? at.template operator()<2>() : at.template operator()<3>();
      }
    }
  }

  const auto wt = time_weights(K, h);
  const auto st = trace_stencils(mesh);
  double tr = 0.0, fq = 0.0, yq = 0.0;
  for (std::size_t k = 0; k <= K; ++k) {
    const double* yk = out.y.data() + k * N;
    for (std::size_t q = 0; q < st.size(); ++q) {
      const double v = apply_trace(st[q], yk);
      tr += wt[k] * mesh.boundary()[q].weight * v * v;
    }
    for (std::size_t n = 0; n < N; ++n) {
      fq += wt[k] * mesh.weight(n) * out.f[k * N + n] * out.f[k * N + n];
      yq += wt[k] * mesh.weight(n) * yk[n] * yk[n];
    }
  }
  auto level = [&](std::size_t k) {
    return Field(out.y.begin() + static_cast<std::ptrdiff_t>(k * N), out.y.begin() + static_cast<std::ptrdiff_t>((k + 1) * N));
  };
  auto velocity = [&](std::size_t k) {
    Field v(N);
    const std::size_t a = k == 0 ? 0 : k - 1, b = k == K ? K : k + 1;
    for (std::size_t n = 0; n < N; ++n) v[n] = (out.y[b * N + n] - out.y[a * N + n]) / (static_cast<double>(b - a) * h);
    return v;
  };
  out.trace_norm = std::sqrt(tr);
  out.f_norm = std::sqrt(fq);
  out.y_norm = std::sqrt(yq);
  out.terminal_norm = l2_norm(mesh, level(K)) + l2_norm(mesh, velocity(K));
  out.initial_norm = l2_norm(mesh, level(0)) + l2_norm(mesh, velocity(0));
  return out;
}

/// Solves the deterministic equation with zero data and source f (from the
/// counterexample) and returns max_k |z(t_k) - y(t_k)|_{L^2}.
inline double counterexample_reproduction_error(const Counterexample& ce, CoefficientSet coeffs,
                                                const SpatialMesh& mesh) {
  coeffs.source_table.resize(ce.K + 1);
  for (std::size_t k = 0; k <= ce.K; ++k)
    coeffs.source_table[k] = Field(ce.f.begin() + static_cast<std::ptrdiff_t>(k * ce.N),
                                   ce.f.begin() + static_cast<std::ptrdiff_t>((k + 1) * ce.N));
  const Field zero(mesh.size(), 0.0);
  const auto tr = solve_deterministic(coeffs, zero, zero, mesh, ce.T, ce.dt);
  double err = 0.0;
  for (std::size_t k = 0; k <= ce.K; ++k) {
    Field d(ce.N);
    for (std::size_t n = 0; n < ce.N; ++n) d[n] = tr.z_at(k)[n] - ce.y[k * ce.N + n];
    err = std::max(err, l2_norm(mesh, d));
  }
  return err;
}

}  // namespace shlab
