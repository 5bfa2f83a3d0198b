#pragma once

// Spatial meshes on intervals and axis-aligned rectangles, principal
// coefficient fields and the observed boundary portion.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "shlab/errors.hpp"
#include "shlab/forms.hpp"

namespace shlab {

struct Domain {
  int dim = 1;
  Point lo{0.0, 0.0};
  Point hi{1.0, 1.0};

  static Domain interval(double a, double b) { return {1, {a, 0.0}, {b, 0.0}}; }
  static Domain rectangle(Point lo, Point hi) { return {2, lo, hi}; }
};

struct BoundaryNode {
  std::size_t node = 0;
  Point normal{0.0, 0.0};
  int axis = 0;      // axis of the edge normal
  int side = 0;      // -1 at lo, +1 at hi
  bool corner = false;
  Point other_normal{0.0, 0.0};  // normal of the second adjacent edge (corners only)
  double weight = 1.0;           // boundary quadrature weight
};

class SpatialMesh {
 public:
  SpatialMesh() = default;

  SpatialMesh(const Domain& domain, std::array<std::size_t, 2> nodes_per_axis)
      : dim_(domain.dim), lo_(domain.lo), hi_(domain.hi) {
    if (dim_ != 1 && dim_ != 2) throw ConfigError("domain dimension must be 1 or 2");
    n_ = {nodes_per_axis[0], dim_ == 2 ? nodes_per_axis[1] : std::size_t{1}};
    for (int a = 0; a < dim_; ++a) {
      const auto ax = static_cast<std::size_t>(a);
      if (n_[ax] < 4) throw ConfigError("resolution must be at least 4 nodes per axis");
      if (!std::isfinite(lo_[ax]) || !std::isfinite(hi_[ax]) || !(hi_[ax] > lo_[ax]))
        throw ConfigError("degenerate domain extents");
      dx_[ax] = (hi_[ax] - lo_[ax]) / static_cast<double>(n_[ax] - 1);
    }
    build_boundary();
  }

  int dim() const { return dim_; }
  std::size_t size() const { return n_[0] * n_[1]; }
  std::size_t nodes(int axis) const { return n_[static_cast<std::size_t>(axis)]; }
  double spacing(int axis) const { return dx_[static_cast<std::size_t>(axis)]; }
  double min_spacing() const { return dim_ == 1 ? dx_[0] : std::min(dx_[0], dx_[1]); }
  const Point& lo() const { return lo_; }
  const Point& hi() const { return hi_; }

  std::size_t index(std::size_t i, std::size_t j = 0) const { return i + n_[0] * j; }
  std::array<std::size_t, 2> ij(std::size_t k) const { return {k % n_[0], k / n_[0]}; }

  Point coord(std::size_t k) const {
    const auto [i, j] = ij(k);
    Point p{lo_[0] + static_cast<double>(i) * dx_[0], 0.0};
    if (dim_ == 2) p[1] = lo_[1] + static_cast<double>(j) * dx_[1];
    return p;
  }

  bool on_boundary(std::size_t k) const { return is_boundary_[k] != 0; }
  const std::vector<BoundaryNode>& boundary() const { return boundary_; }

  /// Trapezoid quadrature weight of node k.
  double weight(std::size_t k) const {
    const auto [i, j] = ij(k);
    double w = dx_[0] * ((i == 0 || i + 1 == n_[0]) ? 0.5 : 1.0);
    if (dim_ == 2) w *= dx_[1] * ((j == 0 || j + 1 == n_[1]) ? 0.5 : 1.0);
    return w;
  }

  template <class F>
  std::vector<double> sample(F&& f) const {
    std::vector<double> out(size());
    for (std::size_t k = 0; k < size(); ++k) out[k] = f(coord(k));
    return out;
  }

  bool same_grid(const SpatialMesh& o) const {
    return dim_ == o.dim_ && n_ == o.n_ && lo_ == o.lo_ && hi_ == o.hi_;
  }

 private:
  void build_boundary() {
    is_boundary_.assign(size(), 0);
    if (dim_ == 1) {
      for (std::size_t i : {std::size_t{0}, n_[0] - 1}) {
        BoundaryNode b;
        b.node = i;
        b.axis = 0;
        b.side = i == 0 ? -1 : 1;
        b.normal = {static_cast<double>(b.side), 0.0};
        b.weight = 1.0;
        boundary_.push_back(b);
        is_boundary_[i] = 1;
      }
      return;
    }
    for (std::size_t k = 0; k < size(); ++k) {
      const auto [i, j] = ij(k);
      const bool xe = (i == 0 || i + 1 == n_[0]);
      const bool ye = (j == 0 || j + 1 == n_[1]);
      if (!xe && !ye) continue;
      BoundaryNode b;
      b.node = k;
      // Corners belong to the edge of the lower axis index.
      if (xe) {
        b.axis = 0;
        b.side = i == 0 ? -1 : 1;
        b.normal = {static_cast<double>(b.side), 0.0};
        b.weight = dx_[1];
        if (ye) {
          b.corner = true;
          b.other_normal = {0.0, j == 0 ? -1.0 : 1.0};
        }
      } else {
        b.axis = 1;
        b.side = j == 0 ? -1 : 1;
        b.normal = {0.0, static_cast<double>(b.side)};
        b.weight = dx_[0];
      }
      boundary_.push_back(b);
      is_boundary_[k] = 1;
    }
  }

  int dim_ = 1;
  std::array<std::size_t, 2> n_{0, 1};
  Point lo_{0.0, 0.0}, hi_{1.0, 1.0};
  Point dx_{0.0, 0.0};
  std::vector<BoundaryNode> boundary_;
  std::vector<char> is_boundary_;
};

inline SpatialMesh build_mesh(const Domain& domain, std::size_t resolution) {
  return SpatialMesh(domain, {resolution, resolution});
}

inline SpatialMesh build_mesh(const Domain& domain, std::array<std::size_t, 2> resolution) {
  return SpatialMesh(domain, resolution);
}

/// Symmetric 2x2 matrix; in 1D only m11 is used.
struct Sym2 {
  double m11 = 0.0, m12 = 0.0, m21 = 0.0, m22 = 0.0;

  double operator()(int i, int j) const {
    if (i == 0) return j == 0 ? m11 : m12;
    return j == 0 ? m21 : m22;
  }
  bool symmetric(double tol = 1e-14) const {
    return std::abs(m12 - m21) <= tol * std::max({1.0, std::abs(m12), std::abs(m21)});
  }
  double min_eigenvalue(int dim) const {
    if (dim == 1) return m11;
    const double mean = 0.5 * (m11 + m22);
    const double half = 0.5 * (m11 - m22);
    return mean - std::sqrt(half * half + m12 * m12);
  }
  double max_eigenvalue(int dim) const {
    if (dim == 1) return m11;
    const double mean = 0.5 * (m11 + m22);
    const double half = 0.5 * (m11 - m22);
    return mean + std::sqrt(half * half + m12 * m12);
  }
};

/// Principal coefficients b^{ij} sampled on the mesh, with the closed form
/// kept when available so derivatives can be taken analytically.
struct PrincipalField {
  std::vector<Sym2> values;
  double s0 = 1.0;
  std::optional<PrincipalForm> form;

  static PrincipalField from_form(const PrincipalForm& f, const SpatialMesh& mesh, double s0) {
    f.validate();
    PrincipalField pf;
    pf.s0 = s0;
    pf.form = f;
    pf.values.resize(mesh.size());
    for (std::size_t k = 0; k < mesh.size(); ++k) {
      const Point x = mesh.coord(k);
      pf.values[k] = {f.entry<double>(0, 0, x), f.entry<double>(0, 1, x), f.entry<double>(1, 0, x),
                      f.entry<double>(1, 1, x)};
    }
    return pf;
  }

  static PrincipalField tabulated(std::vector<Sym2> vals, double s0) {
    PrincipalField pf;
    pf.values = std::move(vals);
    pf.s0 = s0;
    return pf;
  }

  bool analytic() const { return form.has_value(); }
};

struct EllipticityReport {
  double min_eigenvalue = 0.0;
  std::size_t argmin_node = 0;
  bool pass = false;
};

inline EllipticityReport check_ellipticity(const PrincipalField& field, const SpatialMesh& mesh) {
  if (field.values.size() != mesh.size())
    throw InvalidFieldError("principal field is not defined on every mesh node");
  EllipticityReport r;
  r.min_eigenvalue = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < mesh.size(); ++k) {
    const Sym2& b = field.values[k];
    if (mesh.dim() == 2 && !b.symmetric())
      throw InvalidFieldError("b^ij is not symmetric at node " + std::to_string(k));
    const double e = b.min_eigenvalue(mesh.dim());
    if (e < r.min_eigenvalue) {
      r.min_eigenvalue = e;
      r.argmin_node = k;
    }
  }
  r.pass = r.min_eigenvalue >= field.s0;
  return r;
}

/// sigma(x) = sum_ij b^{ij} d_{x_i} nu^j on every boundary node, and the
/// subset where it is strictly positive.
struct BoundarySubset {
  std::vector<double> sigma;       // per boundary-list position
  std::vector<char> member;        // per boundary-list position
  std::vector<std::size_t> positions;  // boundary-list positions of members

  std::size_t count() const { return positions.size(); }
  bool empty() const { return positions.empty(); }
};

inline double conormal_weight(const Sym2& b, const Point& grad_d, const Point& nu, int dim) {
  double s = 0.0;
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j)
      s += b(i, j) * grad_d[static_cast<std::size_t>(i)] * nu[static_cast<std::size_t>(j)];
  return s;
}

inline BoundarySubset extract_gamma0(const SpatialMesh& mesh, const PrincipalField& field,
                                     const WeightFunction& d) {
  d.validate();
  if (field.values.size() != mesh.size())
    throw InvalidFieldError("principal field is not defined on every mesh node");
  BoundarySubset out;
  const auto& bnd = mesh.boundary();
  out.sigma.resize(bnd.size());
  out.member.assign(bnd.size(), 0);
  for (std::size_t p = 0; p < bnd.size(); ++p) {
    const auto& bn = bnd[p];
    const Point x = mesh.coord(bn.node);
    const Point g = d.gradient(x, mesh.dim());
    const Sym2& b = field.values[bn.node];
    const double s = conormal_weight(b, g, bn.normal, mesh.dim());
    out.sigma[p] = s;
    bool in = s > 0.0;
    // Corner: both adjacent edges must agree on a positive sign.
    if (bn.corner) in = in && conormal_weight(b, g, bn.other_normal, mesh.dim()) > 0.0;
    if (in) {
      out.member[p] = 1;
      out.positions.push_back(p);
    }
  }
  return out;
}

/// Whole boundary as a subset (used for the hidden-regularity norm).
inline BoundarySubset full_boundary(const SpatialMesh& mesh) {
  BoundarySubset out;
  const auto n = mesh.boundary().size();
  out.sigma.assign(n, 0.0);
  out.member.assign(n, 1);
  for (std::size_t p = 0; p < n; ++p) out.positions.push_back(p);
  return out;
}

}  // namespace shlab
