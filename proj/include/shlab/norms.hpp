#pragma once

// Quadrature and discrete norms shared by the simulator, the identity lab
// and the inverse solver.

#include <cmath>
#include <cstddef>
#include <vector>

#include "shlab/geometry.hpp"

namespace shlab {

/// Trapezoid weights on K+1 uniform time levels.
inline std::vector<double> time_weights(std::size_t K, double dt) {
  std::vector<double> w(K + 1, dt);
  w.front() = w.back() = 0.5 * dt;
  if (K == 0) w[0] = 0.0;
  return w;
}

inline double l2_squared(const SpatialMesh& mesh, const std::vector<double>& f) {
  double s = 0.0;
  for (std::size_t k = 0; k < mesh.size(); ++k) s += mesh.weight(k) * f[k] * f[k];
  return s;
}

inline double l2_norm(const SpatialMesh& mesh, const std::vector<double>& f) { return std::sqrt(l2_squared(mesh, f)); }

inline double l2_inner(const SpatialMesh& mesh, const std::vector<double>& f, const std::vector<double>& g) {
  double s = 0.0;
  for (std::size_t k = 0; k < mesh.size(); ++k) s += mesh.weight(k) * f[k] * g[k];
  return s;
}

/// Nodal gradient: centered differences inside, second-order one-sided at the ends.
inline std::vector<Point> nodal_gradient(const SpatialMesh& mesh, const std::vector<double>& f) {
  std::vector<Point> g(mesh.size(), Point{0.0, 0.0});
  for (int a = 0; a < mesh.dim(); ++a) {
    const std::size_t n = mesh.nodes(a);
    const double h = mesh.spacing(a);
    for (std::size_t k = 0; k < mesh.size(); ++k) {
      const auto ij = mesh.ij(k);
      const std::size_t i = ij[static_cast<std::size_t>(a)];
      auto at = [&](std::size_t m) {
        auto c = ij;
        c[static_cast<std::size_t>(a)] = m;
        return f[mesh.index(c[0], c[1])];
      };
      double d;
      if (i == 0)
        d = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
      else if (i + 1 == n)
        d = (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h);
      else
        d = (at(i + 1) - at(i - 1)) / (2.0 * h);
      g[k][static_cast<std::size_t>(a)] = d;
    }
  }
  return g;
}

/// H^1_0 norm taken as the L^2 norm of the gradient.
inline double h10_squared(const SpatialMesh& mesh, const std::vector<double>& f) {
  const auto g = nodal_gradient(mesh, f);
  double s = 0.0;
  for (std::size_t k = 0; k < mesh.size(); ++k) s += mesh.weight(k) * (g[k][0] * g[k][0] + g[k][1] * g[k][1]);
  return s;
}

/// |(z0, z1)| in H^1_0 x L^2.
inline double data_norm(const SpatialMesh& mesh, const std::vector<double>& z0, const std::vector<double>& z1) {
  return std::sqrt(h10_squared(mesh, z0) + l2_squared(mesh, z1));
}

/// Discrete L^p norm over the mesh.
inline double lp_norm(const SpatialMesh& mesh, const std::vector<double>& f, double p) {
  double s = 0.0;
  for (std::size_t k = 0; k < mesh.size(); ++k) s += mesh.weight(k) * std::pow(std::abs(f[k]), p);
  return std::pow(s, 1.0 / p);
}

}  // namespace shlab
