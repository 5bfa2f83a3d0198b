#pragma once

// Closed-form coefficient families. Every family is evaluable on plain
// doubles and on jets, which is how analytic derivatives enter the
// Carleman bookkeeping.

#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "shlab/errors.hpp"
#include "shlab/jet.hpp"

namespace shlab {

using Point = std::array<double, 2>;

template <class S>
using PointOf = std::array<S, 2>;

/// Separable scalar field amp * T(t) * X(x).
///   tag "zero"      0
///   tag "constant"  amp
///   tag "sine"      amp * prod_i sin(k pi x_i)
///   tag "cos_t"     amp * cos(omega t)
///   tag "sin_t"     amp * sin(omega t)
///   tag "sine_cos_t" amp * cos(omega t) * prod_i sin(k pi x_i)
struct ScalarFunction {
  std::string tag = "zero";
  double amp = 0.0;
  double k = 1.0;
  double omega = 1.0;

  static ScalarFunction zero() { return {}; }
  static ScalarFunction constant(double c) { return {"constant", c, 1.0, 1.0}; }
  static ScalarFunction sine(double amplitude, double wavenumber = 1.0) {
    return {"sine", amplitude, wavenumber, 1.0};
  }

  bool is_zero() const { return tag == "zero" || amp == 0.0; }
  bool time_dependent() const { return tag == "cos_t" || tag == "sin_t" || tag == "sine_cos_t"; }

  void validate() const {
    if (tag != "zero" && tag != "constant" && tag != "sine" && tag != "cos_t" && tag != "sin_t" &&
        tag != "sine_cos_t")
      throw ConfigError("unknown scalar function tag '" + tag + "'");
  }

  double operator()(double t, const Point& x, int dim) const {
    using std::numbers::pi;
    if (tag == "zero") return 0.0;
    if (tag == "constant") return amp;
    double space = 1.0;
    if (tag == "sine" || tag == "sine_cos_t")
      for (int i = 0; i < dim; ++i) space *= std::sin(k * pi * x[static_cast<std::size_t>(i)]);
    double time = 1.0;
    if (tag == "cos_t" || tag == "sine_cos_t") time = std::cos(omega * t);
    if (tag == "sin_t") time = std::sin(omega * t);
    return amp * space * time;
  }
};

/// Spatial weight d(x) of the Carleman function.
///   "shifted_quadratic": a |x - x0|^2 + offset
///   "constant":          offset
struct WeightFunction {
  std::string tag = "shifted_quadratic";
  double a = 1.0;
  Point x0{0.0, 0.0};
  double offset = 0.0;

  static WeightFunction shifted_quadratic(double scale, Point center, double shift = 0.0) {
    return {"shifted_quadratic", scale, center, shift};
  }
  static WeightFunction constant(double c) { return {"constant", 0.0, {0.0, 0.0}, c}; }

  void validate() const {
    if (tag != "shifted_quadratic" && tag != "constant")
      throw ConfigError("unknown weight function tag '" + tag + "'");
  }

  template <class S>
  S eval(const PointOf<S>& x, int dim) const {
    if (tag == "constant") return S(offset);
    S r2(0.0);
    for (int i = 0; i < dim; ++i) {
      const S diff = x[static_cast<std::size_t>(i)] - x0[static_cast<std::size_t>(i)];
      r2 += diff * diff;
    }
    return r2 * a + offset;
  }

  double value(const Point& x, int dim) const { return eval<double>(x, dim); }

  /// Analytic gradient (exact for the closed forms).
  Point gradient(const Point& x, int dim) const {
    using J = Jet<2, 1>;
    PointOf<J> xs{J::variable(0, x[0]), J::variable(1, x[1])};
    const J v = eval<J>(xs, dim);
    return {v.d(0), dim > 1 ? v.d(1) : 0.0};
  }

  std::array<std::array<double, 2>, 2> hessian(const Point& x, int dim) const {
    using J = Jet<2, 2>;
    PointOf<J> xs{J::variable(0, x[0]), J::variable(1, x[1])};
    const J v = eval<J>(xs, dim);
    std::array<std::array<double, 2>, 2> h{};
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j)
        h[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v.d2(i, j);
    return h;
  }

  /// Scaled copy a*d (used by the scaling invariants).
  WeightFunction scaled(double factor) const {
    WeightFunction w = *this;
    w.a *= factor;
    w.offset *= factor;
    return w;
  }
};

/// Closed form of the principal coefficients b^{ij}(x).
///   "constant":      b = [[b11, b12], [b12, b22]]
///   "sine_diagonal": b^{ii} = base + amp sin(k pi x_i), b^{12} = 0
struct PrincipalForm {
  std::string tag = "constant";
  double b11 = 1.0, b12 = 0.0, b22 = 1.0;
  double base = 1.0, amp = 0.0, k = 1.0;

  static PrincipalForm identity() { return {}; }
  static PrincipalForm constant(double m11, double m12, double m22) {
    PrincipalForm f;
    f.b11 = m11;
    f.b12 = m12;
    f.b22 = m22;
    return f;
  }
  static PrincipalForm sine_diagonal(double base_value, double amplitude, double wavenumber = 1.0) {
    PrincipalForm f;
    f.tag = "sine_diagonal";
    f.base = base_value;
    f.amp = amplitude;
    f.k = wavenumber;
    return f;
  }

  void validate() const {
    if (tag != "constant" && tag != "sine_diagonal")
      throw ConfigError("unknown principal coefficient tag '" + tag + "'");
  }

  /// Entry (i, j) at x.
  template <class S>
  S entry(int i, int j, const PointOf<S>& x) const {
    using std::numbers::pi;
    using std::sin;
    if (tag == "constant") {
      if (i == 0 && j == 0) return S(b11);
      if (i == 1 && j == 1) return S(b22);
      return S(b12);
    }
    if (i != j) return S(0.0);
    return sin(x[static_cast<std::size_t>(i)] * (k * pi)) * amp + base;
  }
};

}  // namespace shlab
