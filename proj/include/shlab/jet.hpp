#pragma once

// Truncated multivariate Taylor polynomials (forward-mode automatic
// differentiation of arbitrary order). A Jet<NV, Order> holds the
// normalized Taylor coefficients c_a = (d^a f)(x0) / a! for every
// multi-index a with |a| <= Order.

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

namespace shlab {

namespace detail {

constexpr std::size_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

template <int NV, int Order>
struct JetLayout {
  static constexpr std::size_t size = binomial(NV + Order, NV);
  using Index = std::array<int, NV>;

  struct Product {
    std::size_t a, b, out;
  };

  std::vector<Index> multi;           // index -> multi-index
  std::vector<int> lookup;            // encoded multi-index -> index (or -1)
  std::vector<Product> products;      // all pairs with |a|+|b| <= Order
  std::vector<int> degree;

  static std::size_t encode(const Index& a) {
    std::size_t code = 0;
    for (int v = 0; v < NV; ++v) code = code * (Order + 1) + static_cast<std::size_t>(a[v]);
    return code;
  }

  int find(const Index& a) const {
    int total = 0;
    for (int v = 0; v < NV; ++v) {
      if (a[v] < 0) return -1;
      total += a[v];
    }
    if (total > Order) return -1;
    return lookup[encode(a)];
  }

  JetLayout() {
    std::size_t codes = 1;
    for (int v = 0; v < NV; ++v) codes *= Order + 1;
    lookup.assign(codes, -1);
    for (int deg = 0; deg <= Order; ++deg) {
      Index a{};
      enumerate(a, 0, deg);
    }
    for (std::size_t i = 0; i < multi.size(); ++i) {
      for (std::size_t j = 0; j < multi.size(); ++j) {
        if (degree[i] + degree[j] > Order) continue;
        Index s{};
        for (int v = 0; v < NV; ++v) s[v] = multi[i][v] + multi[j][v];
        products.push_back({i, j, static_cast<std::size_t>(lookup[encode(s)])});
      }
    }
  }

  static const JetLayout& get() {
    static const JetLayout layout;
    return layout;
  }

 private:
  void enumerate(Index& a, int var, int remaining) {
    if (var == NV - 1) {
      a[var] = remaining;
      lookup[encode(a)] = static_cast<int>(multi.size());
      multi.push_back(a);
      int deg = 0;
      for (int v = 0; v < NV; ++v) deg += a[v];
      degree.push_back(deg);
      return;
    }
    for (int k = remaining; k >= 0; --k) {
      a[var] = k;
      enumerate(a, var + 1, remaining - k);
    }
  }
};

}  // namespace detail

template <int NV, int Order>
class Jet {
 public:
  using Layout = detail::JetLayout<NV, Order>;
  using Index = typename Layout::Index;
  static constexpr std::size_t size = Layout::size;
  static constexpr int num_vars = NV;
  static constexpr int order = Order;

  Jet() { c_.fill(0.0); }
  Jet(double value) {  // NOLINT(google-explicit-constructor): constants mix freely
    c_.fill(0.0);
    c_[0] = value;
  }

  /// Independent variable number `var` expanded about `value`.
  static Jet variable(int var, double value) {
    Jet j(value);
    if constexpr (Order >= 1) {
      Index a{};
      a[var] = 1;
      j.c_[static_cast<std::size_t>(Layout::get().find(a))] = 1.0;
    }
    return j;
  }

  double value() const { return c_[0]; }

  /// Partial derivative d^a f at the expansion point; zero beyond the order.
  double partial(const Index& a) const {
    const int idx = Layout::get().find(a);
    if (idx < 0) return 0.0;
    double fact = 1.0;
    for (int v = 0; v < NV; ++v)
      for (int k = 2; k <= a[v]; ++k) fact *= k;
    return c_[static_cast<std::size_t>(idx)] * fact;
  }

  double d(int var) const {
    Index a{};
    a[var] = 1;
    return partial(a);
  }

  double d2(int v1, int v2) const {
    Index a{};
    a[v1] += 1;
    a[v2] += 1;
    return partial(a);
  }

  /// Derivative with respect to one variable. Coefficients of total degree
  /// Order are lost, so the result is exact up to degree Order - 1.
  Jet derivative(int var) const {
    const auto& L = Layout::get();
    Jet out;
    for (std::size_t i = 0; i < size; ++i) {
      Index up = L.multi[i];
      up[var] += 1;
      const int src = L.find(up);
      if (src >= 0) out.c_[i] = c_[static_cast<std::size_t>(src)] * up[var];
    }
    return out;
  }

  const std::array<double, size>& coefficients() const { return c_; }

  Jet& operator+=(const Jet& o) {
    for (std::size_t i = 0; i < size; ++i) c_[i] += o.c_[i];
    return *this;
  }
  Jet& operator-=(const Jet& o) {
    for (std::size_t i = 0; i < size; ++i) c_[i] -= o.c_[i];
    return *this;
  }
  Jet& operator*=(double s) {
    for (auto& x : c_) x *= s;
    return *this;
  }
  Jet& operator*=(const Jet& o) {
    *this = *this * o;
    return *this;
  }

  friend Jet operator+(Jet a, const Jet& b) { return a += b; }
  friend Jet operator-(Jet a, const Jet& b) { return a -= b; }
  friend Jet operator-(Jet a) {
    for (auto& x : a.c_) x = -x;
    return a;
  }
  friend Jet operator*(Jet a, double s) { return a *= s; }
  friend Jet operator*(double s, Jet a) { return a *= s; }
  friend Jet operator+(Jet a, double s) {
    a.c_[0] += s;
    return a;
  }
  friend Jet operator+(double s, Jet a) { return a + s; }
  friend Jet operator-(Jet a, double s) {
    a.c_[0] -= s;
    return a;
  }
  friend Jet operator-(double s, const Jet& a) { return -a + s; }

  friend Jet operator*(const Jet& a, const Jet& b) {
    Jet out;
    for (const auto& p : Layout::get().products) out.c_[p.out] += a.c_[p.a] * b.c_[p.b];
    return out;
  }

  friend Jet operator/(const Jet& a, const Jet& b) { return a * reciprocal(b); }
  friend Jet operator/(const Jet& a, double s) { return a * (1.0 / s); }
  friend Jet operator/(double s, const Jet& b) { return reciprocal(b) * s; }

  /// f(a) for a univariate f given its derivatives f^(k)(a.value()), k = 0..Order.
  static Jet compose(const Jet& a, const std::array<double, Order + 1>& derivs) {
    Jet h = a;
    h.c_[0] = 0.0;
    Jet out(derivs[0]);
    Jet power(1.0);
    double fact = 1.0;
    for (int k = 1; k <= Order; ++k) {
      power = power * h;
      fact *= k;
      out += power * (derivs[static_cast<std::size_t>(k)] / fact);
    }
    return out;
  }

  friend Jet reciprocal(const Jet& a) {
    const double x = a.value();
    std::array<double, Order + 1> d{};
    double fk = 1.0;  // k!
    for (int k = 0; k <= Order; ++k) {
      if (k > 0) fk *= k;
      d[static_cast<std::size_t>(k)] = ((k % 2) ? -1.0 : 1.0) * fk / std::pow(x, k + 1);
    }
    return compose(a, d);
  }

  friend Jet exp(const Jet& a) {
    std::array<double, Order + 1> d{};
    d.fill(std::exp(a.value()));
    return compose(a, d);
  }

  friend Jet sin(const Jet& a) {
    const double s = std::sin(a.value()), c = std::cos(a.value());
    std::array<double, Order + 1> d{};
    const double cyc[4] = {s, c, -s, -c};
    for (int k = 0; k <= Order; ++k) d[static_cast<std::size_t>(k)] = cyc[k % 4];
    return compose(a, d);
  }

  friend Jet cos(const Jet& a) {
    const double s = std::sin(a.value()), c = std::cos(a.value());
    std::array<double, Order + 1> d{};
    const double cyc[4] = {c, -s, -c, s};
    for (int k = 0; k <= Order; ++k) d[static_cast<std::size_t>(k)] = cyc[k % 4];
    return compose(a, d);
  }

 private:
  std::array<double, size> c_;
};

/// Uniform accessors so closed-form families can be written once for
/// both plain doubles and jets.
inline double value_of(double x) { return x; }
template <int NV, int Order>
double value_of(const Jet<NV, Order>& j) {
  return j.value();
}

}  // namespace shlab
