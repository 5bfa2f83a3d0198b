#include "shlab/jet.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace shlab {
namespace {

using J2 = Jet<2, 4>;

TEST(JetTest, ProductRuleMatchesHandDerivatives) {
  const double x = 0.3, y = -0.7;
  const J2 X = J2::variable(0, x), Y = J2::variable(1, y);
  const J2 f = X * X * Y + Y * Y * Y;  // x^2 y + y^3
  EXPECT_DOUBLE_EQ(f.value(), x * x * y + y * y * y);
  EXPECT_DOUBLE_EQ(f.d(0), 2 * x * y);
  EXPECT_DOUBLE_EQ(f.d(1), x * x + 3 * y * y);
  EXPECT_DOUBLE_EQ(f.d2(0, 1), 2 * x);
  EXPECT_DOUBLE_EQ(f.d2(1, 1), 6 * y);
  EXPECT_DOUBLE_EQ(f.partial({2, 1}), 2.0);
  EXPECT_DOUBLE_EQ(f.partial({0, 3}), 6.0);
  EXPECT_DOUBLE_EQ(f.partial({1, 3}), 0.0);
}

TEST(JetTest, TranscendentalCompositionToFourthOrder) {
  const double x = 0.4;
  using J1 = Jet<1, 4>;
  const J1 X = J1::variable(0, x);
  const J1 e = exp(sin(X));
  // d^k/dx^k exp(sin x), written out by hand.
  const double s = std::sin(x), c = std::cos(x), E = std::exp(s);
  EXPECT_NEAR(e.partial({1}), E * c, 1e-14);
  EXPECT_NEAR(e.partial({2}), E * (c * c - s), 1e-14);
  EXPECT_NEAR(e.partial({3}), E * (c * c * c - 3 * s * c - c), 1e-13);
  EXPECT_NEAR(e.partial({4}), E * (c * c * c * c - 6 * s * c * c - 4 * c * c + 3 * s * s + s), 1e-12);
}

TEST(JetTest, ReciprocalAndQuotient) {
  using J1 = Jet<1, 4>;
  const double x = 1.7;
  const J1 r = 1.0 / (J1::variable(0, x) * J1::variable(0, x) + 1.0);
  const double u = x * x + 1;
  EXPECT_NEAR(r.value(), 1 / u, 1e-15);
  EXPECT_NEAR(r.partial({1}), -2 * x / (u * u), 1e-15);
  EXPECT_NEAR(r.partial({2}), (6 * x * x - 2) / (u * u * u), 1e-14);
}

TEST(JetTest, DerivativeDropsOneOrder) {
  const J2 X = J2::variable(0, 0.5), Y = J2::variable(1, 2.0);
  const J2 f = sin(X * Y);
  const J2 fx = f.derivative(0);
  // d/dx sin(xy) = y cos(xy); its y-derivative = cos(xy) - x y sin(xy)
  EXPECT_NEAR(fx.value(), 2.0 * std::cos(1.0), 1e-15);
  EXPECT_NEAR(fx.d(1), std::cos(1.0) - 1.0 * std::sin(1.0), 1e-14);
  // third derivative of fx is still exact (order 4 - 1)
  EXPECT_NEAR(fx.partial({0, 3}), f.partial({1, 3}), 1e-12);
}

}  // namespace
}  // namespace shlab
