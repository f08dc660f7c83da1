#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "qtorhc/errors.hpp"
#include "qtorhc/model.hpp"

using namespace qtorhc;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

// Hand evaluation of the cart-pole equations in extended precision.
Vector cartpole_oracle(const Vector& x, double u) {
  const long double b2 = 0.4256L, b3 = 3.1564e-4L, c4 = 11.2135L;
  const long double x2 = x[1], x3 = x[2], x4 = x[3];
  const long double d = c4 - std::cos(x2) * std::cos(x2);
  const long double v1 = u - x4 * x4 * std::sin(x2) - b2 * x3;
  const long double v2 = std::sin(x2) - b3 * x4;
  Vector out(4);
  out[0] = static_cast<double>(x3);
  out[1] = static_cast<double>(x4);
  out[2] = static_cast<double>((v1 + v2 * std::cos(x2)) / d);
  out[3] = static_cast<double>((v1 * std::cos(x2) + c4 * v2) / d);
  return out;
}

double max_rel_error(const Matrix& a, const Matrix& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

void check_jacobians(const ControlModel& model, double spread) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(-spread, spread);
  const int n = model.state_dim(), m = model.control_dim();
  const double h = 1e-6;
  for (int trial = 0; trial < 100; ++trial) {
    Vector x(n), u(m);
    for (int i = 0; i < n; ++i) x[i] = U(rng);
    for (int i = 0; i < m; ++i) u[i] = U(rng);
    const Jacobians J = eval_jacobians(model, x, u);
    Matrix fx(n, n), fu(n, m);
    for (int i = 0; i < n; ++i) {
      Vector xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      fx.col(i) = (eval_dynamics(model, xp, u) - eval_dynamics(model, xm, u)) / (2 * h);
    }
    for (int i = 0; i < m; ++i) {
      Vector up = u, um = u;
      up[i] += h;
      um[i] -= h;
      fu.col(i) = (eval_dynamics(model, x, up) - eval_dynamics(model, x, um)) / (2 * h);
    }
    EXPECT_LE(max_rel_error(J.fx, fx), 1e-6) << model.name() << " trial " << trial;
    EXPECT_LE(max_rel_error(J.fu, fu), 1e-6) << model.name() << " trial " << trial;
  }
}

void check_lipschitz(const ControlModel& model, double spread) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> U(-spread, spread);
  const int n = model.state_dim(), m = model.control_dim();
  for (int trial = 0; trial < 200; ++trial) {
    Vector x1(n), x2(n), u(m);
    for (int i = 0; i < n; ++i) {
      x1[i] = U(rng);
      x2[i] = U(rng);
    }
    u = clamp_control(model.bounds(), Vector::Constant(m, U(rng)));
    const double lhs = (eval_dynamics(model, x1, u) - eval_dynamics(model, x2, u)).norm();
    EXPECT_LE(lhs, model.lipschitz() * (x1 - x2).norm() * (1 + 1e-12));
  }
}

}  // namespace

TEST(Pendulum, EquilibriumAtOrigin) {
  const ControlModel p = pendulum_model();
  EXPECT_EQ(eval_dynamics(p, Vector::Zero(2), Vector::Zero(1)).norm(), 0.0);
}

TEST(Pendulum, DynamicsAtQuarterTurn) {
  const Vector dx = eval_dynamics(pendulum_model(), vec({M_PI / 2, 1.0}), vec({1.0}));
  EXPECT_NEAR(dx[0], 1.0, 1e-15);
  EXPECT_NEAR(dx[1], 1.3, 1e-15);
}

TEST(Pendulum, LowerEquilibrium) {
  const Vector dx = eval_dynamics(pendulum_model(), vec({-M_PI, 0.0}), vec({0.0}));
  EXPECT_NEAR(dx.norm(), 0.0, 1e-15);
}

TEST(Pendulum, BoundsAreUnit) {
  const ControlModel p = pendulum_model();
  EXPECT_EQ(p.bounds().lower()[0], -1.0);
  EXPECT_EQ(p.bounds().upper()[0], 1.0);
  EXPECT_EQ(p.state_dim(), 2);
  EXPECT_EQ(p.control_dim(), 1);
}

TEST(Pendulum, JacobianAtOrigin) {
  const Jacobians J = eval_jacobians(pendulum_model(), Vector::Zero(2), Vector::Zero(1));
  Matrix A(2, 2);
  A << 0, 1, 1, 0;
  EXPECT_LE((J.fx - A).norm(), 1e-15);
  EXPECT_NEAR(J.fu(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(J.fu(1, 0), 0.3, 1e-15);
}

TEST(Pendulum, JacobianAtBottom) {
  const Jacobians J = eval_jacobians(pendulum_model(), vec({M_PI, 0.0}), Vector::Zero(1));
  Matrix A(2, 2);
  A << 0, 1, -1, 0;
  EXPECT_LE((J.fx - A).norm(), 1e-15);
}

TEST(Pendulum, JacobiansMatchFiniteDifferences) { check_jacobians(pendulum_model(), 3.0); }

TEST(Pendulum, LipschitzHoldsOnSamples) { check_lipschitz(pendulum_model(), 3.0); }

TEST(CartPole, EquilibriumAtOrigin) {
  EXPECT_EQ(eval_dynamics(cartpole_model(), Vector::Zero(4), Vector::Zero(1)).norm(), 0.0);
}

TEST(CartPole, UnitPushAtOrigin) {
  const Vector dx = eval_dynamics(cartpole_model(), Vector::Zero(4), vec({1.0}));
  const double expected = 1.0 / (11.2135 - 1.0);
  EXPECT_NEAR(dx[0], 0.0, 1e-15);
  EXPECT_NEAR(dx[1], 0.0, 1e-15);
  EXPECT_NEAR(dx[2], expected, 1e-12);
  EXPECT_NEAR(dx[3], expected, 1e-12);
  EXPECT_NEAR(dx[2], 0.09791, 1e-5);
}

TEST(CartPole, DenominatorAtQuarterTurn) {
  // d = c4 when cos(x2) = 0: a unit push gives x3' = 1 / c4.
  const Vector dx = eval_dynamics(cartpole_model(), vec({0, M_PI / 2, 0, 0}), vec({1.0}));
  const Vector dx0 = eval_dynamics(cartpole_model(), vec({0, M_PI / 2, 0, 0}), vec({0.0}));
  EXPECT_NEAR(dx[2] - dx0[2], 1.0 / 11.2135, 1e-12);
}

TEST(CartPole, MatchesHandEvaluation) {
  const Vector x = vec({0, 0.04, 0, 0});
  const Vector dx = eval_dynamics(cartpole_model(), x, vec({0.0}));
  EXPECT_TRUE(dx.allFinite());
  EXPECT_LE((dx - cartpole_oracle(x, 0.0)).cwiseAbs().maxCoeff(), 1e-12);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(-2, 2);
  for (int i = 0; i < 50; ++i) {
    const Vector y = vec({U(rng), U(rng), U(rng), U(rng)});
    const double u = U(rng);
    EXPECT_LE((eval_dynamics(cartpole_model(), y, vec({u})) - cartpole_oracle(y, u))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
  }
}

TEST(CartPole, Bounds) {
  const ControlModel c = cartpole_model();
  EXPECT_EQ(c.bounds().upper()[0], 3.9351);
  EXPECT_EQ(c.bounds().lower()[0], -3.9351);
}

TEST(CartPole, JacobiansMatchFiniteDifferences) { check_jacobians(cartpole_model(), 1.0); }

TEST(CartPole, LipschitzHoldsOnOperatingRegion) { check_lipschitz(cartpole_model(), 0.5); }

TEST(Clamp, InteriorAndSaturation) {
  const ControlBounds b = ControlBounds::symmetric(1, 1.0);
  EXPECT_EQ(clamp_control(b, vec({0.5}))[0], 0.5);
  EXPECT_EQ(clamp_control(b, vec({3.0}))[0], 1.0);
  const ControlBounds cp = cartpole_model().bounds();
  EXPECT_EQ(clamp_control(cp, vec({-7.0}))[0], -3.9351);
}

TEST(Clamp, IsAProjection) {
  const ControlBounds b(vec({-1.0, -2.0}), vec({2.0, 0.5}));
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> U(-5, 5);
  for (int i = 0; i < 100; ++i) {
    const Vector u = vec({U(rng), U(rng)});
    const Vector c = clamp_control(b, u);
    EXPECT_EQ(clamp_control(b, c), c);
    EXPECT_EQ((c - u).norm() == 0.0, b.contains(u));
  }
}

TEST(Bounds, ZeroMustBeInterior) {
  EXPECT_THROW(ControlBounds(vec({0.0}), vec({1.0})), Error);
  EXPECT_THROW(ControlBounds(vec({-1.0}), vec({-0.5})), Error);
}

TEST(Model, DimensionMismatchThrows) {
  EXPECT_THROW(eval_dynamics(pendulum_model(), Vector::Zero(3), Vector::Zero(1)),
               DimensionError);
  EXPECT_THROW(eval_jacobians(pendulum_model(), Vector::Zero(2), Vector::Zero(2)),
               DimensionError);
}
