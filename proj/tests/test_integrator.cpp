#include <cmath>

#include <gtest/gtest.h>

#include "qtorhc/errors.hpp"
#include "qtorhc/integrator.hpp"
#include "qtorhc/synthesis.hpp"

using namespace qtorhc;

namespace {

ControlModel decay() {
  return linear_model(-Matrix::Identity(1, 1), Matrix::Ones(1, 1),
                      ControlBounds::symmetric(1, 1.0), "decay");
}

double decay_error(double h) {
  const ControlSignal u = ControlSignal::constant(0.0, 1.0, 1, Vector::Zero(1));
  const Trajectory tr = integrate(decay(), Vector::Ones(1), u, h);
  return std::abs(tr.final_state()[0] - std::exp(-1.0));
}

Vector swing_start() {
  Vector x(2);
  x << -M_PI, 0.0;
  return x;
}

// Trapezoid rule on a much finer, independent grid.
double trapezoid_cost(const ControlModel& model, const Vector& x0, const ControlSignal& u,
                      const Matrix& W, const Matrix& R, double h) {
  const Trajectory tr = integrate(model, x0, u, h);
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < tr.times.size(); ++k) {
    const Vector uk = u.value(tr.step_segment[k]);
    const double a = tr.states[k].dot(W * tr.states[k]) + uk.dot(R * uk);
    const double b = tr.states[k + 1].dot(W * tr.states[k + 1]) + uk.dot(R * uk);
    total += 0.5 * (tr.times[k + 1] - tr.times[k]) * (a + b);
  }
  return total;
}

}  // namespace

TEST(Integrate, EquilibriumStaysPut) {
  const ControlSignal u = ControlSignal::constant(0.0, 2.0, 4, Vector::Zero(1));
  const Trajectory tr = integrate(pendulum_model(), Vector::Zero(2), u, 0.01);
  for (const auto& x : tr.states) EXPECT_EQ(x.norm(), 0.0);
}

TEST(Integrate, ExponentialDecay) { EXPECT_LE(decay_error(1e-2), 1e-8); }

TEST(Integrate, FourthOrderConvergence) {
  const double factor = decay_error(0.1) / decay_error(0.05);
  EXPECT_GE(factor, 14.0);
  EXPECT_LE(factor, 18.0);
}

TEST(Integrate, RichardsonSelfConsistency) {
  const ControlSignal u = ControlSignal::constant(0.0, 1.0, 1, Vector::Ones(1));
  const Vector a = integrate(pendulum_model(), swing_start(), u, 0.02).final_state();
  const Vector b = integrate(pendulum_model(), swing_start(), u, 0.01).final_state();
  const Vector c = integrate(pendulum_model(), swing_start(), u, 0.005).final_state();
  const double ratio = (a - b).norm() / (b - c).norm();
  EXPECT_GT(ratio, 12.0);
  EXPECT_LT(ratio, 20.0);
}

TEST(Integrate, GridContainsEverySegmentBoundary) {
  Matrix v(1, 3);
  v << 1, -1, 0.5;
  const ControlSignal u(0.3, 0.9, v);
  const Trajectory tr = integrate(pendulum_model(), swing_start(), u, 0.07);
  for (int j = 0; j <= 3; ++j) {
    const double t = 0.3 + 0.3 * j;
    const bool found = std::any_of(tr.times.begin(), tr.times.end(),
                                   [&](double s) { return std::abs(s - t) < 1e-12; });
    EXPECT_TRUE(found) << "boundary " << t;
  }
  EXPECT_EQ(tr.times.front(), 0.3);
  EXPECT_EQ(tr.states.front(), swing_start());
  for (std::size_t k = 1; k < tr.times.size(); ++k) EXPECT_GT(tr.times[k], tr.times[k - 1]);
}

TEST(Integrate, StopsAtRequestedTime) {
  const ControlSignal u = ControlSignal::constant(0.0, 2.0, 8, Vector::Ones(1));
  const Trajectory tr = integrate(pendulum_model(), swing_start(), u, 0.01, 0.6);
  EXPECT_NEAR(tr.end(), 0.6, 1e-12);
}

TEST(Integrate, DivergenceCarriesTime) {
  const ControlModel blowup("blowup", 1, 1,
                            [](const Vector& x, const Vector&, Vector& dx) { dx[0] = x[0] * x[0]; },
                            [](const Vector& x, const Vector&, Matrix& fx, Matrix& fu) {
                              fx(0, 0) = 2 * x[0];
                              fu(0, 0) = 0;
                            },
                            ControlBounds::symmetric(1, 1.0), 1.0);
  const ControlSignal u = ControlSignal::constant(0.0, 5.0, 1, Vector::Zero(1));
  try {
    integrate(blowup, Vector::Constant(1, 1.0), u, 0.05);
    FAIL() << "expected divergence";
  } catch (const IntegrationDiverged& e) {
    EXPECT_GT(e.time(), 0.9);
    EXPECT_LT(e.time(), 5.0);
  }
}

TEST(RunningCost, ZeroTrajectory) {
  const ControlSignal u = ControlSignal::constant(0.0, 1.0, 2, Vector::Zero(1));
  const Trajectory tr = integrate(pendulum_model(), Vector::Zero(2), u, 0.01);
  EXPECT_EQ(running_cost(Matrix::Identity(2, 2), Matrix::Identity(1, 1), tr, u, 0.0, 1.0), 0.0);
}

TEST(RunningCost, ConstantIntegrand) {
  // A frozen plant keeps x = [1, 0]; the integrand is 500 throughout.
  const ControlModel frozen = linear_model(Matrix::Zero(2, 2), Matrix::Zero(2, 1),
                                           ControlBounds::symmetric(1, 1.0), "frozen");
  const ControlSignal u = ControlSignal::constant(0.0, 1.0, 4, Vector::Zero(1));
  Vector x0(2);
  x0 << 1, 0;
  const Trajectory tr = integrate(frozen, x0, u, 0.01);
  const Matrix W = 500 * Matrix::Identity(2, 2);
  EXPECT_NEAR(running_cost(W, Matrix::Identity(1, 1), tr, u, 0.0, 1.0), 500.0, 1e-10);
}

TEST(RunningCost, AgreesWithFineTrapezoid) {
  Matrix v(1, 4);
  v << 1, 1, -1, 1;
  const ControlSignal u(0.0, 2.0, v);
  const Matrix W = 500 * Matrix::Identity(2, 2);
  const Matrix R = 500 * Matrix::Identity(1, 1);
  const Trajectory tr = integrate(pendulum_model(), swing_start(), u, 0.005);
  const double simpson = running_cost(W, R, tr, u, 0.0, 2.0);
  const double trap = trapezoid_cost(pendulum_model(), swing_start(), u, W, R, 0.0025 / 8);
  EXPECT_LE(std::abs(simpson - trap) / trap, 1e-6);
}

TEST(RunningCost, Additive) {
  Matrix v(1, 4);
  v << 1, -0.5, -1, 1;
  const ControlSignal u(0.0, 2.0, v);
  const Trajectory tr = integrate(pendulum_model(), swing_start(), u, 0.01);
  const Matrix W = Matrix::Identity(2, 2), R = Matrix::Identity(1, 1);
  const double whole = running_cost(W, R, tr, u, 0.0, 2.0);
  const double split = running_cost(W, R, tr, u, 0.0, 0.5) + running_cost(W, R, tr, u, 0.5, 2.0);
  EXPECT_NEAR(whole, split, 1e-10);
}

TEST(RunningCost, RejectsIntervalOutsideSpan) {
  const ControlSignal u = ControlSignal::constant(0.0, 1.0, 2, Vector::Zero(1));
  const Trajectory tr = integrate(pendulum_model(), swing_start(), u, 0.01);
  EXPECT_THROW(running_cost(Matrix::Identity(2, 2), Matrix::Identity(1, 1), tr, u, 0.0, 1.5),
               Error);
}

TEST(GrowthBound, ZeroTrajectory) {
  const ControlSignal u = ControlSignal::constant(0.0, 1.0, 2, Vector::Zero(1));
  const Trajectory tr = integrate(pendulum_model(), Vector::Zero(2), u, 0.01);
  const GrowthReport r = growth_bound_check(pendulum_model(), tr, 1.0, 0.1, 0.2);
  EXPECT_EQ(r.max_norm, 0.0);
  EXPECT_FALSE(r.violated);
}

TEST(GrowthBound, SwingUpWithinBound) {
  SynthesisOptions so;
  so.alpha_override = 0.01;
  const Matrix W = 500 * Matrix::Identity(2, 2), R = 500 * Matrix::Identity(1, 1);
  const TerminalSynthesis syn = synthesize_terminal(pendulum_model(), W, R, so);
  const GrowthConstants c = growth_constants(pendulum_model(), syn.terminal.H, 0.01);
  const Policy pol = pendulum_swing_up_policy(syn.care.K, syn.terminal.H, 2000);
  const FeedbackTrajectory fb = simulate_feedback(pendulum_model(), swing_start(), pol, 0, 12.56, 0.005);
  Trajectory tr;
  tr.times = fb.times;
  tr.states = fb.states;
  const GrowthReport r = growth_bound_check(pendulum_model(), tr, 12.56, c.M1, c.M2);
  EXPECT_FALSE(r.violated);
  EXPECT_GT(r.max_norm, 3.0);
}

TEST(GrowthBound, InjectedJumpIsFlagged) {
  Trajectory tr;
  tr.times = {0.0, 0.1, 0.2};
  tr.states = {Vector::Zero(2), Vector::Constant(2, 1e6), Vector::Zero(2)};
  EXPECT_TRUE(growth_bound_check(pendulum_model(), tr, 0.2, 0.1, 1.0).violated);
}
