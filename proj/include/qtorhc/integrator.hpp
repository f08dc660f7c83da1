#pragma once

#include <optional>
#include <vector>

#include "qtorhc/model.hpp"

namespace qtorhc {

/// Piecewise-constant control on a uniform grid: segment j is active on
/// [t0 + j*T/N, t0 + (j+1)*T/N). Values are stored column-wise (m x N).
class ControlSignal {
 public:
  ControlSignal(double t0, double horizon, Matrix values);
  static ControlSignal constant(double t0, double horizon, int segments, const Vector& u);

  double t0() const { return t0_; }
  double horizon() const { return horizon_; }
  double end() const { return t0_ + horizon_; }
  int segments() const { return static_cast<int>(values_.cols()); }
  int dim() const { return static_cast<int>(values_.rows()); }
  double segment_length() const { return horizon_ / segments(); }
  double segment_start(int j) const { return t0_ + j * segment_length(); }

  const Matrix& values() const { return values_; }
  Vector value(int j) const { return values_.col(j); }
  int segment_at(double t) const;
  Vector at(double t) const { return value(segment_at(t)); }

  ControlSignal clamped(const ControlBounds& bounds) const;

 private:
  double t0_;
  double horizon_;
  Matrix values_;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Vector> states;
  /// Control segment active on [times[k], times[k+1]).
  std::vector<int> step_segment;

  double start() const { return times.front(); }
  double end() const { return times.back(); }
  const Vector& final_state() const { return states.back(); }
};

/// Classical RK4 with steps no longer than h. Each segment is subdivided into
/// an even number of equal steps, so segment boundaries are always grid nodes.
/// Integration stops at t_end when given (must lie in (t0, t0 + T]).
Trajectory integrate(const ControlModel& model, const Vector& x0, const ControlSignal& signal,
                     double h, std::optional<double> t_end = std::nullopt);

/// Integral of x'Wx + u'Ru over [a, b]; a and b must be grid nodes of traj.
/// Composite Simpson within each control segment (3/8 rule absorbs an odd
/// step count, trapezoid a single step).
double running_cost(const Matrix& W, const Matrix& R, const Trajectory& traj,
                    const ControlSignal& signal, double a, double b);

/// Closed-loop trajectory under continuous state feedback.
struct FeedbackTrajectory {
  std::vector<double> times;
  std::vector<Vector> states;
  std::vector<Vector> controls;  // policy evaluated at each node
};

FeedbackTrajectory simulate_feedback(const ControlModel& model, const Vector& x0,
                                     const Policy& policy, double t0, double duration, double h);

/// Simpson (or trapezoid for an odd tail) integral of x'Wx + u'Ru along a
/// feedback trajectory sampled on a uniform grid.
double running_cost(const Matrix& W, const Matrix& R, const FeedbackTrajectory& traj);

struct GrowthConstants {
  double M1 = 0.0;  // sup of ||z|| over the terminal ellipsoid
  double M2 = 0.0;  // L*M1 + sup of ||f(z, w)|| over ellipsoid x control box
};

/// Evaluates the constants of the a-priori growth bound on {x'Hx <= alpha}.
/// M1 is exact; the supremum of ||f|| is sampled (boundary and interior
/// points against every vertex of the control box plus zero).
GrowthConstants growth_constants(const ControlModel& model, const Matrix& H, double alpha,
                                 int n_samples = 1000, unsigned long long seed = 7);

struct GrowthReport {
  double max_norm = 0.0;
  double bound = 0.0;
  bool violated = false;
};

/// Compares max ||x(s)|| along traj with (M1 + M2 T) exp(L T).
GrowthReport growth_bound_check(const ControlModel& model, const Trajectory& traj,
                                double horizon, double M1, double M2);

}  // namespace qtorhc
