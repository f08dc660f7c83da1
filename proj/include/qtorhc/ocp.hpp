#pragma once

#include <optional>
#include <vector>

#include "qtorhc/integrator.hpp"
#include "qtorhc/model.hpp"
#include "qtorhc/synthesis.hpp"

namespace qtorhc {

/// Free-final-time problem: minimize
///   J(u, T) = T + epsilon * int_0^T L(x, u) ds + rho * q(x(T))
/// over piecewise-constant u in the control box and T >= T_min, with
/// L(x, u) = x'Wx + u'Ru. Every solve starts at time 0.
///
/// The control is parameterized on `segments` equal pieces of [0, T]; the
/// dynamics are integrated on the scaled interval [0, 1] with `substeps`
/// RK4 steps per segment, which makes J a smooth function of (u, T).
struct OcpProblem {
  ControlModel model;
  TerminalData terminal;
  Matrix W;
  Matrix R;
  double epsilon = 0.0;
  double rho = 1.0;
  double T_min = 1.0;
  /// Sampling time; J is reported split at this instant.
  double delta = 0.1;
  Vector x0;
  int segments = 32;
  int substeps = 4;
  /// Step for the fine integration of the head [0, delta]; <= 0 means delta / 10.
  double head_step = 0.0;

  void validate() const;
  double L(const Vector& x, const Vector& u) const { return x.dot(W * x) + u.dot(R * u); }
};

struct CostBreakdown {
  double J = 0.0;
  double integral_L_total = 0.0;
  double integral_L_head = 0.0;
  double integral_L_tail = 0.0;
  double terminal_q = 0.0;
  Vector x_final;
};

/// The signal's values are stretched over [0, T] (its own horizon is ignored).
CostBreakdown eval_cost(const OcpProblem& problem, const ControlSignal& signal, double T);

struct OcpGradient {
  double J = 0.0;
  Matrix controls;  // m x segments
  double horizon = 0.0;
};

/// Exact gradient of the discretized J by reverse-mode sweep through the RK4
/// steps and the Simpson weights.
OcpGradient eval_gradient(const OcpProblem& problem, const ControlSignal& signal, double T);

struct WarmStart {
  Matrix controls;  // m x segments
  double T = 0.0;
};

enum class SolverMethod {
  /// Sequential box-constrained QP on a finite-difference Hessian of the
  /// adjoint gradient, Levenberg-Marquardt damping and Armijo backtracking.
  projected_newton,
  /// Projected gradient with spectral (Barzilai-Borwein) trial steps.
  projected_gradient,
};

struct SolverOptions {
  SolverMethod method = SolverMethod::projected_newton;
  int max_iterations = 500;
  /// Stop when ||P(z - g) - z||_inf <= tol_g * max(1, |J|).
  double tol_g = 1e-5;
  double initial_step = 1.0;
  double shrink = 0.5;
  double sufficient_decrease = 1e-4;
  /// Spectral (Barzilai-Borwein) trial steps after the first iteration
  /// (projected_gradient only).
  bool spectral_steps = true;
  /// Initial Levenberg-Marquardt damping relative to the largest curvature
  /// (projected_newton only).
  double initial_damping = 1e-3;
  /// When positive and below the problem's rho, solve a sequence of problems
  /// with rho growing geometrically from this value, each warm-starting the next.
  double continuation_rho = 0.0;
  double continuation_factor = 4.0;
  bool record_history = false;
};

struct OcpSolution {
  ControlSignal signal;  // t0 = 0, horizon T
  double T = 0.0;
  double J = 0.0;
  Vector x_final;
  double integral_L_total = 0.0;
  double integral_L_head = 0.0;
  double integral_L_tail = 0.0;
  double terminal_q = 0.0;
  int iterations = 0;
  bool converged = false;
  double projected_gradient_norm = 0.0;
  std::vector<double> cost_history;  // accepted costs, when requested

  WarmStart as_warm_start() const { return {signal.values(), T}; }
};

/// Bound-constrained descent on (u, T) with Armijo backtracking; the method
/// is chosen in the options. Without a warm
/// start the solver begins from the LQ fallback (u = clamp(K x) held per
/// segment over T_min). Throws SolverError when the initial guess diverges.
OcpSolution solve(const OcpProblem& problem, const std::optional<WarmStart>& warm_start = {},
                  const SolverOptions& options = {});

/// Runs the base guess plus `restarts` randomly perturbed copies of it
/// concurrently and keeps the lowest cost (lowest index on ties).
OcpSolution solve_multistart(const OcpProblem& problem, const WarmStart& base, int restarts,
                             unsigned long long seed, const SolverOptions& options = {});

/// Zero-order-hold rollout of a feedback law: u_j = policy(x(t_j)).
WarmStart guess_from_policy(const OcpProblem& problem, const Policy& policy, double T);

/// First time a rollout of the policy (step delta / 10) enters the terminal
/// set, floored at T_min. Throws SolverError past t_max.
double policy_reach_time(const OcpProblem& problem, const Policy& policy, double t_max);

/// u_s = K x held per segment over [0, T_min].
WarmStart lq_fallback_guess(const OcpProblem& problem);

/// Cost of continuous feedback u_s = K x over [0, T_min]: a feasible upper
/// bound on V(x0) whenever x0 lies in the terminal set.
double lq_fallback_cost(const OcpProblem& problem, double h);

/// Receding-horizon continuation: drop the first delta of the previous
/// control, extend with u_s = K x from the previous terminal state, and
/// resample onto the problem's segments. Horizon guess max(T - delta, T_min).
WarmStart shift_warm_start(const OcpSolution& previous, double delta, const OcpProblem& problem);

}  // namespace qtorhc
