#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qtorhc/integrator.hpp"
#include "qtorhc/model.hpp"
#include "qtorhc/ocp.hpp"
#include "qtorhc/synthesis.hpp"

namespace qtorhc {

struct RhcConfig {
  double delta = 0.1;
  double T_min = 1.0;
  double xi = 0.1;
  double gamma = 2.0;
  double rho0 = 100.0;
  double eps0 = 0.0;
  double eps_seed = 0.01;
  /// Half-widths of the box B = {x : |x_j| <= B_box_j}.
  Vector B_box;
  /// Certified terminal level used by the escalation test.
  double alpha = 0.01;
  /// Constant with q(x) >= c x'Hx.
  double c = 1.0;
  double tol_T = 1e-6;
  int max_steps = 1000;
  double convergence_eps = 1e-3;
  /// Plant integration step; <= 0 means delta / 10.
  double h = 0.0;
  int segments = 32;
  int substeps = 4;
  int max_doublings = 50;
  double denom_floor = 1e-12;

  /// Throws ConfigError listing every violated constraint.
  void validate() const;
  double plant_step() const { return h > 0.0 ? h : delta / 10.0; }
};

enum class RunMode { qto, time_optimal, lq };

std::string to_string(RunMode mode);
/// Accepts "qto", "time_optimal" (or "time-optimal") and "lq".
RunMode parse_run_mode(const std::string& text);

struct AdaptationState {
  double epsilon = 0.0;
  double rho = 1.0;
  int step_index = 0;
};

struct StepRecord {
  double t = 0.0;
  Vector x;
  /// Control value applied at t.
  Vector u;
  double V = 0.0;
  double T_bar = 0.0;
  double epsilon = 0.0;
  double rho = 0.0;
  bool in_B = false;
  /// Optimized control shifted to start at t; only [t, t + delta) is applied.
  std::optional<ControlSignal> applied;
  double integral_L_head = 0.0;
  double integral_L_tail = 0.0;
  double terminal_q = 0.0;
  int doublings = 0;
  bool seeded = false;
  int iterations = 0;
};

/// Everything a closed loop needs besides the initial state.
struct RhcSetup {
  ControlModel model;
  TerminalData terminal;
  Matrix W;
  Matrix R;
  RhcConfig config;
  SolverOptions solver;
  /// Feedback law whose rollout seeds the first solve; empty means the LQ
  /// fallback over T_min.
  Policy guess_policy;
  /// Rollout cap when the guess horizon is taken from guess_policy.
  double guess_t_max = 60.0;
  /// Perturbed extra starts for the first solve.
  int cold_restarts = 0;
  unsigned long long seed = 1;
  /// Warm-started solves open with the penalty at rho divided by this factor
  /// and tighten it back; values <= 1 solve at rho directly.
  double warm_rho_factor = 16.0;

  /// Problem P at state x with the given weights.
  OcpProblem problem_at(const Vector& x, double epsilon, double rho) const;
  /// Initial guess for a solve from x without a previous solution.
  WarmStart cold_guess(const OcpProblem& problem) const;
};

bool in_target_box(const Vector& x, const RhcConfig& config);

struct EscalationResult {
  OcpSolution solution;
  double rho = 1.0;
  int doublings = 0;
};

/// Solves P and multiplies rho by gamma until V / (rho c) <= alpha. Throws
/// InfeasibleError after config.max_doublings increases.
EscalationResult rho_escalation(const OcpProblem& problem, const RhcConfig& config,
                                const std::optional<WarmStart>& warm_start,
                                const SolverOptions& options);

struct SeedResult {
  AdaptationState state;
  bool resolve = false;
};

/// Seeds epsilon when the horizon sits at T_min with epsilon still zero.
SeedResult epsilon_seed_check(const OcpSolution& solution, const AdaptationState& state,
                              const RhcConfig& config);

/// Adaptation of epsilon once the measured state is in B.
AdaptationState epsilon_update(const OcpSolution& solution, const Vector& x_next,
                               const AdaptationState& state, const RhcConfig& config);

struct StepOutcome {
  StepRecord record;
  AdaptationState state;
  Vector x_next;
  WarmStart next_warm_start;
  /// Plant trajectory over [t, t + delta] with the control at each node.
  Trajectory plant;
  std::vector<Vector> plant_controls;
};

/// One pass of the receding-horizon loop at time t and state x.
StepOutcome rhc_step(const RhcSetup& setup, RunMode mode, double t, const Vector& x,
                     const AdaptationState& state, const std::optional<WarmStart>& warm_start);

struct RunHistory {
  RunMode mode = RunMode::qto;
  std::vector<StepRecord> steps;
  std::vector<double> dense_t;
  std::vector<Vector> dense_x;
  std::vector<Vector> dense_u;
  AdaptationState final_state;
  bool converged = false;
  double final_time = 0.0;
};

/// Steps until ||x|| <= convergence_eps after a step, or max_steps. The lq
/// mode simulates u = clamp(Kx) continuously and records every delta.
RunHistory run_closed_loop(const Vector& x0, const RhcSetup& setup, RunMode mode);

/// First time after which every dense sample satisfies ||x|| <= threshold.
std::optional<double> settling_time(const RunHistory& history, double threshold);

/// Integral of u'Ru along the dense trace (trapezoid).
double control_effort(const RunHistory& history, const Matrix& R);

struct InvariantViolation {
  std::string check;
  int step = 0;
  std::string detail;
};

struct InvariantReport {
  int descent_checked = 0;
  int frozen_descent_checked = 0;
  std::vector<InvariantViolation> violations;

  bool ok() const { return violations.empty(); }
  int count(const std::string& check) const;
};

/// Re-verifies the run's recorded steps:
///  - "descent": V_{i+1} - V_i <= -xi eps_i head_i + tol_rel V_i when
///    eps_i > 0 and rho did not change;
///  - "frozen_descent": V_{i+1} <= V_i - min(delta, T_i - T_min) + tol_rel V_i
///    when eps stayed 0 and rho did not change;
///  - "monotone": eps and rho non-decreasing, eps in [0, 1], rho >= 1;
///  - "terminal": x(T)'Hx(T) <= alpha at every accepted step;
///  - "horizon": T_j <= V_{i0} (1 + tol_rel) from the first step i0 with
///    eps > 0 after which rho stays constant;
///  - "value_identity": V = T + eps (head + tail) + rho q;
///  - "time_optimal_exit": in time_optimal mode some step has
///    T < T_min + delta or x in B.
/// Value-based checks are skipped in lq mode.
InvariantReport check_invariants(const std::vector<StepRecord>& steps, RunMode mode,
                                 const RhcConfig& config, const TerminalData& terminal,
                                 double tol_rel = 1e-3);

}  // namespace qtorhc
