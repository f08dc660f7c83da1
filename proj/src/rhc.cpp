#include "qtorhc/rhc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "qtorhc/errors.hpp"

namespace qtorhc {

void RhcConfig::validate() const {
  std::vector<std::string> problems;
  if (!(delta > 0.0)) problems.push_back("delta must be > 0");
  if (!(T_min >= delta)) problems.push_back("T_min must be >= delta (T >= T_min >= delta > 0)");
  if (!(xi > 0.0 && xi < 1.0)) problems.push_back("xi must lie in (0, 1)");
  if (!(gamma > 1.0)) problems.push_back("gamma must be > 1");
  if (!(rho0 >= 1.0)) problems.push_back("rho0 must be >= 1");
  if (!(eps0 >= 0.0 && eps0 <= 1.0)) problems.push_back("eps0 must lie in [0, 1]");
  if (!(eps_seed > 0.0 && eps_seed < 1.0)) problems.push_back("eps_seed must lie in (0, 1)");
  if (B_box.size() == 0 || !(B_box.array() > 0.0).all()) {
    problems.push_back("B_box must be non-empty with positive entries");
  }
  if (!(alpha > 0.0)) problems.push_back("alpha must be > 0");
  if (!(c > 0.0)) problems.push_back("c must be > 0");
  if (!(tol_T >= 0.0)) problems.push_back("tol_T must be >= 0");
  if (max_steps < 1) problems.push_back("max_steps must be >= 1");
  if (!(convergence_eps > 0.0)) problems.push_back("convergence_eps must be > 0");
  if (h > delta) problems.push_back("h must not exceed delta");
  if (segments < 1) problems.push_back("segments must be >= 1");
  if (substeps < 2 || substeps % 2 != 0) problems.push_back("substeps must be even and >= 2");
  if (max_doublings < 0) problems.push_back("max_doublings must be >= 0");
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::qto: return "qto";
    case RunMode::time_optimal: return "time_optimal";
    case RunMode::lq: return "lq";
  }
  return "qto";
}

RunMode parse_run_mode(const std::string& text) {
  if (text == "qto") return RunMode::qto;
  if (text == "time_optimal" || text == "time-optimal") return RunMode::time_optimal;
  if (text == "lq") return RunMode::lq;
  throw ConfigError({"mode must be one of qto, time_optimal, lq (got '" + text + "')"});
}

OcpProblem RhcSetup::problem_at(const Vector& x, double epsilon, double rho) const {
  OcpProblem p{model, terminal, W, R, epsilon, rho, config.T_min, config.delta, x,
               config.segments, config.substeps};
  p.head_step = config.plant_step();
  return p;
}

WarmStart RhcSetup::cold_guess(const OcpProblem& problem) const {
  if (!guess_policy) return lq_fallback_guess(problem);
  const double T = policy_reach_time(problem, guess_policy, guess_t_max);
  return guess_from_policy(problem, guess_policy, T);
}

bool in_target_box(const Vector& x, const RhcConfig& config) {
  if (x.size() != config.B_box.size()) {
    throw DimensionError("in_target_box: state and B_box sizes differ");
  }
  return (x.array().abs() <= config.B_box.array()).all();
}

EscalationResult rho_escalation(const OcpProblem& problem, const RhcConfig& config,
                                const std::optional<WarmStart>& warm_start,
                                const SolverOptions& options) {
  OcpProblem p = problem;
  EscalationResult out{solve(p, warm_start, options), p.rho, 0};
  while (out.solution.J / (out.rho * config.c) > config.alpha) {
    if (out.doublings >= config.max_doublings) {
      std::ostringstream msg;
      msg << "rho escalation gave up after " << out.doublings << " increases (rho = " << out.rho
          << ", V = " << out.solution.J << "); the state is not steerable into the terminal set";
      throw InfeasibleError(msg.str());
    }
    p.rho = out.rho * config.gamma;
    SolverOptions warm = options;
    warm.continuation_rho = 0.0;
    out.solution = solve(p, out.solution.as_warm_start(), warm);
    out.rho = p.rho;
    ++out.doublings;
  }
  return out;
}

SeedResult epsilon_seed_check(const OcpSolution& solution, const AdaptationState& state,
                              const RhcConfig& config) {
  SeedResult r{state, false};
  if (solution.T - config.T_min <= config.tol_T && state.epsilon == 0.0) {
    r.state.epsilon = config.eps_seed;
    r.resolve = true;
  }
  return r;
}

AdaptationState epsilon_update(const OcpSolution& solution, const Vector& x_next,
                               const AdaptationState& state, const RhcConfig& config) {
  AdaptationState next = state;
  if (!in_target_box(x_next, config)) return next;
  const double eps = state.epsilon;
  const double head = solution.integral_L_head;
  double numer = 0.0;
  double denom = 0.0;
  if (solution.T >= config.T_min + config.delta) {
    numer = config.delta + eps * head;
    denom = solution.integral_L_tail;
  } else {
    numer = (solution.T - config.T_min) + eps * head;
    denom = solution.integral_L_tail + solution.terminal_q;
  }
  if (denom <= config.denom_floor) {
    next.epsilon = 1.0;
  } else {
    next.epsilon = std::min(eps + (1.0 - config.xi) * numer / denom, 1.0);
  }
  return next;
}

StepOutcome rhc_step(const RhcSetup& setup, RunMode mode, double t, const Vector& x,
                     const AdaptationState& state, const std::optional<WarmStart>& warm_start) {
  if (mode == RunMode::lq) throw Error("rhc_step: lq mode has no optimization step");
  const RhcConfig& cfg = setup.config;
  AdaptationState st = state;
  OcpProblem problem = setup.problem_at(x, st.epsilon, st.rho);

  SolverOptions options = setup.solver;
  auto first_solve = [&]() {
    if (warm_start) {
      // The shifted guess misses the terminal set a little; a softer
      // penalty first lets the horizon shrink before the endpoint is pinned.
      SolverOptions warm = options;
      if (setup.warm_rho_factor > 1.0) {
        warm.continuation_rho = std::max(1.0, problem.rho / setup.warm_rho_factor);
      }
      return rho_escalation(problem, cfg, warm_start, warm);
    }
    // Cold start: grow rho from 1 so the horizon can settle before the
    // terminal penalty stiffens.
    SolverOptions cold = options;
    cold.continuation_rho = 1.0;
    const WarmStart guess = setup.cold_guess(problem);
    if (setup.cold_restarts <= 0) return rho_escalation(problem, cfg, guess, cold);
    const OcpSolution best =
        solve_multistart(problem, guess, setup.cold_restarts, setup.seed, cold);
    return rho_escalation(problem, cfg, best.as_warm_start(), options);
  };
  EscalationResult esc = first_solve();
  st.rho = esc.rho;
  int doublings = esc.doublings;
  int iterations = esc.solution.iterations;

  bool seeded = false;
  if (mode == RunMode::qto) {
    const SeedResult seed = epsilon_seed_check(esc.solution, st, cfg);
    if (seed.resolve) {
      st = seed.state;
      seeded = true;
      problem = setup.problem_at(x, st.epsilon, st.rho);
      esc = rho_escalation(problem, cfg, esc.solution.as_warm_start(), options);
      st.rho = esc.rho;
      doublings += esc.doublings;
      iterations += esc.solution.iterations;
    }
  }
  const OcpSolution& sol = esc.solution;
  problem.rho = st.rho;

  const ControlSignal plant_signal(t, sol.T, sol.signal.values());
  StepOutcome out;
  out.plant = integrate(setup.model, x, plant_signal, cfg.plant_step(), t + cfg.delta);
  out.x_next = out.plant.final_state();
  out.plant_controls.reserve(out.plant.times.size());
  for (std::size_t k = 0; k < out.plant.times.size(); ++k) {
    const std::size_t seg_k = std::min(k, out.plant.step_segment.size() - 1);
    out.plant_controls.push_back(plant_signal.value(out.plant.step_segment[seg_k]));
  }

  StepRecord& rec = out.record;
  rec.t = t;
  rec.x = x;
  rec.u = out.plant_controls.front();
  rec.V = sol.J;
  rec.T_bar = sol.T;
  rec.epsilon = st.epsilon;
  rec.rho = st.rho;
  rec.in_B = in_target_box(x, cfg);
  rec.applied = plant_signal;
  rec.integral_L_head = sol.integral_L_head;
  rec.integral_L_tail = sol.integral_L_tail;
  rec.terminal_q = sol.terminal_q;
  rec.doublings = doublings;
  rec.seeded = seeded;
  rec.iterations = iterations;

  if (mode == RunMode::qto) st = epsilon_update(sol, out.x_next, st, cfg);
  st.step_index = state.step_index + 1;
  out.state = st;
  out.next_warm_start = shift_warm_start(sol, cfg.delta, problem);
  return out;
}

namespace {

void append_dense(RunHistory& h, const std::vector<double>& times, const std::vector<Vector>& xs,
                  const std::vector<Vector>& us) {
  const std::size_t first = h.dense_t.empty() ? 0 : 1;
  for (std::size_t k = first; k < times.size(); ++k) {
    h.dense_t.push_back(times[k]);
    h.dense_x.push_back(xs[k]);
    h.dense_u.push_back(us[k]);
  }
}

RunHistory run_lq(const Vector& x0, const RhcSetup& setup) {
  const RhcConfig& cfg = setup.config;
  const Policy policy = linear_feedback(setup.terminal.K, setup.model.bounds());
  RunHistory h;
  h.mode = RunMode::lq;
  h.final_state = {0.0, 1.0, 0};
  Vector x = x0;
  double t = 0.0;
  for (int i = 0; i < cfg.max_steps; ++i) {
    const FeedbackTrajectory seg =
        simulate_feedback(setup.model, x, policy, t, cfg.delta, cfg.plant_step());
    StepRecord rec;
    rec.t = t;
    rec.x = x;
    rec.u = seg.controls.front();
    rec.V = rec.T_bar = rec.integral_L_head = rec.integral_L_tail = rec.terminal_q =
        std::numeric_limits<double>::quiet_NaN();
    rec.rho = 1.0;
    rec.in_B = in_target_box(x, cfg);
    h.steps.push_back(std::move(rec));
    append_dense(h, seg.times, seg.states, seg.controls);
    x = seg.states.back();
    t = seg.times.back();
    h.final_state.step_index = i + 1;
    if (x.norm() <= cfg.convergence_eps) {
      h.converged = true;
      break;
    }
  }
  h.final_time = t;
  return h;
}

}  // namespace

RunHistory run_closed_loop(const Vector& x0, const RhcSetup& setup, RunMode mode) {
  setup.config.validate();
  if (x0.size() != setup.model.state_dim()) {
    throw DimensionError("run_closed_loop: x0 has wrong dimension");
  }
  if (mode == RunMode::lq) return run_lq(x0, setup);

  const RhcConfig& cfg = setup.config;
  RunHistory h;
  h.mode = mode;
  AdaptationState st{mode == RunMode::qto ? cfg.eps0 : 0.0, cfg.rho0, 0};
  Vector x = x0;
  double t = 0.0;
  std::optional<WarmStart> warm;
  for (int i = 0; i < cfg.max_steps; ++i) {
    StepOutcome out = rhc_step(setup, mode, t, x, st, warm);
    append_dense(h, out.plant.times, out.plant.states, out.plant_controls);
    h.steps.push_back(std::move(out.record));
    st = out.state;
    warm = std::move(out.next_warm_start);
    x = out.x_next;
    t += cfg.delta;
    if (x.norm() <= cfg.convergence_eps) {
      h.converged = true;
      break;
    }
  }
  h.final_state = st;
  h.final_time = t;
  return h;
}

std::optional<double> settling_time(const RunHistory& history, double threshold) {
  if (history.dense_t.empty()) return std::nullopt;
  std::size_t k = history.dense_t.size();
  while (k > 0 && history.dense_x[k - 1].norm() <= threshold) --k;
  if (k == history.dense_t.size()) return std::nullopt;
  return history.dense_t[k];
}

double control_effort(const RunHistory& history, const Matrix& R) {
  double total = 0.0;
  for (std::size_t k = 1; k < history.dense_t.size(); ++k) {
    const Vector& a = history.dense_u[k - 1];
    const Vector& b = history.dense_u[k];
    total += 0.5 * (history.dense_t[k] - history.dense_t[k - 1]) *
             (a.dot(R * a) + b.dot(R * b));
  }
  return total;
}

int InvariantReport::count(const std::string& check) const {
  return static_cast<int>(std::count_if(violations.begin(), violations.end(),
                                        [&](const auto& v) { return v.check == check; }));
}

InvariantReport check_invariants(const std::vector<StepRecord>& steps, RunMode mode,
                                 const RhcConfig& config, const TerminalData& terminal,
                                 double tol_rel) {
  InvariantReport rep;
  auto fail = [&](const char* check, int i, const std::string& detail) {
    rep.violations.push_back({check, i, detail});
  };
  auto fmt = [](double a, const char* op, double b) {
    std::ostringstream s;
    s.precision(10);
    s << a << ' ' << op << ' ' << b;
    return s.str();
  };

  const int n = static_cast<int>(steps.size());
  for (int i = 0; i < n; ++i) {
    const StepRecord& s = steps[i];
    if (!(s.epsilon >= 0.0 && s.epsilon <= 1.0)) fail("monotone", i, "epsilon outside [0, 1]");
    if (!(s.rho >= 1.0)) fail("monotone", i, "rho below 1");
    if (i > 0) {
      if (s.epsilon < steps[i - 1].epsilon) fail("monotone", i, "epsilon decreased");
      if (s.rho < steps[i - 1].rho) fail("monotone", i, "rho decreased");
    }
  }
  if (mode == RunMode::lq) return rep;

  for (int i = 0; i < n; ++i) {
    const StepRecord& s = steps[i];
    const double level = s.terminal_q / terminal.k;
    if (level > config.alpha * (1.0 + 1e-9)) {
      fail("terminal", i, fmt(level, ">", config.alpha));
    }
    const double rebuilt =
        s.T_bar + s.epsilon * (s.integral_L_head + s.integral_L_tail) + s.rho * s.terminal_q;
    if (std::abs(rebuilt - s.V) > 1e-6 * std::max(1.0, std::abs(s.V))) {
      fail("value_identity", i, fmt(rebuilt, "!=", s.V));
    }
  }

  for (int i = 0; i + 1 < n; ++i) {
    const StepRecord& a = steps[i];
    const StepRecord& b = steps[i + 1];
    if (b.rho != a.rho) continue;
    const double tol = tol_rel * a.V;
    if (a.epsilon > 0.0) {
      ++rep.descent_checked;
      const double bound = -config.xi * a.epsilon * a.integral_L_head + tol;
      if (b.V - a.V > bound) fail("descent", i, fmt(b.V - a.V, ">", bound));
    } else if (b.epsilon == 0.0) {
      ++rep.frozen_descent_checked;
      const double bound = a.V - std::min(config.delta, a.T_bar - config.T_min) + tol;
      if (b.V > bound) fail("frozen_descent", i, fmt(b.V, ">", bound));
    }
  }

  int i0 = -1;
  for (int i = n - 1; i >= 0; --i) {
    if (steps[i].epsilon <= 0.0 || steps[i].rho != steps[n - 1].rho) break;
    i0 = i;
  }
  if (i0 >= 0) {
    const double cap = steps[i0].V * (1.0 + tol_rel);
    for (int j = i0; j < n; ++j) {
      if (steps[j].T_bar > cap) fail("horizon", j, fmt(steps[j].T_bar, ">", cap));
    }
  }

  if (mode == RunMode::time_optimal && n > 0) {
    const bool reached = std::any_of(steps.begin(), steps.end(), [&](const StepRecord& s) {
      return s.T_bar < config.T_min + config.delta || s.in_B;
    });
    if (!reached) fail("time_optimal_exit", n - 1, "neither T_bar < T_min + delta nor x in B");
  }
  return rep;
}

}  // namespace qtorhc
