// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 on any FAIL.
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "qtorhc/integrator.hpp"
#include "qtorhc/ocp.hpp"
#include "qtorhc/rhc.hpp"
#include "qtorhc/scenario.hpp"
#include "qtorhc/synthesis.hpp"

namespace fs = std::filesystem;
using namespace qtorhc;

namespace {

const fs::path kSource = QTORHC_SOURCE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

Matrix diag(std::initializer_list<double> d) {
  Vector v(static_cast<Eigen::Index>(d.size()));
  Eigen::Index i = 0;
  for (double x : d) v[i++] = x;
  return v.asDiagonal();
}

struct Plant {
  ControlModel model;
  Matrix W, R;
  double alpha;
};

Plant pendulum() { return {pendulum_model(), diag({500, 500}), diag({500}), 0.01}; }
Plant cartpole() { return {cartpole_model(), diag({1132, 100, 1, 1}), diag({6.46}), 0.07}; }

TerminalSynthesis synth(const Plant& p) {
  SynthesisOptions o;
  o.alpha_override = p.alpha;
  return synthesize_terminal(p.model, p.W, p.R, o);
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

// Runs shared by criteria 5, 6, 7 and 10.
struct Runs {
  fs::path out;
  std::map<std::string, ScenarioResult> results;
  std::map<std::string, ScenarioConfig> configs;
  std::map<std::string, double> seconds;

  const ScenarioResult& get(const std::string& name) {
    auto it = results.find(name);
    if (it != results.end()) return it->second;
    const ScenarioConfig c = load_config(kSource / "configs" / (name + ".json"));
    const auto t0 = std::chrono::steady_clock::now();
    ScenarioResult r = run_scenario(c, out / name);
    seconds[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    configs.emplace(name, c);
    return results.emplace(name, std::move(r)).first->second;
  }
};

Outcome gain_pendulum() {
  const TerminalSynthesis s = synth(pendulum());
  const Matrix& K = s.care.K;
  const bool ok = std::abs(K(0, 0) + 6.81) <= 0.02 * 6.81 && std::abs(K(0, 1) + 6.81) <= 0.02 * 6.81;
  return {ok, "K = [" + fmt(K(0, 0), 5) + ", " + fmt(K(0, 1), 5) + "]"};
}

Outcome gain_cartpole() {
  const TerminalSynthesis s = synth(cartpole());
  const double expected[] = {13.24, -81.74, 43.65, -80.63};
  bool ok = true;
  std::string text = "K = [";
  for (int i = 0; i < 4; ++i) {
    ok = ok && std::abs(s.care.K(0, i) - expected[i]) <= 0.02 * std::abs(expected[i]);
    text += fmt(s.care.K(0, i), 5) + (i < 3 ? ", " : "]");
  }
  const double abscissa = spectral_abscissa(s.A + s.B * s.care.K);
  return {ok && abscissa < 0.0, text + ", max Re eig(A+BK) = " + fmt(abscissa, 4)};
}

Outcome certification() {
  std::string text;
  bool ok = true;
  for (const Plant& p : {pendulum(), cartpole()}) {
    const TerminalSynthesis s = synth(p);
    CertifyOptions o;
    o.n_samples = 1000;
    const CertificationReport r =
        certify_alpha(p.model, s.terminal.K, s.terminal.H, p.W, p.R, 1.1, p.alpha, o);
    ok = ok && r.passed;
    text += p.model.name() + " alpha " + fmt(p.alpha) + (r.passed ? " certified" : " rejected") +
            " (worst q'+L " + fmt(r.worst_decrease, 3) + "); ";
  }
  return {ok, text};
}

Outcome time_optimal_horizon() {
  ScenarioConfig c = load_config(kSource / "configs/pendulum_time_optimal.json");
  c.N = 64;
  c.restarts = 5;
  const ScenarioSetup s = build_setup(c);
  const StepOutcome o =
      rhc_step(s.rhc, RunMode::time_optimal, 0.0, c.x0, {0.0, c.rho0, 0}, std::nullopt);
  const double T = o.record.T_bar;
  return {T >= 11.9 && T <= 13.2 && o.record.epsilon == 0.0,
          "best T = " + fmt(T) + " over 1 + 5 starts, N = 64"};
}

Outcome pendulum_swing_up(Runs& runs) {
  const ScenarioResult& r = runs.get("pendulum_qto");
  const auto& h = r.history;
  const bool eps_one = !h.steps.empty() && h.final_state.epsilon >= 1.0;
  const bool settled = r.settling_time && *r.settling_time <= 25.0;
  return {settled && eps_one && h.converged,
          "settling time " + (r.settling_time ? fmt(*r.settling_time) : std::string("none")) +
              ", final epsilon " + fmt(h.final_state.epsilon) + ", " +
              std::to_string(h.steps.size()) + " steps, " + fmt(runs.seconds["pendulum_qto"], 3) +
              " s"};
}

Outcome cartpole_comparison(Runs& runs) {
  const ScenarioResult& q = runs.get("cartpole_qto");
  const ScenarioResult& l = runs.get("cartpole_lq");
  const bool ok = q.settling_time && l.settling_time && *q.settling_time < *l.settling_time;
  auto show = [](const ScenarioResult& r) {
    return r.settling_time ? fmt(*r.settling_time) : std::string("none");
  };
  return {ok, "qto settles at " + show(q) + ", lq at " + show(l)};
}

Outcome descent_suite(Runs& runs) {
  bool ok = true;
  std::string text;
  for (const char* name : {"pendulum_qto", "cartpole_qto", "cartpole_lq", "pendulum_time_optimal"}) {
    const ScenarioResult& r = runs.get(name);
    const int d = r.invariants.count("descent"), f = r.invariants.count("frozen_descent");
    ok = ok && d == 0 && f == 0;
    text += std::string(name) + ": " + std::to_string(r.invariants.descent_checked) + "+" +
            std::to_string(r.invariants.frozen_descent_checked) + " checked, " +
            std::to_string(d + f) + " violated; ";
  }
  return {ok, text};
}

// Largest |adjoint - central difference| relative to the gradient scale.
double gradient_error(const OcpProblem& p, const Matrix& U, double T) {
  const OcpGradient g = eval_gradient(p, ControlSignal(0, T, U), T);
  const double scale = std::max({g.controls.cwiseAbs().maxCoeff(), std::abs(g.horizon), 1e-3});
  auto J = [&](const Matrix& V, double S) { return eval_cost(p, ControlSignal(0, S, V), S).J; };
  double worst = 0.0;
  const double h = 1e-6;
  for (Eigen::Index j = 0; j < U.cols(); ++j) {
    Matrix up = U, um = U;
    up(0, j) += h;
    um(0, j) -= h;
    worst = std::max(worst, std::abs((J(up, T) - J(um, T)) / (2 * h) - g.controls(0, j)) / scale);
  }
  const double hT = h * T;
  const double fdT = (J(U, T + hT) - J(U, T - hT)) / (2 * hT);
  return std::max(worst, std::abs(fdT - g.horizon) / std::max(std::abs(g.horizon), 1e-3));
}

Outcome gradient_oracle() {
  double worst = 0.0;
  std::mt19937_64 rng(2024);
  for (const Plant& p : {pendulum(), cartpole()}) {
    const TerminalData t = synth(p).terminal;
    const int n = p.model.state_dim();
    const double ub = 0.9 * p.model.bounds().upper()[0];
    const double T_min = n == 2 ? 0.5 : 1.3;
    std::uniform_real_distribution<double> U(-ub, ub), X(n == 2 ? -3 : -0.3, n == 2 ? 3 : 0.3),
        Tdist(T_min + 0.1, T_min + 3), E(0, 1);
    for (int trial = 0; trial < 20; ++trial) {
      Vector x0(n);
      for (int i = 0; i < n; ++i) x0[i] = X(rng);
      const int N = 10;
      const OcpProblem prob{p.model, t, p.W, p.R, E(rng), 100, T_min, 0.05, x0, N, 4};
      Matrix u(1, N);
      for (int j = 0; j < N; ++j) u(0, j) = U(rng);
      worst = std::max(worst, gradient_error(prob, u, Tdist(rng)));
    }
  }
  return {worst <= 1e-4, "worst relative error " + fmt(worst, 3) + " over 40 instances"};
}

Outcome numerical_core() {
  double care = 0.0, lyap = 0.0;
  for (const Plant& p : {pendulum(), cartpole()}) {
    const TerminalSynthesis s = synth(p);
    care = std::max(care, care_relative_residual(s.A, s.B, p.W, p.R, s.care.P));
    const Matrix AK = s.A + s.B * s.terminal.K;
    const Matrix Q = p.W + s.terminal.K.transpose() * p.R * s.terminal.K;
    lyap = std::max(lyap, lyapunov_residual(AK, Q, s.terminal.H));
  }
  const Matrix AK = -0.5 * Matrix::Identity(3, 3);
  lyap = std::max(lyap, lyapunov_residual(AK, Matrix::Identity(3, 3),
                                          solve_lyapunov(AK, Matrix::Identity(3, 3))));

  const ControlModel decay = linear_model(-Matrix::Identity(1, 1), Matrix::Ones(1, 1),
                                          ControlBounds::symmetric(1, 1.0), "decay");
  auto err = [&](double h) {
    const ControlSignal u = ControlSignal::constant(0, 1, 1, Vector::Zero(1));
    return std::abs(integrate(decay, Vector::Ones(1), u, h).final_state()[0] - std::exp(-1.0));
  };
  const double order = err(0.1) / err(0.05);
  const bool ok = care <= 1e-8 && lyap <= 1e-10 && order >= 14 && order <= 18;
  return {ok, "CARE residual " + fmt(care, 3) + ", Lyapunov residual " + fmt(lyap, 3) +
                  ", RK4 order factor " + fmt(order, 4)};
}

Outcome monotone_adaptation(Runs& runs) {
  bool ok = true;
  std::string text;
  for (const auto& [name, r] : runs.results) {
    const int m = r.invariants.count("monotone"), t = r.invariants.count("terminal");
    ok = ok && m == 0 && t == 0;
    text += name + ": " + std::to_string(m) + " monotonicity, " + std::to_string(t) +
            " terminal violations; ";
  }
  return {ok && !runs.results.empty(), text};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--out", out, "Directory for the closed-loop runs");
  app.add_option("--only", only, "Run just these criteria");
  CLI11_PARSE(app, argc, argv);

  Runs runs;
  runs.out = out;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"LQ gain, pendulum", gain_pendulum},
      {"LQ gain, cart-pole", gain_cartpole},
      {"terminal-set certification", certification},
      {"time-optimal horizon", time_optimal_horizon},
      {"closed-loop swing-up", [&] { return pendulum_swing_up(runs); }},
      {"cart-pole qto vs lq", [&] { return cartpole_comparison(runs); }},
      {"descent invariants", [&] { return descent_suite(runs); }},
      {"gradient oracle", gradient_oracle},
      {"numerical-core residuals", numerical_core},
      {"monotone adaptation", [&] { return monotone_adaptation(runs); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << " ["
              << std::fixed << std::setprecision(2) << secs << " s] " << std::defaultfloat
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
