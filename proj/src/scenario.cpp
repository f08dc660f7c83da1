#include "qtorhc/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "qtorhc/errors.hpp"

namespace qtorhc {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(PlantKind plant) {
  return plant == PlantKind::pendulum ? "pendulum" : "cartpole";
}

std::string to_string(GuessKind guess) { return guess == GuessKind::lq ? "lq" : "swing_up"; }

ControlModel make_plant(PlantKind plant) {
  return plant == PlantKind::pendulum ? pendulum_model() : cartpole_model();
}

std::vector<std::string> ScenarioConfig::problems() const {
  std::vector<std::string> out;
  const int n = plant == PlantKind::pendulum ? 2 : 4;
  if (x0.size() != n) out.push_back("x0: expected " + std::to_string(n) + " entries");
  if (!x0.allFinite()) out.push_back("x0: entries must be finite");
  if (B_box.size() != n) out.push_back("B_box: expected " + std::to_string(n) + " entries");
  if (W.rows() != n || W.cols() != n) out.push_back("W: expected an n x n matrix");
  if (R.rows() != 1 || R.cols() != 1) out.push_back("R: expected a 1 x 1 matrix");
  if (alpha && !(*alpha > 0.0)) out.push_back("alpha: must be > 0");
  if (!(k > 1.0)) out.push_back("k: must be > 1");
  if (!(settle_threshold > 0.0)) out.push_back("settle_threshold: must be > 0");
  if (!(catch_level > 0.0)) out.push_back("catch_level: must be > 0");
  if (restarts < 0) out.push_back("restarts: must be >= 0");
  if (max_iterations < 0) out.push_back("max_iterations: must be >= 0");
  if (!(tol_g > 0.0)) out.push_back("tol_g: must be > 0");
  if (output_dir.empty()) out.push_back("output_dir: must not be empty");

  RhcConfig rc;
  rc.delta = delta;
  rc.T_min = T_min;
  rc.xi = xi;
  rc.gamma = gamma;
  rc.rho0 = rho0;
  rc.eps0 = eps0;
  rc.eps_seed = eps_seed;
  rc.B_box = B_box.size() ? B_box : Vector::Ones(1);
  rc.alpha = alpha.value_or(1.0);
  rc.max_steps = max_steps;
  rc.convergence_eps = convergence_eps;
  rc.h = h.value_or(0.0);
  rc.segments = N;
  rc.substeps = substeps;
  try {
    rc.validate();
  } catch (const ConfigError& e) {
    for (const auto& p : e.problems()) out.push_back(p);
  }
  return out;
}

namespace {

// Collects every field error instead of stopping at the first one.
class Reader {
 public:
  explicit Reader(const json& j) : j_(j) {
    if (!j.is_object()) problems_.push_back("config: top level must be an object");
  }

  template <class T>
  void get(const char* key, T& out, bool required = false) {
    if (!j_.is_object() || !j_.contains(key) || j_[key].is_null()) {
      if (required) problems_.push_back(std::string(key) + ": missing");
      return;
    }
    try {
      out = j_[key].get<T>();
    } catch (const json::exception&) {
      problems_.push_back(std::string(key) + ": wrong type");
    }
  }

  void optional_number(const char* key, std::optional<double>& out) {
    if (!j_.is_object() || !j_.contains(key) || j_[key].is_null()) return;
    if (!j_[key].is_number()) {
      problems_.push_back(std::string(key) + ": wrong type (number or null)");
      return;
    }
    out = j_[key].get<double>();
  }

  void vector(const char* key, Vector& out, bool required = false) {
    std::vector<double> v;
    const auto before = problems_.size();
    get(key, v, required);
    if (problems_.size() == before && !v.empty()) {
      out = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
  }

  // Square matrix given as rows, or as a flat list meaning its diagonal.
  void matrix(const char* key, Matrix& out) {
    if (!j_.is_object() || !j_.contains(key) || j_[key].is_null()) return;
    const json& v = j_[key];
    try {
      if (v.is_array() && !v.empty() && v[0].is_array()) {
        const auto rows = v.get<std::vector<std::vector<double>>>();
        out.resize(static_cast<Eigen::Index>(rows.size()),
                   static_cast<Eigen::Index>(rows[0].size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (rows[r].size() != rows[0].size()) {
            problems_.push_back(std::string(key) + ": ragged rows");
            return;
          }
          for (std::size_t c = 0; c < rows[r].size(); ++c) out(r, c) = rows[r][c];
        }
      } else if (v.is_array()) {
        const auto d = v.get<std::vector<double>>();
        out = Eigen::Map<const Vector>(d.data(), static_cast<Eigen::Index>(d.size())).asDiagonal();
      } else if (v.is_number()) {
        out = Matrix::Constant(1, 1, v.get<double>());
      } else {
        problems_.push_back(std::string(key) + ": wrong type");
      }
    } catch (const json::exception&) {
      problems_.push_back(std::string(key) + ": wrong type");
    }
  }

  void note(std::string p) { problems_.push_back(std::move(p)); }
  std::vector<std::string>& problems() { return problems_; }

 private:
  const json& j_;
  std::vector<std::string> problems_;
};

json matrix_json(const Matrix& M) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
    rows.push_back(row);
  }
  return rows;
}

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::string num(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ScenarioConfig parse_config(const json& j) {
  ScenarioConfig c;
  Reader r(j);
  std::string plant, mode, guess;
  r.get("plant", plant, true);
  if (plant == "pendulum") {
    c.plant = PlantKind::pendulum;
  } else if (plant == "cartpole") {
    c.plant = PlantKind::cartpole;
  } else if (!plant.empty()) {
    r.note("plant: must be 'pendulum' or 'cartpole'");
  }
  // Plant-specific defaults, overridden by any field present in the file.
  const int n = c.plant == PlantKind::pendulum ? 2 : 4;
  c.W = Matrix::Identity(n, n);
  c.R = Matrix::Identity(1, 1);
  c.B_box = Vector::Constant(n, 0.1);

  r.get("mode", mode);
  if (!mode.empty()) {
    try {
      c.mode = parse_run_mode(mode);
    } catch (const ConfigError&) {
      r.note("mode: must be one of qto, time_optimal, lq");
    }
  }
  r.vector("x0", c.x0, true);
  r.get("delta", c.delta);
  r.get("T_min", c.T_min);
  r.get("xi", c.xi);
  r.get("gamma", c.gamma);
  r.get("rho0", c.rho0);
  r.get("eps0", c.eps0);
  r.get("eps_seed", c.eps_seed);
  r.optional_number("alpha", c.alpha);
  r.get("k", c.k);
  r.get("N", c.N);
  r.get("substeps", c.substeps);
  r.optional_number("h", c.h);
  r.get("max_steps", c.max_steps);
  r.get("convergence_eps", c.convergence_eps);
  r.get("settle_threshold", c.settle_threshold);
  r.get("seed", c.seed);
  r.vector("B_box", c.B_box);
  r.matrix("W", c.W);
  r.matrix("R", c.R);
  r.get("initial_guess", guess);
  if (guess == "swing_up") {
    c.guess = GuessKind::swing_up;
  } else if (!guess.empty() && guess != "lq") {
    r.note("initial_guess: must be 'lq' or 'swing_up'");
  }
  r.get("catch_level", c.catch_level);
  r.get("restarts", c.restarts);
  r.get("max_iterations", c.max_iterations);
  r.get("tol_g", c.tol_g);
  r.get("output_dir", c.output_dir);

  // Range checks run even after parse errors; a field already reported
  // is not reported twice.
  auto& problems = r.problems();
  for (auto& p : c.problems()) {
    const std::string field = p.substr(0, p.find(':'));
    const bool seen = std::any_of(problems.begin(), problems.end(), [&](const std::string& q) {
      return q.compare(0, field.size() + 1, field + ":") == 0;
    });
    if (!seen) problems.push_back(std::move(p));
  }
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

ScenarioConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file " + path.string()});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return parse_config(j);
}

json to_json(const ScenarioConfig& c) {
  json j;
  j["plant"] = to_string(c.plant);
  j["mode"] = to_string(c.mode);
  j["x0"] = vector_json(c.x0);
  j["delta"] = c.delta;
  j["T_min"] = c.T_min;
  j["xi"] = c.xi;
  j["gamma"] = c.gamma;
  j["rho0"] = c.rho0;
  j["eps0"] = c.eps0;
  j["eps_seed"] = c.eps_seed;
  j["alpha"] = c.alpha ? json(*c.alpha) : json(nullptr);
  j["k"] = c.k;
  j["N"] = c.N;
  j["substeps"] = c.substeps;
  j["h"] = c.h ? json(*c.h) : json(nullptr);
  j["max_steps"] = c.max_steps;
  j["convergence_eps"] = c.convergence_eps;
  j["settle_threshold"] = c.settle_threshold;
  j["seed"] = c.seed;
  j["B_box"] = vector_json(c.B_box);
  j["W"] = matrix_json(c.W);
  j["R"] = matrix_json(c.R);
  j["initial_guess"] = to_string(c.guess);
  j["catch_level"] = c.catch_level;
  j["restarts"] = c.restarts;
  j["max_iterations"] = c.max_iterations;
  j["tol_g"] = c.tol_g;
  j["output_dir"] = c.output_dir;
  return j;
}

bool operator==(const ScenarioConfig& a, const ScenarioConfig& b) {
  return to_json(a) == to_json(b);
}

ScenarioSetup build_setup(const ScenarioConfig& c) {
  if (auto p = c.problems(); !p.empty()) throw ConfigError(std::move(p));
  ControlModel model = make_plant(c.plant);
  SynthesisOptions so;
  so.k = c.k;
  so.alpha_override = c.alpha;
  so.certify.seed = c.seed;
  TerminalSynthesis syn = synthesize_terminal(model, c.W, c.R, so);

  RhcSetup rhc{model, syn.terminal, c.W, c.R};
  RhcConfig& rc = rhc.config;
  rc.delta = c.delta;
  rc.T_min = c.T_min;
  rc.xi = c.xi;
  rc.gamma = c.gamma;
  rc.rho0 = c.rho0;
  rc.eps0 = c.eps0;
  rc.eps_seed = c.eps_seed;
  rc.B_box = c.B_box;
  rc.alpha = syn.terminal.alpha;
  rc.c = syn.terminal.c;
  rc.max_steps = c.max_steps;
  rc.convergence_eps = c.convergence_eps;
  rc.h = c.h.value_or(0.0);
  rc.segments = c.N;
  rc.substeps = c.substeps;
  rc.validate();
  rhc.solver.max_iterations = c.max_iterations;
  rhc.solver.tol_g = c.tol_g;
  if (c.guess == GuessKind::swing_up) {
    if (c.plant != PlantKind::pendulum) {
      throw ConfigError({"initial_guess: swing_up is only defined for the pendulum"});
    }
    rhc.guess_policy = pendulum_swing_up_policy(syn.care.K, syn.terminal.H, c.catch_level);
  }
  rhc.cold_restarts = c.restarts;
  rhc.seed = c.seed;
  return {std::move(syn), std::move(rhc)};
}

namespace {

std::string trace_header(int n, int m) {
  std::string h = "kind,t";
  for (int i = 0; i < n; ++i) h += ",x" + std::to_string(i + 1);
  for (int i = 0; i < m; ++i) h += ",u" + std::to_string(i + 1);
  h += ",V,T_bar,epsilon,rho,in_B,int_L_head,int_L_tail,terminal_q\n";
  return h;
}

void append_row(std::string& out, const char* kind, double t, const Vector& x, const Vector& u,
                const StepRecord* s) {
  out += kind;
  out += ',' + num(t);
  for (Eigen::Index i = 0; i < x.size(); ++i) out += ',' + num(x[i]);
  for (Eigen::Index i = 0; i < u.size(); ++i) out += ',' + num(u[i]);
  if (s) {
    out += ',' + num(s->V) + ',' + num(s->T_bar) + ',' + num(s->epsilon) + ',' + num(s->rho) +
           ',' + (s->in_B ? "1" : "0") + ',' + num(s->integral_L_head) + ',' +
           num(s->integral_L_tail) + ',' + num(s->terminal_q);
  } else {
    out += ",,,,,,,,";
  }
  out += '\n';
}

std::string render_trace(const RunHistory& h, int n, int m) {
  std::string out = trace_header(n, m);
  std::size_t k = 0;
  for (const StepRecord& s : h.steps) {
    append_row(out, "step", s.t, s.x, s.u, &s);
    while (k < h.dense_t.size() && h.dense_t[k] < s.t + 1e-12) ++k;
    // Dense samples strictly inside this step, then its right end point.
    while (k < h.dense_t.size() && (&s == &h.steps.back() || h.dense_t[k] <= s.t + 1e-9 ||
                                    h.dense_t[k] < (&s + 1)->t - 1e-12)) {
      append_row(out, "dense", h.dense_t[k], h.dense_x[k], h.dense_u[k], nullptr);
      ++k;
    }
  }
  return out;
}

json invariant_json(const InvariantReport& rep) {
  json list = json::array();
  for (std::size_t i = 0; i < rep.violations.size() && i < 50; ++i) {
    const auto& v = rep.violations[i];
    list.push_back({{"check", v.check}, {"step", v.step}, {"detail", v.detail}});
  }
  return {{"violations", rep.violations.size()},
          {"descent_checked", rep.descent_checked},
          {"frozen_descent_checked", rep.frozen_descent_checked},
          {"details", list}};
}

}  // namespace

ScenarioResult run_scenario(const ScenarioConfig& config, const fs::path& out_dir) {
  ScenarioSetup setup = build_setup(config);
  const int n = setup.rhc.model.state_dim();
  const int m = setup.rhc.model.control_dim();
  ScenarioResult res;
  res.history = run_closed_loop(config.x0, setup.rhc, config.mode);
  res.invariants = check_invariants(res.history.steps, config.mode, setup.rhc.config,
                                    setup.rhc.terminal);
  res.settling_time = settling_time(res.history, config.settle_threshold);
  res.control_effort = control_effort(res.history, config.R);
  res.exit_code = (res.history.converged && res.invariants.ok()) ? 0 : 2;

  const auto& syn = setup.synthesis;
  json summary;
  summary["plant"] = to_string(config.plant);
  summary["mode"] = to_string(config.mode);
  summary["x0"] = vector_json(config.x0);
  summary["converged"] = res.history.converged;
  summary["steps"] = res.history.steps.size();
  summary["final_time"] = res.history.final_time;
  summary["settle_threshold"] = config.settle_threshold;
  summary["settling_time"] = res.settling_time ? json(*res.settling_time) : json(nullptr);
  summary["final_state"] = res.history.dense_x.empty() ? json::array()
                                                       : vector_json(res.history.dense_x.back());
  summary["final_epsilon"] = res.history.final_state.epsilon;
  summary["final_rho"] = res.history.final_state.rho;
  summary["control_effort"] = res.control_effort;
  summary["K"] = matrix_json(syn.terminal.K);
  summary["H"] = matrix_json(syn.terminal.H);
  summary["alpha"] = syn.terminal.alpha;
  summary["k"] = syn.terminal.k;
  summary["c"] = syn.terminal.c;
  summary["certification"] = {{"passed", syn.certification.passed},
                              {"decrease_ok", syn.certification.decrease_ok},
                              {"invariance_ok", syn.certification.invariance_ok},
                              {"constraint_ok", syn.certification.constraint_ok},
                              {"alpha_u", syn.certification.alpha_u}};
  summary["care_relative_residual"] = syn.care.relative_residual;
  summary["invariants"] = invariant_json(res.invariants);
  summary["invariant_violations"] = res.invariants.violations.size();
  summary["exit_code"] = res.exit_code;
  res.summary = summary;

  fs::create_directories(out_dir);
  write_text(out_dir / "trace.csv", render_trace(res.history, n, m));
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  json meta = {{"config", to_json(config)}, {"seed", config.seed}, {"format", 1}};
  write_text(out_dir / "meta.json", meta.dump(2) + "\n");
  return res;
}

std::vector<StepRecord> read_trace_steps(const fs::path& trace_csv, int n, int m) {
  std::ifstream in(trace_csv);
  if (!in) throw Error("cannot read " + trace_csv.string());
  std::string line;
  std::getline(in, line);
  std::vector<StepRecord> steps;
  auto parse = [](const std::string& s) {
    return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
  };
  while (std::getline(in, line)) {
    if (line.rfind("step,", 0) != 0) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    while (static_cast<int>(f.size()) < 2 + n + m + 8) f.emplace_back();
    StepRecord s;
    std::size_t i = 1;
    s.t = parse(f[i++]);
    s.x.resize(n);
    for (int a = 0; a < n; ++a) s.x[a] = parse(f[i++]);
    s.u.resize(m);
    for (int a = 0; a < m; ++a) s.u[a] = parse(f[i++]);
    s.V = parse(f[i++]);
    s.T_bar = parse(f[i++]);
    s.epsilon = parse(f[i++]);
    s.rho = parse(f[i++]);
    s.in_B = f[i++] == "1";
    s.integral_L_head = parse(f[i++]);
    s.integral_L_tail = parse(f[i++]);
    s.terminal_q = parse(f[i++]);
    steps.push_back(std::move(s));
  }
  return steps;
}

json AuditResult::to_json() const {
  json j = invariant_json(report);
  j["steps"] = steps;
  j["ok"] = report.ok();
  return j;
}

AuditResult audit_run(const fs::path& run_dir) {
  const json meta = read_json(run_dir / "meta.json");
  const json summary = read_json(run_dir / "summary.json");
  const ScenarioConfig config = parse_config(meta.at("config"));
  const ControlModel model = make_plant(config.plant);

  TerminalData terminal;
  Reader r(summary);
  r.matrix("K", terminal.K);
  r.matrix("H", terminal.H);
  r.get("alpha", terminal.alpha, true);
  r.get("k", terminal.k, true);
  r.get("c", terminal.c, true);
  if (!r.problems().empty()) throw ConfigError(r.problems());

  RhcConfig rc;
  rc.delta = config.delta;
  rc.T_min = config.T_min;
  rc.xi = config.xi;
  rc.B_box = config.B_box;
  rc.alpha = terminal.alpha;
  rc.c = terminal.c;

  AuditResult out;
  const auto steps =
      read_trace_steps(run_dir / "trace.csv", model.state_dim(), model.control_dim());
  out.steps = static_cast<int>(steps.size());
  out.report = check_invariants(steps, config.mode, rc, terminal);
  return out;
}

json compare_runs(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.size() < 2) throw Error("compare: need at least two run directories");
  struct Run {
    fs::path dir;
    ScenarioConfig config;
    json summary;
    std::vector<StepRecord> steps;
  };
  std::vector<Run> runs;
  for (const auto& d : run_dirs) {
    Run r{d, parse_config(read_json(d / "meta.json").at("config")), read_json(d / "summary.json"),
          {}};
    const ControlModel model = make_plant(r.config.plant);
    r.steps = read_trace_steps(d / "trace.csv", model.state_dim(), model.control_dim());
    runs.push_back(std::move(r));
  }
  const Run& ref = runs.front();
  for (const Run& r : runs) {
    if (r.config.plant != ref.config.plant) {
      throw Error("compare: " + r.dir.string() + " uses a different plant");
    }
    if (r.config.x0.size() != ref.config.x0.size() || r.config.x0 != ref.config.x0) {
      throw Error("compare: " + r.dir.string() + " starts from a different initial state");
    }
  }

  auto settle = [](const json& s) {
    return s.at("settling_time").is_null() ? std::numeric_limits<double>::infinity()
                                           : s.at("settling_time").get<double>();
  };
  json list = json::array();
  for (const Run& r : runs) {
    json entry;
    entry["run"] = r.dir.string();
    entry["mode"] = to_string(r.config.mode);
    entry["settling_time"] = r.summary.at("settling_time");
    entry["control_effort"] = r.summary.at("control_effort");
    entry["final_time"] = r.summary.at("final_time");
    entry["converged"] = r.summary.at("converged");
    entry["delta_settling_time"] =
        std::isfinite(settle(r.summary)) && std::isfinite(settle(ref.summary))
            ? json(settle(r.summary) - settle(ref.summary))
            : json(nullptr);
    entry["delta_control_effort"] = r.summary.at("control_effort").get<double>() -
                                    ref.summary.at("control_effort").get<double>();
    json V = json::array();
    for (const auto& s : r.steps) {
      V.push_back({{"t", s.t}, {"V", std::isfinite(s.V) ? json(s.V) : json(nullptr)}});
    }
    entry["V_trace"] = V;
    list.push_back(entry);
  }
  std::vector<std::size_t> order(runs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return settle(runs[a].summary) < settle(runs[b].summary);
  });
  json ranking = json::array();
  for (std::size_t i : order) ranking.push_back(runs[i].dir.string());

  json report = {{"plant", to_string(ref.config.plant)},
                 {"x0", vector_json(ref.config.x0)},
                 {"runs", list},
                 {"ranking_by_settling_time", ranking}};

  const int n = static_cast<int>(ref.config.x0.size());
  std::string csv = "run,mode,t";
  for (int i = 0; i < n; ++i) csv += ",x" + std::to_string(i + 1);
  csv += ",u1,V\n";
  for (const Run& r : runs) {
    for (const auto& s : r.steps) {
      csv += r.dir.string() + ',' + to_string(r.config.mode) + ',' + num(s.t);
      for (int i = 0; i < n; ++i) csv += ',' + num(s.x[i]);
      csv += ',' + num(s.u[0]) + ',' + num(s.V) + '\n';
    }
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "comparison.json", report.dump(2) + "\n");
  write_text(out_dir / "comparison.csv", csv);
  return report;
}

}  // namespace qtorhc
