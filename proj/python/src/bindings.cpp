#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "qtorhc/errors.hpp"
#include "qtorhc/ocp.hpp"
#include "qtorhc/scenario.hpp"
#include "qtorhc/synthesis.hpp"

namespace py = pybind11;
using namespace qtorhc;
using nlohmann::json;

namespace {

py::object to_python(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_python(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

ControlModel plant(const std::string& name) {
  if (name == "pendulum") return pendulum_model();
  if (name == "cartpole") return cartpole_model();
  throw ConfigError({"plant: must be 'pendulum' or 'cartpole' (got '" + name + "')"});
}

ScenarioConfig config_from(const py::object& source) {
  if (py::isinstance<py::dict>(source)) return parse_config(from_python(source));
  return load_config(py::str(source).cast<std::string>());
}

py::dict synthesis_dict(const TerminalSynthesis& s) {
  py::dict d;
  d["K"] = s.terminal.K;
  d["H"] = s.terminal.H;
  d["P"] = s.care.P;
  d["alpha"] = s.terminal.alpha;
  d["k"] = s.terminal.k;
  d["care_relative_residual"] = s.care.relative_residual;
  d["lyapunov_residual"] = s.lyapunov_residual;
  d["closed_loop_abscissa"] = s.closed_loop_abscissa;
  d["certified"] = s.certification.passed;
  d["alpha_u"] = s.certification.alpha_u;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Quasi time optimal receding horizon control";

  // Translators run newest first, so the subclass is registered last.
  const auto& error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());

  m.def("dynamics",
        [](const std::string& name, const Vector& x, const Vector& u) {
          return eval_dynamics(plant(name), x, u);
        },
        py::arg("plant"), py::arg("x"), py::arg("u"), "f(x, u) for 'pendulum' or 'cartpole'.");

  m.def("jacobians",
        [](const std::string& name, const Vector& x, const Vector& u) {
          const Jacobians J = eval_jacobians(plant(name), x, u);
          return py::make_tuple(J.fx, J.fu);
        },
        py::arg("plant"), py::arg("x"), py::arg("u"), "(df/dx, df/du).");

  m.def("solve_care",
        [](const Matrix& A, const Matrix& B, const Matrix& W, const Matrix& R) {
          const CareSolution s = solve_care(A, B, W, R);
          return py::make_tuple(s.P, s.K, s.relative_residual);
        },
        py::arg("A"), py::arg("B"), py::arg("W"), py::arg("R"),
        "Returns (P, K, relative residual) with u = K x.");

  m.def("solve_lyapunov", &solve_lyapunov, py::arg("A_K"), py::arg("Q"),
        "H with A_K' H + H A_K = -Q.");

  m.def("synthesize",
        [](const std::string& name, const Matrix& W, const Matrix& R, std::optional<double> alpha,
           double k) {
          SynthesisOptions o;
          o.k = k;
          o.alpha_override = alpha;
          return synthesis_dict(synthesize_terminal(plant(name), W, R, o));
        },
        py::arg("plant"), py::arg("W"), py::arg("R"), py::arg("alpha") = py::none(),
        py::arg("k") = 1.1, "Terminal gain, Lyapunov matrix and certified level.");

  m.def("certify",
        [](const std::string& name, const Matrix& K, const Matrix& H, const Matrix& W,
           const Matrix& R, double k, double alpha, int n_samples) {
          CertifyOptions o;
          o.n_samples = n_samples;
          const CertificationReport r = certify_alpha(plant(name), K, H, W, R, k, alpha, o);
          py::dict d;
          d["passed"] = r.passed;
          d["decrease_ok"] = r.decrease_ok;
          d["invariance_ok"] = r.invariance_ok;
          d["constraint_ok"] = r.constraint_ok;
          d["alpha_u"] = r.alpha_u;
          d["worst_decrease"] = r.worst_decrease;
          return d;
        },
        py::arg("plant"), py::arg("K"), py::arg("H"), py::arg("W"), py::arg("R"), py::arg("k"),
        py::arg("alpha"), py::arg("n_samples") = 1000);

  m.def("load_config", [](const py::object& source) { return to_python(to_json(config_from(source))); },
        py::arg("source"), "Validated config (path or dict) with every default filled in.");

  m.def("first_solve",
        [](const py::object& source, std::optional<int> segments) {
          ScenarioConfig c = config_from(source);
          if (segments) c.N = *segments;
          const ScenarioSetup s = build_setup(c);
          const AdaptationState start{c.mode == RunMode::qto ? c.eps0 : 0.0, c.rho0, 0};
          std::optional<StepOutcome> step;
          {
            py::gil_scoped_release release;
            step = rhc_step(s.rhc, c.mode, 0.0, c.x0, start, std::nullopt);
          }
          const StepOutcome& o = *step;
          py::dict d;
          d["T"] = o.record.T_bar;
          d["V"] = o.record.V;
          d["rho"] = o.record.rho;
          d["controls"] = Matrix(o.record.applied->values());
          return d;
        },
        py::arg("source"), py::arg("segments") = py::none(),
        "Optimal control problem at the config's initial state, as the loop's first step solves it.");

  m.def("run",
        [](const py::object& source, const std::string& out_dir) {
          const ScenarioConfig c = config_from(source);
          ScenarioResult r;
          {
            py::gil_scoped_release release;
            r = run_scenario(c, out_dir);
          }
          return to_python(r.summary);
        },
        py::arg("source"), py::arg("out_dir"), "Closed-loop run; returns summary.json as a dict.");

  m.def("audit", [](const std::string& run_dir) { return to_python(audit_run(run_dir).to_json()); },
        py::arg("run_dir"));

  m.def("compare",
        [](const std::vector<std::filesystem::path>& runs, const std::string& out_dir) {
          return to_python(compare_runs(runs, out_dir));
        },
        py::arg("run_dirs"), py::arg("out_dir"));
}
