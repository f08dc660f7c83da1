#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "qtorhc/rhc.hpp"
#include "qtorhc/synthesis.hpp"

namespace qtorhc {

enum class PlantKind { pendulum, cartpole };

std::string to_string(PlantKind plant);

/// How the first solve of a run is seeded.
enum class GuessKind { lq, swing_up };

std::string to_string(GuessKind guess);

/// One closed-loop experiment. The JSON schema is documented in
/// docs/config.md; every field except plant and x0 has a default.
struct ScenarioConfig {
  PlantKind plant = PlantKind::pendulum;
  RunMode mode = RunMode::qto;
  Vector x0;
  double delta = 0.05;
  double T_min = 0.5;
  double xi = 0.1;
  double gamma = 2.0;
  double rho0 = 100.0;
  double eps0 = 0.0;
  double eps_seed = 0.01;
  /// Terminal level; certified from scratch when absent.
  std::optional<double> alpha;
  double k = 1.1;
  int N = 32;
  int substeps = 4;
  /// Plant step; absent means delta / 10.
  std::optional<double> h;
  int max_steps = 1000;
  double convergence_eps = 1e-3;
  double settle_threshold = 0.01;
  unsigned long long seed = 1;
  Vector B_box;
  Matrix W;
  Matrix R;
  GuessKind guess = GuessKind::lq;
  /// Level x'Hx below which the swing-up guess hands over to Kx.
  double catch_level = 2000.0;
  int restarts = 0;
  int max_iterations = 500;
  double tol_g = 1e-5;
  std::string output_dir = "runs/out";

  /// Every violated constraint, empty when the config is usable.
  std::vector<std::string> problems() const;
};

/// Parses and validates; throws ConfigError naming every bad field.
ScenarioConfig parse_config(const nlohmann::json& j);
ScenarioConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ScenarioConfig& config);
bool operator==(const ScenarioConfig& a, const ScenarioConfig& b);

ControlModel make_plant(PlantKind plant);

/// Synthesis plus the closed-loop setup derived from a config.
struct ScenarioSetup {
  TerminalSynthesis synthesis;
  RhcSetup rhc;
};

ScenarioSetup build_setup(const ScenarioConfig& config);

struct ScenarioResult {
  RunHistory history;
  InvariantReport invariants;
  std::optional<double> settling_time;
  double control_effort = 0.0;
  nlohmann::json summary;
  /// 0 converged with no invariant violations, 2 otherwise.
  int exit_code = 0;
};

/// Runs the scenario and writes trace.csv, summary.json and meta.json into
/// out_dir (created if missing).
ScenarioResult run_scenario(const ScenarioConfig& config, const std::filesystem::path& out_dir);

/// Writes comparison.json and comparison.csv into out_dir. Throws Error
/// when the runs differ in plant or initial state.
nlohmann::json compare_runs(const std::vector<std::filesystem::path>& run_dirs,
                            const std::filesystem::path& out_dir);

struct AuditResult {
  InvariantReport report;
  int steps = 0;
  nlohmann::json to_json() const;
};

/// Re-checks the invariants of a finished run from its files alone.
AuditResult audit_run(const std::filesystem::path& run_dir);

/// Reads a trace written by run_scenario back into step records.
std::vector<StepRecord> read_trace_steps(const std::filesystem::path& trace_csv, int n, int m);

}  // namespace qtorhc
