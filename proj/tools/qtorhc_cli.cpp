// Scenario runner: synth | run | compare | audit.
#include <filesystem>
#include <future>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qtorhc/errors.hpp"
#include "qtorhc/scenario.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qtorhc;

namespace {

constexpr int kExitError = 1;

ScenarioConfig resolve(const std::string& path, const std::string& mode,
                       const std::optional<unsigned long long>& seed) {
  ScenarioConfig c = load_config(path);
  if (!mode.empty()) c.mode = parse_run_mode(mode);
  if (seed) c.seed = *seed;
  return c;
}

json matrix_json(const Matrix& M) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
    rows.push_back(row);
  }
  return rows;
}

int cmd_synth(const std::string& config_path) {
  const ScenarioConfig c = load_config(config_path);
  const ScenarioSetup s = build_setup(c);
  const auto& syn = s.synthesis;
  json out = {{"plant", to_string(c.plant)},
              {"K", matrix_json(syn.terminal.K)},
              {"H", matrix_json(syn.terminal.H)},
              {"alpha", syn.terminal.alpha},
              {"k", syn.terminal.k},
              {"care_relative_residual", syn.care.relative_residual},
              {"lyapunov_residual", syn.lyapunov_residual},
              {"closed_loop_abscissa", syn.closed_loop_abscissa},
              {"certified", syn.certification.passed},
              {"alpha_u", syn.certification.alpha_u}};
  std::cout << out.dump(2) << "\n";
  return syn.certification.passed ? 0 : 2;
}

int run_one(const ScenarioConfig& c, const fs::path& out_dir) {
  const ScenarioResult r = run_scenario(c, out_dir);
  std::cerr << out_dir.string() << ": " << (r.history.converged ? "converged" : "not converged")
            << " after " << r.history.steps.size() << " steps";
  if (r.settling_time) std::cerr << ", settling time " << *r.settling_time;
  std::cerr << ", final epsilon " << r.history.final_state.epsilon << "\n";
  if (!r.invariants.ok()) {
    std::cerr << "INVARIANT VIOLATIONS: " << r.invariants.violations.size() << "\n";
    for (const auto& v : r.invariants.violations) {
      std::cerr << "  " << v.check << " at step " << v.step << ": " << v.detail << "\n";
    }
  }
  return r.exit_code;
}

int cmd_run(const std::vector<std::string>& configs, const std::string& out,
            const std::string& mode, const std::optional<unsigned long long>& seed, bool batch) {
  if (!batch) {
    if (configs.size() != 1) throw Error("run: pass exactly one --config (or use --batch)");
    const ScenarioConfig c = resolve(configs[0], mode, seed);
    return run_one(c, out.empty() ? fs::path(c.output_dir) : fs::path(out));
  }
  // Each config writes to its own directory: <out>/<config stem> or its output_dir.
  std::vector<std::future<int>> jobs;
  for (const auto& path : configs) {
    const ScenarioConfig c = resolve(path, mode, seed);
    const fs::path dir = out.empty() ? fs::path(c.output_dir) : fs::path(out) / fs::path(path).stem();
    jobs.push_back(std::async(std::launch::async, [c, dir]() {
      try {
        return run_one(c, dir);
      } catch (const std::exception& e) {
        std::cerr << dir.string() << ": error: " << e.what() << "\n";
        return kExitError;
      }
    }));
  }
  int worst = 0;
  for (auto& j : jobs) {
    const int code = j.get();
    if (code == kExitError || worst == 0) worst = std::max(worst, code);
  }
  return worst;
}

int cmd_compare(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  const json report = compare_runs(dirs, out.empty() ? fs::path(".") : fs::path(out));
  for (const auto& r : report.at("runs")) {
    std::cout << r.at("run").get<std::string>() << " (" << r.at("mode").get<std::string>()
              << "): settling time " << r.at("settling_time").dump() << ", control effort "
              << r.at("control_effort").dump() << "\n";
  }
  return 0;
}

int cmd_audit(const std::string& run_dir) {
  const AuditResult a = audit_run(run_dir);
  std::cout << a.to_json().dump(2) << "\n";
  return a.report.ok() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quasi time optimal receding horizon control toolkit"};
  app.require_subcommand(1);

  std::string config;
  auto* synth = app.add_subcommand("synth", "Print K, H and the certified alpha");
  synth->add_option("--config", config, "Scenario JSON")->required()->check(CLI::ExistingFile);

  std::vector<std::string> run_configs;
  std::string out;
  std::string mode;
  unsigned long long seed_value = 0;
  bool batch = false;
  auto* run = app.add_subcommand("run", "Run a scenario and write trace.csv, summary.json, meta.json");
  run->add_option("--config", run_configs, "Scenario JSON (repeatable with --batch)")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory (default: the config's output_dir)");
  run->add_option("--mode", mode, "Override the mode: qto, time_optimal or lq");
  auto* seed_opt = run->add_option("--seed", seed_value, "Override the seed");
  run->add_flag("--batch", batch, "Run all configs concurrently, one directory each");

  std::vector<std::string> compare_dirs;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "Compare finished runs");
  compare->add_option("runs", compare_dirs, "Run directories")->required()->expected(2, -1);
  compare->add_option("--out", compare_out, "Where to write comparison.json/.csv");

  std::string audit_dir;
  auto* audit = app.add_subcommand("audit", "Re-verify the invariants of a finished run");
  audit->add_option("run", audit_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(config);
    if (*run) {
      std::optional<unsigned long long> seed;
      if (*seed_opt) seed = seed_value;
      return cmd_run(run_configs, out, mode, seed, batch);
    }
    if (*compare) return cmd_compare(compare_dirs, compare_out);
    if (*audit) return cmd_audit(audit_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error:\n" << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
