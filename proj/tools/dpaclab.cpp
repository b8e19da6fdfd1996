// dpaclab: run, list and validate the control experiments.
//
//   dpaclab run <scenario> --config <file> [--out <dir>] [--seed <u64>]
//               [--workers <n>] [--plots] [--dump-trajectories]
//   dpaclab list [--json]
//   dpaclab validate --config <file>
//
// Exit codes: 0 success, 1 error, 2 the run finished but a bound check failed.

#include "dpaclab/experiments.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitBoundFailed = 2;

struct Invocation {
  std::string experiment;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool plots = false;
  bool dump_trajectories = false;
  bool list_json = false;
};

std::string default_out_dir(const dpaclab::ExperimentConfig& cfg) {
  if (const char* env = std::getenv("DPACLAB_OUT"); env && *env) {
    return (std::filesystem::path(env) / cfg.name).string();
  }
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return (std::filesystem::path("out") / cfg.name).string();
}

int cmd_run(const Invocation& inv) {
  dpaclab::ExperimentConfig cfg = dpaclab::load_config(inv.config_path);
  if (cfg.name != inv.experiment) {
    throw dpaclab::ConfigError("name", "config is for '" + cfg.name + "' but scenario '" + inv.experiment + "' was requested");
  }
  if (inv.seed) {
    // A single explicit seed replaces any seed list.
    cfg.seed = *inv.seed;
    cfg.seeds.clear();
  }
  dpaclab::validate_config(cfg);
  const std::filesystem::path out = inv.out_dir.empty() ? default_out_dir(cfg) : inv.out_dir;
  std::filesystem::create_directories(out);

  dpaclab::RunContext ctx;
  ctx.workers = inv.workers.value_or(1);
  if (inv.dump_trajectories) ctx.dump_dir = out / "trajectories";

  const dpaclab::ExperimentReport rep = dpaclab::run_scenario(cfg, ctx);
  dpaclab::write_report_outputs(rep, out, inv.plots);

  int failed = 0;
  for (const auto& c : rep.bound_checks) {
    if (!c.satisfied && !c.skipped) {
      ++failed;
      std::cerr << "bound failed: " << c.name << " lhs=" << dpaclab::format_double(c.lhs, 9)
                << " rhs=" << dpaclab::format_double(c.rhs, 9) << " slack=" << dpaclab::format_double(c.slack, 9) << "\n";
    }
  }
  std::cout << "wrote " << (out / "report.json").string() << " (" << rep.scalars.size() << " scalars, " << rep.series.size()
            << " series, " << rep.bound_checks.size() << " checks)\n";
  return failed ? kExitBoundFailed : kExitOk;
}

int cmd_list(const Invocation& inv) {
  const auto& reg = dpaclab::scenario_registry();
  if (inv.list_json) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& s : reg) arr.push_back({{"name", s.name}, {"description", s.description}});
    std::cout << arr.dump(2) << "\n";
    return kExitOk;
  }
  for (const auto& s : reg) std::cout << s.name << "  " << s.description << "\n";
  return kExitOk;
}

int cmd_validate(const Invocation& inv) {
  const dpaclab::ExperimentConfig cfg = dpaclab::load_config(inv.config_path);
  std::cout << inv.config_path << ": valid " << cfg.name << " config\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dpaclab: score-orthogonal control experiments"};
  app.require_subcommand(1);
  Invocation inv;

  auto* run = app.add_subcommand("run", "run one scenario and write its report");
  run->add_option("scenario", inv.experiment, "scenario name (see `dpaclab list`)")->required();
  run->add_option("--config", inv.config_path, "JSON config file")->required();
  run->add_option("--out", inv.out_dir, "output directory (default $DPACLAB_OUT/<scenario>)");
  run->add_option("--seed", inv.seed, "override the base seed");
  run->add_option("--workers", inv.workers, "worker threads")->check(CLI::PositiveNumber);
  run->add_flag("--plots", inv.plots, "also write an SVG per series");
  run->add_flag("--dump-trajectories", inv.dump_trajectories, "write per-trajectory CSVs");

  auto* list = app.add_subcommand("list", "list registered scenarios");
  list->add_flag("--json", inv.list_json, "print a JSON array");

  auto* validate = app.add_subcommand("validate", "check a config without simulating");
  validate->add_option("--config", inv.config_path, "JSON config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitError;
  }

  try {
    if (*run) return cmd_run(inv);
    if (*list) return cmd_list(inv);
    if (*validate) return cmd_validate(inv);
  } catch (const dpaclab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
