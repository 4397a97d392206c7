// pafedfv command line: run, sweep, verify.
//
// Exit codes: 0 success, 1 invariant failure, 2 configuration error,
// 3 training divergence.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pafedfv/config.hpp"
#include "pafedfv/experiment.hpp"
#include "pafedfv/verify.hpp"

namespace {

using namespace pafedfv;

constexpr int kExitOk = 0;
constexpr int kExitInvariant = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

struct CommonOptions {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string async;
  std::string total_loss;
  std::string personalized;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "configuration file");
  cmd->add_option("--out", o.out, "output directory (overrides experiment.output_dir)");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--mode", o.mode, "solo | fedavg | pafedfv");
  cmd->add_option("--async", o.async, "on | off | auto");
  cmd->add_option("--total-loss", o.total_loss, "on | off | auto");
  cmd->add_option("--personalized", o.personalized, "on | off | auto");
  cmd->add_option("--set", o.sets, "section.key=value override (repeatable)");
}

ExperimentConfig load(const CommonOptions& o) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) {
    std::ifstream f(o.config_path);
    if (!f) throw ConfigError("cannot read " + o.config_path);
    std::stringstream ss;
    ss << f.rdbuf();
    cfg = parse_config(ss.str(), o.config_path).config;
  }
  for (const auto& s : o.sets) apply_override(cfg, s);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.mode.empty()) cfg.mode = parse_mode(o.mode);
  if (!o.async.empty()) cfg.async = parse_toggle(o.async);
  if (!o.total_loss.empty()) cfg.total_loss = parse_toggle(o.total_loss);
  if (!o.personalized.empty()) cfg.personalized = parse_toggle(o.personalized);
  if (!o.out.empty()) cfg.output_dir = o.out;
  cfg.validate();
  return cfg;
}

int cmd_run(const CommonOptions& o) {
  const auto cfg = load(o);
  const auto run = run_to_directory(cfg, cfg.output_dir);
  const auto& r = run.result;
  std::cout << r.run_id << ' ' << to_string(r.status) << ' ' << run.dir.string() << '\n';
  for (const auto& m : r.final_metrics()) {
    std::cout << "  client " << m.client_id << " eer=" << format_double(m.eer)
              << " tar@far0.01=" << format_double(m.tar_at_far01) << '\n';
  }
  if (r.status == RunStatus::Diverged) {
    std::cerr << "diverged: " << r.error << '\n';
    return kExitDiverged;
  }
  return kExitOk;
}

int cmd_sweep(const CommonOptions& o, const std::vector<std::string>& grid, const std::vector<std::size_t>& subsets) {
  const auto cfg = load(o);
  std::vector<SweepAxis> axes;
  for (const auto& g : grid) axes.push_back(parse_axis(g));
  const auto points = expand_grid(axes, subsets, cfg.clients);
  const auto out = run_sweep(cfg, points, cfg.output_dir);
  std::cout << out.summary_csv;
  return out.any_diverged ? kExitDiverged : kExitOk;
}

int cmd_verify() {
  bool all = true;
  for (const auto& check : verify_suite()) {
    CheckResult r;
    try {
      r = check();
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("threw: ") + e.what();
    }
    all = all && r.passed;
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
  }
  return all ? kExitOk : kExitInvariant;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pafedfv: personalized asynchronous federated verification simulator"};
  app.require_subcommand(1);

  CommonOptions run_opts;
  auto* run = app.add_subcommand("run", "run one experiment");
  add_common(run, run_opts);

  CommonOptions sweep_opts;
  std::vector<std::string> grid;
  std::vector<std::size_t> subsets;
  auto* sweep = app.add_subcommand("sweep", "run a parameter grid");
  add_common(sweep, sweep_opts);
  sweep->add_option("--grid", grid, "section.key=v1|v2|... (repeatable)");
  sweep->add_option("--subsets", subsets, "client-subset sizes to enumerate, e.g. 1,2,3,4")->delimiter(',');

  app.add_subcommand("verify", "run the invariant suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_opts);
    if (*sweep) return cmd_sweep(sweep_opts, grid, subsets);
    return cmd_verify();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvariant;
  }
}
