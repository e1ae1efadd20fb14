// caltrans: estimate, simulate or diagnose from the command line.
//
//   caltrans --mode estimate --input cohort.csv --estimators UNADJ,CBPS,CAL_T --out results
//   caltrans --mode simulate --reps 1000 --scenarios A,D --ns 500,2000 --workers 4
//   caltrans --mode diagnose --input cohort.csv --balance "x1,square(x2)"
//
// A --config JSON file supplies defaults; explicit flags override it.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "caltrans/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Calibration weighting for transported and fused treatment effects"};
  app.set_version_flag("--version", "caltrans 0.1.0");

  caltrans::RunConfig flags;
  std::string config_path;
  std::string balance_arg;
  std::string estimators_arg;
  std::string scenarios_arg;
  std::string ns_arg;
  std::string input_arg;
  std::string target_arg;

  app.add_option("--config", config_path, "JSON config file (unknown keys are rejected)");
  auto* o_mode = app.add_option("--mode", flags.mode, "estimate | simulate | diagnose")
                     ->check(CLI::IsMember({"estimate", "simulate", "diagnose"}));
  auto* o_input = app.add_option("--input", input_arg, "dataset CSV (columns s, z, y, covariates)");
  auto* o_target = app.add_option("--target-input", target_arg, "optional target-sample CSV (s implied)");
  auto* o_est = app.add_option("--estimators", estimators_arg,
                               "comma list of UNADJ,GCOMP,TMLE,AUG_T,AUG_F,CAL_T,CAL_F,CBPS");
  auto* o_balance = app.add_option("--balance", balance_arg, "balance terms, e.g. \"x1,square(x2),log(x3)\"");
  auto* o_setting = app.add_option("--setting", flags.setting, "auto | transport | fusion");
  auto* o_sample = app.add_option("--sample", flags.sample, "sample for UNADJ and CBPS: study | target | all");
  auto* o_level = app.add_option("--level", flags.level, "confidence level");
  auto* o_seed = app.add_option("--seed", flags.seed, "master seed");
  auto* o_workers = app.add_option("--workers", flags.workers, "simulation worker threads");
  auto* o_reps = app.add_option("--reps", flags.reps, "replicates per scenario and n");
  auto* o_out = app.add_option("--out", flags.out, "output directory");
  auto* o_scen = app.add_option("--scenarios", scenarios_arg, "comma list of scenarios A-H");
  auto* o_ns = app.add_option("--ns", ns_arg, "comma list of sample sizes");
  auto* o_oracle = app.add_option("--oracle-n", flags.oracle_n, "draws for the tau_0 oracle (>= 1e6)");
  auto* o_ustd = app.add_option("--u-standardization", flags.u_standardization, "empirical | analytic");
  auto* o_noise = app.add_option("--noise-sd", flags.noise_sd, "outcome noise SD in simulations");
  auto* o_perrep = app.add_flag("--per-replicate", flags.per_replicate, "also write replicates.csv");

  CLI11_PARSE(app, argc, argv);

  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    int depth = 0;
    for (char ch : s) {
      if (ch == '(') ++depth;
      if (ch == ')') --depth;
      if (ch == ',' && depth == 0) {
        if (!cur.empty()) parts.push_back(cur);
        cur.clear();
      } else if (ch != ' ') {
        cur.push_back(ch);
      }
    }
    if (!cur.empty()) parts.push_back(cur);
    return parts;
  };

  try {
    caltrans::RunConfig cfg = config_path.empty() ? caltrans::RunConfig{} : caltrans::load_config_file(config_path);
    if (o_mode->count()) cfg.mode = flags.mode;
    if (o_input->count()) cfg.input = input_arg;
    if (o_target->count()) cfg.target_input = target_arg;
    if (o_est->count()) cfg.estimators = split(estimators_arg);
    if (o_balance->count()) cfg.balance = split(balance_arg);
    if (o_setting->count()) cfg.setting = flags.setting;
    if (o_sample->count()) cfg.sample = flags.sample;
    if (o_level->count()) cfg.level = flags.level;
    if (o_seed->count()) cfg.seed = flags.seed;
    if (o_workers->count()) cfg.workers = flags.workers;
    if (o_reps->count()) cfg.reps = flags.reps;
    if (o_out->count()) cfg.out = flags.out;
    if (o_scen->count()) cfg.scenarios = split(scenarios_arg);
    if (o_ns->count()) {
      cfg.ns.clear();
      for (const auto& v : split(ns_arg)) cfg.ns.push_back(std::stol(v));
    }
    if (o_oracle->count()) cfg.oracle_n = flags.oracle_n;
    if (o_ustd->count()) cfg.u_standardization = flags.u_standardization;
    if (o_noise->count()) cfg.noise_sd = flags.noise_sd;
    if (o_perrep->count()) cfg.per_replicate = flags.per_replicate;
    return caltrans::run_command(cfg);
  } catch (const caltrans::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
