#pragma once

// Run configuration and the three command bodies (estimate, simulate,
// diagnose) behind tools/caltrans_cli.cpp. Kept in the library so the
// commands can be exercised from tests without spawning a process.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "caltrans/core.hpp"
#include "caltrans/csv.hpp"
#include "caltrans/error.hpp"
#include "caltrans/estimators.hpp"
#include "caltrans/glm.hpp"
#include "caltrans/inference.hpp"
#include "caltrans/rng.hpp"
#include "caltrans/sim.hpp"

namespace caltrans {

struct RunConfig {
  std::string mode = "estimate";  // estimate | simulate | diagnose
  std::optional<std::string> input;
  std::optional<std::string> target_input;
  std::vector<std::string> balance;     // e.g. "x1", "square(x2)"; empty = every covariate
  std::vector<std::string> estimators;  // empty = per-mode default
  std::string setting = "auto";         // auto | transport | fusion
  std::string sample = "study";         // sample for UNADJ / CBPS
  double level = 0.95;
  std::uint64_t seed = 20240601;
  int workers = 1;
  int reps = 100;
  std::string out = "caltrans_out";
  std::vector<std::string> scenarios{"A", "B", "C", "D", "E", "F", "G", "H"};
  std::vector<long> ns{500, 2000};
  long oracle_n = 1'000'000;
  std::string u_standardization = "empirical";  // empirical | analytic
  double noise_sd = 2.0;
  bool per_replicate = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = mode;
    j["input"] = input ? nlohmann::ordered_json(*input) : nlohmann::ordered_json(nullptr);
    j["target_input"] = target_input ? nlohmann::ordered_json(*target_input) : nlohmann::ordered_json(nullptr);
    j["balance"] = balance;
    j["estimators"] = resolved_estimator_names();
    j["setting"] = setting;
    j["sample"] = sample;
    j["level"] = level;
    j["seed"] = seed;
    j["workers"] = workers;
    j["reps"] = reps;
    j["out"] = out;
    j["scenarios"] = scenarios;
    j["ns"] = ns;
    j["oracle_n"] = oracle_n;
    j["u_standardization"] = u_standardization;
    j["noise_sd"] = noise_sd;
    j["per_replicate"] = per_replicate;
    j["rng"] = kRngAlgorithm;
    return j;
  }

  // Applies the keys present in `j`; any other key is a ConfigError.
  void merge_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(ErrorCode::kConfigError, "config must be a JSON object");
    try {
      for (const auto& [key, v] : j.items()) {
        if (key == "mode") mode = v.get<std::string>();
        else if (key == "input") input = v.is_null() ? std::nullopt : std::optional(v.get<std::string>());
        else if (key == "target_input") target_input = v.is_null() ? std::nullopt : std::optional(v.get<std::string>());
        else if (key == "balance") balance = v.get<std::vector<std::string>>();
        else if (key == "estimators") estimators = v.get<std::vector<std::string>>();
        else if (key == "setting") setting = v.get<std::string>();
        else if (key == "sample") sample = v.get<std::string>();
        else if (key == "level") level = v.get<double>();
        else if (key == "seed") seed = v.get<std::uint64_t>();
        else if (key == "workers") workers = v.get<int>();
        else if (key == "reps") reps = v.get<int>();
        else if (key == "out") out = v.get<std::string>();
        else if (key == "scenarios") scenarios = v.get<std::vector<std::string>>();
        else if (key == "ns") ns = v.get<std::vector<long>>();
        else if (key == "oracle_n") oracle_n = v.get<long>();
        else if (key == "u_standardization") u_standardization = v.get<std::string>();
        else if (key == "noise_sd") noise_sd = v.get<double>();
        else if (key == "per_replicate") per_replicate = v.get<bool>();
        else if (key == "rng") {
          if (v.get<std::string>() != kRngAlgorithm) fail(ErrorCode::kConfigError, "unsupported rng " + v.dump());
        } else {
          fail(ErrorCode::kConfigError, "unknown config key '" + key + "'");
        }
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kConfigError, std::string("bad config value: ") + e.what());
    }
  }

  std::vector<std::string> resolved_estimator_names() const {
    if (!estimators.empty()) return estimators;
    if (mode == "simulate") return {"TMLE", "AUG_T", "CAL_T", "AUG_F", "CAL_F"};
    if (setting == "fusion") return {"UNADJ", "CBPS", "CAL_T", "CAL_F"};
    return {"UNADJ", "CBPS", "CAL_T"};
  }

  std::vector<EstimatorKind> estimator_kinds() const {
    std::vector<EstimatorKind> out_kinds;
    for (const auto& name : resolved_estimator_names()) {
      const auto k = parse_estimator(name);
      if (!k) fail(ErrorCode::kConfigError, "unknown estimator '" + name + "'");
      out_kinds.push_back(*k);
    }
    return out_kinds;
  }

  Sample benchmark_sample() const {
    if (sample == "study") return Sample::kStudy;
    if (sample == "target") return Sample::kTarget;
    if (sample == "all") return Sample::kAll;
    fail(ErrorCode::kConfigError, "sample must be study, target or all");
  }

  void validate() const {
    if (mode != "estimate" && mode != "simulate" && mode != "diagnose") {
      fail(ErrorCode::kConfigError, "mode must be estimate, simulate or diagnose");
    }
    if (setting != "auto" && setting != "transport" && setting != "fusion") {
      fail(ErrorCode::kConfigError, "setting must be auto, transport or fusion");
    }
    if (u_standardization != "empirical" && u_standardization != "analytic") {
      fail(ErrorCode::kConfigError, "u_standardization must be empirical or analytic");
    }
    if (!(level > 0.0 && level < 1.0)) fail(ErrorCode::kConfigError, "level must lie in (0, 1)");
    if (workers < 1) fail(ErrorCode::kConfigError, "workers must be positive");
    if (reps < 1) fail(ErrorCode::kConfigError, "reps must be positive");
    if (out.empty()) fail(ErrorCode::kConfigError, "out must name a directory");
    estimator_kinds();
    benchmark_sample();
    if (mode != "simulate" && !input) fail(ErrorCode::kConfigError, "--input is required for " + mode);
    if (mode == "simulate") experiment();
  }

  ExperimentConfig experiment() const {
    ExperimentConfig e;
    e.scenarios.clear();
    for (const auto& s : scenarios) {
      const auto id = parse_scenario(s);
      if (!id) fail(ErrorCode::kConfigError, "unknown scenario '" + s + "'");
      e.scenarios.push_back(*id);
    }
    e.ns.assign(ns.begin(), ns.end());
    e.reps = reps;
    e.estimators = estimator_kinds();
    e.seed = seed;
    e.workers = workers;
    e.level = level;
    e.oracle_n = oracle_n;
    e.u_standardization =
        u_standardization == "analytic" ? UStandardization::kAnalytic : UStandardization::kEmpirical;
    e.noise_sd = noise_sd;
    e.keep_replicates = per_replicate;
    e.validate();
    return e;
  }
};

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfigError, path + ": " + e.what());
  }
  RunConfig cfg;
  cfg.merge_json(j);
  return cfg;
}

// "x1,square(x2)" style terms resolved against the covariate names.
inline BalanceSpec parse_balance_spec(const std::vector<std::string>& terms, const std::vector<std::string>& names) {
  if (terms.empty()) return BalanceSpec::identity(static_cast<Index>(names.size()));
  BalanceSpec spec;
  for (const auto& raw : terms) {
    std::string column = raw;
    Transform t = Transform::kIdentity;
    const auto open = raw.find('(');
    if (open != std::string::npos) {
      if (raw.back() != ')') fail(ErrorCode::kConfigError, "malformed balance term '" + raw + "'");
      const auto parsed = parse_transform(raw.substr(0, open));
      if (!parsed) fail(ErrorCode::kConfigError, "unknown transformation in '" + raw + "'");
      t = *parsed;
      column = raw.substr(open + 1, raw.size() - open - 2);
    }
    Index idx = -1;
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (names[j] == column) idx = static_cast<Index>(j);
    }
    if (idx < 0) fail(ErrorCode::kSchemaError, "balance term refers to unknown column '" + column + "'");
    spec.terms.push_back({idx, t});
  }
  return spec;
}

inline std::string format_sig6(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline std::string csv_number(double v) { return std::isnan(v) ? "NA" : format_double(v); }

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCode::kIoError, "write failed for " + path.string());
}

inline std::filesystem::path prepare_out(const RunConfig& cfg) {
  std::filesystem::path dir(cfg.out);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kIoError, "cannot create output directory " + cfg.out);
  write_text(dir / "run_config.json", cfg.to_json().dump(2) + "\n");
  return dir;
}

struct LoadedData {
  Dataset data;
  BalanceMatrix c;
  bool fusion = false;
};

inline LoadedData load_data(const RunConfig& cfg, std::ostream& err) {
  Dataset raw = read_dataset_csv(*cfg.input, cfg.target_input);
  bool fusion = raw.mode() == DataMode::kFusion;
  if (cfg.setting == "fusion" && !fusion) {
    fail(ErrorCode::kModeError, "fusion setting needs z and y for every target-sample unit");
  }
  if (cfg.setting == "transport") {
    bool any_target_outcome = false;
    for (Index i = 0; i < raw.n(); ++i) {
      if (raw.s()[i] == 0 && (raw.y().has(i) || raw.z().has(i))) any_target_outcome = true;
    }
    if (any_target_outcome) err << "warning: transport setting ignores target-sample z and y\n";
    fusion = false;
  }
  Dataset data = fusion ? raw : raw.as_transport();
  BalanceMatrix c = build_balance_matrix(data, parse_balance_spec(cfg.balance, data.covariate_names()));
  return {std::move(data), std::move(c), fusion};
}

// Sampling score on all units; propensity within each unit's own sample when
// the target treatment is observed, otherwise the study-sample model.
inline std::pair<VectorXd, VectorXd> fitted_scores(const Dataset& data, const BalanceMatrix& c, bool fusion) {
  const VectorXd rho = predict(fit_sampling_score(data, c), c.c);
  VectorXd pi = predict(fit_propensity_score(data, c, Sample::kStudy), c.c);
  if (fusion) {
    const VectorXd pi0 = predict(fit_propensity_score(data, c, Sample::kTarget), c.c);
    for (Index i = 0; i < data.n(); ++i) {
      if (data.s()[i] == 0) pi[i] = pi0[i];
    }
  }
  return {rho, pi};
}

}  // namespace detail

inline int cmd_estimate(const RunConfig& cfg, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  const auto kinds = cfg.estimator_kinds();
  const auto dir = detail::prepare_out(cfg);
  const auto loaded = detail::load_data(cfg, err);
  const Dataset& data = loaded.data;
  const BalanceMatrix& c = loaded.c;
  for (EstimatorKind k : kinds) {
    if (requires_fusion(k) && !loaded.fusion) {
      fail(ErrorCode::kModeError, std::string(estimator_name(k)) + " requires the fusion setting");
    }
  }
  const Sample bench = cfg.benchmark_sample();

  std::ostringstream est_csv;
  est_csv << "estimator,tau_hat,se,ci_low,ci_high,level,variance_method,ess,max_weight\n";
  std::vector<std::pair<std::string, VectorXd>> smd_after;
  std::vector<std::string> failures;
  for (EstimatorKind k : kinds) {
    try {
      const TauEstimate est = estimate(k, data, c, bench);
      const auto var = estimate_variance(est, data, c, cfg.level, bench);
      est_csv << estimator_name(k) << ',' << csv_number(est.tau_hat) << ',';
      if (var) {
        est_csv << csv_number(var->se) << ',' << csv_number(var->ci_low) << ',' << csv_number(var->ci_high) << ','
                << csv_number(cfg.level) << ',' << variance_method_name(var->method);
      } else {
        est_csv << "NA,NA,NA," << csv_number(cfg.level) << ",none";
      }
      if (est.diagnostics) {
        est_csv << ',' << csv_number(est.diagnostics->ess) << ',' << csv_number(est.diagnostics->max_weight);
        smd_after.emplace_back(estimator_name(k), est.diagnostics->smd_after);
      } else {
        est_csv << ",NA,NA";
      }
      est_csv << '\n';
      log << estimator_name(k) << ": tau_hat = " << format_sig6(est.tau_hat);
      if (var) log << "  " << cfg.level * 100 << "% CI (" << format_sig6(var->ci_low) << ", " << format_sig6(var->ci_high) << ")";
      log << '\n';
    } catch (const std::exception& e) {
      failures.push_back(std::string(estimator_name(k)) + ": " + e.what());
    }
  }
  detail::write_text(dir / "estimates.csv", est_csv.str());

  // Balance before and after weighting.
  const VectorXd smd_sample = standardized_mean_differences(c, data.s());
  std::ostringstream bal;
  bal << "term,smd_sample_before";
  for (const auto& [name, v] : smd_after) bal << ",smd_after_" << name;
  bal << '\n';
  for (Index j = 0; j < c.m(); ++j) {
    bal << c.names[static_cast<std::size_t>(j)] << ',' << csv_number(smd_sample[j]);
    for (const auto& [name, v] : smd_after) bal << ',' << csv_number(v[j]);
    bal << '\n';
  }
  detail::write_text(dir / "balance.csv", bal.str());

  const auto [rho, pi] = detail::fitted_scores(data, c, loaded.fusion);
  export_scores((dir / "scores.csv").string(), rho, pi, data);

  for (const auto& f : failures) err << "estimator failed: " << f << '\n';
  return failures.empty() ? 0 : 1;
}

inline int cmd_diagnose(const RunConfig& cfg, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  const auto dir = detail::prepare_out(cfg);
  const auto loaded = detail::load_data(cfg, err);
  const Dataset& data = loaded.data;
  const BalanceMatrix& c = loaded.c;
  const TargetMoments theta0 = target_moments(c, data.s());

  struct WeightSet {
    std::string name;
    VectorXd w;
    IndexList rows;
  };
  std::vector<WeightSet> sets;
  {
    const DualSolution q = solve_entropy_dual(assemble_sampling(c, data.s(), theta0));
    sets.push_back({"sampling", q.weights, data.units(Sample::kStudy)});
    const DualSolution p = solve_entropy_dual(assemble_transport(c, data.s(), data.z(), theta0));
    sets.push_back({"transport", p.weights, data.units(Sample::kStudy)});
    if (loaded.fusion) {
      const TauEstimate f = tau_cal_fusion(data, c, theta0);
      sets.push_back({"fusion", *f.weights_used, data.units(Sample::kAll)});
    }
  }

  // Sample contrast (study vs target, target unweighted unless fused) and
  // treatment contrast within the study sample.
  const IndexList study = data.units(Sample::kStudy);
  const VectorXi treat_study = detail::arm_groups(data, study);
  std::ostringstream smd;
  smd << "term,weights,smd_sample,smd_treatment\n";
  auto emit = [&](const std::string& name, const VectorXd& sample_smd, const VectorXd& treat_smd) {
    for (Index j = 0; j < c.m(); ++j) {
      smd << c.names[static_cast<std::size_t>(j)] << ',' << name << ',' << csv_number(sample_smd[j]) << ','
          << csv_number(treat_smd[j]) << '\n';
    }
  };
  emit("none", standardized_mean_differences(c, data.s()), standardized_mean_differences(c, treat_study));
  for (const auto& set : sets) {
    VectorXd w = set.w;
    if (set.name != "fusion") {
      for (Index i = 0; i < data.n(); ++i) {
        if (data.s()[i] == 0) w[i] = 1.0;
      }
    }
    const VectorXd treat = set.name == "sampling" ? VectorXd::Constant(c.m(), std::nan(""))
                                                  : standardized_mean_differences(c, treat_study, w);
    emit(set.name, standardized_mean_differences(c, data.s(), w), treat);
  }
  detail::write_text(dir / "smd.csv", smd.str());

  std::ostringstream ess;
  ess << "weights,ess,max_weight,n_weighted\n";
  for (const auto& set : sets) {
    VectorXd active(static_cast<Index>(set.rows.size()));
    for (std::size_t k = 0; k < set.rows.size(); ++k) active[static_cast<Index>(k)] = set.w[set.rows[k]];
    ess << set.name << ',' << csv_number(effective_sample_size(active)) << ',' << csv_number(active.maxCoeff())
        << ',' << set.rows.size() << '\n';
    log << set.name << " weights: ESS " << format_sig6(effective_sample_size(active)) << " of " << set.rows.size()
        << '\n';
  }
  detail::write_text(dir / "ess.csv", ess.str());

  const auto [rho, pi] = detail::fitted_scores(data, c, loaded.fusion);
  export_scores((dir / "scores.csv").string(), rho, pi, data);
  return 0;
}

inline std::string metrics_csv(const MetricsTable& table, const RunConfig& cfg) {
  std::ostringstream out;
  const auto echo = cfg.to_json();
  for (const auto& [key, v] : echo.items()) out << "# " << key << " = " << v.dump() << '\n';
  out << "scenario,n,estimator,tau0,mean_estimate,bias,rmse,variance,mean_se,coverage,n_ok,n_failed\n";
  for (const auto& r : table.rows) {
    out << scenario_letter(r.scenario) << ',' << r.n << ',' << estimator_name(r.kind) << ',' << csv_number(r.tau0)
        << ',' << csv_number(r.mean_estimate) << ',' << csv_number(r.bias) << ',' << csv_number(r.rmse) << ','
        << csv_number(r.variance) << ',' << csv_number(r.mean_se) << ',' << csv_number(r.coverage) << ','
        << r.n_ok << ',' << r.n_failed << '\n';
  }
  return out.str();
}

// Aligned text version with 6 significant digits.
inline std::string metrics_text(const MetricsTable& table) {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"scenario", "n", "estimator", "tau0", "bias", "rmse", "coverage", "failed"});
  for (const auto& r : table.rows) {
    cells.push_back({std::string(1, scenario_letter(r.scenario)), std::to_string(r.n), estimator_name(r.kind),
                     format_sig6(r.tau0), format_sig6(r.bias), format_sig6(r.rmse), format_sig6(r.coverage),
                     std::to_string(r.n_failed)});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t j = 0; j < row.size(); ++j) width[j] = std::max(width[j], row[j].size());
  }
  std::ostringstream out;
  for (const auto& row : cells) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j > 0) out << "  ";
      out << std::string(width[j] - row[j].size(), ' ') << row[j];
    }
    out << '\n';
  }
  return out.str();
}

inline std::string replicates_csv(const MetricsTable& table) {
  std::ostringstream out;
  out << "scenario,n,estimator,rep,seed,redraws,tau_hat,se,ci_low,ci_high,failed,error\n";
  for (const auto& r : table.replicates) {
    std::string error = r.error;
    for (char& ch : error) {
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    }
    out << scenario_letter(r.scenario) << ',' << r.n << ',' << estimator_name(r.kind) << ',' << r.rep << ','
        << r.seed << ',' << r.redraws << ',' << csv_number(r.tau_hat) << ',' << csv_number(r.se) << ','
        << csv_number(r.ci_low) << ',' << csv_number(r.ci_high) << ',' << (r.failed ? 1 : 0) << ',' << error
        << '\n';
  }
  return out.str();
}

inline int cmd_simulate(const RunConfig& cfg, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  const ExperimentConfig exp = cfg.experiment();
  const auto dir = detail::prepare_out(cfg);
  const MetricsTable table = run_experiment(exp);
  detail::write_text(dir / "metrics.csv", metrics_csv(table, cfg));
  detail::write_text(dir / "metrics.txt", metrics_text(table));
  if (cfg.per_replicate) detail::write_text(dir / "replicates.csv", replicates_csv(table));
  for (const auto& line : table.log) err << line;
  log << metrics_text(table);
  int failed = 0;
  for (const auto& r : table.rows) failed += r.n_failed;
  if (failed > 0) err << failed << " replicate estimates failed (see n_failed)\n";
  return 0;
}

inline int run_command(const RunConfig& cfg, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  cfg.validate();
  if (cfg.mode == "simulate") return cmd_simulate(cfg, log, err);
  if (cfg.mode == "diagnose") return cmd_diagnose(cfg, log, err);
  return cmd_estimate(cfg, log, err);
}

}  // namespace caltrans
