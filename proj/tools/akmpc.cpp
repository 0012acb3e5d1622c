/// Command-line front end: data generation, offline training, closed-loop simulation, sweeps and reports.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>

#include "akmpc/harness.hpp"
#include "akmpc/offline.hpp"

namespace fs = std::filesystem;
using namespace akmpc;

namespace {

/// Exit codes: 0 success, 2 invalid configuration or input files, 3 runtime fault.
constexpr int kExitConfig = 2;
constexpr int kExitFault  = 3;

void require_file(const fs::path & p, const std::string & what)
{
  if (!fs::exists(p)) { throw ConfigError(what + " not found: " + p.string()); }
}

int cmd_generate(const std::string & system, const fs::path & config, const fs::path & out)
{
  const SystemId sys = system_from_string(system);
  Json j             = Json::object();
  if (!config.empty()) {
    require_file(config, "config");
    j = read_json_file(config);
    if (j.contains("system") && j.at("system").get<std::string>() != system) {
      throw ConfigError("config is for system '" + j.at("system").get<std::string>() + "', not '" + system + "'");
    }
  }
  const GenConfig cfg = gen_config_from_json(sys, j);
  const auto t0       = std::chrono::steady_clock::now();
  const auto ds       = generate_dataset(sys, cfg);
  write_dataset(ds, out);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "generated " << ds.trajectories.size() << " trajectories (" << ds.rejected << " resampled) for " << system
            << " into " << out.string() << " in " << s << " s\n";
  return 0;
}

int cmd_train(const fs::path & dataset, const fs::path & arch_file, const fs::path & out)
{
  require_file(dataset, "dataset");
  require_file(arch_file, "arch config");
  const auto ds = read_dataset(dataset);
  ArchConfig arch;
  TrainConfig tc;
  const Json aj = read_json_file(arch_file);
  if (aj.contains("system") && system_from_string(aj.at("system").get<std::string>()) != ds.system) {
    throw ConfigError("arch config is for '" + aj.at("system").get<std::string>() + "' but the dataset is "
                      + to_string(ds.system));
  }
  arch_from_json(aj, arch, tc);
  TrainReport rep;
  const auto t0      = std::chrono::steady_clock::now();
  KoopmanModel model = train_nominal(ds, arch, tc, &rep);
  const double s     = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_model(model, out);
  const auto eval = evaluate_model(model, ds, 10, true);
  Json summary    = {{"model", out.string()},
                     {"mode", to_string(model.mode)},
                     {"epochs_run", rep.train_loss.size()},
                     {"best_epoch", rep.best_epoch},
                     {"restart", rep.restart},
                     {"early_stopped", rep.early_stopped},
                     {"val_pred_init", rep.val_pred_init},
                     {"val_pred_final", rep.val_pred_final},
                     {"val_rmse_10_step_mean", eval.mean},
                     {"val_rmse_10_step_max", eval.max},
                     {"seconds", s}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

KoopmanModel load_experiment_model(ExperimentConfig & cfg, const fs::path & model_override)
{
  if (!model_override.empty()) { cfg.model_path = model_override.string(); }
  if (cfg.model_path.empty()) { throw ConfigError("no model file given (--model or 'model' in the config)"); }
  require_file(cfg.model_path, "model file");
  return load_model(cfg.model_path);
}

int cmd_simulate(const fs::path & config, const fs::path & model_file, const fs::path & out, bool adapt_log, bool solve_log)
{
  require_file(config, "config");
  ExperimentConfig cfg     = experiment_from_json(read_json_file(config), config.parent_path());
  const KoopmanModel model = load_experiment_model(cfg, model_file);
  fs::create_directories(out);
  const RunResult r = run_closed_loop(cfg, model);
  write_trace(r.trace, out / "trace.csv");
  if (adapt_log && cfg.mode == RunMode::adaptive) { write_adapt_log(r.adapt_log, out / "adaptation_log.csv"); }
  if (solve_log) { write_solve_log(r.solve_log, out / "solve_log.csv"); }
  write_timing_csv({{to_string(cfg.mode) + "-" + to_string(model.mode), timing_report({&r.trace})}}, out / "timing.csv");
  Json j = metrics_to_json(r.metrics);
  if (!r.fault.empty()) { j["fault"] = r.fault; }
  write_json_file(j, out / "metrics.json");
  write_json_file(experiment_to_json(cfg), out / "config_resolved.json");
  std::cout << j.dump(2) << "\n";
  return r.metrics.diverged ? kExitFault : 0;
}

int cmd_sweep(const fs::path & grid_file, const fs::path & model_file, const fs::path & out)
{
  require_file(grid_file, "grid");
  SweepGrid g              = sweep_grid_from_json(read_json_file(grid_file), grid_file.parent_path());
  const KoopmanModel model = load_experiment_model(g.base, model_file);
  if (out.has_parent_path()) { fs::create_directories(out.parent_path()); }
  const auto t0    = std::chrono::steady_clock::now();
  const auto cells = run_sweep(g, model);
  write_sweep_csv(g, cells, out);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  long failed    = 0;
  for (const auto & c : cells) { failed += c.status != "ok"; }
  std::cout << "sweep: " << cells.size() << " cells (" << failed << " not ok) written to " << out.string() << " in " << s
            << " s\n";
  return 0;
}

int cmd_report(const fs::path & trace_file, const fs::path & baseline, double rate)
{
  require_file(trace_file, "trace");
  const Trace tr = read_trace(trace_file);
  const auto m   = compute_metrics(tr, 1000.0 / rate);
  Json j         = metrics_to_json(m);
  const auto ts  = timing_report({&tr});
  j["timing_ms"] = {{"mean", ts.mean}, {"min", ts.min}, {"p25", ts.p25}, {"p50", ts.p50}, {"p75", ts.p75}, {"max", ts.max}};
  if (!baseline.empty()) {
    require_file(baseline, "baseline trace");
    const auto b            = compute_metrics(read_trace(baseline), 1000.0 / rate);
    j["improvement_pct"] = {{"rms_theta", improvement_pct(b.rms_theta, m.rms_theta)},
                            {"rms_thetadot", improvement_pct(b.rms_thetadot, m.rms_thetadot)},
                            {"e_theta", improvement_pct(b.e_theta, m.e_theta)},
                            {"e_thetadot", improvement_pct(b.e_thetadot, m.e_thetadot)},
                            {"mean_position_error", improvement_pct(b.mean_position_error, m.mean_position_error)}};
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"Adaptive Koopman MPC: data generation, training, closed-loop simulation and sweeps"};
  app.require_subcommand(1);

  std::string system;
  fs::path gen_config, gen_out;
  auto * gen = app.add_subcommand("generate-data", "Simulate a training dataset");
  gen->add_option("--system", system, "pendulum | manipulator | quadrotor")->required();
  gen->add_option("--config", gen_config, "generation config (JSON); defaults when omitted");
  gen->add_option("--out", gen_out, "output directory")->required();

  fs::path dataset, arch, model_out;
  auto * train = app.add_subcommand("train", "Train a nominal Koopman model");
  train->add_option("--dataset", dataset, "dataset directory")->required();
  train->add_option("--arch", arch, "architecture and training config (JSON)")->required();
  train->add_option("--out", model_out, "model file to write")->required();

  fs::path sim_config, sim_model, sim_out;
  bool adapt_log = false, solve_log = false;
  auto * sim = app.add_subcommand("simulate", "Run one closed-loop episode");
  sim->add_option("--config", sim_config, "experiment config (JSON)")->required();
  sim->add_option("--model", sim_model, "model file (overrides the config)");
  sim->add_option("--out", sim_out, "output directory")->required();
  sim->add_flag("--adapt-log", adapt_log, "also write adaptation_log.csv");
  sim->add_flag("--solve-log", solve_log, "also write solve_log.csv");

  fs::path grid, sweep_model, sweep_out;
  auto * sweep = app.add_subcommand("sweep", "Paired nominal/adaptive grid of episodes");
  sweep->add_option("--grid", grid, "sweep grid (JSON)")->required();
  sweep->add_option("--model", sweep_model, "model file (overrides the grid base)");
  sweep->add_option("--out", sweep_out, "output CSV")->required();

  fs::path trace, baseline;
  double rate = 100;
  auto * report = app.add_subcommand("report", "Metrics of a trace file");
  report->add_option("--trace", trace, "trace CSV")->required();
  report->add_option("--baseline", baseline, "baseline trace for percent improvement");
  report->add_option("--rate", rate, "loop rate (Hz) for the real-time flag")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) { return cmd_generate(system, gen_config, gen_out); }
    if (*train) { return cmd_train(dataset, arch, model_out); }
    if (*sim) { return cmd_simulate(sim_config, sim_model, sim_out, adapt_log, solve_log); }
    if (*sweep) { return cmd_sweep(grid, sweep_model, sweep_out); }
    if (*report) { return cmd_report(trace, baseline, rate); }
  } catch (const ConfigError & e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const SchemaError & e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError & e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Json::exception & e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFault;
  }
  return 0;
}
