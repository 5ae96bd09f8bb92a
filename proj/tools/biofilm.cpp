// Command-line front end: simulate, generate-data, build-rom, rom-error,
// calibrate, run-plan, validate.

#include "biofilm/config.hpp"
#include "biofilm/dataset.hpp"
#include "biofilm/inference.hpp"
#include "biofilm/pipeline.hpp"
#include "biofilm/rom.hpp"
#include "biofilm/solver.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace biofilm;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Options {
  std::string command;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 1;
  double cov = -1.0;
  int samples = 1000;
};

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

json vec(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string resolve_out(const Options& opt, const std::string& configured) {
  return opt.out.empty() ? configured : opt.out;
}

RunConfig load_config(const Options& opt, json& summary) {
  RunConfig cfg = load_run_config(opt.config);
  if (opt.seed) {
    cfg.tmcmc.seed = *opt.seed;
    summary["seed_override"] = *opt.seed;
  }
  cfg.tmcmc.threads = opt.threads;
  return cfg;
}

void write_text(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

int cmd_simulate(const Options& opt, json& s, std::string& out_dir) {
  const RunConfig cfg = load_config(opt, s);
  out_dir = resolve_out(opt, cfg.output_dir);
  fs::create_directories(out_dir);
  Timer timer;
  const Trajectory traj = simulate(cfg.sim, cfg.params, cfg.env);
  const double elapsed = timer.seconds();
  write_trajectory_csv(traj, (fs::path(out_dir) / "trajectory.csv").string());

  double constraint = 0.0;
  const Matrix& x = traj.packed();
  const int n = traj.species();
  for (int k = 0; k <= traj.n_steps(); ++k)
    constraint = std::max(constraint, std::abs(x.col(k).head(n).sum() + x(2 * n, k) - 1.0));
  const State last = traj.state(traj.n_steps());
  s["results"] = {{"rows", traj.n_steps() + 1},
                  {"max_constraint_residual", constraint},
                  {"final_phi", vec(last.phi)},
                  {"final_psi", vec(last.psi)},
                  {"final_phi_bar", vec(last.phi_bar())},
                  {"final_phi_empty", last.phi_empty},
                  {"final_gamma", last.gamma}};
  s["timings"]["simulate_s"] = elapsed;
  s["artifacts"] = {"trajectory.csv"};
  return 0;
}

int cmd_generate(const Options& opt, json& s, std::string& out_dir) {
  RunConfig cfg = load_config(opt, s);
  if (opt.seed) cfg.data.seed = *opt.seed;
  out_dir = resolve_out(opt, cfg.output_dir);
  fs::create_directories(out_dir);
  Timer timer;
  GenerationStats stats;
  cfg.data.path.clear();
  const Dataset data = obtain_dataset(cfg, &stats);
  write_dataset(data, (fs::path(out_dir) / "data.csv").string());
  s["results"] = {{"points", data.points.size()}, {"steps", data.steps()}, {"seed", cfg.data.seed}};
  s["counters"]["redraws"] = stats.redraws;
  s["timings"]["generate_s"] = timer.seconds();
  s["artifacts"] = {"data.csv"};
  return 0;
}

UncertainInput uncertain_for(const RunConfig& cfg, double cov) {
  return aleatory_input(cfg.params, cfg.aleatory_indices(), cov);
}

int cmd_build_rom(const Options& opt, json& s, std::string& out_dir) {
  const RunConfig cfg = load_config(opt, s);
  out_dir = resolve_out(opt, cfg.output_dir);
  fs::create_directories(out_dir);
  const double cov = opt.cov >= 0.0 ? opt.cov : cfg.cov;
  const UncertainInput u = uncertain_for(cfg, cov);
  Timer timer;
  const RomCoefficients rom = build_rom(cfg.sim, cfg.params, cfg.env, u);
  const double build = timer.seconds();
  write_rom(rom, (fs::path(out_dir) / "rom.json").string());

  const MomentSeries m = moments(rom, u, {MomentMethod::Analytic, 0, 1});
  Vector max_cov = Vector::Zero(rom.species());
  for (int l = 0; l < rom.species(); ++l)
    for (Eigen::Index c = 0; c < m.mean.cols(); ++c)
      if (m.mean(l, c) > 0.0) max_cov(l) = std::max(max_cov(l), std::sqrt(m.var(l, c)) / m.mean(l, c));
  s["results"] = {{"uncertain_parameters", u.size()},
                  {"trajectory_solves", u.size() + 1},
                  {"max_first_order_iterations", rom.max_first_order_iterations},
                  {"max_output_cov", vec(max_cov)},
                  {"cov", cov}};
  s["timings"]["build_rom_s"] = build;
  s["artifacts"] = {"rom.json"};
  return 0;
}

int cmd_rom_error(const Options& opt, json& s, std::string& out_dir) {
  const RunConfig cfg = load_config(opt, s);
  out_dir = resolve_out(opt, cfg.output_dir);
  fs::create_directories(out_dir);
  const double cov = opt.cov >= 0.0 ? opt.cov : cfg.cov;
  if (opt.samples < 1) throw ConfigError("/--samples", "must be >= 1");
  const std::uint64_t seed = opt.seed.value_or(1);
  const UncertainInput u = uncertain_for(cfg, cov);
  Timer timer;
  const RomCoefficients rom = build_rom(cfg.sim, cfg.params, cfg.env, u);
  const double build = timer.seconds();
  const RomErrorReport report = rom_error(rom, cfg.sim, cfg.params, cfg.env, u, opt.samples, seed, opt.threads);
  std::ofstream csv(fs::path(out_dir) / "rom_error.csv");
  csv << "k,t,error\n" << std::setprecision(17);
  for (Eigen::Index k = 0; k < report.per_step.size(); ++k)
    csv << k << ',' << static_cast<double>(k) * cfg.sim.dt << ',' << report.per_step(k) << '\n';
  s["results"] = {{"cov", cov},
                  {"samples", opt.samples},
                  {"seed", seed},
                  {"total_error", report.total},
                  {"max_error", report.max},
                  {"draws_used", report.used},
                  {"draws_skipped", report.skipped}};
  s["timings"]["build_rom_s"] = build;
  s["timings"]["rom_error_s"] = timer.seconds() - build;
  s["artifacts"] = {"rom_error.csv"};
  return 0;
}

int cmd_calibrate(const Options& opt, json& s, std::string& out_dir) {
  const RunConfig cfg = load_config(opt, s);
  out_dir = resolve_out(opt, cfg.output_dir);
  fs::create_directories(out_dir);
  Timer timer;
  GenerationStats gen;
  const Dataset data = obtain_dataset(cfg, &gen);
  write_dataset(data, (fs::path(out_dir) / "data.csv").string());
  const double t_data = timer.seconds();
  const PosteriorModel model(make_problem(cfg, data));
  StageOutcome outcome = run_calibration(model, cfg.tmcmc, cfg.cov);
  outcome.name = "calibrate";
  write_stage_outputs(outcome, out_dir);
  if (model.failures() > 0) s["first_forward_failure"] = model.first_failure();
  s["results"] = stage_summary(outcome);
  s["counters"] = {{"log_likelihood_evaluations", outcome.evaluations},
                   {"rom_builds", outcome.rom_builds},
                   {"forward_failures", outcome.failures},
                   {"variance_floor_hits", outcome.floor_hits},
                   {"data_redraws", gen.redraws}};
  s["timings"]["data_s"] = t_data;
  s["timings"]["tmcmc_s"] = outcome.seconds;
  s["artifacts"] = {"data.csv", "samples.csv", "posterior.json", "map.json", "report.json", "pbox/"};
  return 0;
}

int plan_exit(const PlanResult& result, json& s) {
  json stages = json::array();
  int code = 0;
  for (const auto& st : result.stages) {
    json j = stage_summary(st);
    j["directory"] = st.directory;
    stages.push_back(j);
    if (st.status == "failed") {
      code = 3;
      s["error"] = "stage " + st.name + ": " + st.error;
    }
  }
  s["results"]["stages"] = stages;
  s["results"]["plan_hash"] = result.plan_hash;
  s["results"]["directory"] = result.directory;
  s["results"]["complete"] = result.complete;
  s["results"]["assembled"] = {{"A", json::array()}, {"B", vec(result.assembled.b)}};
  for (Eigen::Index i = 0; i < result.assembled.a.rows(); ++i)
    s["results"]["assembled"]["A"].push_back(vec(result.assembled.a.row(i).transpose()));
  return code;
}

StagePlan load_plan_with_overrides(const Options& opt, json& s) {
  StagePlan plan = load_plan(opt.config);
  for (auto& st : plan.stages) {
    if (opt.seed) st.config.tmcmc.seed = *opt.seed;
    st.config.tmcmc.threads = opt.threads;
  }
  if (opt.seed) s["seed_override"] = *opt.seed;
  return plan;
}

int cmd_run_plan(const Options& opt, json& s, std::string& out_dir) {
  const StagePlan plan = load_plan_with_overrides(opt, s);
  out_dir = resolve_out(opt, "runs");
  Timer timer;
  const PlanResult result = run_plan(plan, {out_dir, opt.threads, true});
  s["timings"]["run_plan_s"] = timer.seconds();
  return plan_exit(result, s);
}

int cmd_validate(const Options& opt, json& s, std::string& out_dir) {
  const StagePlan plan = load_plan_with_overrides(opt, s);
  if (!plan.validation) throw ConfigError("/validation", "plan has no validation section");
  out_dir = resolve_out(opt, "runs");
  Timer timer;
  const RunOptions ro{out_dir, opt.threads, true};
  const PlanResult result = run_plan(plan, ro);
  s["timings"]["run_plan_s"] = timer.seconds();
  const int code = plan_exit(result, s);
  if (code != 0) return code;
  if (!result.complete) throw Error("plan did not complete; validation needs every stage");
  const double t0 = timer.seconds();
  const ValidationReport report = validate_plan(plan, result, ro);
  s["timings"]["validate_s"] = timer.seconds() - t0;
  json v = to_json(report);
  v.erase("points");
  s["results"]["validation"] = v;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian calibration of multi-species biofilm models with a time-separated stochastic ROM"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "Run config (or plan file for run-plan/validate)")->required();
    sub->add_option("--seed", opt.seed, "Override the sampler seed (data seed for generate-data, draw seed for rom-error)");
    sub->add_option("--out", opt.out, "Output directory (default: output.dir, or runs/ for plans)");
    sub->add_option("--threads", opt.threads, "Worker threads; results do not depend on this")->check(CLI::PositiveNumber);
  };
  struct Entry {
    const char* name;
    const char* help;
  };
  const Entry entries[] = {
      {"simulate", "Deterministic forward solve at the model means; writes trajectory.csv"},
      {"generate-data", "Synthetic dataset from independent realizations; writes data.csv"},
      {"build-rom", "Zeroth and first-order trajectories; writes rom.json"},
      {"rom-error", "Surrogate vs full-model error over parameter draws; writes rom_error.csv"},
      {"calibrate", "TMCMC calibration of the prior parameters; writes samples.csv and diagnostics"},
      {"run-plan", "Multi-stage calibration plan with MAP fixing and a stage cache"},
      {"validate", "Runs a plan (cached) and its posterior predictive validation"},
  };
  for (const auto& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    add_common(sub);
    if (std::string(e.name) == "rom-error" || std::string(e.name) == "build-rom")
      sub->add_option("--cov", opt.cov, "Coefficient of variation of every aleatory parameter (default: config)");
    if (std::string(e.name) == "rom-error")
      sub->add_option("--samples", opt.samples, "Number of parameter draws (default 1000)");
    sub->callback([&opt, sub] { opt.command = sub->get_name(); });
  }

  std::string parse_error;
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (app.exit(e) == 0) return 0;
    parse_error = e.what();
  }

  json s;
  s["command"] = opt.command;
  s["config"] = opt.config;
  s["threads"] = opt.threads;
  s["started"] = utc_now();
  s["versions"] = {{"biofilm", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                   {"compiler", __VERSION__}};
  s["timings"] = json::object();
  std::string out_dir = opt.out;
  Timer total;
  int code = 0;
  try {
    if (!parse_error.empty()) throw ConfigError("", "command line: " + parse_error);
    if (opt.command == "simulate") code = cmd_simulate(opt, s, out_dir);
    else if (opt.command == "generate-data") code = cmd_generate(opt, s, out_dir);
    else if (opt.command == "build-rom") code = cmd_build_rom(opt, s, out_dir);
    else if (opt.command == "rom-error") code = cmd_rom_error(opt, s, out_dir);
    else if (opt.command == "calibrate") code = cmd_calibrate(opt, s, out_dir);
    else if (opt.command == "run-plan") code = cmd_run_plan(opt, s, out_dir);
    else if (opt.command == "validate") code = cmd_validate(opt, s, out_dir);
  } catch (const ConfigError& e) {
    code = 2;
    s["error"] = e.what();
    s["error_path"] = e.path();
  } catch (const InvalidArgument& e) {
    code = 2;
    s["error"] = e.what();
  } catch (const NumericalError& e) {
    code = 3;
    s["error"] = e.what();
  } catch (const StageStall& e) {
    code = 3;
    s["error"] = e.what();
    s["beta_reached"] = e.beta_reached();
  } catch (const DegenerateVariance& e) {
    code = 3;
    s["error"] = e.what();
  } catch (const SingularCovariance& e) {
    code = 3;
    s["error"] = e.what();
  } catch (const std::exception& e) {
    code = 1;
    s["error"] = e.what();
  }
  s["exit_code"] = code;
  s["status"] = code == 0 ? "ok" : "error";
  s["timings"]["total_s"] = total.seconds();
  if (out_dir.empty()) out_dir = "out";

  try {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "summary.json", s);
  } catch (const std::exception& e) {
    std::cerr << "biofilm: cannot write summary.json: " << e.what() << '\n';
    if (code == 0) code = 1;
  }
  if (code != 0) std::cerr << "biofilm " << opt.command << ": " << s.value("error", std::string("failed")) << '\n';
  return code;
}
