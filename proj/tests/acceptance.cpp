// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include "biofilm/config.hpp"
#include "biofilm/inference.hpp"
#include "biofilm/pipeline.hpp"
#include "biofilm/rom.hpp"
#include "biofilm/solver.hpp"
#include "biofilm/tmcmc.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace biofilm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kSource = BIOFILM_SOURCE_DIR;
const std::string kWork = std::string(BIOFILM_BINARY_DIR) + "/acceptance_work";
constexpr int kPosteriorSamples = 1000;

int threads() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string list(const Vector& v, const char* f = "%.4g") {
  std::string s = "[";
  for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(f, v(i));
  return s + "]";
}

Vector column_sd(const Matrix& x) {
  const Vector mean = x.colwise().mean().transpose();
  const Matrix c = x.rowwise() - mean.transpose();
  return (c.colwise().squaredNorm().transpose() / (x.rows() - 1.0)).cwiseSqrt();
}

Vector theta_star() {
  Vector t(5);
  t << 1.0, 0.1, 1.0, 1.0, 2.0;
  return t;
}

RunConfig case_one(const std::string& file) {
  RunConfig cfg = load_run_config(kSource + "/configs/" + file);
  cfg.tmcmc.n_samples = kPosteriorSamples;
  cfg.tmcmc.threads = threads();
  return cfg;
}

struct Calibration {
  PosteriorResult posterior;
  double seconds = 0.0;
  long evaluations = 0;
  long rom_builds = 0;
};

Calibration calibrate_case(const std::string& file) {
  const RunConfig cfg = case_one(file);
  const auto start = std::chrono::steady_clock::now();
  PosteriorModel model(make_problem(cfg, obtain_dataset(cfg)));
  Calibration c;
  c.posterior = calibrate(model, cfg.tmcmc);
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  c.evaluations = model.evaluations();
  c.rom_builds = model.rom_builds();
  return c;
}

const Calibration& run_cached(const std::string& file) {
  static std::map<std::string, Calibration> cache;
  auto it = cache.find(file);
  if (it == cache.end()) it = cache.emplace(file, calibrate_case(file)).first;
  return it->second;
}

double elapsed_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

Outcome rom_accuracy() {
  const auto start = std::chrono::steady_clock::now();
  const RunConfig cfg = case_one("caseI.json");
  auto error_at = [&](double cov) {
    const auto u = UncertainInput::all(cfg.params, cov);
    const auto rom = build_rom(cfg.sim, cfg.params, cfg.env, u);
    return rom_error(rom, cfg.sim, cfg.params, cfg.env, u, 1000, 1, threads());
  };
  const auto high = error_at(0.02);
  const auto low = error_at(0.005);
  const double seconds = elapsed_since(start);
  auto within3 = [](double v, double ref) { return v >= ref / 3.0 && v <= ref * 3.0; };
  Outcome o;
  o.pass = within3(high.total, 5.1e-3) && within3(low.total, 2.2e-4) && within3(high.max, 5.4e-2) && seconds < 120.0;
  o.detail = "total(2%)=" + fmt("%.3g", high.total) + " [ref 5.1e-3], total(0.5%)=" + fmt("%.3g", low.total) +
             " [ref 2.2e-4], max(2%)=" + fmt("%.3g", high.max) + " [ref 5.4e-2], " + fmt("%.1f", seconds) + " s";
  return o;
}

Outcome output_variability() {
  const RunConfig cfg = case_one("caseI.json");
  const double ref[2][2] = {{0.0261, 0.5440}, {0.1048, 1.6701}};
  const double covs[2] = {0.005, 0.02};
  Outcome o{true, ""};
  for (int c = 0; c < 2; ++c) {
    const auto u = UncertainInput::all(cfg.params, covs[c]);
    const auto rom = build_rom(cfg.sim, cfg.params, cfg.env, u);
    const auto m = moments(rom, u, {MomentMethod::Analytic, 0, 0});
    for (int l = 0; l < 2; ++l) {
      double best = 0.0;
      for (Eigen::Index k = 0; k < m.mean.cols(); ++k) best = std::max(best, std::sqrt(m.var(l, k)) / m.mean(l, k));
      const double rel = std::abs(best - ref[c][l]) / ref[c][l];
      o.pass = o.pass && rel <= 0.5;
      o.detail += (o.detail.empty() ? "" : ", ") + std::string("CoV ") + fmt("%.1f%%", 100 * covs[c]) + " phibar" +
                  std::to_string(l + 1) + "=" + fmt("%.2f%%", 100 * best) + " [ref " + fmt("%.2f%%", 100 * ref[c][l]) + "]";
    }
  }
  return o;
}

Outcome sensitivity_oracle() {
  const auto start = std::chrono::steady_clock::now();
  const RunConfig cfg = case_one("caseI.json");
  const auto u = UncertainInput::all(cfg.params, 0.005);
  const auto rom = build_rom(cfg.sim, cfg.params, cfg.env, u);
  const ParameterLayout layout(2);
  const Vector theta = layout.extract(cfg.params);
  SimConfig sim = cfg.sim;
  sim.n_steps = 500;  // t in [0, 0.5] on the plotted time axis
  double worst = 0.0;
  for (int j = 0; j < 5; ++j) {
    const double h = 1e-6 * theta(j);
    Vector tp = theta, tm = theta;
    tp(j) += h;
    tm(j) -= h;
    const Matrix fd = (simulate(sim, layout.assign(cfg.params, tp), cfg.env).packed() -
                       simulate(sim, layout.assign(cfg.params, tm), cfg.env).packed()) /
                      (2 * h);
    const Matrix s = rom.first[static_cast<std::size_t>(j)].leftCols(501);
    worst = std::max(worst, (s.topRows(4) - fd.topRows(4)).cwiseAbs().maxCoeff() / fd.topRows(4).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-4, "max relative error " + fmt("%.2e", worst) + " (<= 1e-4), " + fmt("%.2f", elapsed_since(start)) + " s"};
}

Outcome moment_oracle() {
  const auto start = std::chrono::steady_clock::now();
  const RunConfig cfg = case_one("caseI.json");
  const auto u = UncertainInput::all(cfg.params, 0.005);
  const auto rom = build_rom(cfg.sim, cfg.params, cfg.env, u);
  std::vector<int> steps;
  for (int k = 1; k <= cfg.sim.n_steps; ++k) steps.push_back(k);  // step 0 is deterministic
  const auto a = moments(rom, u, {MomentMethod::Analytic, 0, 0}, steps);
  const auto s = moments(rom, u, {MomentMethod::Sampled, 1000000, 2024}, steps);
  const double worst = ((s.var.cwiseSqrt() - a.var.cwiseSqrt()).array() / a.var.cwiseSqrt().array()).abs().maxCoeff();
  return {worst <= 0.01, "max per-step relative sigma error " + fmt("%.2e", worst) + " over 1000 steps x 2 species, " +
                             fmt("%.1f", elapsed_since(start)) + " s"};
}

Outcome sampler_oracle() {
  // U(-10, 10) prior, N(0, 1) likelihood: the posterior is N(0, 1) truncated at 10 sigma.
  const PriorSpec prior{Vector::Constant(1, -10.0), Vector::Constant(1, 10.0)};
  int passes = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    TmcmcSettings s;
    s.seed = seed;
    s.threads = threads();
    const auto r = tmcmc([](const Vector& t) { return -0.5 * t(0) * t(0); }, prior, s);
    const Vector x = r.samples.col(0);
    const double mean = x.mean();
    const double sd = column_sd(r.samples)(0);
    const double n_eff = static_cast<double>(std::set<double>(x.data(), x.data() + x.size()).size());
    if (std::abs(mean) <= 3.0 * sd / std::sqrt(n_eff) && std::abs(sd - 1.0) <= 0.05) ++passes;
  }
  return {passes >= 18, std::to_string(passes) + "/20 seeds recover mean and sigma (need >= 18)"};
}

Outcome case_one_recovery() {
  const auto& c = run_cached("caseI.json");
  const Vector truth = theta_star();
  const Vector mean = c.posterior.samples.colwise().mean().transpose();
  bool ok = c.seconds <= 1800.0;
  Vector lo(5), hi(5);
  for (int j = 0; j < 5; ++j) {
    lo(j) = quantile(c.posterior.samples.col(j), 0.025);
    hi(j) = quantile(c.posterior.samples.col(j), 0.975);
    ok = ok && lo(j) <= truth(j) && truth(j) <= hi(j);
    const double tol = j == 1 ? 0.5 : 0.15;
    ok = ok && std::abs(mean(j) - truth(j)) <= tol * truth(j);
  }
  return {ok, "N_posterior=" + std::to_string(kPosteriorSamples) + ", means " + list(mean) + ", 95% lo " + list(lo) +
                  ", hi " + list(hi) + ", " + fmt("%.0f", c.seconds) + " s"};
}

Outcome correlation_structure() {
  const Matrix rho = correlations(run_cached("caseI.json").posterior);
  const double a12_b1 = rho(1, 3), a12_b2 = rho(1, 4), a11_a12 = rho(0, 1);
  const bool ok = a12_b1 >= 0.7 && a12_b2 >= 0.7 && a12_b1 > a11_a12 && a12_b2 > a11_a12;
  return {ok, "rho(a12,b1)=" + fmt("%.3f", a12_b1) + ", rho(a12,b2)=" + fmt("%.3f", a12_b2) + ", rho(a11,a12)=" +
                  fmt("%.3f", a11_a12) + ", rho(a11,b1)=" + fmt("%.3f", rho(0, 3)) + ", rho(b1,b2)=" + fmt("%.3f", rho(3, 4))};
}

Outcome cov_monotonicity() {
  const Vector low = column_sd(run_cached("caseI.json").posterior.samples);
  const Vector high = column_sd(run_cached("caseI_cov2.json").posterior.samples);
  const bool ok = (high.array() >= low.array()).all();
  return {ok, "sd(0.5%) " + list(low) + ", sd(2%) " + list(high)};
}

Outcome diag_vs_full() {
  const auto& diag = run_cached("caseI.json").posterior;
  const auto& full = run_cached("caseI_full.json").posterior;
  double worst = 0.0;
  Vector rel(5);
  for (int j = 0; j < 5; ++j) {
    const Vector a = diag.samples.col(j), b = full.samples.col(j);
    Vector both(a.size() + b.size());
    both << a, b;
    const Vector grid = default_pbox_grid(both, 0.005);
    const double area_d = pbox_from_posterior(a, 0.005, grid).area();
    const double area_f = pbox_from_posterior(b, 0.005, grid).area();
    rel(j) = std::abs(area_d - area_f) / area_d;
    worst = std::max(worst, rel(j));
  }
  return {worst < 0.2, "relative p-box area difference per parameter " + list(rel, "%.3f") + " (< 0.2)"};
}

Outcome hierarchical_case_two() {
  json doc = load_json(kSource + "/configs/caseII_plan.json");
  for (auto& st : doc["stages"]) st["config"]["tmcmc"]["n_samples"] = kPosteriorSamples;
  const StagePlan plan = parse_plan(doc, kSource + "/configs");
  RunOptions options;
  options.root = kWork + "/runs";
  options.threads = threads();
  const auto start = std::chrono::steady_clock::now();
  const PlanResult result = run_plan(plan, options);
  const double seconds = elapsed_since(start);
  if (!result.complete) {
    std::string why;
    for (const auto& s : result.stages)
      if (!s.error.empty()) why += s.name + ": " + s.error + "; ";
    return {false, "plan incomplete: " + why};
  }
  const ParameterLayout layout(4);
  const Vector truth = layout.extract(plan.params);
  std::vector<std::string> names;
  std::vector<double> means, sds;
  for (const auto& s : result.stages) {
    const Vector m = s.posterior.samples.colwise().mean().transpose();
    const Vector sd = column_sd(s.posterior.samples);
    for (std::size_t j = 0; j < s.names.size(); ++j) {
      names.push_back(s.names[j]);
      means.push_back(m(static_cast<Eigen::Index>(j)));
      sds.push_back(sd(static_cast<Eigen::Index>(j)));
    }
  }
  bool ok = names.size() == 14;
  std::string worst_name;
  double worst_rel = 0.0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double rel = std::abs(means[i] - truth(layout.find(names[i]))) / truth(layout.find(names[i]));
    if (names[i] != "b4") {
      ok = ok && rel <= 0.2;
      if (rel > worst_rel) worst_rel = rel, worst_name = names[i];
    }
  }
  const auto widest = std::max_element(sds.begin(), sds.end()) - sds.begin();
  ok = ok && names[static_cast<std::size_t>(widest)] == "b4";
  const auto b4 = std::find(names.begin(), names.end(), "b4") - names.begin();
  std::vector<double> others;
  for (std::size_t i = 0; i < sds.size(); ++i)
    if (names[i] != "b4") others.push_back(sds[i]);
  return {ok, "14 parameters, worst relative error (excluding b4) " + fmt("%.3f", worst_rel) + " at " + worst_name +
                  "; b4 mean " + fmt("%.3f", means[static_cast<std::size_t>(b4)]) + " (truth " +
                  fmt("%.3f", truth(layout.find("b4"))) + "), sd(b4)=" + fmt("%.3g", sds[static_cast<std::size_t>(b4)]) +
                  ", next largest sd " + fmt("%.3g", *std::max_element(others.begin(), others.end())) + ", " +
                  fmt("%.0f", seconds) + " s"};
}

Outcome invariant_suites() {
  std::string detail;
  bool ok = true;

  // Constraint and interior at every step, for Case I and for the Case II validation schedule.
  double worst_constraint = 0.0;
  bool interior = true;
  auto check_traj = [&](const Trajectory& t) {
    for (int k = 0; k <= t.n_steps(); ++k) {
      const State s = t.state(k);
      worst_constraint = std::max(worst_constraint, std::abs(s.phi.sum() + s.phi_empty - 1.0));
      interior = interior && s.phi.minCoeff() > 0 && s.phi.maxCoeff() < 1 && s.psi.minCoeff() > 0 &&
                 s.psi.maxCoeff() < 1 && s.phi_empty > 0 && s.phi_empty < 1;
    }
  };
  const RunConfig cfg = case_one("caseI.json");
  check_traj(simulate(cfg.sim, cfg.params, cfg.env));
  const StagePlan plan = load_plan(kSource + "/configs/caseII_plan.json");
  for (const auto& st : plan.stages) check_traj(simulate(st.config.sim, st.config.params, st.config.env));
  const auto& v = plan.validation->config;
  check_traj(simulate(v.sim, v.params, v.env));
  ok = ok && worst_constraint <= 1e-10 && interior;
  detail += "constraint " + fmt("%.1e", worst_constraint) + (interior ? ", interior kept" : ", interior VIOLATED");

  // Seed and thread-count determinism of a small calibration.
  RunConfig small = cfg;
  small.sim.n_steps = 300;
  small.data.steps = evenly_spaced_steps(300, 10);
  small.tmcmc.n_samples = 200;
  small.tmcmc.mh_steps = 1;
  const Dataset data = obtain_dataset(small);
  auto run = [&](int t, std::uint64_t seed) {
    RunConfig c = small;
    c.tmcmc.threads = t;
    c.tmcmc.seed = seed;
    PosteriorModel model(make_problem(c, data));
    auto r = calibrate(model, c.tmcmc);
    return std::make_pair(r, std::make_pair(model.evaluations(), model.rom_builds()));
  };
  const auto a = run(1, 9), b = run(1, 9), c = run(4, 9), d = run(1, 10);
  const bool det = a.first.samples == b.first.samples && a.first.samples == c.first.samples &&
                   a.first.log_posterior == c.first.log_posterior && a.first.samples != d.first.samples;
  ok = ok && det;
  detail += det ? ", seed/thread determinism holds" : ", determinism BROKEN";

  // One ROM build per likelihood evaluation, for every run above and the Case I runs.
  bool single = a.second.first == a.second.second && c.second.first == c.second.second && a.second.first > 0;
  for (const auto* file : {"caseI.json", "caseI_cov2.json", "caseI_full.json"}) {
    const auto& r = run_cached(file);
    single = single && r.evaluations == r.rom_builds;
  }
  ok = ok && single;
  detail += single ? ", one ROM build per evaluation" : ", ROM build counter MISMATCH";
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  fs::create_directories(kWork);
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"ROM accuracy", rom_accuracy},
      {"output variability", output_variability},
      {"sensitivity oracle", sensitivity_oracle},
      {"moment oracle", moment_oracle},
      {"sampler oracle", sampler_oracle},
      {"Case I recovery", case_one_recovery},
      {"correlation structure", correlation_structure},
      {"CoV monotonicity", cov_monotonicity},
      {"diagonal vs full likelihood", diag_vs_full},
      {"hierarchical Case II", hierarchical_case_two},
      {"invariant suites", invariant_suites},
  };
  json report = json::array();
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
    report.push_back({{"criterion", id}, {"name", criteria[i].first}, {"pass", o.pass}, {"detail", o.detail}});
  }
  std::ofstream(kWork + "/report.json") << report.dump(2) << '\n';
  return failures == 0 ? 0 : 1;
}
