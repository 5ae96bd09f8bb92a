#include "biofilm/pipeline.hpp"

#include "biofilm/parallel.hpp"
#include "json_util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace biofilm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string species_name(char kind, int i, int j) {
  return kind == 'b' ? "b" + std::to_string(i + 1) : "a" + std::to_string(i + 1) + std::to_string(j + 1);
}

// Global name for local entry `index` of a submodel over `species`.
std::string to_global(const std::vector<int>& species, int index) {
  const ParameterLayout layout(static_cast<int>(species.size()));
  const auto& e = layout.entry(index);
  const int gi = species[static_cast<std::size_t>(e.row)], gj = species[static_cast<std::size_t>(e.col)];
  if (e.kind == ParameterLayout::Kind::Antibiotic) return species_name('b', gi, gi);
  return species_name('a', std::min(gi, gj), std::max(gi, gj));
}

std::string stage_dir(const std::string& root, const std::string& plan_hash, const std::string& stage) {
  return (fs::path(root) / plan_hash / stage).string();
}

std::string dataset_digest(const Dataset& data) {
  std::ostringstream out;
  write_dataset(data, out);
  return detail::hex64(detail::fnv1a(out.str()));
}

std::string hex_values(const Vector& v) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < v.size(); ++i) out << v(i) << ';';
  return out.str();
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) return {};
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void fill_pboxes(StageOutcome& out, double cov) {
  out.pboxes.clear();
  out.pboxes_credible.clear();
  for (int j = 0; j < out.posterior.dimension(); ++j) {
    const Vector col = out.posterior.samples.col(j);
    const Vector grid = default_pbox_grid(col, cov);
    PBox all = pbox_from_posterior(col, cov, grid);
    all.label = "all";
    out.pboxes.push_back(std::move(all));
    out.pboxes_credible.push_back(pbox_credible(col, cov, grid, 0.95));
  }
}

void fill_diagnostics(StageOutcome& out, double cov) {
  out.map = map_estimate(out.posterior);
  try {
    out.correlation = correlations(out.posterior);
  } catch (const DegenerateVariance&) {
    out.correlation.resize(0, 0);
  }
  fill_pboxes(out, cov);
}

MaterialParamsd sub_params(const MaterialParamsd& global, const std::vector<int>& species, const MaterialParamsd& local) {
  MaterialParamsd p = local;
  const auto n = static_cast<Eigen::Index>(species.size());
  p.a.resize(n, n);
  p.b.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    p.b(i) = global.b(species[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < n; ++j)
      p.a(i, j) = global.a(species[static_cast<std::size_t>(i)], species[static_cast<std::size_t>(j)]);
  }
  return p;
}

void set_global(MaterialParamsd& params, const std::string& name, double value) {
  const ParameterLayout layout(params.species());
  const int idx = layout.find(name);
  if (idx < 0) throw Error("unknown parameter " + name);
  Vector full = layout.extract(params);
  full(idx) = value;
  params = layout.assign(params, full);
}

std::vector<int> parse_species(const json& v, const std::string& path, int n) {
  if (!v.is_array() || v.empty()) throw ConfigError(path, "expected a non-empty array of 1-based species");
  std::vector<int> out;
  std::set<int> seen;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number_integer() || v[i].get<int>() < 1 || v[i].get<int>() > n)
      throw ConfigError(path + "/" + std::to_string(i), "species must lie in [1, " + std::to_string(n) + "]");
    if (!seen.insert(v[i].get<int>()).second) throw ConfigError(path + "/" + std::to_string(i), "duplicate species");
    out.push_back(v[i].get<int>() - 1);
  }
  return out;
}

void check_keys(const json& doc, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!doc.is_object()) throw ConfigError(path, "expected an object");
  for (const auto& [key, value] : doc.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(path + "/" + key, "unknown key");
  }
}

// Stage config with A and B from the plan and the prior translated to local names.
RunConfig parse_stage_config(const json& stage_doc, const std::string& path, const std::vector<int>& species,
                             const MaterialParamsd& global, const std::string& base_dir) {
  if (!stage_doc.contains("config")) throw ConfigError(path + "/config", "required key is missing");
  json cfg = stage_doc.at("config");
  if (!cfg.is_object()) throw ConfigError(path + "/config", "expected an object");
  if (cfg.contains("prior")) throw ConfigError(path + "/config/prior", "stage priors belong in the stage's prior key");
  if (cfg.contains("model") && cfg["model"].is_object()) {
    if (cfg["model"].contains("A")) throw ConfigError(path + "/config/model/A", "plan stages take A from the plan params");
    if (cfg["model"].contains("B")) throw ConfigError(path + "/config/model/B", "plan stages take B from the plan params");
    if (cfg["model"].contains("n") && cfg["model"]["n"] != json(species.size()))
      throw ConfigError(path + "/config/model/n", "must equal the number of stage species");
    cfg["model"]["n"] = species.size();
  }
  if (stage_doc.contains("prior")) {
    const json& prior = stage_doc.at("prior");
    if (!prior.is_object()) throw ConfigError(path + "/prior", "expected an object");
    const ParameterLayout local(static_cast<int>(species.size()));
    json translated = json::object();
    for (const auto& [name, bounds] : prior.items()) {
      std::string local_name;
      for (int j = 0; j < local.size(); ++j)
        if (to_global(species, j) == name) local_name = local.name(j);
      if (local_name.empty()) throw ConfigError(path + "/prior/" + name, "parameter is not part of this stage");
      translated[local_name] = bounds;
    }
    cfg["prior"] = translated;
  }
  ParseOptions options;
  options.require_params = false;
  options.base_dir = base_dir;
  options.path_prefix = path + "/config";
  RunConfig rc = parse_run_config(cfg, options);
  rc.params = sub_params(global, species, rc.params);
  return rc;
}

}  // namespace

std::string Stage::global_name(int local) const { return to_global(species, local); }

int Stage::local_index(const std::string& name) const {
  const ParameterLayout layout(static_cast<int>(species.size()));
  for (int j = 0; j < layout.size(); ++j)
    if (to_global(species, j) == name) return j;
  return -1;
}

std::vector<std::string> Stage::free_global() const {
  std::vector<std::string> out;
  for (int j : config.free_indices()) out.push_back(global_name(j));
  return out;
}

void StagePlan::validate() const {
  if (stages.empty()) throw ConfigError("/stages", "a plan needs at least one stage");
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < stages.size(); ++i)
    if (!index.emplace(stages[i].name, static_cast<int>(i)).second)
      throw ConfigError("/stages/" + std::to_string(i) + "/name", "duplicate stage name " + stages[i].name);

  std::map<std::string, std::string> owner;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const Stage& s = stages[i];
    const std::string path = "/stages/" + std::to_string(i);
    if (s.config.free.empty()) throw ConfigError(path + "/prior", "stage has no free parameters");
    for (const auto& name : s.free_global()) {
      auto [it, inserted] = owner.emplace(name, s.name);
      if (!inserted)
        throw ConfigError(path + "/prior/" + name, "parameter is already free in stage " + it->second);
      if (s.fixed_from_map.count(name)) throw ConfigError(path + "/fixed_from_map/" + name, "parameter is also free here");
    }
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const Stage& s = stages[i];
    const std::string path = "/stages/" + std::to_string(i) + "/fixed_from_map/";
    for (const auto& [name, source] : s.fixed_from_map) {
      if (s.local_index(name) < 0) throw ConfigError(path + name, "parameter is not part of this stage");
      if (!index.count(source)) throw ConfigError(path + name, "unknown source stage " + source);
      auto it = owner.find(name);
      if (it == owner.end() || it->second != source)
        throw ConfigError(path + name, "parameter is not free in stage " + source);
    }
  }
  topological_order();
  if (validation) {
    if (!index.count(validation->stage)) throw ConfigError("/validation/stage", "unknown stage " + validation->stage);
    const Stage& s = stages[static_cast<std::size_t>(index[validation->stage])];
    if (validation->config.params.species() != static_cast<int>(s.species.size()))
      throw ConfigError("/validation/config/model/n", "validation must use the species of stage " + s.name);
  }
}

std::vector<int> StagePlan::topological_order() const {
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < stages.size(); ++i) index[stages[i].name] = static_cast<int>(i);
  std::vector<int> state(stages.size(), 0), order;
  // Kahn's algorithm, taking the lowest declared index first.
  std::vector<std::set<int>> deps(stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i)
    for (const auto& d : stages[i].depends_on) deps[i].insert(index.at(d));
  while (order.size() < stages.size()) {
    int pick = -1;
    for (std::size_t i = 0; i < stages.size() && pick < 0; ++i) {
      if (state[i]) continue;
      bool ready = true;
      for (int d : deps[i]) ready = ready && state[static_cast<std::size_t>(d)];
      if (ready) pick = static_cast<int>(i);
    }
    if (pick < 0) throw ConfigError("/stages", "stage dependencies contain a cycle");
    state[static_cast<std::size_t>(pick)] = 1;
    order.push_back(pick);
  }
  return order;
}

std::string StagePlan::hash() const { return detail::hex64(detail::fnv1a(source.dump())); }

bool is_plan_document(const json& doc) { return doc.is_object() && doc.contains("stages"); }

StagePlan parse_plan(const json& doc, const std::string& base_dir) {
  check_keys(doc, "", {"name", "species", "params", "stages", "validation"});
  StagePlan plan;
  plan.source = doc;
  plan.name = doc.value("name", std::string("plan"));
  if (!doc.contains("species") || !doc["species"].is_number_integer() || doc["species"].get<int>() < 1)
    throw ConfigError("/species", "expected a positive species count");
  plan.species = doc["species"].get<int>();
  const int n = plan.species;

  if (!doc.contains("params")) throw ConfigError("/params", "required key is missing");
  check_keys(doc["params"], "/params", {"A", "B"});
  {
    // Reuse the model parser for A and B checks.
    json model = {{"n", n}, {"eta", std::vector<double>(static_cast<std::size_t>(n), 1.0)},
                  {"initial", {{"phi", std::vector<double>(static_cast<std::size_t>(n), 0.5 / n)}}}};
    if (doc["params"].contains("A")) model["A"] = doc["params"]["A"];
    if (doc["params"].contains("B")) model["B"] = doc["params"]["B"];
    json shell = {{"model", model}, {"env", {{"c_star", 0}, {"alpha_star", 0}}}, {"sim", {{"n_steps", 1}, {"dt", 1}}}};
    try {
      const RunConfig rc = parse_run_config(shell);
      plan.params = rc.params;
      plan.params.eta = Vector::Ones(n);
    } catch (const ConfigError& e) {
      std::string p = e.path();
      if (p.rfind("/model", 0) == 0) p = "/params" + p.substr(6);
      const std::string what = e.what();
      throw ConfigError(p, what.substr(what.find(": ") + 2));
    }
  }

  const json& stages = doc.contains("stages") ? doc["stages"] : json();
  if (!stages.is_array() || stages.empty()) throw ConfigError("/stages", "expected a non-empty array");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string path = "/stages/" + std::to_string(i);
    const json& sd = stages[i];
    check_keys(sd, path, {"name", "species", "prior", "fixed_from_map", "config"});
    Stage s;
    if (!sd.contains("name") || !sd["name"].is_string() || sd["name"].get<std::string>().empty())
      throw ConfigError(path + "/name", "expected a stage name");
    s.name = sd["name"].get<std::string>();
    if (s.name.find_first_of("/\\. ") != std::string::npos) throw ConfigError(path + "/name", "stage names must be plain identifiers");
    if (!sd.contains("species")) throw ConfigError(path + "/species", "required key is missing");
    s.species = parse_species(sd["species"], path + "/species", n);
    s.config = parse_stage_config(sd, path, s.species, plan.params, base_dir);
    if (sd.contains("fixed_from_map")) {
      const json& f = sd["fixed_from_map"];
      if (!f.is_object()) throw ConfigError(path + "/fixed_from_map", "expected an object of name -> stage");
      for (const auto& [name, source] : f.items()) {
        if (!source.is_string()) throw ConfigError(path + "/fixed_from_map/" + name, "expected a stage name");
        s.fixed_from_map[name] = source.get<std::string>();
        if (std::find(s.depends_on.begin(), s.depends_on.end(), source.get<std::string>()) == s.depends_on.end())
          s.depends_on.push_back(source.get<std::string>());
      }
    }
    plan.stages.push_back(std::move(s));
  }

  if (doc.contains("validation")) {
    const json& v = doc["validation"];
    check_keys(v, "/validation", {"stage", "config", "max_draws"});
    if (!v.contains("stage") || !v["stage"].is_string()) throw ConfigError("/validation/stage", "expected a stage name");
    ValidationSpec spec;
    spec.stage = v["stage"].get<std::string>();
    if (v.contains("max_draws")) {
      if (!v["max_draws"].is_number_integer() || v["max_draws"].get<int>() < 1)
        throw ConfigError("/validation/max_draws", "expected a positive integer");
      spec.max_draws = v["max_draws"].get<int>();
    }
    const Stage* target = nullptr;
    for (const auto& s : plan.stages)
      if (s.name == spec.stage) target = &s;
    if (!target) throw ConfigError("/validation/stage", "unknown stage " + spec.stage);
    spec.config = parse_stage_config(v, "/validation", target->species, plan.params, base_dir);
    plan.validation = std::move(spec);
  }

  plan.validate();
  return plan;
}

StagePlan load_plan(const std::string& path) {
  return parse_plan(load_json(path), fs::path(path).parent_path().string());
}

const StageOutcome* PlanResult::find(const std::string& name) const {
  for (const auto& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

StageOutcome run_calibration(const PosteriorModel& model, const TmcmcSettings& settings, double cov) {
  StageOutcome out;
  const auto start = std::chrono::steady_clock::now();
  out.posterior = calibrate(model, settings);
  out.names = out.posterior.names;
  fill_diagnostics(out, cov);
  out.evaluations = model.evaluations();
  out.rom_builds = model.rom_builds();
  out.failures = model.failures();
  out.floor_hits = model.floor_hits();
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.status = "ok";
  return out;
}

json stage_summary(const StageOutcome& o) {
  json j;
  j["name"] = o.name;
  j["status"] = o.status;
  if (!o.error.empty()) j["error"] = o.error;
  if (o.posterior.size() == 0) return j;
  const auto& post = o.posterior;
  j["parameters"] = o.names;
  j["n_samples"] = post.size();
  j["map"] = detail::to_json(o.map);
  const Vector mean = post.samples.colwise().mean().transpose();
  const Matrix centered = post.samples.rowwise() - mean.transpose();
  const Vector sd = (centered.colwise().squaredNorm().transpose() / std::max(1.0, post.size() - 1.0)).cwiseSqrt();
  j["mean"] = detail::to_json(mean);
  j["std"] = detail::to_json(sd);
  json q025 = json::array(), q975 = json::array(), area = json::array();
  for (int c = 0; c < post.dimension(); ++c) {
    q025.push_back(quantile(post.samples.col(c), 0.025));
    q975.push_back(quantile(post.samples.col(c), 0.975));
    if (static_cast<std::size_t>(c) < o.pboxes.size()) area.push_back(o.pboxes[static_cast<std::size_t>(c)].area());
  }
  j["q025"] = q025;
  j["q975"] = q975;
  j["pbox_area"] = area;
  if (o.correlation.size() > 0) j["correlation"] = detail::to_json(o.correlation);
  j["beta"] = post.beta;
  j["acceptance"] = post.acceptance;
  j["stages"] = static_cast<int>(post.beta.size()) - 1;
  j["log_evidence"] = post.log_evidence;
  j["counters"] = {{"log_likelihood_evaluations", o.evaluations},
                   {"rom_builds", o.rom_builds},
                   {"forward_failures", o.failures},
                   {"variance_floor_hits", o.floor_hits}};
  return j;
}

void write_stage_outputs(const StageOutcome& o, const std::string& directory, const json& extra) {
  fs::create_directories(fs::path(directory) / "pbox");
  write_posterior_csv(o.posterior, (fs::path(directory) / "samples.csv").string());
  write_posterior_sidecar(o.posterior, (fs::path(directory) / "posterior.json").string());
  json map;
  map["parameters"] = o.names;
  map["values"] = detail::to_json(o.map);
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < o.posterior.log_posterior.size(); ++i) best = std::max(best, o.posterior.log_posterior(i));
  map["log_posterior"] = best;
  write_json(map, (fs::path(directory) / "map.json").string());
  for (std::size_t j = 0; j < o.pboxes.size(); ++j) {
    const std::string& name = o.names[j];
    write_pbox_csv(o.pboxes[j], (fs::path(directory) / "pbox" / (name + ".csv")).string());
    write_pbox_csv(o.pboxes_credible[j], (fs::path(directory) / "pbox" / (name + "_credible95.csv")).string());
  }
  json report = stage_summary(o);
  for (const auto& [k, v] : extra.items()) report[k] = v;
  write_json(report, (fs::path(directory) / "report.json").string());
}

namespace {

StageOutcome execute_stage(const Stage& stage, const std::vector<StageOutcome>& done,
                           const std::map<std::string, int>& index, const std::string& directory, bool use_cache,
                           int threads) {
  StageOutcome out;
  out.name = stage.name;
  out.directory = directory;

  RunConfig cfg = stage.config;
  json fixed = json::object();
  for (const auto& [name, source] : stage.fixed_from_map) {
    const StageOutcome& src = done[static_cast<std::size_t>(index.at(source))];
    const auto pos = std::find(src.names.begin(), src.names.end(), name);
    const double value = src.map(pos - src.names.begin());
    fixed[name] = value;
    const ParameterLayout layout(cfg.params.species());
    Vector full = layout.extract(cfg.params);
    full(stage.local_index(name)) = value;
    cfg.params = layout.assign(cfg.params, full);
  }

  // Data come from the plan truth, not from the MAP-fixed values.
  RunConfig truth = stage.config;
  const Dataset data = obtain_dataset(truth);
  cfg.tmcmc.threads = threads;

  json key_doc = {{"config", cfg.source}, {"species", stage.species}, {"fixed", fixed},
                  {"truth", hex_values(ParameterLayout(truth.params.species()).extract(truth.params))},
                  {"data", dataset_digest(data)}};
  const std::string key = detail::hex64(detail::fnv1a(key_doc.dump()));
  const fs::path dir(directory);

  if (use_cache && read_text((dir / "cache_key").string()) == key + "\n" && fs::exists(dir / "samples.csv") &&
      fs::exists(dir / "posterior.json")) {
    out.posterior = read_posterior((dir / "samples.csv").string(), (dir / "posterior.json").string());
    // Stored names are global; a mismatch means the files belong to another stage layout.
    if (out.posterior.names != stage.free_global()) throw Error("cached posterior does not match stage " + stage.name);
    out.names = out.posterior.names;
    fill_diagnostics(out, cfg.cov);
    out.status = "cached";
    return out;
  }

  PosteriorModel model(make_problem(cfg, data));
  out = run_calibration(model, cfg.tmcmc, cfg.cov);
  out.name = stage.name;
  out.directory = directory;
  out.names = stage.free_global();
  out.posterior.names = out.names;

  fs::create_directories(dir);
  write_dataset(data, (dir / "data.csv").string());
  write_stage_outputs(out, directory, {{"fixed_from_map", fixed}, {"seconds", out.seconds}, {"cache_key", key}});
  std::ofstream(dir / "cache_key") << key << '\n';
  return out;
}

}  // namespace

PlanResult run_plan(const StagePlan& plan, const RunOptions& options) {
  plan.validate();
  PlanResult result;
  result.plan_hash = plan.hash();
  result.directory = (fs::path(options.root) / result.plan_hash).string();
  fs::create_directories(result.directory);
  write_json(plan.source, (fs::path(result.directory) / "plan.json").string());

  std::map<std::string, int> index;
  for (std::size_t i = 0; i < plan.stages.size(); ++i) index[plan.stages[i].name] = static_cast<int>(i);
  result.stages.resize(plan.stages.size());
  for (std::size_t i = 0; i < plan.stages.size(); ++i) result.stages[i].name = plan.stages[i].name;

  // Waves of mutually independent stages.
  const auto order = plan.topological_order();
  std::vector<int> level(plan.stages.size(), 0);
  int levels = 0;
  for (int i : order) {
    for (const auto& d : plan.stages[static_cast<std::size_t>(i)].depends_on)
      level[static_cast<std::size_t>(i)] = std::max(level[static_cast<std::size_t>(i)], level[static_cast<std::size_t>(index[d])] + 1);
    levels = std::max(levels, level[static_cast<std::size_t>(i)] + 1);
  }

  for (int lv = 0; lv < levels; ++lv) {
    std::vector<int> wave;
    for (int i : order)
      if (level[static_cast<std::size_t>(i)] == lv) wave.push_back(i);
    const int width = static_cast<int>(wave.size());
    const int inner = std::max(1, options.threads / std::max(width, 1));
    parallel_for(wave.size(), std::min(options.threads, width), [&](std::size_t w) {
      const int i = wave[w];
      const Stage& stage = plan.stages[static_cast<std::size_t>(i)];
      StageOutcome& slot = result.stages[static_cast<std::size_t>(i)];
      for (const auto& d : stage.depends_on) {
        const auto& dep = result.stages[static_cast<std::size_t>(index[d])];
        if (dep.status != "ok" && dep.status != "cached") {
          slot.status = "skipped";
          slot.error = "dependency " + d + " did not complete";
          return;
        }
      }
      const std::string dir = stage_dir(options.root, result.plan_hash, stage.name);
      try {
        slot = execute_stage(stage, result.stages, index, dir, options.use_cache, inner);
      } catch (const std::exception& e) {
        slot.name = stage.name;
        slot.status = "failed";
        slot.error = e.what();
        slot.directory = dir;
      }
    });
  }

  result.assembled = plan.params;
  result.complete = true;
  for (const auto& s : result.stages) {
    if (s.status != "ok" && s.status != "cached") {
      result.complete = false;
      continue;
    }
    for (std::size_t j = 0; j < s.names.size(); ++j)
      set_global(result.assembled, s.names[j], s.map(static_cast<Eigen::Index>(j)));
  }

  json summary;
  summary["plan"] = plan.name;
  summary["plan_hash"] = result.plan_hash;
  summary["complete"] = result.complete;
  summary["assembled"] = {{"A", detail::to_json(result.assembled.a)}, {"B", detail::to_json(result.assembled.b)}};
  json stages = json::array();
  for (const auto& s : result.stages) stages.push_back({{"name", s.name}, {"status", s.status}, {"error", s.error}});
  summary["stages"] = stages;
  write_json(summary, (fs::path(result.directory) / "assembled.json").string());
  return result;
}

ValidationReport validate_posterior(const RunConfig& config, const MaterialParamsd& base, const std::vector<int>& free,
                                    const Matrix& samples, int max_draws, int threads, const Dataset* data) {
  ValidationReport report;
  report.data = data ? *data : obtain_dataset(config);
  report.steps = report.data.steps();

  CalibrationProblem problem;
  problem.config = config.sim;
  problem.base = base;
  problem.env = config.env;
  problem.free = free;
  problem.aleatory = config.aleatory_indices();
  problem.cov = config.cov;
  problem.data = report.data;
  problem.likelihood = config.likelihood;
  problem.prior.lo = samples.colwise().minCoeff().transpose().array() - 1.0;
  problem.prior.hi = samples.colwise().maxCoeff().transpose().array() + 1.0;
  const PosteriorModel model(problem);

  report.predictive = posterior_predictive(model, samples, report.steps, max_draws, threads);
  int inside = 0;
  for (const auto& p : report.data.points) {
    const int c = static_cast<int>(std::find(report.steps.begin(), report.steps.end(), p.step) - report.steps.begin());
    const double sd = std::sqrt(std::max(report.predictive.var(p.species, c), 1e-300));
    const double z = (p.value - report.predictive.mean(p.species, c)) / sd;
    report.z.push_back(z);
    if (std::abs(z) <= 3.0) ++inside;
  }
  report.within_3sigma = report.z.empty() ? 0.0 : static_cast<double>(inside) / static_cast<double>(report.z.size());
  const auto& segments = config.env.alpha_star.segments();
  const double t_switch = segments.size() > 1 ? segments[1].first : std::numeric_limits<double>::infinity();
  for (int k : report.steps)
    if (k * config.sim.dt <= t_switch) ++report.pre_switch_steps;
  return report;
}

ValidationReport validate_plan(const StagePlan& plan, const PlanResult& result, const RunOptions& options) {
  if (!plan.validation) throw ConfigError("/validation", "plan has no validation section");
  const ValidationSpec& spec = *plan.validation;
  const StageOutcome* outcome = result.find(spec.stage);
  if (!outcome || (outcome->status != "ok" && outcome->status != "cached"))
    throw Error("validation stage " + spec.stage + " has no posterior");
  const Stage* stage = nullptr;
  for (const auto& s : plan.stages)
    if (s.name == spec.stage) stage = &s;

  // Model parameters: the assembled MAP values restricted to the stage species.
  const MaterialParamsd base = sub_params(result.assembled, stage->species, spec.config.params);
  std::vector<int> free;
  for (const auto& name : outcome->names) free.push_back(stage->local_index(name));
  ValidationReport report =
      validate_posterior(spec.config, base, free, outcome->posterior.samples, spec.max_draws, options.threads);

  const fs::path dir = fs::path(result.directory) / "validation";
  fs::create_directories(dir);
  write_dataset(report.data, (dir / "data.csv").string());
  write_json(to_json(report), (dir / "report.json").string());
  std::ofstream bands(dir / "bands.csv");
  bands << "k,t,species,mean,sd,zeroth_lo,zeroth_hi\n" << std::setprecision(17);
  for (std::size_t c = 0; c < report.steps.size(); ++c)
    for (int l = 0; l < report.predictive.mean.rows(); ++l) {
      const auto col = static_cast<Eigen::Index>(c);
      bands << report.steps[c] << ',' << report.steps[c] * spec.config.sim.dt << ',' << l + 1 << ','
            << report.predictive.mean(l, col) << ',' << std::sqrt(report.predictive.var(l, col)) << ','
            << report.predictive.zeroth_lo(l, col) << ',' << report.predictive.zeroth_hi(l, col) << '\n';
    }
  return report;
}

json to_json(const ValidationReport& r) {
  json points = json::array();
  for (std::size_t i = 0; i < r.data.points.size(); ++i) {
    const auto& p = r.data.points[i];
    points.push_back({{"k", p.step}, {"species", p.species + 1}, {"value", p.value}, {"z", r.z[i]}});
  }
  return {{"points", points},
          {"within_3sigma", r.within_3sigma},
          {"max_abs_z", r.z.empty() ? 0.0 : std::abs(*std::max_element(r.z.begin(), r.z.end(), [](double a, double b) {
                                       return std::abs(a) < std::abs(b);
                                     }))},
          {"draws_used", r.predictive.used},
          {"draws_failed", r.predictive.failed},
          {"pre_switch_steps", r.pre_switch_steps}};
}

}  // namespace biofilm
