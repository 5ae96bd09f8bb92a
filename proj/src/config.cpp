#include "biofilm/config.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

namespace biofilm {

namespace {

using nlohmann::json;

// Walks one JSON object, remembering which keys were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(path_, "expected an object");
  }

  const std::string& path() const { return path_; }
  std::string child(const std::string& key) const { return path_ + "/" + key; }

  bool has(const std::string& key) {
    known_.insert(key);
    return doc_.contains(key);
  }

  const json& at(const std::string& key) {
    known_.insert(key);
    if (!doc_.contains(key)) throw ConfigError(child(key), "required key is missing");
    return doc_.at(key);
  }

  double number(const std::string& key) {
    const json& v = at(key);
    if (!v.is_number()) throw ConfigError(child(key), "expected a number");
    return v.get<double>();
  }
  double number(const std::string& key, double fallback) { return has(key) ? number(key) : fallback; }

  long long integer(const std::string& key) {
    const json& v = at(key);
    if (!v.is_number_integer()) throw ConfigError(child(key), "expected an integer");
    return v.get<long long>();
  }
  long long integer(const std::string& key, long long fallback) { return has(key) ? integer(key) : fallback; }

  std::string string(const std::string& key) {
    const json& v = at(key);
    if (!v.is_string()) throw ConfigError(child(key), "expected a string");
    return v.get<std::string>();
  }
  std::string string(const std::string& key, const std::string& fallback) {
    return has(key) ? string(key) : fallback;
  }

  Section object(const std::string& key) { return Section(at(key), child(key)); }

  void finish() const {
    for (const auto& [key, value] : doc_.items())
      if (!known_.count(key)) throw ConfigError(child(key), "unknown key");
  }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> known_;
};

Vector number_array(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path, "expected an array of numbers");
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError(path + "/" + std::to_string(i), "expected a number");
    out(static_cast<Eigen::Index>(i)) = v[i].get<double>();
  }
  return out;
}

Vector sized_array(const json& v, const std::string& path, int n) {
  Vector out = number_array(v, path);
  if (out.size() != n) throw ConfigError(path, "expected " + std::to_string(n) + " entries");
  return out;
}

Matrix square_matrix(const json& v, const std::string& path, int n) {
  if (!v.is_array() || static_cast<int>(v.size()) != n) throw ConfigError(path, "expected " + std::to_string(n) + " rows");
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m.row(i) = sized_array(v[static_cast<std::size_t>(i)], path + "/" + std::to_string(i), n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < i; ++j)
      if (m(i, j) != m(j, i))
        throw ConfigError(path + "/" + std::to_string(i) + "/" + std::to_string(j), "interaction matrix must be symmetric");
  return m;
}

Schedule parse_schedule(const json& v, const std::string& path) {
  if (v.is_number()) {
    if (v.get<double>() < 0.0) throw ConfigError(path, "concentration must be non-negative");
    return Schedule(v.get<double>());
  }
  if (!v.is_array() || v.empty()) throw ConfigError(path, "expected a number or an array of {from, value} segments");
  std::vector<std::pair<double, double>> segments;
  for (std::size_t i = 0; i < v.size(); ++i) {
    Section seg(v[i], path + "/" + std::to_string(i));
    const double from = seg.number("from");
    const double value = seg.number("value");
    seg.finish();
    if (value < 0.0) throw ConfigError(seg.child("value"), "concentration must be non-negative");
    segments.emplace_back(from, value);
  }
  try {
    return Schedule(std::move(segments));
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
}

std::vector<std::string> name_list(const json& v, const std::string& path, const ParameterLayout& layout) {
  std::vector<std::string> names;
  if (v.is_string() && v.get<std::string>() == "all") return names;
  if (!v.is_array()) throw ConfigError(path, "expected \"all\" or an array of parameter names");
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_string() || layout.find(v[i].get<std::string>()) < 0)
      throw ConfigError(path + "/" + std::to_string(i), "unknown parameter name");
    names.push_back(v[i].get<std::string>());
  }
  return names;
}

}  // namespace

std::vector<int> RunConfig::free_indices() const {
  const ParameterLayout layout(params.species());
  std::vector<int> out;
  for (const auto& name : free) out.push_back(layout.find(name));
  return out;
}

std::vector<int> RunConfig::aleatory_indices() const {
  const ParameterLayout layout(params.species());
  std::vector<int> out;
  for (const auto& name : aleatory) out.push_back(layout.find(name));
  std::sort(out.begin(), out.end());
  return out;
}

Environment parse_environment(const json& doc, const std::string& path) {
  Section env(doc, path);
  Environment out;
  out.c_star = parse_schedule(env.at("c_star"), env.child("c_star"));
  out.alpha_star = parse_schedule(env.at("alpha_star"), env.child("alpha_star"));
  env.finish();
  return out;
}

RunConfig parse_run_config(const json& doc, const ParseOptions& options) {
  RunConfig cfg;
  cfg.source = doc;
  Section root(doc, options.path_prefix);

  // model
  Section model = root.object("model");
  const long long n_raw = model.integer("n");
  if (n_raw < 1 || n_raw > 16) throw ConfigError(model.child("n"), "species count must lie in [1, 16]");
  const int n = static_cast<int>(n_raw);
  if (model.has("A"))
    cfg.params.a = square_matrix(model.at("A"), model.child("A"), n);
  else if (options.require_params)
    model.at("A");
  else
    cfg.params.a = Matrix::Zero(n, n);
  if (model.has("B"))
    cfg.params.b = sized_array(model.at("B"), model.child("B"), n);
  else if (options.require_params)
    model.at("B");
  else
    cfg.params.b = Vector::Zero(n);
  cfg.params.eta = sized_array(model.at("eta"), model.child("eta"), n);
  cfg.params.eta_empty = model.number("eta_empty", 1.0);
  if (!(cfg.params.eta.array() > 0.0).all()) throw ConfigError(model.child("eta"), "viscosities must be positive");
  if (!(cfg.params.eta_empty > 0.0)) throw ConfigError(model.child("eta_empty"), "must be positive");
  {
    Section init = model.object("initial");
    const Vector phi = sized_array(init.at("phi"), init.child("phi"), n);
    const Vector psi = init.has("psi") ? sized_array(init.at("psi"), init.child("psi"), n) : Vector::Constant(n, 0.999);
    init.finish();
    if (!((phi.array() > 0.0).all() && (phi.array() < 1.0).all() && phi.sum() < 1.0))
      throw ConfigError(init.child("phi"), "initial volume fractions must be in (0, 1) with sum below 1");
    if (!((psi.array() > 0.0).all() && (psi.array() < 1.0).all()))
      throw ConfigError(init.child("psi"), "initial living fractions must lie in (0, 1)");
    cfg.sim.initial = State::initial(phi, psi);
  }
  cfg.env.penalty = model.number("penalty", 1e-4);
  if (!(cfg.env.penalty >= 0.0)) throw ConfigError(model.child("penalty"), "must be non-negative");
  model.finish();

  // env
  {
    const double penalty = cfg.env.penalty;
    cfg.env = parse_environment(root.at("env"), root.child("env"));
    cfg.env.penalty = penalty;
  }

  // sim
  {
    Section sim = root.object("sim");
    const long long steps = sim.integer("n_steps");
    if (steps < 1) throw ConfigError(sim.child("n_steps"), "must be >= 1");
    cfg.sim.n_steps = static_cast<int>(steps);
    cfg.sim.dt = sim.number("dt");
    if (!(cfg.sim.dt > 0.0)) throw ConfigError(sim.child("dt"), "must be positive");
    if (sim.has("newton")) {
      Section newton = sim.object("newton");
      cfg.sim.newton.tol = newton.number("tol", cfg.sim.newton.tol);
      cfg.sim.newton.max_iter = static_cast<int>(newton.integer("max_iter", cfg.sim.newton.max_iter));
      cfg.sim.newton.max_halvings = static_cast<int>(newton.integer("max_halvings", cfg.sim.newton.max_halvings));
      newton.finish();
      if (!(cfg.sim.newton.tol > 0.0)) throw ConfigError(newton.child("tol"), "must be positive");
      if (cfg.sim.newton.max_iter < 1) throw ConfigError(newton.child("max_iter"), "must be >= 1");
      if (cfg.sim.newton.max_halvings < 0) throw ConfigError(newton.child("max_halvings"), "must be >= 0");
    }
    sim.finish();
  }

  const ParameterLayout layout(n);

  // uncertainty
  if (root.has("uncertainty")) {
    Section unc = root.object("uncertainty");
    cfg.cov = unc.number("cov", cfg.cov);
    if (!(cfg.cov >= 0.0 && cfg.cov < 1.0)) throw ConfigError(unc.child("cov"), "must lie in [0, 1)");
    if (unc.has("aleatory")) cfg.aleatory = name_list(unc.at("aleatory"), unc.child("aleatory"), layout);
    unc.finish();
  }

  // data
  if (root.has("data")) {
    Section data = root.object("data");
    if (data.has("steps")) {
      const json& steps = data.at("steps");
      if (!steps.is_array() || steps.empty()) throw ConfigError(data.child("steps"), "expected a non-empty array");
      for (std::size_t i = 0; i < steps.size(); ++i) {
        if (!steps[i].is_number_integer()) throw ConfigError(data.child("steps") + "/" + std::to_string(i), "expected an integer");
        const int k = steps[i].get<int>();
        if (k < 1 || k > cfg.sim.n_steps)
          throw ConfigError(data.child("steps") + "/" + std::to_string(i), "step outside [1, n_steps]");
        cfg.data.steps.push_back(k);
      }
      if (data.has("m")) throw ConfigError(data.child("m"), "give either m or steps, not both");
    } else {
      const long long m = data.integer("m", 20);
      if (m < 1 || m > cfg.sim.n_steps) throw ConfigError(data.child("m"), "must lie in [1, n_steps]");
      cfg.data.steps = evenly_spaced_steps(cfg.sim.n_steps, static_cast<int>(m));
    }
    const long long seed = data.integer("seed", 1);
    if (seed < 0) throw ConfigError(data.child("seed"), "must be non-negative");
    cfg.data.seed = static_cast<std::uint64_t>(seed);
    const std::string backend = data.string("backend", "full");
    if (backend == "full")
      cfg.data.backend = GenerationBackend::Full;
    else if (backend == "surrogate")
      cfg.data.backend = GenerationBackend::Surrogate;
    else
      throw ConfigError(data.child("backend"), "expected \"full\" or \"surrogate\"");
    if (data.has("path")) {
      std::filesystem::path p = data.string("path");
      if (p.is_relative() && !options.base_dir.empty()) p = std::filesystem::path(options.base_dir) / p;
      cfg.data.path = p.string();
    }
    data.finish();
  } else {
    cfg.data.steps = evenly_spaced_steps(cfg.sim.n_steps, std::min(20, cfg.sim.n_steps));
  }

  // prior
  if (root.has("prior")) {
    Section prior = root.object("prior");
    const json& p = root.at("prior");
    for (const auto& [key, value] : p.items())
      if (layout.find(key) < 0) throw ConfigError(prior.child(key), "unknown parameter name");
    std::vector<double> lo, hi;
    for (const auto& name : layout.names()) {
      if (!prior.has(name)) continue;
      const Vector bounds = sized_array(prior.at(name), prior.child(name), 2);
      if (!(bounds(0) < bounds(1))) throw ConfigError(prior.child(name), "need lo < hi");
      cfg.free.push_back(name);
      lo.push_back(bounds(0));
      hi.push_back(bounds(1));
    }
    prior.finish();
    cfg.prior.lo = Eigen::Map<Vector>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    cfg.prior.hi = Eigen::Map<Vector>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  }

  // likelihood
  if (root.has("likelihood")) {
    Section lik = root.object("likelihood");
    const std::string covariance = lik.string("covariance", "diagonal");
    if (covariance == "full")
      cfg.likelihood.full_covariance = true;
    else if (covariance != "diagonal")
      throw ConfigError(lik.child("covariance"), "expected \"diagonal\" or \"full\"");
    const std::string norm = lik.string("normalization", "standard");
    if (norm == "unhalved")
      cfg.likelihood.normalization = LikelihoodNormalization::Unhalved;
    else if (norm != "standard")
      throw ConfigError(lik.child("normalization"), "expected \"standard\" or \"unhalved\"");
    const std::string method = lik.string("moments", "sampled");
    if (method == "analytic")
      cfg.likelihood.moments.method = MomentMethod::Analytic;
    else if (method != "sampled")
      throw ConfigError(lik.child("moments"), "expected \"sampled\" or \"analytic\"");
    cfg.likelihood.moments.n_samples = static_cast<int>(lik.integer("n_samples", 500));
    if (cfg.likelihood.moments.n_samples < 2) throw ConfigError(lik.child("n_samples"), "must be >= 2");
    const long long seed = lik.integer("seed", 1);
    if (seed < 0) throw ConfigError(lik.child("seed"), "must be non-negative");
    cfg.likelihood.moments.seed = static_cast<std::uint64_t>(seed);
    cfg.likelihood.variance_floor = lik.number("variance_floor", cfg.likelihood.variance_floor);
    lik.finish();
  }

  // tmcmc
  if (root.has("tmcmc")) {
    Section t = root.object("tmcmc");
    auto& s = cfg.tmcmc;
    s.n_samples = static_cast<int>(t.integer("n_samples", s.n_samples));
    s.target_cov = t.number("target_cov", s.target_cov);
    s.proposal_scale = t.number("proposal_scale", s.proposal_scale);
    s.max_stages = static_cast<int>(t.integer("max_stages", s.max_stages));
    s.mh_steps = static_cast<int>(t.integer("mh_steps", s.mh_steps));
    s.min_dbeta = t.number("min_dbeta", s.min_dbeta);
    const long long seed = t.integer("seed", 1);
    if (seed < 0) throw ConfigError(t.child("seed"), "must be non-negative");
    s.seed = static_cast<std::uint64_t>(seed);
    t.finish();
    try {
      s.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(t.path(), e.what());
    }
  }

  // output
  if (root.has("output")) {
    Section out = root.object("output");
    cfg.output_dir = out.string("dir", cfg.output_dir);
    out.finish();
  }

  root.finish();
  return cfg;
}

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path);
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("", path + ": " + e.what());
  }
}

RunConfig load_run_config(const std::string& path) {
  ParseOptions options;
  options.base_dir = std::filesystem::path(path).parent_path().string();
  return parse_run_config(load_json(path), options);
}

Dataset obtain_dataset(const RunConfig& config, GenerationStats* stats) {
  if (!config.data.path.empty()) {
    Dataset data;
    try {
      data = read_dataset(config.data.path);
    } catch (const Error& e) {
      throw ConfigError("/data/path", e.what());
    }
    if (data.species != config.params.species())
      throw ConfigError("/data/path", "dataset species count does not match the model");
    return data;
  }
  const ParameterLayout layout(config.params.species());
  GenSpec spec;
  spec.true_means = layout.extract(config.params);
  spec.cov = Vector::Zero(layout.size());
  const auto aleatory = config.aleatory_indices();
  if (aleatory.empty())
    spec.cov.setConstant(config.cov);
  else
    for (int j : aleatory) spec.cov(j) = config.cov;
  spec.steps = config.data.steps;
  spec.seed = config.data.seed;
  spec.backend = config.data.backend;
  return generate_dataset(config.sim, config.params, config.env, spec, stats);
}

CalibrationProblem make_problem(const RunConfig& config, Dataset data) {
  if (config.free.empty()) throw ConfigError("/prior", "calibration needs at least one prior entry");
  CalibrationProblem p;
  p.config = config.sim;
  p.base = config.params;
  p.env = config.env;
  p.free = config.free_indices();
  p.aleatory = config.aleatory_indices();
  p.cov = config.cov;
  p.data = std::move(data);
  p.prior = config.prior;
  p.likelihood = config.likelihood;
  return p;
}

}  // namespace biofilm
