#include "biofilm/dataset.hpp"

#include "biofilm/random.hpp"
#include "biofilm/rom.hpp"
#include "biofilm/solver.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>

namespace biofilm {

namespace {

constexpr int kSchemaVersion = 1;
constexpr int kMaxRedraws = 10;

std::string join(const Vector& v) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < v.size(); ++i) out << (i ? ";" : "") << v(i);
  return out.str();
}

std::string join(const std::vector<int>& v) {
  std::ostringstream out;
  for (std::size_t i = 0; i < v.size(); ++i) out << (i ? ";" : "") << v[i];
  return out.str();
}

double parse_double(const std::string& text, int line) {
  double value = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end)
    throw Error("dataset line " + std::to_string(line) + ": cannot parse number '" + text + "'");
  return value;
}

long long parse_int(const std::string& text, int line) {
  long long value = 0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end)
    throw Error("dataset line " + std::to_string(line) + ": cannot parse integer '" + text + "'");
  return value;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(text);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!text.empty() && text.back() == sep) out.emplace_back();
  return out;
}

Vector parse_list(const std::string& text, int line) {
  if (text.empty()) return Vector();
  const auto fields = split(text, ';');
  Vector v(static_cast<Eigen::Index>(fields.size()));
  for (std::size_t i = 0; i < fields.size(); ++i) v(static_cast<Eigen::Index>(i)) = parse_double(fields[i], line);
  return v;
}

Vector draw_realization(const Vector& mean, const Vector& sd, Rng& rng) {
  Vector theta(mean.size());
  for (int attempt = 0;; ++attempt) {
    bool positive = true;
    for (Eigen::Index j = 0; j < mean.size(); ++j) {
      theta(j) = mean(j) + sd(j) * rng.normal();
      if (mean(j) > 0.0 && theta(j) <= 0.0) positive = false;
    }
    if (positive) return theta;
    if (attempt >= 1000) throw InvalidArgument("cannot draw positive parameters at this CoV");
  }
}

}  // namespace

std::vector<int> Dataset::steps() const {
  std::vector<int> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(p.step);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void GenSpec::validate(int n_steps, int n_params) const {
  if (steps.empty()) throw InvalidArgument("data generation needs at least one observation step");
  if (true_means.size() != n_params || cov.size() != n_params)
    throw InvalidArgument("generation means and CoVs must cover every model parameter");
  std::vector<int> sorted = steps;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw InvalidArgument("observation steps must be distinct");
  if (sorted.front() < 1 || sorted.back() > n_steps)
    throw InvalidArgument("observation steps must lie in [1, N]");
  if ((cov.array() < 0.0).any()) throw InvalidArgument("coefficients of variation must be non-negative");
}

std::vector<int> evenly_spaced_steps(int n_steps, int m) {
  if (m < 1 || m > n_steps) throw InvalidArgument("need 1 <= m <= N observation steps");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int i = 1; i <= m; ++i)
    out.push_back(static_cast<int>(std::lround(static_cast<double>(i) * n_steps / m)));
  return out;
}

Dataset generate_dataset(const SimConfig& config, const MaterialParamsd& base, const Environment& env,
                         const GenSpec& spec, GenerationStats* stats) {
  config.validate();
  const int n = base.species();
  const ParameterLayout layout(n);
  spec.validate(config.n_steps, layout.size());
  const Vector sd = spec.cov.cwiseProduct(spec.true_means).cwiseAbs();

  Dataset data;
  data.species = n;
  data.dt = config.dt;
  data.provenance = {spec.seed, spec.true_means, spec.cov,
                     spec.backend == GenerationBackend::Full ? "full" : "surrogate"};

  std::unique_ptr<RomCoefficients> rom;
  UncertainInput uncertain;
  if (spec.backend == GenerationBackend::Surrogate) {
    for (int j = 0; j < layout.size(); ++j)
      if (spec.true_means(j) > 0.0) uncertain.index.push_back(j);
    uncertain.theta0.resize(uncertain.size());
    uncertain.cov.resize(uncertain.size());
    for (int j = 0; j < uncertain.size(); ++j) {
      uncertain.theta0(j) = spec.true_means(uncertain.index[static_cast<std::size_t>(j)]);
      uncertain.cov(j) = spec.cov(uncertain.index[static_cast<std::size_t>(j)]);
    }
    SimConfig horizon = config;
    horizon.n_steps = *std::max_element(spec.steps.begin(), spec.steps.end());
    rom = std::make_unique<RomCoefficients>(
        build_rom(horizon, layout.assign(base, spec.true_means), env, uncertain));
  }

  int redraws = 0;
  for (std::size_t i = 0; i < spec.steps.size(); ++i) {
    const int k = spec.steps[i];
    Rng rng(stream_seed(spec.seed, {static_cast<std::uint64_t>(i)}));
    Vector phi_bar;
    for (int attempt = 0;; ++attempt) {
      const Vector theta = draw_realization(spec.true_means, sd, rng);
      try {
        if (rom) {
          Vector tilde(uncertain.size());
          for (int j = 0; j < uncertain.size(); ++j)
            tilde(j) = theta(uncertain.index[static_cast<std::size_t>(j)]) - uncertain.theta0(j);
          const int step[] = {k};
          phi_bar = evaluate_at(*rom, tilde, step).col(0);
        } else {
          SimConfig stop = config;
          stop.n_steps = k;
          phi_bar = simulate(stop, layout.assign(base, theta), env).phi_bar().col(k);
        }
        break;
      } catch (const NumericalError&) {
        if (attempt >= kMaxRedraws) throw;
        ++redraws;
      }
    }
    for (int l = 0; l < n; ++l) data.points.push_back({k, l, std::clamp(phi_bar(l), 0.0, 1.0)});
  }
  if (stats) stats->redraws = redraws;
  return data;
}

void write_dataset(const Dataset& dataset, std::ostream& out) {
  const auto steps = dataset.steps();
  out << "# schema=" << kSchemaVersion << " n=" << dataset.species << " m=" << steps.size()
      << " seed=" << dataset.provenance.seed << " theta_star=" << join(dataset.provenance.theta_star)
      << " cov=" << join(dataset.provenance.cov) << " backend=" << dataset.provenance.backend
      << " rng=mt19937_64+box-muller\n";
  out << std::setprecision(17) << "# dt=" << dataset.dt << " steps=" << join(steps) << "\n";
  out << "k,t,species,phibar\n";
  for (const auto& p : dataset.points)
    out << p.step << ',' << p.step * dataset.dt << ',' << p.species + 1 << ',' << p.value << '\n';
}

void write_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_dataset(dataset, out);
}

Dataset read_dataset(std::istream& in) {
  Dataset data;
  std::map<std::string, std::string> header;
  std::string line;
  int line_no = 0;
  bool saw_columns = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream tokens(line.substr(1));
      std::string token;
      while (tokens >> token) {
        const auto eq = token.find('=');
        if (eq == std::string::npos) continue;
        header[token.substr(0, eq)] = token.substr(eq + 1);
      }
      continue;
    }
    if (!saw_columns) {
      if (line != "k,t,species,phibar")
        throw Error("dataset line " + std::to_string(line_no) + ": expected header k,t,species,phibar");
      if (!header.count("schema")) throw Error("dataset has no schema version");
      if (header["schema"] != std::to_string(kSchemaVersion))
        throw Error("dataset schema version mismatch: file has " + header["schema"] + ", expected " +
                    std::to_string(kSchemaVersion));
      if (!header.count("n")) throw Error("dataset header lacks n");
      data.species = static_cast<int>(parse_int(header["n"], 1));
      if (header.count("dt")) data.dt = parse_double(header["dt"], line_no);
      if (header.count("seed")) data.provenance.seed = static_cast<std::uint64_t>(std::stoull(header["seed"]));
      if (header.count("theta_star")) data.provenance.theta_star = parse_list(header["theta_star"], 1);
      if (header.count("cov")) data.provenance.cov = parse_list(header["cov"], 1);
      if (header.count("backend")) data.provenance.backend = header["backend"];
      saw_columns = true;
      continue;
    }
    const auto fields = split(line, ',');
    if (fields.size() != 4)
      throw Error("dataset line " + std::to_string(line_no) + ": expected 4 fields, got " +
                  std::to_string(fields.size()));
    Observation p;
    p.step = static_cast<int>(parse_int(fields[0], line_no));
    p.species = static_cast<int>(parse_int(fields[2], line_no)) - 1;
    p.value = parse_double(fields[3], line_no);
    if (p.step < 0) throw Error("dataset line " + std::to_string(line_no) + ": negative step");
    if (p.species < 0 || p.species >= data.species)
      throw Error("dataset line " + std::to_string(line_no) + ": species out of range");
    if (!(p.value >= 0.0 && p.value <= 1.0))
      throw Error("dataset line " + std::to_string(line_no) + ": phibar outside [0, 1]");
    data.points.push_back(p);
  }
  if (!saw_columns) throw Error("dataset has no column header");
  return data;
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_dataset(in);
}

}  // namespace biofilm
