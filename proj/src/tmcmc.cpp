#include "biofilm/tmcmc.hpp"

#include "biofilm/parallel.hpp"
#include "biofilm/random.hpp"
#include "json_util.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace biofilm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Coefficient of variation of exp(dbeta * (L - max L)) over finite entries.
double weight_cov(const Vector& log_likelihood, double max_ll, double dbeta) {
  double sum = 0.0, sum_sq = 0.0;
  int count = 0;
  for (Eigen::Index i = 0; i < log_likelihood.size(); ++i) {
    if (!std::isfinite(log_likelihood(i))) continue;
    const double w = std::exp(dbeta * (log_likelihood(i) - max_ll));
    sum += w;
    sum_sq += w * w;
    ++count;
  }
  const double mean = sum / count;
  const double var = std::max(0.0, sum_sq / count - mean * mean);
  return std::sqrt(var) / mean;
}

double finite_max(const Vector& v) {
  double m = kNegInf;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (std::isfinite(v(i))) m = std::max(m, v(i));
  return m;
}

nlohmann::json settings_json(const TmcmcSettings& s) {
  return {{"n_samples", s.n_samples},   {"target_cov", s.target_cov}, {"proposal_scale", s.proposal_scale},
          {"max_stages", s.max_stages}, {"mh_steps", s.mh_steps},     {"min_dbeta", s.min_dbeta},
          {"seed", s.seed}};
}

}  // namespace

void PriorSpec::validate() const {
  if (lo.size() != hi.size() || lo.size() == 0) throw InvalidArgument("prior bounds must be non-empty and paired");
  if (!(lo.array() < hi.array()).all()) throw InvalidArgument("prior needs lo < hi for every parameter");
}

bool PriorSpec::contains(const Vector& theta) const {
  return theta.size() == lo.size() && (theta.array() > lo.array()).all() && (theta.array() < hi.array()).all();
}

double PriorSpec::log_density(const Vector& theta) const {
  if (!contains(theta)) return kNegInf;
  return -(hi - lo).array().log().sum();
}

Vector PriorSpec::sample(Rng& rng) const {
  Vector theta(size());
  for (int j = 0; j < size(); ++j) theta(j) = lo(j) + (hi(j) - lo(j)) * rng.uniform_open();
  return theta;
}

Vector PriorSpec::stddev() const { return (hi - lo) / std::sqrt(12.0); }

void TmcmcSettings::validate() const {
  if (n_samples < 100) throw InvalidArgument("TMCMC needs at least 100 samples per stage");
  if (!(proposal_scale > 0.0 && proposal_scale <= 1.0)) throw InvalidArgument("proposal scale must lie in (0, 1]");
  if (!(target_cov > 0.0)) throw InvalidArgument("target weight CoV must be positive");
  if (max_stages < 1 || mh_steps < 1) throw InvalidArgument("max_stages and mh_steps must be >= 1");
}

double next_beta_increment(const Vector& log_likelihood, double beta, double target_cov) {
  const double remaining = 1.0 - beta;
  const double max_ll = finite_max(log_likelihood);
  if (!std::isfinite(max_ll)) throw StageStall("no finite log-likelihood values at beta = " + std::to_string(beta), beta);
  if (weight_cov(log_likelihood, max_ll, remaining) <= target_cov) return remaining;
  double lo = 0.0, hi = remaining;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (weight_cov(log_likelihood, max_ll, mid) > target_cov)
      hi = mid;
    else
      lo = mid;
  }
  return lo;
}

PosteriorResult tmcmc(const LogLikelihoodFn& log_likelihood, const PriorSpec& prior,
                      const TmcmcSettings& settings) {
  prior.validate();
  settings.validate();
  const int n = settings.n_samples;
  const int p = prior.size();

  Matrix samples(n, p);
  Vector ll(n);
  for (int i = 0; i < n; ++i) {
    Rng rng(stream_seed(settings.seed, {1, static_cast<std::uint64_t>(i)}));
    samples.row(i) = prior.sample(rng).transpose();
  }
  parallel_for(static_cast<std::size_t>(n), settings.threads, [&](std::size_t i) {
    const auto row = static_cast<Eigen::Index>(i);
    ll(row) = log_likelihood(samples.row(row).transpose());
  });

  PosteriorResult result;
  result.settings = settings;
  result.beta.push_back(0.0);
  double beta = 0.0;
  double log_evidence = 0.0;

  for (int stage = 0; beta < 1.0; ++stage) {
    if (stage >= settings.max_stages)
      throw StageStall("TMCMC exceeded the maximum number of stages", beta);
    double dbeta = next_beta_increment(ll, beta, settings.target_cov);
    double next_beta = beta + dbeta;
    if (1.0 - next_beta < 1e-12) {
      next_beta = 1.0;
      dbeta = 1.0 - beta;
    } else if (dbeta < settings.min_dbeta) {
      throw StageStall("tempering increment underflow at beta = " + std::to_string(beta), beta);
    }

    // Importance weights of the current population for the next tempered density.
    const double max_ll = finite_max(ll);
    Vector w(n);
    for (int i = 0; i < n; ++i) w(i) = std::isfinite(ll(i)) ? std::exp(dbeta * (ll(i) - max_ll)) : 0.0;
    const double w_sum = w.sum();
    log_evidence += std::log(w_sum / n) + dbeta * max_ll;
    const Vector w_norm = w / w_sum;

    const Eigen::RowVectorXd mean = w_norm.transpose() * samples;
    const Matrix centered = samples.rowwise() - mean;
    Matrix proposal_cov = settings.proposal_scale * settings.proposal_scale *
                          (centered.transpose() * w_norm.asDiagonal() * centered);
    Eigen::LLT<Matrix> llt(proposal_cov);
    if (llt.info() != Eigen::Success) {
      proposal_cov.diagonal().array() += 1e-12 * std::max(proposal_cov.trace(), 1e-300);
      llt.compute(proposal_cov);
      if (llt.info() != Eigen::Success) throw Error("TMCMC proposal covariance is not positive definite");
    }
    const Matrix chol = llt.matrixL();

    // Multinomial resampling.
    Vector cumulative(n);
    double running = 0.0;
    for (int i = 0; i < n; ++i) cumulative(i) = (running += w_norm(i));
    Rng resample_rng(stream_seed(settings.seed, {2, static_cast<std::uint64_t>(stage)}));
    Matrix chosen(n, p);
    Vector chosen_ll(n);
    for (int i = 0; i < n; ++i) {
      const double u = resample_rng.uniform() * running;
      const double* begin = cumulative.data();
      const auto idx = static_cast<int>(std::upper_bound(begin, begin + n, u) - begin);
      const int pick = std::min(idx, n - 1);
      chosen.row(i) = samples.row(pick);
      chosen_ll(i) = ll(pick);
    }

    // Metropolis mutation targeting L^next_beta * prior.
    std::vector<int> accepted(static_cast<std::size_t>(n), 0);
    parallel_for(static_cast<std::size_t>(n), settings.threads, [&](std::size_t i) {
      const auto row = static_cast<Eigen::Index>(i);
      Rng rng(stream_seed(settings.seed, {3, static_cast<std::uint64_t>(stage), static_cast<std::uint64_t>(i)}));
      Vector current = chosen.row(row).transpose();
      double current_ll = chosen_ll(row);
      Vector z(p);
      for (int s = 0; s < settings.mh_steps; ++s) {
        for (int j = 0; j < p; ++j) z(j) = rng.normal();
        const Vector candidate = current + chol * z;
        const double u = rng.uniform_open();
        if (!prior.contains(candidate)) continue;
        const double candidate_ll = log_likelihood(candidate);
        if (!std::isfinite(candidate_ll)) continue;
        const double log_alpha = next_beta * (candidate_ll - current_ll);
        if (std::log(u) < log_alpha) {
          current = candidate;
          current_ll = candidate_ll;
          ++accepted[i];
        }
      }
      chosen.row(row) = current.transpose();
      chosen_ll(row) = current_ll;
    });

    long total_accepted = 0;
    for (int a : accepted) total_accepted += a;
    result.acceptance.push_back(static_cast<double>(total_accepted) / (static_cast<double>(n) * settings.mh_steps));
    samples = std::move(chosen);
    ll = std::move(chosen_ll);
    beta = next_beta;
    result.beta.push_back(beta);
  }

  result.samples = std::move(samples);
  result.log_likelihood = ll;
  result.log_posterior.resize(n);
  for (int i = 0; i < n; ++i) result.log_posterior(i) = ll(i) + prior.log_density(result.samples.row(i).transpose());
  result.log_evidence = log_evidence;
  return result;
}

Vector map_estimate(const PosteriorResult& result) {
  if (result.size() == 0 || result.log_posterior.size() != result.size())
    throw InvalidArgument("MAP estimate needs samples with stored log-posterior values");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < result.log_posterior.size(); ++i)
    if (result.log_posterior(i) > result.log_posterior(best)) best = i;
  return result.samples.row(best).transpose();
}

Matrix correlations(const Matrix& samples) {
  if (samples.rows() < 2) throw InvalidArgument("correlations need at least two samples");
  const Eigen::RowVectorXd mean = samples.colwise().mean();
  const Matrix centered = samples.rowwise() - mean;
  const Matrix cov = centered.transpose() * centered;
  const Vector sd = cov.diagonal().cwiseSqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (!(sd(j) > 0.0)) throw DegenerateVariance("constant column " + std::to_string(j) + " has no correlation");
  Matrix rho = cov.array() / (sd * sd.transpose()).array();
  for (Eigen::Index i = 0; i < rho.rows(); ++i) {
    rho(i, i) = 1.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double v = std::clamp(0.5 * (rho(i, j) + rho(j, i)), -1.0, 1.0);
      rho(i, j) = rho(j, i) = v;
    }
  }
  return rho;
}

double quantile(const Vector& values, double q) {
  if (values.size() == 0) throw InvalidArgument("quantile of an empty sample");
  std::vector<double> sorted(values.data(), values.data() + values.size());
  std::sort(sorted.begin(), sorted.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

void write_posterior_csv(const PosteriorResult& result, std::ostream& out) {
  for (int j = 0; j < result.dimension(); ++j) {
    const std::string name = j < static_cast<int>(result.names.size()) ? result.names[static_cast<std::size_t>(j)]
                                                                        : "theta" + std::to_string(j + 1);
    out << name << ',';
  }
  out << "logpost\n" << std::setprecision(17);
  for (int i = 0; i < result.size(); ++i) {
    for (int j = 0; j < result.dimension(); ++j) out << result.samples(i, j) << ',';
    out << result.log_posterior(i) << '\n';
  }
}

void write_posterior_csv(const PosteriorResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_posterior_csv(result, out);
}

void write_posterior_sidecar(const PosteriorResult& result, const std::string& path) {
  nlohmann::json j;
  j["names"] = result.names;
  j["beta"] = result.beta;
  j["acceptance"] = result.acceptance;
  j["stages"] = static_cast<int>(result.beta.size()) - 1;
  j["log_evidence"] = result.log_evidence;
  j["n_samples"] = result.size();
  j["seed"] = result.settings.seed;
  j["settings"] = settings_json(result.settings);
  j["settings_hash"] = detail::hex64(detail::fnv1a(j["settings"].dump()));
  // log-likelihood = log-posterior - log-prior; the prior is uniform, so one value suffices.
  j["log_prior"] = result.size() > 0 ? result.log_posterior(0) - result.log_likelihood(0) : 0.0;
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

PosteriorResult read_posterior(const std::string& csv_path, const std::string& sidecar_path) {
  std::ifstream side(sidecar_path);
  if (!side) throw Error("cannot open " + sidecar_path);
  nlohmann::json j;
  side >> j;
  PosteriorResult result;
  result.names = j.at("names").get<std::vector<std::string>>();
  result.beta = j.at("beta").get<std::vector<double>>();
  result.acceptance = j.at("acceptance").get<std::vector<double>>();
  result.log_evidence = j.at("log_evidence").get<double>();
  const auto& s = j.at("settings");
  result.settings.n_samples = s.at("n_samples").get<int>();
  result.settings.target_cov = s.at("target_cov").get<double>();
  result.settings.proposal_scale = s.at("proposal_scale").get<double>();
  result.settings.max_stages = s.at("max_stages").get<int>();
  result.settings.mh_steps = s.at("mh_steps").get<int>();
  result.settings.min_dbeta = s.at("min_dbeta").get<double>();
  result.settings.seed = s.at("seed").get<std::uint64_t>();
  const double log_prior = j.at("log_prior").get<double>();

  std::ifstream in(csv_path);
  if (!in) throw Error("cannot open " + csv_path);
  std::string line;
  std::getline(in, line);
  const auto p = static_cast<Eigen::Index>(result.names.size());
  std::vector<double> values;
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string field;
    int count = 0;
    while (std::getline(fields, field, ',')) {
      values.push_back(std::stod(field));
      ++count;
    }
    if (count != p + 1) throw Error(csv_path + ": row " + std::to_string(rows + 2) + " has the wrong width");
    ++rows;
  }
  result.samples.resize(rows, p);
  result.log_posterior.resize(rows);
  for (int i = 0; i < rows; ++i) {
    for (Eigen::Index c = 0; c < p; ++c) result.samples(i, c) = values[static_cast<std::size_t>(i * (p + 1) + c)];
    result.log_posterior(i) = values[static_cast<std::size_t>(i * (p + 1) + p)];
  }
  result.log_likelihood = result.log_posterior.array() - log_prior;
  return result;
}

}  // namespace biofilm
