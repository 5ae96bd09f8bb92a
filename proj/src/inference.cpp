#include "biofilm/inference.hpp"

#include "biofilm/parallel.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <set>

namespace biofilm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454836;

double floored(double var, const LikelihoodOptions& options, LikelihoodStats& stats) {
  if (std::isnan(var)) throw DegenerateVariance("output variance is NaN");
  if (options.variance_floor > 0.0) {
    if (var < options.variance_floor) {
      ++stats.floor_hits;
      return options.variance_floor;
    }
    return var;
  }
  if (!(var > 0.0)) throw DegenerateVariance("output variance " + std::to_string(var) + " is not positive");
  return var;
}

double normalization_factor(const LikelihoodOptions& options) {
  return options.normalization == LikelihoodNormalization::Standard ? 0.5 : 1.0;
}

int column_of(const MomentSeries& moments, int step) {
  const int c = moments.column(step);
  if (c < 0) throw InvalidArgument("no moments computed at observed step " + std::to_string(step));
  return c;
}

void check_species(const MomentSeries& moments, const Observation& p) {
  if (p.species < 0 || p.species >= moments.mean.rows())
    throw InvalidArgument("observed species " + std::to_string(p.species + 1) + " is not part of the model");
}

struct Surrogate {
  MomentSeries moments;
  std::vector<Matrix> cov;
  Matrix zeroth;  // n x steps
};

}  // namespace

double log_likelihood_diag(const MomentSeries& moments, const Dataset& data, const LikelihoodOptions& options,
                           LikelihoodStats* stats) {
  LikelihoodStats local;
  const double norm = normalization_factor(options);
  double sum = 0.0;
  for (const auto& p : data.points) {
    check_species(moments, p);
    const int c = column_of(moments, p.step);
    const double var = floored(moments.var(p.species, c), options, local);
    const double r = p.value - moments.mean(p.species, c);
    sum += -norm * (kLog2Pi + std::log(var)) - 0.5 * r * r / var;
  }
  if (stats) stats->floor_hits += local.floor_hits;
  return sum;
}

double log_likelihood_full(const MomentSeries& moments, const std::vector<Matrix>& cov, const Dataset& data,
                           const LikelihoodOptions& options, LikelihoodStats* stats) {
  if (cov.size() != moments.steps.size()) throw InvalidArgument("one covariance matrix per moment step is required");
  LikelihoodStats local;
  const double norm = normalization_factor(options);

  std::map<int, std::vector<const Observation*>> by_step;
  for (const auto& p : data.points) {
    check_species(moments, p);
    by_step[p.step].push_back(&p);
  }

  double sum = 0.0;
  for (const auto& [step, points] : by_step) {
    const int c = column_of(moments, step);
    const auto d = static_cast<Eigen::Index>(points.size());
    Matrix sigma(d, d);
    Vector r(d);
    for (Eigen::Index i = 0; i < d; ++i) {
      const int li = points[static_cast<std::size_t>(i)]->species;
      r(i) = points[static_cast<std::size_t>(i)]->value - moments.mean(li, c);
      for (Eigen::Index j = 0; j < d; ++j) sigma(i, j) = cov[static_cast<std::size_t>(c)](li, points[static_cast<std::size_t>(j)]->species);
    }
    for (Eigen::Index i = 0; i < d; ++i) sigma(i, i) = floored(sigma(i, i), options, local);

    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) {
      sigma.diagonal().array() += 1e-10 * sigma.trace() / static_cast<double>(d);
      llt.compute(sigma);
      if (llt.info() != Eigen::Success)
        throw SingularCovariance("output covariance at step " + std::to_string(step) + " is singular");
    }
    const Vector z = llt.matrixL().solve(r);
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
    sum += -norm * (static_cast<double>(d) * kLog2Pi + log_det) - 0.5 * z.squaredNorm();
  }
  if (stats) stats->floor_hits += local.floor_hits;
  return sum;
}

void CalibrationProblem::validate() const {
  config.validate();
  const ParameterLayout layout(base.species());
  if (config.species() != base.species()) throw InvalidArgument("initial state and parameters disagree on species");
  if (free.empty()) throw InvalidArgument("calibration needs at least one free parameter");
  std::set<int> seen;
  for (int j : free) {
    if (j < 0 || j >= layout.size()) throw InvalidArgument("free parameter index out of range");
    if (!seen.insert(j).second) throw InvalidArgument("free parameter listed twice: " + layout.name(j));
  }
  for (int j : aleatory)
    if (j < 0 || j >= layout.size()) throw InvalidArgument("aleatory parameter index out of range");
  prior.validate();
  if (prior.size() != static_cast<int>(free.size()))
    throw InvalidArgument("prior has " + std::to_string(prior.size()) + " bounds for " +
                          std::to_string(free.size()) + " free parameters");
  if (!(cov >= 0.0)) throw InvalidArgument("coefficient of variation must be non-negative");
  if (data.empty()) throw InvalidArgument("calibration dataset is empty");
  if (data.species != base.species()) throw InvalidArgument("dataset species count does not match the model");
  for (const auto& p : data.points)
    if (p.step < 1 || p.step > config.n_steps)
      throw InvalidArgument("observation step " + std::to_string(p.step) + " outside [1, N]");
}

PosteriorModel::PosteriorModel(CalibrationProblem problem) : problem_(std::move(problem)) {
  problem_.validate();
  steps_ = problem_.data.steps();
  horizon_ = problem_.config;
  horizon_.n_steps = steps_.back();
}

std::vector<std::string> PosteriorModel::names() const {
  const ParameterLayout layout(problem_.base.species());
  std::vector<std::string> out;
  for (int j : problem_.free) out.push_back(layout.name(j));
  return out;
}

MaterialParamsd PosteriorModel::params_at(const Vector& theta) const {
  if (theta.size() != static_cast<Eigen::Index>(problem_.free.size()))
    throw InvalidArgument("parameter vector has the wrong size");
  const ParameterLayout layout(problem_.base.species());
  Vector full = layout.extract(problem_.base);
  for (std::size_t i = 0; i < problem_.free.size(); ++i) full(problem_.free[i]) = theta(static_cast<Eigen::Index>(i));
  return layout.assign(problem_.base, full);
}

UncertainInput aleatory_input(const MaterialParamsd& params, const std::vector<int>& aleatory, double cov) {
  const ParameterLayout layout(params.species());
  const Vector full = layout.extract(params);
  std::vector<int> candidates = aleatory;
  if (candidates.empty())
    for (int j = 0; j < layout.size(); ++j) candidates.push_back(j);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  UncertainInput u;
  for (int j : candidates)
    if (full(j) > 0.0) u.index.push_back(j);
  u.theta0.resize(u.size());
  for (int i = 0; i < u.size(); ++i) u.theta0(i) = full(u.index[static_cast<std::size_t>(i)]);
  u.cov = Vector::Constant(u.size(), cov);
  return u;
}

UncertainInput PosteriorModel::uncertain_at(const MaterialParamsd& params) const {
  return aleatory_input(params, problem_.aleatory, problem_.cov);
}

namespace {

Surrogate run_surrogate(const CalibrationProblem& problem, const SimConfig& horizon, const MaterialParamsd& params,
                        const UncertainInput& uncertain, std::span<const int> steps, bool with_cov) {
  const RomCoefficients rom = build_rom(horizon, params, problem.env, uncertain);
  Surrogate s;
  s.moments = moments(rom, uncertain, problem.likelihood.moments, steps);
  if (with_cov) s.cov = covariance(rom, uncertain, problem.likelihood.moments, steps);
  const Matrix phi_bar = rom.zeroth.phi_bar();
  s.zeroth.resize(rom.species(), static_cast<Eigen::Index>(steps.size()));
  for (std::size_t c = 0; c < steps.size(); ++c) s.zeroth.col(static_cast<Eigen::Index>(c)) = phi_bar.col(steps[c]);
  return s;
}

}  // namespace

double PosteriorModel::log_likelihood(const Vector& theta) const {
  if (!problem_.prior.contains(theta)) return kNegInf;
  ++evaluations_;
  try {
    const MaterialParamsd params = params_at(theta);
    const UncertainInput uncertain = uncertain_at(params);
    ++rom_builds_;
    const bool full = problem_.likelihood.full_covariance;
    const Surrogate s = run_surrogate(problem_, horizon_, params, uncertain, steps_, full);
    LikelihoodStats stats;
    const double ll = full ? log_likelihood_full(s.moments, s.cov, problem_.data, problem_.likelihood, &stats)
                           : log_likelihood_diag(s.moments, problem_.data, problem_.likelihood, &stats);
    floor_hits_ += stats.floor_hits;
    return std::isnan(ll) ? kNegInf : ll;
  } catch (const NumericalError& e) {
    ++failures_;
    std::lock_guard lock(failure_mutex_);
    if (first_failure_.empty()) first_failure_ = e.what();
  } catch (const DegenerateVariance& e) {
    ++failures_;
    std::lock_guard lock(failure_mutex_);
    if (first_failure_.empty()) first_failure_ = e.what();
  } catch (const SingularCovariance& e) {
    ++failures_;
    std::lock_guard lock(failure_mutex_);
    if (first_failure_.empty()) first_failure_ = e.what();
  }
  return kNegInf;
}

double PosteriorModel::log_posterior(const Vector& theta) const {
  const double log_prior = problem_.prior.log_density(theta);
  if (!std::isfinite(log_prior)) return kNegInf;
  return log_prior + log_likelihood(theta);
}

MomentSeries PosteriorModel::predict(const Vector& theta, std::span<const int> steps) const {
  if (steps.empty()) throw InvalidArgument("prediction needs at least one step");
  SimConfig horizon = problem_.config;
  horizon.n_steps = *std::max_element(steps.begin(), steps.end());
  const MaterialParamsd params = params_at(theta);
  return run_surrogate(problem_, horizon, params, uncertain_at(params), steps, false).moments;
}

std::string PosteriorModel::first_failure() const {
  std::lock_guard lock(failure_mutex_);
  return first_failure_;
}

PosteriorResult calibrate(const PosteriorModel& model, const TmcmcSettings& settings) {
  PosteriorResult result =
      tmcmc([&model](const Vector& theta) { return model.log_likelihood(theta); }, model.problem().prior, settings);
  result.names = model.names();
  return result;
}

Predictive posterior_predictive(const PosteriorModel& model, const Matrix& samples, std::span<const int> steps,
                                int max_draws, int threads) {
  if (samples.rows() == 0) throw InvalidArgument("posterior predictive needs samples");
  if (steps.empty()) throw InvalidArgument("posterior predictive needs at least one step");
  const auto total = static_cast<int>(samples.rows());
  const int draws = std::min(total, std::max(max_draws, 1));
  const int n = model.problem().base.species();
  const auto cols = static_cast<Eigen::Index>(steps.size());
  SimConfig horizon = model.problem().config;
  horizon.n_steps = *std::max_element(steps.begin(), steps.end());

  std::vector<Surrogate> runs(static_cast<std::size_t>(draws));
  std::vector<char> ok(static_cast<std::size_t>(draws), 0);
  parallel_for(static_cast<std::size_t>(draws), threads, [&](std::size_t i) {
    const auto row = static_cast<Eigen::Index>((static_cast<long>(i) * total) / draws);
    try {
      const MaterialParamsd params = model.params_at(samples.row(row).transpose());
      runs[i] = run_surrogate(model.problem(), horizon, params, model.uncertain_at(params), steps, false);
      ok[i] = 1;
    } catch (const NumericalError&) {
    }
  });

  Predictive out;
  out.steps.assign(steps.begin(), steps.end());
  out.mean = Matrix::Zero(n, cols);
  out.var = Matrix::Zero(n, cols);
  out.zeroth_lo.resize(n, cols);
  out.zeroth_hi.resize(n, cols);
  std::vector<const Surrogate*> good;
  for (int i = 0; i < draws; ++i)
    if (ok[static_cast<std::size_t>(i)]) good.push_back(&runs[static_cast<std::size_t>(i)]);
  out.used = static_cast<int>(good.size());
  out.failed = draws - out.used;
  if (good.empty()) throw NumericalError("every posterior predictive draw failed", 0.0, -1);

  const double m = static_cast<double>(good.size());
  for (const Surrogate* s : good) out.mean += s->moments.mean / m;
  Vector column(static_cast<Eigen::Index>(good.size()));
  for (int l = 0; l < n; ++l) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      double within = 0.0, between = 0.0;
      for (std::size_t i = 0; i < good.size(); ++i) {
        within += good[i]->moments.var(l, c);
        const double d = good[i]->moments.mean(l, c) - out.mean(l, c);
        between += d * d;
        column(static_cast<Eigen::Index>(i)) = good[i]->zeroth(l, c);
      }
      out.var(l, c) = within / m + between / m;
      out.zeroth_lo(l, c) = quantile(column, 0.025);
      out.zeroth_hi(l, c) = quantile(column, 0.975);
    }
  }
  return out;
}

}  // namespace biofilm
