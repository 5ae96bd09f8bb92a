#pragma once

#include "biofilm/common.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace biofilm {

class Rng;

/// Independent uniform priors U(lo_j, hi_j) over the calibrated means.
struct PriorSpec {
  Vector lo;
  Vector hi;

  int size() const { return static_cast<int>(lo.size()); }
  void validate() const;
  bool contains(const Vector& theta) const;
  /// Normalized log-density: -sum log(hi - lo) inside the box, -inf outside.
  double log_density(const Vector& theta) const;
  Vector sample(Rng& rng) const;
  Vector stddev() const;
};

struct TmcmcSettings {
  int n_samples = 5000;
  double target_cov = 1.0;
  double proposal_scale = 0.2;
  int max_stages = 100;
  int mh_steps = 1;  // Metropolis steps per resampled particle and stage
  double min_dbeta = 1e-30;
  std::uint64_t seed = 1;
  int threads = 1;

  void validate() const;
};

struct PosteriorResult {
  Matrix samples;                 // n_samples x p
  Vector log_likelihood;
  Vector log_posterior;           // log-likelihood + log-prior
  std::vector<double> beta;       // beta_0 = 0 < ... < 1
  std::vector<double> acceptance; // one rate per stage after the first
  double log_evidence = 0.0;
  std::vector<std::string> names;
  TmcmcSettings settings;

  int size() const { return static_cast<int>(samples.rows()); }
  int dimension() const { return static_cast<int>(samples.cols()); }
};

/// Raised when the tempering increment underflows the minimum step.
class StageStall : public Error {
 public:
  StageStall(const std::string& what, double beta) : Error(what), beta_(beta) {}
  double beta_reached() const noexcept { return beta_; }

 private:
  double beta_;
};

using LogLikelihoodFn = std::function<double(const Vector&)>;

/// Transitional MCMC: adaptive tempering by bisection on the weight CoV,
/// multinomial resampling and Gaussian random-walk Metropolis mutation with
/// scale^2 times the weighted sample covariance. The log-likelihood must be
/// thread-safe when settings.threads > 1; -inf marks implausible parameters.
PosteriorResult tmcmc(const LogLikelihoodFn& log_likelihood, const PriorSpec& prior,
                      const TmcmcSettings& settings);

/// Tempering increment whose importance weights hit `target_cov`, capped at
/// 1 - beta. `log_likelihood` entries may be -inf.
double next_beta_increment(const Vector& log_likelihood, double beta, double target_cov);

/// Sample with the largest stored log-posterior.
Vector map_estimate(const PosteriorResult& result);

/// Pearson correlation matrix of the sample columns.
Matrix correlations(const Matrix& samples);
inline Matrix correlations(const PosteriorResult& result) { return correlations(result.samples); }

/// Empirical quantile (linear interpolation) of one column.
double quantile(const Vector& values, double q);

/// samples.csv: one column per parameter plus logpost.
void write_posterior_csv(const PosteriorResult& result, std::ostream& out);
void write_posterior_csv(const PosteriorResult& result, const std::string& path);
/// JSON sidecar: beta schedule, acceptance rates, evidence, settings and their hash.
void write_posterior_sidecar(const PosteriorResult& result, const std::string& path);
/// Reads back samples.csv and its sidecar.
PosteriorResult read_posterior(const std::string& csv_path, const std::string& sidecar_path);

}  // namespace biofilm
