#pragma once

#include "biofilm/dataset.hpp"
#include "biofilm/model.hpp"
#include "biofilm/rom.hpp"
#include "biofilm/tmcmc.hpp"

#include <atomic>
#include <mutex>
#include <span>
#include <string>
#include <vector>

namespace biofilm {

/// Standard: -1/2 log(2 pi sigma^2) per point. Unhalved uses -log(2 pi sigma^2).
enum class LikelihoodNormalization { Standard, Unhalved };

struct LikelihoodOptions {
  LikelihoodNormalization normalization = LikelihoodNormalization::Standard;
  double variance_floor = 1e-12;  // <= 0 disables flooring
  bool full_covariance = false;
  MomentOptions moments;
};

struct LikelihoodStats {
  int floor_hits = 0;
};

/// Sum over data points of the Gaussian log-density with the moment mean and
/// variance at (step, species). Throws InvalidArgument for a step or species
/// missing from `moments` and DegenerateVariance for variances below the
/// floor when flooring is disabled.
double log_likelihood_diag(const MomentSeries& moments, const Dataset& data, const LikelihoodOptions& options = {},
                           LikelihoodStats* stats = nullptr);

/// Multivariate Gaussian across species per observed step. `cov[c]` belongs to
/// moments.steps[c]. Every species must be observed at each used step.
double log_likelihood_full(const MomentSeries& moments, const std::vector<Matrix>& cov, const Dataset& data,
                           const LikelihoodOptions& options = {}, LikelihoodStats* stats = nullptr);

/// Aleatory input over the `aleatory` layout entries (all when empty) whose
/// value is positive; zero entries carry no CoV-based scatter.
UncertainInput aleatory_input(const MaterialParamsd& params, const std::vector<int>& aleatory, double cov);

/// The single-loop calibration problem: theta holds the free entries of the
/// ParameterLayout (in `free` order); every other entry keeps its value in
/// `base`. Aleatory perturbation applies to the `aleatory` entries with
/// positive value (all entries if empty).
struct CalibrationProblem {
  SimConfig config;
  MaterialParamsd base;
  Environment env;
  std::vector<int> free;
  std::vector<int> aleatory;
  double cov = 0.005;
  Dataset data;
  PriorSpec prior;
  LikelihoodOptions likelihood;

  void validate() const;
};

class PosteriorModel {
 public:
  explicit PosteriorModel(CalibrationProblem problem);

  const CalibrationProblem& problem() const { return problem_; }
  std::vector<std::string> names() const;
  MaterialParamsd params_at(const Vector& theta) const;
  UncertainInput uncertain_at(const MaterialParamsd& params) const;

  /// -inf outside the prior (no model evaluation) or when the forward solve fails.
  double log_likelihood(const Vector& theta) const;
  double log_posterior(const Vector& theta) const;

  /// Moments of phi_bar at `steps` for the mean parameters `theta`.
  MomentSeries predict(const Vector& theta, std::span<const int> steps) const;

  long evaluations() const { return evaluations_.load(); }
  long rom_builds() const { return rom_builds_.load(); }
  long failures() const { return failures_.load(); }
  long floor_hits() const { return floor_hits_.load(); }
  std::string first_failure() const;

 private:
  CalibrationProblem problem_;
  std::vector<int> steps_;
  SimConfig horizon_;
  mutable std::atomic<long> evaluations_{0};
  mutable std::atomic<long> rom_builds_{0};
  mutable std::atomic<long> failures_{0};
  mutable std::atomic<long> floor_hits_{0};
  mutable std::mutex failure_mutex_;
  mutable std::string first_failure_;
};

PosteriorResult calibrate(const PosteriorModel& model, const TmcmcSettings& settings);

/// Posterior predictive at `steps`: mixture moments over the sample rows
/// (mean of the means; mean variance plus variance of the means) and the
/// 2.5% / 97.5% band of the zeroth-order phi_bar across samples.
struct Predictive {
  std::vector<int> steps;
  Matrix mean;
  Matrix var;
  Matrix zeroth_lo;
  Matrix zeroth_hi;
  int used = 0;
  int failed = 0;
};

/// Uses at most `max_draws` rows, evenly strided through `samples`.
Predictive posterior_predictive(const PosteriorModel& model, const Matrix& samples, std::span<const int> steps,
                                int max_draws = 200, int threads = 1);

}  // namespace biofilm
