#pragma once

#include "biofilm/model.hpp"
#include "biofilm/solver.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace biofilm {

/// Aleatory model of the parameters: theta = theta0 + theta_tilde with
/// independent theta_tilde_j ~ Normal(0, (cov_j * theta0_j)^2).
///
/// `index` lists the perturbed entries of the ParameterLayout in the order used
/// by theta0, cov and every first-order coefficient.
struct UncertainInput {
  std::vector<int> index;
  Vector theta0;
  Vector cov;

  int size() const { return static_cast<int>(index.size()); }
  Vector stddev() const { return cov.cwiseProduct(theta0); }
  void validate(const ParameterLayout& layout) const;

  /// All layout entries perturbed with one shared coefficient of variation.
  static UncertainInput all(const MaterialParamsd& mean, double cov);
};

/// Zeroth-order trajectory plus one packed sensitivity trajectory per uncertain
/// parameter. Immutable after construction.
struct RomCoefficients {
  Trajectory zeroth;
  std::vector<Matrix> first;  // each packed_size(n) x (N+1)
  UncertainInput uncertain;
  MaterialParamsd params;
  SimConfig config;
  int max_first_order_iterations = 0;

  int species() const { return zeroth.species(); }
  int n_steps() const { return zeroth.n_steps(); }
  int size() const { return static_cast<int>(first.size()); }
};

/// Staggered zeroth/first-order solve. `params_at_mean` must already hold the
/// uncertain means; `uncertain.theta0` is only recorded.
RomCoefficients build_rom(const SimConfig& config, const MaterialParamsd& params_at_mean,
                          const Environment& env, const UncertainInput& uncertain);

/// Surrogate phi and psi (n x (N+1) each) at a perturbation theta_tilde.
struct SurrogateStates {
  Matrix phi;
  Matrix psi;
};
SurrogateStates evaluate_states(const RomCoefficients& rom, const Vector& theta_tilde);

/// Surrogate phi_bar, one row per species and one column per step.
Matrix evaluate(const RomCoefficients& rom, const Vector& theta_tilde);

/// Surrogate phi_bar restricted to `steps` (one column per entry).
Matrix evaluate_at(const RomCoefficients& rom, const Vector& theta_tilde, std::span<const int> steps);

enum class MomentMethod { Analytic, Sampled };

struct MomentOptions {
  MomentMethod method = MomentMethod::Sampled;
  int n_samples = 500;
  std::uint64_t seed = 1;
};

struct MomentSeries {
  std::vector<int> steps;  // column k of mean/var belongs to step steps[k]
  Matrix mean;             // n x steps
  Matrix var;              // n x steps
  MomentOptions options;
  int truncated_draws = 0;

  /// Column for a step, or -1 if the step was not computed.
  int column(int step) const;
};

/// Mean and variance of phi_bar. `steps` empty means every step 0..N.
MomentSeries moments(const RomCoefficients& rom, const UncertainInput& uncertain,
                     const MomentOptions& options, std::span<const int> steps = {});

/// Per-step n x n covariance of phi_bar across species at `steps`.
std::vector<Matrix> covariance(const RomCoefficients& rom, const UncertainInput& uncertain,
                               const MomentOptions& options, std::span<const int> steps);

/// Gaussian perturbation draws (one row each) with non-positive physical
/// parameters resampled. Returns the number of resampled rows in `truncated`.
Matrix draw_perturbations(const UncertainInput& uncertain, int n_samples, std::uint64_t seed,
                          int* truncated = nullptr);

struct RomErrorReport {
  Vector per_step;  // mean over draws of the Euclidean phi_bar distance, N+1 entries
  double total = 0.0;  // average of per_step over steps 1..N
  double max = 0.0;
  int used = 0;
  int skipped = 0;
};

/// Compares the surrogate against full solves at `n_samples` parameter draws.
RomErrorReport rom_error(const RomCoefficients& rom, const SimConfig& config,
                         const MaterialParamsd& params, const Environment& env,
                         const UncertainInput& uncertain, int n_samples, std::uint64_t seed,
                         int threads = 1);

/// Versioned JSON serialization of the whole ROM.
void write_rom(const RomCoefficients& rom, std::ostream& out);
void write_rom(const RomCoefficients& rom, const std::string& path);
RomCoefficients read_rom(std::istream& in);
RomCoefficients read_rom(const std::string& path);

}  // namespace biofilm
