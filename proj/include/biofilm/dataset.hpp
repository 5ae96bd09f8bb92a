#pragma once

#include "biofilm/model.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace biofilm {

/// One observed living volume fraction. `species` is 0-based in memory and
/// written 1-based to disk.
struct Observation {
  int step = 0;
  int species = 0;
  double value = 0.0;

  bool operator==(const Observation&) const = default;
};

struct DatasetProvenance {
  std::uint64_t seed = 0;
  Vector theta_star;
  Vector cov;
  std::string backend = "full";
};

struct Dataset {
  int species = 0;
  double dt = 0.0;
  std::vector<Observation> points;
  DatasetProvenance provenance;

  /// Distinct observation steps in ascending order.
  std::vector<int> steps() const;
  bool empty() const { return points.empty(); }
};

enum class GenerationBackend { Full, Surrogate };

/// Synthetic-experiment protocol. `true_means` and `cov` are over the full
/// ParameterLayout of the model; each observation step gets its own
/// parameter realization and its own simulation stopped at that step.
struct GenSpec {
  Vector true_means;
  Vector cov;
  std::vector<int> steps;
  std::uint64_t seed = 0;
  GenerationBackend backend = GenerationBackend::Full;

  void validate(int n_steps, int n_params) const;
};

/// m steps evenly spaced over (0, n_steps]: round(i * n_steps / m), i = 1..m.
std::vector<int> evenly_spaced_steps(int n_steps, int m);

struct GenerationStats {
  int redraws = 0;
};

/// Dataset from independent realizations; deterministic in spec.seed.
Dataset generate_dataset(const SimConfig& config, const MaterialParamsd& base, const Environment& env,
                         const GenSpec& spec, GenerationStats* stats = nullptr);

/// CSV with a `# schema=1 ...` comment header followed by k,t,species,phibar.
void write_dataset(const Dataset& dataset, std::ostream& out);
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(std::istream& in);
Dataset read_dataset(const std::string& path);

}  // namespace biofilm
