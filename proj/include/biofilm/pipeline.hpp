#pragma once

#include "biofilm/config.hpp"
#include "biofilm/inference.hpp"
#include "biofilm/pbox.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace biofilm {

/// One calibration stage over a species subset. Parameter names in `free`
/// and `fixed_from_map` are global (full-model) names; `config` is the local
/// submodel whose A and B are filled from the plan's parameter values.
struct Stage {
  std::string name;
  std::vector<int> species;  // 0-based global species, local order
  RunConfig config;
  std::map<std::string, std::string> fixed_from_map;  // global name -> source stage
  std::vector<std::string> depends_on;

  /// Global name of a local layout index, and the reverse (-1 if absent).
  std::string global_name(int local_index) const;
  int local_index(const std::string& global_name) const;
  std::vector<std::string> free_global() const;
};

struct ValidationSpec {
  std::string stage;  // stage whose posterior is propagated
  RunConfig config;   // validation experiment (same species as `stage`)
  int max_draws = 200;
};

struct StagePlan {
  std::string name;
  int species = 0;
  MaterialParamsd params;  // generation truth and literal values for unfree entries
  std::vector<Stage> stages;
  std::optional<ValidationSpec> validation;
  nlohmann::json source;

  /// Throws ConfigError for overlapping free sets, unknown names, missing
  /// sources and dependency cycles.
  void validate() const;
  /// Stage indices in a dependency-respecting order (ties by declaration).
  std::vector<int> topological_order() const;
  std::string hash() const;
};

StagePlan parse_plan(const nlohmann::json& doc, const std::string& base_dir = "");
StagePlan load_plan(const std::string& path);
bool is_plan_document(const nlohmann::json& doc);

/// Everything a calibration run produces; also what the CLI writes.
struct StageOutcome {
  std::string name;
  std::string status = "pending";  // ok | cached | failed | skipped
  std::string error;
  PosteriorResult posterior;
  Vector map;
  std::vector<std::string> names;  // global names of the free parameters
  Matrix correlation;
  std::vector<PBox> pboxes;
  std::vector<PBox> pboxes_credible;
  long evaluations = 0;
  long rom_builds = 0;
  long failures = 0;
  long floor_hits = 0;
  double seconds = 0.0;
  std::string directory;
};

struct PlanResult {
  std::string directory;
  std::string plan_hash;
  std::vector<StageOutcome> stages;
  MaterialParamsd assembled;
  bool complete = false;

  const StageOutcome* find(const std::string& name) const;
};

struct RunOptions {
  std::string root = "runs";
  int threads = 1;
  bool use_cache = true;
};

/// Calibrates one problem and fills map, correlations, p-boxes and counters.
StageOutcome run_calibration(const PosteriorModel& model, const TmcmcSettings& settings, double cov);
/// Writes samples.csv, posterior.json, map.json, pbox/*.csv and report.json.
void write_stage_outputs(const StageOutcome& outcome, const std::string& directory, const nlohmann::json& extra = {});

PlanResult run_plan(const StagePlan& plan, const RunOptions& options);

struct ValidationReport {
  std::vector<int> steps;
  Dataset data;
  Predictive predictive;
  std::vector<double> z;  // one per data point, in dataset order
  double within_3sigma = 0.0;
  int pre_switch_steps = 0;
};

/// Posterior predictive check of `samples` (rows over the local `free`
/// indices, every other entry from `base`) against data generated by `config`.
ValidationReport validate_posterior(const RunConfig& config, const MaterialParamsd& base, const std::vector<int>& free,
                                    const Matrix& samples, int max_draws, int threads, const Dataset* data = nullptr);

/// Runs the plan (cached) and then its validation section.
ValidationReport validate_plan(const StagePlan& plan, const PlanResult& result, const RunOptions& options);

nlohmann::json to_json(const ValidationReport& report);
nlohmann::json stage_summary(const StageOutcome& outcome);

}  // namespace biofilm
