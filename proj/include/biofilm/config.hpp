#pragma once

#include "biofilm/dataset.hpp"
#include "biofilm/inference.hpp"
#include "biofilm/model.hpp"
#include "biofilm/tmcmc.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace biofilm {

/// Invalid configuration. `path()` is the JSON pointer of the offending value.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : Error((path.empty() ? std::string("/") : path) + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

struct DataSettings {
  std::vector<int> steps;  // resolved observation steps
  std::uint64_t seed = 1;
  GenerationBackend backend = GenerationBackend::Full;
  std::string path;  // read instead of generating when set
};

struct RunConfig {
  MaterialParamsd params;  // mean values; the generation truth for synthetic data
  SimConfig sim;
  Environment env;
  double cov = 0.005;
  std::vector<std::string> aleatory;  // empty = every parameter
  DataSettings data;
  std::vector<std::string> free;  // prior keys in layout order
  PriorSpec prior;
  LikelihoodOptions likelihood;
  TmcmcSettings tmcmc;
  std::string output_dir = "out";
  nlohmann::json source;  // the parsed document, for hashing and echoing

  /// Layout indices of `free` and `aleatory`.
  std::vector<int> free_indices() const;
  std::vector<int> aleatory_indices() const;
};

struct ParseOptions {
  bool require_params = true;  // model.A and model.B must be present
  std::string base_dir;        // relative data paths resolve against this
  std::string path_prefix;     // JSON pointer prefix for error messages
};

RunConfig parse_run_config(const nlohmann::json& doc, const ParseOptions& options = {});
RunConfig load_run_config(const std::string& path);
nlohmann::json load_json(const std::string& path);

Environment parse_environment(const nlohmann::json& doc, const std::string& path);

/// Reads data.path or generates the synthetic dataset described by the config.
Dataset obtain_dataset(const RunConfig& config, GenerationStats* stats = nullptr);

CalibrationProblem make_problem(const RunConfig& config, Dataset data);

}  // namespace biofilm
