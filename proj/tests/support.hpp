#pragma once

#include "biofilm/config.hpp"

#include <filesystem>
#include <string>

namespace biofilm::testing {

inline std::string source_path(const std::string& relative) { return std::string(BIOFILM_SOURCE_DIR) + "/" + relative; }

inline RunConfig case_one() { return load_run_config(source_path("configs/caseI.json")); }

inline Vector theta_star() {
  Vector t(5);
  t << 1.0, 0.1, 1.0, 1.0, 2.0;
  return t;
}

/// Fresh empty directory under the build tree.
inline std::string scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::path(BIOFILM_BINARY_DIR) / "scratch" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace biofilm::testing
