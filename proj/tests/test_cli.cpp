#include "biofilm/rom.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace biofilm;
using nlohmann::json;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(BIOFILM_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json summary(const std::string& dir) { return json::parse(slurp(dir + "/summary.json")); }

/// Case I with a cheap sampler, written next to the test outputs.
std::string small_case_one(const std::string& dir) {
  auto doc = load_json(testing::source_path("configs/caseI.json"));
  doc["sim"]["n_steps"] = 300;
  doc["data"]["m"] = 10;
  doc["likelihood"]["n_samples"] = 100;
  doc["tmcmc"]["n_samples"] = 100;
  doc["tmcmc"]["mh_steps"] = 1;
  const std::string path = dir + "/small.json";
  std::ofstream(path) << doc.dump(2);
  return path;
}

}  // namespace

TEST_CASE("simulate writes N+1 rows that satisfy the constraint") {
  const auto dir = testing::scratch_dir("cli_simulate");
  REQUIRE(run("simulate --config " + testing::source_path("configs/caseI.json") + " --out " + dir) == 0);
  std::ifstream in(dir + "/trajectory.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line.rfind("t,phi_0,phi_1,phi_2,", 0) == 0);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    CHECK(std::abs(v[1] + v[2] + v[3] - 1.0) <= 1e-10);
  }
  CHECK(rows == 1001);
  const auto s = summary(dir);
  CHECK(s["status"] == "ok");
  CHECK(s["exit_code"] == 0);
  CHECK(s["results"]["rows"] == 1001);
  CHECK(s["versions"].contains("eigen"));
  CHECK(s["timings"].contains("simulate_s"));
}

TEST_CASE("exit codes: config error 2, numerical failure 3, internal 1") {
  const auto dir = testing::scratch_dir("cli_errors");
  auto doc = load_json(testing::source_path("configs/caseI.json"));
  doc["sim"]["n_stepz"] = 3;
  std::ofstream(dir + "/unknown.json") << doc.dump();
  CHECK(run("simulate --config " + dir + "/unknown.json --out " + dir + "/a") == 2);
  CHECK(summary(dir + "/a")["error_path"] == "/sim/n_stepz");

  CHECK(run("simulate --config " + dir + "/missing.json --out " + dir + "/b") == 2);
  CHECK(run("simulate --out " + dir + "/c") == 2);
  CHECK(summary(dir + "/c")["status"] == "error");
  CHECK(run("frobnicate --config x") == 2);

  doc = load_json(testing::source_path("configs/caseI.json"));
  doc["sim"]["newton"]["max_iter"] = 1;
  doc["sim"]["newton"]["tol"] = 1e-15;
  std::ofstream(dir + "/stiff.json") << doc.dump();
  CHECK(run("simulate --config " + dir + "/stiff.json --out " + dir + "/d") == 3);
  CHECK(summary(dir + "/d")["error"].get<std::string>().find("step 1") != std::string::npos);

  std::filesystem::create_directories(dir + "/e/trajectory.csv");
  CHECK(run("simulate --config " + testing::source_path("configs/caseI.json") + " --out " + dir + "/e") == 1);
  CHECK(summary(dir + "/e")["exit_code"] == 1);

  CHECK(run("--help") == 0);
  CHECK(run("calibrate --help") == 0);
}

TEST_CASE("generate-data is seed deterministic") {
  const auto dir = testing::scratch_dir("cli_data");
  const auto cfg = testing::source_path("configs/caseI.json");
  REQUIRE(run("generate-data --config " + cfg + " --out " + dir + "/a") == 0);
  REQUIRE(run("generate-data --config " + cfg + " --out " + dir + "/b") == 0);
  REQUIRE(run("generate-data --config " + cfg + " --seed 99 --out " + dir + "/c") == 0);
  CHECK(slurp(dir + "/a/data.csv") == slurp(dir + "/b/data.csv"));
  CHECK(slurp(dir + "/a/data.csv") != slurp(dir + "/c/data.csv"));
  CHECK(summary(dir + "/a")["results"]["points"] == 40);
}

TEST_CASE("build-rom and rom-error") {
  const auto dir = testing::scratch_dir("cli_rom");
  const auto cfg = testing::source_path("configs/caseI.json");
  REQUIRE(run("build-rom --config " + cfg + " --cov 0.02 --out " + dir + "/rom") == 0);
  const auto rom = read_rom(dir + "/rom/rom.json");
  CHECK(rom.size() == 5);
  CHECK(rom.uncertain.cov(0) == 0.02);
  CHECK(summary(dir + "/rom")["results"]["trajectory_solves"] == 6);

  REQUIRE(run("rom-error --config " + cfg + " --cov 0.02 --samples 50 --seed 3 --out " + dir + "/err") == 0);
  const auto s = summary(dir + "/err");
  CHECK(s["results"]["samples"] == 50);
  CHECK(s["results"]["total_error"].get<double>() > 0.0);
  CHECK(s["results"]["max_error"].get<double>() >= s["results"]["total_error"].get<double>());
  CHECK(run("rom-error --config " + cfg + " --samples 0 --out " + dir + "/bad") == 2);
}

TEST_CASE("calibrate is reproducible across runs and thread counts") {
  const auto dir = testing::scratch_dir("cli_calibrate");
  const auto cfg = small_case_one(dir);
  REQUIRE(run("calibrate --config " + cfg + " --seed 4 --out " + dir + "/a") == 0);
  REQUIRE(run("calibrate --config " + cfg + " --seed 4 --threads 3 --out " + dir + "/b") == 0);
  REQUIRE(run("calibrate --config " + cfg + " --seed 5 --out " + dir + "/c") == 0);
  for (const char* file : {"samples.csv", "posterior.json", "map.json", "data.csv", "pbox/a11.csv"}) {
    CAPTURE(file);
    CHECK(slurp(dir + "/a/" + file) == slurp(dir + "/b/" + file));
  }
  CHECK(slurp(dir + "/a/samples.csv") != slurp(dir + "/c/samples.csv"));

  std::ifstream in(dir + "/a/samples.csv");
  std::string header, line;
  std::getline(in, header);
  CHECK(header == "a11,a12,a22,b1,b2,logpost");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 100);
  const auto s = summary(dir + "/a");
  CHECK(s["counters"]["rom_builds"] == s["counters"]["log_likelihood_evaluations"]);
}

TEST_CASE("run-plan and validate on a plan file") {
  const auto dir = testing::scratch_dir("cli_plan");
  auto plan = load_json(testing::source_path("configs/caseII_plan.json"));
  for (auto& st : plan["stages"]) {
    st["config"]["sim"]["n_steps"] = st["name"] == "M3" ? 150 : 300;
    st["config"]["data"]["m"] = 5;
    st["config"]["likelihood"] = {{"n_samples", 50}};
    st["config"]["tmcmc"]["n_samples"] = 100;
    st["config"]["tmcmc"]["mh_steps"] = 1;
  }
  plan["validation"]["config"]["sim"]["n_steps"] = 200;
  plan["validation"]["config"]["data"]["m"] = 5;
  plan["validation"]["max_draws"] = 10;
  std::ofstream(dir + "/plan.json") << plan.dump(2);
  REQUIRE(run("run-plan --config " + dir + "/plan.json --out " + dir + "/runs") == 0);
  const auto s = summary(dir + "/runs");
  CHECK(s["results"]["complete"] == true);
  CHECK(s["results"]["stages"].size() == 3);
  REQUIRE(run("validate --config " + dir + "/plan.json --out " + dir + "/runs") == 0);
  const auto v = summary(dir + "/runs");
  for (const auto& st : v["results"]["stages"]) CHECK(st["status"] == "cached");
  CHECK(v["results"]["validation"].contains("within_3sigma"));
  CHECK(run("validate --config " + testing::source_path("configs/caseI.json") + " --out " + dir + "/x") == 2);
}
