#include "biofilm/rom.hpp"
#include "biofilm/solver.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

using namespace biofilm;

namespace {

struct Fixture {
  RunConfig cfg = testing::case_one();
  UncertainInput uncertain = UncertainInput::all(cfg.params, 0.005);
  RomCoefficients rom = build_rom(cfg.sim, cfg.params, cfg.env, uncertain);
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("zeroth order equals the deterministic simulation bit for bit") {
  const auto& f = fixture();
  const auto traj = simulate(f.cfg.sim, f.cfg.params, f.cfg.env);
  CHECK(f.rom.zeroth.packed() == traj.packed());
  CHECK(f.rom.size() == 5);
  CHECK(f.rom.max_first_order_iterations <= 2);
  CHECK(evaluate(f.rom, Vector::Zero(5)) == traj.phi_bar());
}

TEST_CASE("first-order coefficients match central finite differences of the full model") {
  const auto& f = fixture();
  ParameterLayout layout(2);
  const Vector theta = layout.extract(f.cfg.params);
  SimConfig sim = f.cfg.sim;
  sim.n_steps = 500;
  for (int j = 0; j < 5; ++j) {
    const double h = 1e-6 * theta(j);
    Vector tp = theta, tm = theta;
    tp(j) += h;
    tm(j) -= h;
    const Matrix fd = (simulate(sim, layout.assign(f.cfg.params, tp), f.cfg.env).packed() -
                       simulate(sim, layout.assign(f.cfg.params, tm), f.cfg.env).packed()) /
                      (2 * h);
    const Matrix sens = f.rom.first[static_cast<std::size_t>(j)].leftCols(501);
    const double err = (sens.topRows(4) - fd.topRows(4)).cwiseAbs().maxCoeff();
    const double scale = fd.topRows(4).cwiseAbs().maxCoeff();
    CAPTURE(j);
    CHECK(err / scale <= 1e-4);
  }
}

TEST_CASE("surrogate is linear in the perturbation before forming phi_bar") {
  const auto& f = fixture();
  Vector a(5), b(5);
  a << 0.004, -0.0003, 0.002, 0.005, -0.01;
  b << -0.002, 0.0005, 0.001, -0.004, 0.006;
  const auto z = evaluate_states(f.rom, Vector::Zero(5));
  const auto sa = evaluate_states(f.rom, a);
  const auto sb = evaluate_states(f.rom, b);
  const auto sab = evaluate_states(f.rom, a + b);
  CHECK(((sab.phi - z.phi) - (sa.phi - z.phi) - (sb.phi - z.phi)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(((sab.psi - z.psi) - (sa.psi - z.psi) - (sb.psi - z.psi)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("a small perturbation moves phi_bar by the product-rule sensitivity") {
  const auto& f = fixture();
  const Matrix zeroth = f.rom.zeroth.phi_bar();
  const Matrix phi0 = f.rom.zeroth.phi(), psi0 = f.rom.zeroth.psi();
  for (int j = 0; j < 5; ++j) {
    const auto& first = f.rom.first[static_cast<std::size_t>(j)];
    const Matrix linear = first.topRows(2).cwiseProduct(psi0) + phi0.cwiseProduct(first.middleRows(2, 2));
    double previous = 0.0;
    for (double h : {1e-3, 5e-4}) {
      const Vector e = Vector::Unit(5, j) * h;
      const double err = ((evaluate(f.rom, e) - zeroth) - h * linear).cwiseAbs().maxCoeff();
      if (previous > 0.0 && err > 1e-14) CHECK(err / previous == doctest::Approx(0.25).epsilon(0.05));
      previous = err;
    }
  }
}

TEST_CASE("evaluate_at picks the requested columns") {
  const auto& f = fixture();
  Vector t(5);
  t << 0.001, 0.0, -0.002, 0.003, 0.001;
  const std::vector<int> steps{0, 17, 1000};
  const Matrix all = evaluate(f.rom, t);
  const Matrix some = evaluate_at(f.rom, t, steps);
  for (std::size_t c = 0; c < steps.size(); ++c) CHECK(some.col(static_cast<Eigen::Index>(c)) == all.col(steps[c]));
  CHECK_THROWS_AS(evaluate(f.rom, Vector::Zero(4)), InvalidArgument);
  const std::vector<int> bad{1001};
  CHECK_THROWS_AS(evaluate_at(f.rom, t, bad), InvalidArgument);
}

TEST_CASE("zero CoV: sensitivities still built, moments collapse onto the zeroth order") {
  const auto& f = fixture();
  const auto none = UncertainInput::all(f.cfg.params, 0.0);
  const auto rom = build_rom(f.cfg.sim, f.cfg.params, f.cfg.env, none);
  CHECK(rom.size() == 5);
  CHECK(rom.first[3].cwiseAbs().maxCoeff() > 0.0);
  for (auto method : {MomentMethod::Analytic, MomentMethod::Sampled}) {
    const auto m = moments(rom, none, {method, 50, 3});
    CHECK(m.var.cwiseAbs().maxCoeff() == 0.0);
    CHECK(m.mean == rom.zeroth.phi_bar());
  }
  const auto report = rom_error(rom, f.cfg.sim, f.cfg.params, f.cfg.env, none, 5, 1);
  CHECK(report.total == 0.0);
  CHECK(report.max == 0.0);
  CHECK(report.used == 5);
}

TEST_CASE("sampled moments converge to the analytic moments") {
  const auto& f = fixture();
  std::vector<int> steps;
  for (int k = 10; k <= 1000; k += 10) steps.push_back(k);
  const auto analytic = moments(f.rom, f.uncertain, {MomentMethod::Analytic, 0, 0}, steps);
  const auto sampled = moments(f.rom, f.uncertain, {MomentMethod::Sampled, 1000000, 42}, steps);
  const Matrix sa = analytic.var.cwiseSqrt(), ss = sampled.var.cwiseSqrt();
  CHECK(((ss - sa).array() / sa.array()).abs().maxCoeff() <= 0.01);
  CHECK(analytic.var.minCoeff() >= 0.0);
  CHECK(sampled.var.minCoeff() >= 0.0);
  CHECK(sampled.column(20) == 1);
  CHECK(sampled.column(15) == -1);
}

TEST_CASE("sampled moments and draws are seed reproducible") {
  const auto& f = fixture();
  const auto a = moments(f.rom, f.uncertain, {MomentMethod::Sampled, 500, 9});
  const auto b = moments(f.rom, f.uncertain, {MomentMethod::Sampled, 500, 9});
  const auto c = moments(f.rom, f.uncertain, {MomentMethod::Sampled, 500, 10});
  CHECK(a.mean == b.mean);
  CHECK(a.var == b.var);
  CHECK(a.var != c.var);
  CHECK(draw_perturbations(f.uncertain, 20, 4) == draw_perturbations(f.uncertain, 20, 4));
}

TEST_CASE("perturbations that would make a parameter non-positive are redrawn") {
  MaterialParamsd p = fixture().cfg.params;
  const auto wide = UncertainInput::all(p, 1.0);
  int truncated = 0;
  const Matrix draws = draw_perturbations(wide, 2000, 1, &truncated);
  CHECK(truncated > 0);
  for (Eigen::Index r = 0; r < draws.rows(); ++r)
    CHECK(((draws.row(r).transpose() + wide.theta0).array() > 0.0).all());
}

TEST_CASE("analytic covariance diagonal equals the analytic variance") {
  const auto& f = fixture();
  const std::vector<int> steps{100, 500, 900};
  const MomentOptions opt{MomentMethod::Analytic, 0, 0};
  const auto m = moments(f.rom, f.uncertain, opt, steps);
  const auto cov = covariance(f.rom, f.uncertain, opt, steps);
  for (std::size_t c = 0; c < steps.size(); ++c) {
    const auto col = static_cast<Eigen::Index>(c);
    CHECK((cov[c].diagonal() - m.var.col(col)).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK(cov[c](0, 1) == cov[c](1, 0));
  }
}

TEST_CASE("ROM error shrinks with the input CoV") {
  const auto& f = fixture();
  std::vector<double> totals;
  for (double cov : {0.02, 0.01, 0.005}) {
    const auto u = UncertainInput::all(f.cfg.params, cov);
    const auto rom = build_rom(f.cfg.sim, f.cfg.params, f.cfg.env, u);
    const auto report = rom_error(rom, f.cfg.sim, f.cfg.params, f.cfg.env, u, 100, 3);
    CHECK(report.per_step.size() == 1001);
    CHECK(report.per_step(0) == 0.0);
    totals.push_back(report.total);
  }
  CHECK(totals[0] > totals[1]);
  CHECK(totals[1] > totals[2]);
}

TEST_CASE("ROM error is independent of the thread count") {
  const auto& f = fixture();
  const auto a = rom_error(f.rom, f.cfg.sim, f.cfg.params, f.cfg.env, f.uncertain, 12, 5, 1);
  const auto b = rom_error(f.rom, f.cfg.sim, f.cfg.params, f.cfg.env, f.uncertain, 12, 5, 3);
  CHECK(a.per_step == b.per_step);
}

TEST_CASE("ROM serialization round-trips") {
  const auto& f = fixture();
  std::stringstream buffer;
  write_rom(f.rom, buffer);
  const auto back = read_rom(buffer);
  CHECK(back.zeroth.packed() == f.rom.zeroth.packed());
  REQUIRE(back.size() == f.rom.size());
  for (int j = 0; j < back.size(); ++j) CHECK(back.first[static_cast<std::size_t>(j)] == f.rom.first[static_cast<std::size_t>(j)]);
  CHECK(back.uncertain.theta0 == f.rom.uncertain.theta0);
  CHECK(back.uncertain.index == f.rom.uncertain.index);
  CHECK(back.config.dt == f.rom.config.dt);
  CHECK(back.params.a == f.rom.params.a);

  std::stringstream bad("{\"format\": \"something-else\"}");
  CHECK_THROWS(read_rom(bad));
}

TEST_CASE("uncertain input validation") {
  const auto& f = fixture();
  UncertainInput u = f.uncertain;
  u.index = {0, 0, 1, 2, 3};
  CHECK_THROWS_AS(u.validate(ParameterLayout(2)), InvalidArgument);
  u = f.uncertain;
  u.theta0(1) = 0.0;
  CHECK_THROWS_AS(u.validate(ParameterLayout(2)), InvalidArgument);
}
