#include "biofilm/solver.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>

namespace biofilm {

namespace {

bool interior(const Vector& x, int n) {
  for (int i = 0; i <= 2 * n; ++i)
    if (!(x(i) > 0.0 && x(i) < 1.0)) return false;
  return true;
}

}  // namespace

StepWorkspace::StepWorkspace(int species)
    : rates(packed_size(species)),
      r(packed_size(species)),
      dx(packed_size(species)),
      trial(packed_size(species)),
      jac(packed_size(species), packed_size(species)),
      lu(packed_size(species)) {}

int solve_step(const Vector& x_old, Vector& x, double dt, const MaterialParamsd& params,
               const EnvironmentSample& env, double kp, const NewtonSettings& newton,
               StepWorkspace& work) {
  const int n = params.species();
  const double inv_dt = 1.0 / dt;
  for (int iter = 0;; ++iter) {
    work.rates = (x - x_old) * inv_dt;
    work.r = residual<double>(x, work.rates, params, env, kp);
    const double norm = work.r.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(norm)) throw NonConvergence("residual is not finite", norm);
    if (norm <= newton.tol) return iter;
    if (iter >= newton.max_iter)
      throw NonConvergence("Newton iteration did not converge", norm);

    state_jacobian(x, work.rates, params, env, kp, inv_dt, work.jac);
    work.lu.compute(work.jac);
    work.dx = work.lu.solve(-work.r);
    if (!work.dx.allFinite()) throw NonConvergence("singular Newton system", norm);

    double scale = 1.0;
    work.trial = x + work.dx;
    int halvings = 0;
    while (!interior(work.trial, n)) {
      if (halvings++ >= newton.max_halvings)
        throw DomainEscape("Newton iterate left (0, 1)", norm);
      scale *= 0.5;
      work.trial = x + scale * work.dx;
    }
    x = work.trial;
  }
}

State step(const State& state, double dt, const MaterialParamsd& params,
           const EnvironmentSample& env, double kp, const NewtonSettings& newton) {
  if (!(dt > 0.0)) throw InvalidArgument("dt must be positive");
  validate(params);
  const int n = params.species();
  if (state.species() != n || state.psi.size() != n)
    throw InvalidArgument("state dimension does not match material parameters");
  const Vector x_old = state.pack();
  if (!interior(x_old, n)) throw DomainError("state outside (0, 1)");
  Vector x = x_old;
  StepWorkspace work(n);
  solve_step(x_old, x, dt, params, env, kp, newton, work);
  return State::unpack(x);
}

Trajectory simulate(const SimConfig& config, const MaterialParamsd& params, const Environment& env) {
  config.validate();
  validate(params);
  const int n = params.species();
  if (config.species() != n) throw InvalidArgument("initial state does not match material parameters");

  Matrix states(packed_size(n), config.n_steps + 1);
  states.col(0) = config.initial.pack();
  StepWorkspace work(n);
  Vector x = states.col(0);
  for (int k = 0; k < config.n_steps; ++k) {
    const EnvironmentSample sample = env.for_step(k, config.dt);
    try {
      solve_step(states.col(k), x, config.dt, params, sample, env.penalty, config.newton, work);
    } catch (const NonConvergence& e) {
      throw NonConvergence(std::string(e.what()) + " at step " + std::to_string(k + 1),
                           e.residual_norm(), k + 1);
    } catch (const DomainEscape& e) {
      throw DomainEscape(std::string(e.what()) + " at step " + std::to_string(k + 1),
                         e.residual_norm(), k + 1);
    }
    states.col(k + 1) = x;
  }
  return Trajectory(n, config.dt, std::move(states));
}

void write_trajectory_csv(const Trajectory& trajectory, std::ostream& out) {
  const int n = trajectory.species();
  out << "t,phi_0";
  for (int i = 1; i <= n; ++i) out << ",phi_" << i;
  for (int i = 1; i <= n; ++i) out << ",psi_" << i;
  for (int i = 1; i <= n; ++i) out << ",phibar_" << i;
  out << ",gamma\n";
  out << std::setprecision(17);
  const Matrix& s = trajectory.packed();
  for (int k = 0; k <= trajectory.n_steps(); ++k) {
    out << trajectory.time(k) << ',' << s(2 * n, k);
    for (int i = 0; i < n; ++i) out << ',' << s(i, k);
    for (int i = 0; i < n; ++i) out << ',' << s(n + i, k);
    for (int i = 0; i < n; ++i) out << ',' << s(i, k) * s(n + i, k);
    out << ',' << s(2 * n + 1, k) << '\n';
  }
}

void write_trajectory_csv(const Trajectory& trajectory, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_trajectory_csv(trajectory, out);
}

}  // namespace biofilm
