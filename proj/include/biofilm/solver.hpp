#pragma once

#include "biofilm/model.hpp"

#include <Eigen/LU>

#include <iosfwd>
#include <string>

namespace biofilm {

/// Reusable buffers for the Newton iteration of one material point.
struct StepWorkspace {
  explicit StepWorkspace(int species);

  Vector rates;
  Vector r;
  Vector dx;
  Vector trial;
  Matrix jac;
  Eigen::PartialPivLU<Matrix> lu;
};

/// Solves one backward-Euler step in place: on entry `x` holds the initial
/// guess (normally `x_old`), on exit the converged state. Returns the number of
/// Newton iterations taken.
int solve_step(const Vector& x_old, Vector& x, double dt, const MaterialParamsd& params,
               const EnvironmentSample& env, double kp, const NewtonSettings& newton,
               StepWorkspace& work);

/// One implicit step from `state`; the returned state satisfies the residual
/// with max-norm below `newton.tol`.
State step(const State& state, double dt, const MaterialParamsd& params,
           const EnvironmentSample& env, double kp, const NewtonSettings& newton = {});

/// Integrates config.n_steps steps. Errors carry the failing 1-based step.
Trajectory simulate(const SimConfig& config, const MaterialParamsd& params, const Environment& env);

/// CSV with header t,phi_0,phi_1..phi_n,psi_1..psi_n,phibar_1..phibar_n,gamma.
void write_trajectory_csv(const Trajectory& trajectory, std::ostream& out);
void write_trajectory_csv(const Trajectory& trajectory, const std::string& path);

}  // namespace biofilm
