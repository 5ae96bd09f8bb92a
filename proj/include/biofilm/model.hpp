#pragma once

#include "biofilm/common.hpp"

#include <string>
#include <utility>
#include <vector>

namespace biofilm {

/// Constitutive parameters of an n-species biofilm.
///
/// `a` is the symmetric interaction/nutrient matrix, `b` the diagonal of the
/// antibiotic-sensitivity matrix and `eta` the diagonal of the rate-sensitivity
/// matrix. `eta_empty` is the rate sensitivity of the empty phase.
template <typename Scalar>
struct MaterialParams {
  MatrixX<Scalar> a;
  VectorX<Scalar> b;
  VectorX<Scalar> eta;
  Scalar eta_empty{1};

  int species() const { return static_cast<int>(b.size()); }

  template <typename Other>
  MaterialParams<Other> cast() const {
    return {a.template cast<Other>(), b.template cast<Other>(), eta.template cast<Other>(),
            Other(eta_empty)};
  }
};

using MaterialParamsd = MaterialParams<double>;

/// Throws InvalidArgument unless `a` is n x n and exactly symmetric, and all
/// rate sensitivities are positive.
void validate(const MaterialParamsd& params);

/// Flat parameter vector theta over all entries of A (upper triangle, row
/// major) followed by the diagonal of B. For two species this is
/// (a11, a12, a22, b1, b2).
class ParameterLayout {
 public:
  enum class Kind { Interaction, Antibiotic };
  struct Entry {
    Kind kind;
    int row;  // 0-based species
    int col;  // == row for Antibiotic
  };

  explicit ParameterLayout(int species);

  int species() const { return species_; }
  int size() const { return static_cast<int>(entries_.size()); }
  const Entry& entry(int index) const { return entries_.at(static_cast<std::size_t>(index)); }

  /// 1-based name, e.g. "a12" or "b2".
  std::string name(int index) const;
  std::vector<std::string> names() const;
  /// Index of a name, or -1 when the name is not part of this layout.
  int find(const std::string& name) const;

  Vector extract(const MaterialParamsd& params) const;
  /// Copy of `base` with every entry of A (mirrored) and B replaced from theta.
  MaterialParamsd assign(const MaterialParamsd& base, const Vector& theta) const;

 private:
  int species_;
  std::vector<Entry> entries_;
};

/// Piecewise-constant schedule in physical time. A segment starting at `t0`
/// applies for t > t0; the first segment extends to -infinity.
class Schedule {
 public:
  Schedule() = default;
  Schedule(double value) : segments_{{0.0, value}} {}  // NOLINT(implicit)
  explicit Schedule(std::vector<std::pair<double, double>> segments);

  double at(double t) const;
  const std::vector<std::pair<double, double>>& segments() const { return segments_; }

 private:
  std::vector<std::pair<double, double>> segments_{{0.0, 0.0}};
};

/// Instantaneous nutrient and antibiotic concentrations.
struct EnvironmentSample {
  double c_star = 0.0;
  double alpha_star = 0.0;
};

struct Environment {
  Schedule c_star;
  Schedule alpha_star;
  double penalty = 1e-4;  // K_p [J/m^3]

  /// Environment seen by the step (t_k, t_k + dt]; sampled at its midpoint.
  EnvironmentSample for_step(int k, double dt) const;
};

/// Internal variables of a single material point plus the Lagrange multiplier.
///
/// The packed layout used by the solver is (phi_1..phi_n, psi_1..psi_n, phi_0, gamma).
struct State {
  Vector phi;
  Vector psi;
  double phi_empty = 0.0;
  double gamma = 0.0;

  int species() const { return static_cast<int>(phi.size()); }
  Vector phi_bar() const { return phi.cwiseProduct(psi); }

  Vector pack() const;
  static State unpack(const Eigen::Ref<const Vector>& packed);
  /// State with phi and psi set and phi_0 = 1 - sum(phi), gamma = 0.
  static State initial(const Vector& phi, const Vector& psi);
};

inline int packed_size(int species) { return 2 * species + 2; }

struct NewtonSettings {
  double tol = 1e-10;
  int max_iter = 50;
  int max_halvings = 10;
};

struct SimConfig {
  int n_steps = 1000;
  double dt = 1e-4;
  NewtonSettings newton;
  State initial;

  int species() const { return initial.species(); }
  void validate() const;
};

/// N+1 packed states, column k holds the state after k steps.
class Trajectory {
 public:
  Trajectory() = default;
  Trajectory(int species, double dt, Matrix states);

  int species() const { return species_; }
  int n_steps() const { return static_cast<int>(states_.cols()) - 1; }
  double dt() const { return dt_; }
  double time(int k) const { return k * dt_; }

  const Matrix& packed() const { return states_; }
  State state(int k) const { return State::unpack(states_.col(k)); }

  /// phi_bar = phi * psi, one row per species, one column per step.
  Matrix phi_bar() const;
  Matrix phi() const { return states_.topRows(species_); }
  Matrix psi() const { return states_.middleRows(species_, species_); }

 private:
  int species_ = 0;
  double dt_ = 0.0;
  Matrix states_;
};

/// Derivative of the penalty energy K_p / (x^2 (1-x)^2) with respect to x.
template <typename Scalar>
Scalar penalty_force(const Scalar& x, double kp) {
  const Scalar y = Scalar(1) - x;
  return Scalar(2 * kp) * (Scalar(2) * x - Scalar(1)) / (x * x * x * y * y * y);
}

/// Second derivative of the penalty energy.
inline double penalty_stiffness(double x, double kp) {
  const double y = 1.0 - x;
  const double xy = x * y;
  const double s = 2.0 * x - 1.0;
  return 2.0 * kp * (2.0 * xy + 3.0 * s * s) / (xy * xy * xy * xy);
}

/// Strong-form residual of the evolution equations.
///
/// `x` and `rates` are packed states (the gamma slot of `rates` is ignored).
/// Entry order: n phi equations, n psi equations, the empty-phase equation and
/// the volume constraint.
template <typename Scalar>
VectorX<Scalar> residual(const VectorX<Scalar>& x, const VectorX<Scalar>& rates,
                         const MaterialParams<Scalar>& params, const EnvironmentSample& env,
                         double kp) {
  const int n = params.species();
  const auto phi = x.head(n);
  const auto psi = x.segment(n, n);
  const Scalar& phi0 = x(2 * n);
  const Scalar& gamma = x(2 * n + 1);
  const auto dphi = rates.head(n);
  const auto dpsi = rates.segment(n, n);

  const VectorX<Scalar> phi_bar = phi.cwiseProduct(psi);
  const VectorX<Scalar> drive = params.a * phi_bar;
  const Scalar c(env.c_star);
  const Scalar alpha(env.alpha_star);

  VectorX<Scalar> r(2 * n + 2);
  for (int i = 0; i < n; ++i) {
    r(i) = -c * psi(i) * drive(i) +
           params.eta(i) * (dphi(i) * psi(i) * psi(i) + phi_bar(i) * dpsi(i) + dphi(i)) + gamma +
           penalty_force(phi(i), kp);
    r(n + i) = -c * phi(i) * drive(i) + alpha * params.b(i) * psi(i) +
               params.eta(i) * (dpsi(i) * phi(i) * phi(i) + phi_bar(i) * dphi(i)) +
               penalty_force(psi(i), kp);
  }
  r(2 * n) = params.eta_empty * rates(2 * n) + gamma + penalty_force(phi0, kp);
  r(2 * n + 1) = phi.sum() + phi0 - Scalar(1);
  return r;
}

/// Residual in terms of domain types. Throws DomainError if any internal
/// variable lies outside (0, 1) and InvalidArgument on mismatched species.
Vector residual(const State& state, const State& rates, const MaterialParamsd& params,
                const EnvironmentSample& env, double kp);

/// d residual / d x for backward-Euler rates (x - x_old) / dt; `inv_dt` = 1/dt.
void state_jacobian(const Vector& x, const Vector& rates, const MaterialParamsd& params,
                    const EnvironmentSample& env, double kp, double inv_dt, Matrix& jac);

/// d residual / d rates. Depends on x only.
void rate_jacobian(const Vector& x, const MaterialParamsd& params, Matrix& jac);

/// d residual / d theta_j for the layout entries listed in `index`.
void parameter_jacobian(const Vector& x, const MaterialParamsd& params, const EnvironmentSample& env,
                        const ParameterLayout& layout, const std::vector<int>& index, Matrix& jac);

}  // namespace biofilm
