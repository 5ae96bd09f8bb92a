#include "biofilm/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace biofilm {

void validate(const MaterialParamsd& params) {
  const int n = params.species();
  if (n < 1) throw InvalidArgument("material parameters need at least one species");
  if (params.a.rows() != n || params.a.cols() != n)
    throw InvalidArgument("interaction matrix must be n x n");
  if (params.eta.size() != n) throw InvalidArgument("eta must have one entry per species");
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (params.a(i, j) != params.a(j, i))
        throw InvalidArgument("interaction matrix is not symmetric");
  if ((params.eta.array() <= 0.0).any() || !(params.eta_empty > 0.0))
    throw InvalidArgument("rate sensitivities must be positive");
}

ParameterLayout::ParameterLayout(int species) : species_(species) {
  if (species < 1) throw InvalidArgument("parameter layout needs at least one species");
  for (int i = 0; i < species; ++i)
    for (int j = i; j < species; ++j) entries_.push_back({Kind::Interaction, i, j});
  for (int i = 0; i < species; ++i) entries_.push_back({Kind::Antibiotic, i, i});
}

std::string ParameterLayout::name(int index) const {
  const Entry& e = entry(index);
  if (e.kind == Kind::Antibiotic) return "b" + std::to_string(e.row + 1);
  return "a" + std::to_string(e.row + 1) + std::to_string(e.col + 1);
}

std::vector<std::string> ParameterLayout::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (int i = 0; i < size(); ++i) out.push_back(name(i));
  return out;
}

int ParameterLayout::find(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (this->name(i) == name) return i;
  return -1;
}

Vector ParameterLayout::extract(const MaterialParamsd& params) const {
  if (params.species() != species_) throw InvalidArgument("parameter layout species mismatch");
  Vector theta(size());
  for (int k = 0; k < size(); ++k) {
    const Entry& e = entries_[static_cast<std::size_t>(k)];
    theta(k) = e.kind == Kind::Interaction ? params.a(e.row, e.col) : params.b(e.row);
  }
  return theta;
}

MaterialParamsd ParameterLayout::assign(const MaterialParamsd& base, const Vector& theta) const {
  if (base.species() != species_ || theta.size() != size())
    throw InvalidArgument("parameter vector does not match layout");
  MaterialParamsd out = base;
  for (int k = 0; k < size(); ++k) {
    const Entry& e = entries_[static_cast<std::size_t>(k)];
    if (e.kind == Kind::Interaction) {
      out.a(e.row, e.col) = theta(k);
      out.a(e.col, e.row) = theta(k);
    } else {
      out.b(e.row) = theta(k);
    }
  }
  return out;
}

Schedule::Schedule(std::vector<std::pair<double, double>> segments) : segments_(std::move(segments)) {
  if (segments_.empty()) throw InvalidArgument("schedule needs at least one segment");
  for (std::size_t i = 1; i < segments_.size(); ++i)
    if (!(segments_[i].first > segments_[i - 1].first))
      throw InvalidArgument("schedule segment starts must increase");
  for (const auto& [start, value] : segments_)
    if (!(value >= 0.0)) throw InvalidArgument("schedule values must be non-negative");
}

double Schedule::at(double t) const {
  double value = segments_.front().second;
  for (std::size_t i = 1; i < segments_.size(); ++i) {
    if (t > segments_[i].first)
      value = segments_[i].second;
    else
      break;
  }
  return value;
}

EnvironmentSample Environment::for_step(int k, double dt) const {
  const double t = (k + 0.5) * dt;
  return {c_star.at(t), alpha_star.at(t)};
}

Vector State::pack() const {
  const int n = species();
  Vector x(packed_size(n));
  x.head(n) = phi;
  x.segment(n, n) = psi;
  x(2 * n) = phi_empty;
  x(2 * n + 1) = gamma;
  return x;
}

State State::unpack(const Eigen::Ref<const Vector>& packed) {
  const auto size = packed.size();
  if (size < 4 || size % 2 != 0) throw InvalidArgument("packed state has invalid length");
  const int n = static_cast<int>(size - 2) / 2;
  State s;
  s.phi = packed.head(n);
  s.psi = packed.segment(n, n);
  s.phi_empty = packed(2 * n);
  s.gamma = packed(2 * n + 1);
  return s;
}

State State::initial(const Vector& phi, const Vector& psi) {
  if (phi.size() != psi.size()) throw InvalidArgument("phi and psi lengths differ");
  State s;
  s.phi = phi;
  s.psi = psi;
  s.phi_empty = 1.0 - phi.sum();
  s.gamma = 0.0;
  return s;
}

void SimConfig::validate() const {
  if (n_steps < 1) throw InvalidArgument("n_steps must be >= 1");
  if (!(dt > 0.0)) throw InvalidArgument("dt must be positive");
  if (!(newton.tol > 0.0)) throw InvalidArgument("newton tolerance must be positive");
  if (newton.max_iter < 1) throw InvalidArgument("newton max_iter must be >= 1");
  const int n = initial.species();
  if (n < 1 || initial.psi.size() != n) throw InvalidArgument("initial state is malformed");
  auto inside = [](double v) { return v > 0.0 && v < 1.0; };
  for (int i = 0; i < n; ++i)
    if (!inside(initial.phi(i)) || !inside(initial.psi(i)))
      throw InvalidArgument("initial state must lie strictly inside (0, 1)");
  if (!inside(initial.phi_empty)) throw InvalidArgument("initial empty phase must lie inside (0, 1)");
}

Trajectory::Trajectory(int species, double dt, Matrix states)
    : species_(species), dt_(dt), states_(std::move(states)) {
  if (states_.rows() != packed_size(species)) throw InvalidArgument("trajectory row count mismatch");
}

Matrix Trajectory::phi_bar() const { return phi().cwiseProduct(psi()); }

Vector residual(const State& state, const State& rates, const MaterialParamsd& params,
                const EnvironmentSample& env, double kp) {
  const int n = params.species();
  if (state.species() != n || state.psi.size() != n || rates.species() != n || rates.psi.size() != n)
    throw InvalidArgument("state dimension does not match material parameters");
  auto inside = [](double v) { return v > 0.0 && v < 1.0; };
  for (int i = 0; i < n; ++i)
    if (!inside(state.phi(i)) || !inside(state.psi(i)))
      throw DomainError("internal variable outside (0, 1)");
  if (!inside(state.phi_empty)) throw DomainError("empty phase outside (0, 1)");
  return residual<double>(state.pack(), rates.pack(), params, env, kp);
}

void state_jacobian(const Vector& x, const Vector& rates, const MaterialParamsd& params,
                    const EnvironmentSample& env, double kp, double inv_dt, Matrix& jac) {
  const int n = params.species();
  const int m = packed_size(n);
  jac.setZero(m, m);
  const double c = env.c_star;
  const auto& a = params.a;
  for (int i = 0; i < n; ++i) {
    const double phi_i = x(i), psi_i = x(n + i);
    const double dphi = rates(i), dpsi = rates(n + i);
    const double eta = params.eta(i);
    double drive = 0.0;
    for (int j = 0; j < n; ++j) drive += a(i, j) * x(j) * x(n + j);
    for (int j = 0; j < n; ++j) {
      const double phi_j = x(j), psi_j = x(n + j);
      jac(i, j) = -c * psi_i * a(i, j) * psi_j;
      jac(i, n + j) = -c * psi_i * a(i, j) * phi_j;
      jac(n + i, j) = -c * phi_i * a(i, j) * psi_j;
      jac(n + i, n + j) = -c * phi_i * a(i, j) * phi_j;
    }
    const double phi_bar = phi_i * psi_i;
    jac(i, i) += eta * (inv_dt * psi_i * psi_i + psi_i * dpsi + inv_dt) + penalty_stiffness(phi_i, kp);
    jac(i, n + i) += -c * drive + eta * (2.0 * dphi * psi_i + phi_i * dpsi + phi_bar * inv_dt);
    jac(n + i, i) += -c * drive + eta * (2.0 * dpsi * phi_i + psi_i * dphi + phi_bar * inv_dt);
    jac(n + i, n + i) += env.alpha_star * params.b(i) +
                         eta * (inv_dt * phi_i * phi_i + phi_i * dphi) + penalty_stiffness(psi_i, kp);
    jac(i, 2 * n + 1) = 1.0;
    jac(2 * n + 1, i) = 1.0;
  }
  jac(2 * n, 2 * n) = params.eta_empty * inv_dt + penalty_stiffness(x(2 * n), kp);
  jac(2 * n, 2 * n + 1) = 1.0;
  jac(2 * n + 1, 2 * n) = 1.0;
}

void rate_jacobian(const Vector& x, const MaterialParamsd& params, Matrix& jac) {
  const int n = params.species();
  const int m = packed_size(n);
  jac.setZero(m, m);
  for (int i = 0; i < n; ++i) {
    const double phi_i = x(i), psi_i = x(n + i);
    const double eta = params.eta(i);
    jac(i, i) = eta * (psi_i * psi_i + 1.0);
    jac(i, n + i) = eta * phi_i * psi_i;
    jac(n + i, i) = eta * phi_i * psi_i;
    jac(n + i, n + i) = eta * phi_i * phi_i;
  }
  jac(2 * n, 2 * n) = params.eta_empty;
}

void parameter_jacobian(const Vector& x, const MaterialParamsd& params, const EnvironmentSample& env,
                        const ParameterLayout& layout, const std::vector<int>& index, Matrix& jac) {
  const int n = params.species();
  jac.setZero(packed_size(n), static_cast<Eigen::Index>(index.size()));
  const double c = env.c_star;
  for (std::size_t col = 0; col < index.size(); ++col) {
    const auto& e = layout.entry(index[col]);
    const auto j = static_cast<Eigen::Index>(col);
    if (e.kind == ParameterLayout::Kind::Antibiotic) {
      jac(n + e.row, j) = env.alpha_star * x(n + e.row);
      continue;
    }
    // d(A phi_bar)_i / d a_rc: phi_bar_c in row r and, off the diagonal, phi_bar_r in row c.
    const int r = e.row, s = e.col;
    const double pb_r = x(r) * x(n + r);
    const double pb_s = x(s) * x(n + s);
    jac(r, j) += -c * x(n + r) * pb_s;
    jac(n + r, j) += -c * x(r) * pb_s;
    if (r != s) {
      jac(s, j) += -c * x(n + s) * pb_r;
      jac(n + s, j) += -c * x(s) * pb_r;
    }
  }
}

}  // namespace biofilm
