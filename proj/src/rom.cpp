#include "biofilm/rom.hpp"

#include "biofilm/parallel.hpp"
#include "biofilm/random.hpp"
#include "json_util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace biofilm {

namespace {

constexpr int kRomFormatVersion = 1;

std::vector<int> all_steps(int n_steps) {
  std::vector<int> steps(static_cast<std::size_t>(n_steps) + 1);
  std::iota(steps.begin(), steps.end(), 0);
  return steps;
}

void check_steps(const RomCoefficients& rom, std::span<const int> steps) {
  for (int k : steps)
    if (k < 0 || k > rom.n_steps()) throw InvalidArgument("requested step outside the ROM horizon");
}

void check_perturbation(const RomCoefficients& rom, const Vector& theta_tilde) {
  if (theta_tilde.size() != rom.size())
    throw InvalidArgument("perturbation length does not match the number of uncertain parameters");
}

void check_compatible(const RomCoefficients& rom, const UncertainInput& uncertain) {
  if (uncertain.index != rom.uncertain.index)
    throw InvalidArgument("uncertain input does not match the ROM's parameter set");
}

// Coefficients of phi and psi at one step: column j of the returned 2n x p
// matrix holds d(phi, psi)/d theta_j.
Matrix step_coefficients(const RomCoefficients& rom, int step) {
  const int n = rom.species();
  Matrix f(2 * n, rom.size());
  for (int j = 0; j < rom.size(); ++j)
    f.col(j) = rom.first[static_cast<std::size_t>(j)].col(step).head(2 * n);
  return f;
}

}  // namespace

void UncertainInput::validate(const ParameterLayout& layout) const {
  if (theta0.size() != size() || cov.size() != size())
    throw InvalidArgument("uncertain input vectors must have one entry per parameter");
  std::vector<bool> seen(static_cast<std::size_t>(layout.size()), false);
  for (int k : index) {
    if (k < 0 || k >= layout.size()) throw InvalidArgument("uncertain parameter index out of range");
    if (seen[static_cast<std::size_t>(k)]) throw InvalidArgument("uncertain parameter index listed twice");
    seen[static_cast<std::size_t>(k)] = true;
  }
  for (int j = 0; j < size(); ++j) {
    if (!(theta0(j) > 0.0)) throw InvalidArgument("uncertain parameter means must be positive");
    if (!(cov(j) >= 0.0)) throw InvalidArgument("coefficients of variation must be non-negative");
  }
}

UncertainInput UncertainInput::all(const MaterialParamsd& mean, double cov) {
  const ParameterLayout layout(mean.species());
  UncertainInput u;
  u.index.resize(static_cast<std::size_t>(layout.size()));
  std::iota(u.index.begin(), u.index.end(), 0);
  u.theta0 = layout.extract(mean);
  u.cov = Vector::Constant(layout.size(), cov);
  return u;
}

RomCoefficients build_rom(const SimConfig& config, const MaterialParamsd& params_at_mean,
                          const Environment& env, const UncertainInput& uncertain) {
  config.validate();
  validate(params_at_mean);
  const int n = params_at_mean.species();
  if (config.species() != n) throw InvalidArgument("initial state does not match material parameters");
  const ParameterLayout layout(n);
  uncertain.validate(layout);

  const int m = packed_size(n);
  const int p = uncertain.size();
  const int steps = config.n_steps;
  const double inv_dt = 1.0 / config.dt;

  Matrix states(m, steps + 1);
  states.col(0) = config.initial.pack();
  std::vector<Matrix> first(static_cast<std::size_t>(p), Matrix::Zero(m, steps + 1));

  StepWorkspace work(n);
  Matrix jac_new(m, m), jac_rate(m, m), jac_param(m, p);
  Eigen::PartialPivLU<Matrix> lu(m);
  Vector x = states.col(0);
  Vector x_old(m), rates(m), rhs(m), s(m), r(m);
  int max_iterations = 0;

  for (int k = 0; k < steps; ++k) {
    const EnvironmentSample sample = env.for_step(k, config.dt);
    x_old = states.col(k);
    try {
      solve_step(x_old, x, config.dt, params_at_mean, sample, env.penalty, config.newton, work);
    } catch (const NonConvergence& e) {
      throw NonConvergence(std::string(e.what()) + " (zeroth order, step " + std::to_string(k + 1) + ")",
                           e.residual_norm(), k + 1);
    } catch (const DomainEscape& e) {
      throw DomainEscape(std::string(e.what()) + " (zeroth order, step " + std::to_string(k + 1) + ")",
                         e.residual_norm(), k + 1);
    }
    states.col(k + 1) = x;

    rates = (x - x_old) * inv_dt;
    state_jacobian(x, rates, params_at_mean, sample, env.penalty, inv_dt, jac_new);
    lu.compute(jac_new);
    rate_jacobian(x, params_at_mean, jac_rate);
    parameter_jacobian(x, params_at_mean, sample, layout, uncertain.index, jac_param);

    for (int j = 0; j < p; ++j) {
      Matrix& sens = first[static_cast<std::size_t>(j)];
      // Linear in the new sensitivity: J_new s + d(R)/d(rate) * (-s_old / dt) + dR/dtheta_j = 0.
      rhs.noalias() = jac_param.col(j) - inv_dt * (jac_rate * sens.col(k));
      const double scale = std::max(1.0, rhs.lpNorm<Eigen::Infinity>());
      s = sens.col(k);
      int iterations = 0;
      for (;;) {
        r.noalias() = jac_new * s + rhs;
        const double norm = r.lpNorm<Eigen::Infinity>();
        if (!std::isfinite(norm))
          throw NonConvergence("first-order residual is not finite (parameter " + std::to_string(j) +
                                   ", step " + std::to_string(k + 1) + ")",
                               norm, k + 1);
        if (norm <= config.newton.tol * scale) break;
        if (iterations >= config.newton.max_iter)
          throw NonConvergence("first-order Newton did not converge (parameter " + std::to_string(j) +
                                   ", step " + std::to_string(k + 1) + ")",
                               norm, k + 1);
        s -= lu.solve(r);
        ++iterations;
      }
      max_iterations = std::max(max_iterations, iterations);
      sens.col(k + 1) = s;
    }
  }

  RomCoefficients rom{Trajectory(n, config.dt, std::move(states)), std::move(first), uncertain,
                      params_at_mean, config, max_iterations};
  return rom;
}

SurrogateStates evaluate_states(const RomCoefficients& rom, const Vector& theta_tilde) {
  check_perturbation(rom, theta_tilde);
  const int n = rom.species();
  SurrogateStates out{rom.zeroth.phi(), rom.zeroth.psi()};
  for (int j = 0; j < rom.size(); ++j) {
    const Matrix& sens = rom.first[static_cast<std::size_t>(j)];
    out.phi += theta_tilde(j) * sens.topRows(n);
    out.psi += theta_tilde(j) * sens.middleRows(n, n);
  }
  return out;
}

Matrix evaluate(const RomCoefficients& rom, const Vector& theta_tilde) {
  const SurrogateStates s = evaluate_states(rom, theta_tilde);
  return s.phi.cwiseProduct(s.psi);
}

Matrix evaluate_at(const RomCoefficients& rom, const Vector& theta_tilde, std::span<const int> steps) {
  check_perturbation(rom, theta_tilde);
  check_steps(rom, steps);
  const int n = rom.species();
  Matrix out(n, static_cast<Eigen::Index>(steps.size()));
  const Matrix& zeroth = rom.zeroth.packed();
  for (std::size_t c = 0; c < steps.size(); ++c) {
    const int k = steps[c];
    Vector phi = zeroth.col(k).head(n);
    Vector psi = zeroth.col(k).segment(n, n);
    for (int j = 0; j < rom.size(); ++j) {
      const Matrix& sens = rom.first[static_cast<std::size_t>(j)];
      phi += theta_tilde(j) * sens.col(k).head(n);
      psi += theta_tilde(j) * sens.col(k).segment(n, n);
    }
    out.col(static_cast<Eigen::Index>(c)) = phi.cwiseProduct(psi);
  }
  return out;
}

int MomentSeries::column(int step) const {
  const auto it = std::lower_bound(steps.begin(), steps.end(), step);
  if (it != steps.end() && *it == step) return static_cast<int>(it - steps.begin());
  for (std::size_t c = 0; c < steps.size(); ++c)
    if (steps[c] == step) return static_cast<int>(c);
  return -1;
}

Matrix draw_perturbations(const UncertainInput& uncertain, int n_samples, std::uint64_t seed,
                          int* truncated) {
  if (n_samples < 0) throw InvalidArgument("sample count must be non-negative");
  const int p = uncertain.size();
  const Vector sd = uncertain.stddev();
  Rng rng(seed);
  Matrix draws(n_samples, p);
  int redraws = 0;
  Vector row(p);
  for (int i = 0; i < n_samples; ++i) {
    for (int attempt = 0;; ++attempt) {
      for (int j = 0; j < p; ++j) row(j) = sd(j) * rng.normal();
      if (((uncertain.theta0 + row).array() > 0.0).all()) break;
      if (attempt >= 1000) throw InvalidArgument("cannot draw positive parameters at this CoV");
      ++redraws;
    }
    draws.row(i) = row.transpose();
  }
  if (truncated) *truncated = redraws;
  return draws;
}

MomentSeries moments(const RomCoefficients& rom, const UncertainInput& uncertain,
                     const MomentOptions& options, std::span<const int> steps) {
  check_compatible(rom, uncertain);
  MomentSeries out;
  out.steps = steps.empty() ? all_steps(rom.n_steps()) : std::vector<int>(steps.begin(), steps.end());
  check_steps(rom, out.steps);
  out.options = options;
  const int n = rom.species();
  const auto cols = static_cast<Eigen::Index>(out.steps.size());
  out.mean.resize(n, cols);
  out.var.resize(n, cols);
  const Matrix& zeroth = rom.zeroth.packed();

  if (uncertain.size() == 0 || uncertain.stddev().cwiseAbs().maxCoeff() == 0.0) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      const int k = out.steps[static_cast<std::size_t>(c)];
      out.mean.col(c) = zeroth.col(k).head(n).cwiseProduct(zeroth.col(k).segment(n, n));
    }
    out.var.setZero();
    return out;
  }

  if (options.method == MomentMethod::Analytic) {
    const Vector var_in = uncertain.stddev().array().square();
    for (Eigen::Index c = 0; c < cols; ++c) {
      const int k = out.steps[static_cast<std::size_t>(c)];
      const Matrix f = step_coefficients(rom, k);
      for (int l = 0; l < n; ++l) {
        const double phi = zeroth(l, k), psi = zeroth(n + l, k);
        const auto a = f.row(l).transpose().array();
        const auto b = f.row(n + l).transpose().array();
        const double suu = (a * a * var_in.array()).sum();
        const double svv = (b * b * var_in.array()).sum();
        const double suv = (a * b * var_in.array()).sum();
        out.mean(l, c) = phi * psi + suv;
        out.var(l, c) = psi * psi * suu + phi * phi * svv + 2.0 * phi * psi * suv + suu * svv + suv * suv;
      }
    }
    return out;
  }

  if (options.n_samples < 1) throw InvalidArgument("sampled moments need at least one sample");
  const Matrix draws = draw_perturbations(uncertain, options.n_samples, options.seed, &out.truncated_draws);
  const double samples = options.n_samples;
  for (Eigen::Index c = 0; c < cols; ++c) {
    const int k = out.steps[static_cast<std::size_t>(c)];
    const Matrix f = step_coefficients(rom, k);
    const Matrix values = draws * f.transpose();  // samples x 2n perturbations
    for (int l = 0; l < n; ++l) {
      const Eigen::ArrayXd phi_bar =
          (zeroth(l, k) + values.col(l).array()) * (zeroth(n + l, k) + values.col(n + l).array());
      const double mean = phi_bar.sum() / samples;
      out.mean(l, c) = mean;
      out.var(l, c) = options.n_samples > 1 ? (phi_bar - mean).square().sum() / (samples - 1.0) : 0.0;
    }
  }
  return out;
}

std::vector<Matrix> covariance(const RomCoefficients& rom, const UncertainInput& uncertain,
                               const MomentOptions& options, std::span<const int> steps) {
  check_compatible(rom, uncertain);
  check_steps(rom, steps);
  const int n = rom.species();
  const Matrix& zeroth = rom.zeroth.packed();
  std::vector<Matrix> out;
  out.reserve(steps.size());

  if (options.method == MomentMethod::Analytic) {
    const Vector var_in = uncertain.stddev().array().square();
    for (int k : steps) {
      const Matrix f = step_coefficients(rom, k);
      // Second moments of the Gaussian linear parts (u = d phi, v = d psi).
      const Matrix moment = f * var_in.asDiagonal() * f.transpose();
      Matrix cov(n, n);
      for (int l = 0; l < n; ++l) {
        for (int q = l; q < n; ++q) {
          const double phi_l = zeroth(l, k), psi_l = zeroth(n + l, k);
          const double phi_q = zeroth(q, k), psi_q = zeroth(n + q, k);
          const double uu = moment(l, q), vv = moment(n + l, n + q);
          const double uv = moment(l, n + q), vu = moment(n + l, q);
          cov(l, q) = psi_l * psi_q * uu + psi_l * phi_q * uv + phi_l * psi_q * vu + phi_l * phi_q * vv +
                      uu * vv + uv * vu;
          cov(q, l) = cov(l, q);
        }
      }
      out.push_back(std::move(cov));
    }
    return out;
  }

  if (options.n_samples < 2) throw InvalidArgument("sampled covariance needs at least two samples");
  const Matrix draws = draw_perturbations(uncertain, options.n_samples, options.seed);
  for (int k : steps) {
    const Matrix f = step_coefficients(rom, k);
    const Matrix values = draws * f.transpose();
    Matrix phi_bar(options.n_samples, n);
    for (int l = 0; l < n; ++l)
      phi_bar.col(l) =
          ((zeroth(l, k) + values.col(l).array()) * (zeroth(n + l, k) + values.col(n + l).array())).matrix();
    const Eigen::RowVectorXd mean = phi_bar.colwise().mean();
    const Matrix centered = phi_bar.rowwise() - mean;
    const Matrix cov = centered.transpose() * centered / (options.n_samples - 1.0);
    out.push_back(0.5 * (cov + cov.transpose()));
  }
  return out;
}

RomErrorReport rom_error(const RomCoefficients& rom, const SimConfig& config,
                         const MaterialParamsd& params, const Environment& env,
                         const UncertainInput& uncertain, int n_samples, std::uint64_t seed,
                         int threads) {
  if (n_samples < 1) throw InvalidArgument("rom_error needs at least one sample");
  check_compatible(rom, uncertain);
  if (config.n_steps != rom.n_steps()) throw InvalidArgument("config horizon differs from the ROM");
  const int n = rom.species();
  const ParameterLayout layout(n);
  const Vector theta_mean = layout.extract(params);
  const Matrix draws = draw_perturbations(uncertain, n_samples, seed);
  const int steps = rom.n_steps();

  Matrix distance(steps + 1, n_samples);
  std::vector<char> ok(static_cast<std::size_t>(n_samples), 0);
  parallel_for(static_cast<std::size_t>(n_samples), threads, [&](std::size_t i) {
    const auto col = static_cast<Eigen::Index>(i);
    const Vector tilde = draws.row(col).transpose();
    Vector theta = theta_mean;
    for (int j = 0; j < uncertain.size(); ++j) theta(uncertain.index[static_cast<std::size_t>(j)]) += tilde(j);
    try {
      const Matrix full = simulate(config, layout.assign(params, theta), env).phi_bar();
      const Matrix surrogate = evaluate(rom, tilde);
      distance.col(col) = (full - surrogate).colwise().norm().transpose();
      ok[i] = 1;
    } catch (const NumericalError&) {
      ok[i] = 0;
    }
  });

  RomErrorReport report;
  report.per_step = Vector::Zero(steps + 1);
  for (int i = 0; i < n_samples; ++i) {
    if (!ok[static_cast<std::size_t>(i)]) {
      ++report.skipped;
      continue;
    }
    report.per_step += distance.col(i);
    ++report.used;
  }
  if (report.used > 0) report.per_step /= report.used;
  report.total = report.per_step.tail(steps).mean();
  report.max = report.per_step.maxCoeff();
  return report;
}

void write_rom(const RomCoefficients& rom, std::ostream& out) {
  using detail::json;
  using detail::to_json;
  const int n = rom.species();
  const ParameterLayout layout(n);
  json j;
  j["format"] = "biofilm-rom";
  j["version"] = kRomFormatVersion;
  j["species"] = n;
  j["config"] = {{"n_steps", rom.config.n_steps},
                 {"dt", rom.config.dt},
                 {"newton",
                  {{"tol", rom.config.newton.tol},
                   {"max_iter", rom.config.newton.max_iter},
                   {"max_halvings", rom.config.newton.max_halvings}}},
                 {"initial", to_json(rom.config.initial.pack())}};
  j["params"] = {{"a", to_json(rom.params.a)},
                 {"b", to_json(rom.params.b)},
                 {"eta", to_json(rom.params.eta)},
                 {"eta_empty", rom.params.eta_empty}};
  json names = json::array();
  for (int k : rom.uncertain.index) names.push_back(layout.name(k));
  j["uncertain"] = {{"index", rom.uncertain.index},
                    {"names", names},
                    {"theta0", to_json(rom.uncertain.theta0)},
                    {"cov", to_json(rom.uncertain.cov)}};
  j["max_first_order_iterations"] = rom.max_first_order_iterations;
  j["zeroth"] = to_json(Matrix(rom.zeroth.packed().transpose()));
  json first = json::array();
  for (const Matrix& s : rom.first) first.push_back(to_json(Matrix(s.transpose())));
  j["first"] = std::move(first);
  out << j.dump();
}

void write_rom(const RomCoefficients& rom, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_rom(rom, out);
}

RomCoefficients read_rom(std::istream& in) {
  using detail::json;
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed ROM file: ") + e.what());
  }
  try {
    if (j.at("format") != "biofilm-rom") throw Error("not a ROM file");
    if (j.at("version").get<int>() != kRomFormatVersion)
      throw Error("unsupported ROM file version " + j.at("version").dump());
    const int n = j.at("species").get<int>();
    RomCoefficients rom;
    const json& c = j.at("config");
    rom.config.n_steps = c.at("n_steps").get<int>();
    rom.config.dt = c.at("dt").get<double>();
    rom.config.newton.tol = c.at("newton").at("tol").get<double>();
    rom.config.newton.max_iter = c.at("newton").at("max_iter").get<int>();
    rom.config.newton.max_halvings = c.at("newton").at("max_halvings").get<int>();
    rom.config.initial = State::unpack(detail::vector_from_json(c.at("initial")));
    const json& p = j.at("params");
    rom.params.a = detail::matrix_from_json(p.at("a"));
    rom.params.b = detail::vector_from_json(p.at("b"));
    rom.params.eta = detail::vector_from_json(p.at("eta"));
    rom.params.eta_empty = p.at("eta_empty").get<double>();
    const json& u = j.at("uncertain");
    rom.uncertain.index = u.at("index").get<std::vector<int>>();
    rom.uncertain.theta0 = detail::vector_from_json(u.at("theta0"));
    rom.uncertain.cov = detail::vector_from_json(u.at("cov"));
    rom.max_first_order_iterations = j.at("max_first_order_iterations").get<int>();
    Matrix zeroth = detail::matrix_from_json(j.at("zeroth")).transpose();
    if (zeroth.rows() != packed_size(n) || zeroth.cols() != rom.config.n_steps + 1)
      throw Error("ROM zeroth-order trajectory has the wrong shape");
    rom.zeroth = Trajectory(n, rom.config.dt, std::move(zeroth));
    for (const json& s : j.at("first")) {
      Matrix m = detail::matrix_from_json(s).transpose();
      if (m.rows() != packed_size(n) || m.cols() != rom.config.n_steps + 1)
        throw Error("ROM first-order trajectory has the wrong shape");
      rom.first.push_back(std::move(m));
    }
    if (rom.size() != rom.uncertain.size()) throw Error("ROM coefficient count mismatch");
    return rom;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed ROM file: ") + e.what());
  }
}

RomCoefficients read_rom(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_rom(in);
}

}  // namespace biofilm
