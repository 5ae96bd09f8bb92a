#include "biofilm/pbox.hpp"

#include "biofilm/tmcmc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>

namespace biofilm {

double normal_cdf(double x, double mu, double sd) {
  if (sd <= 0.0) return x >= mu ? 1.0 : 0.0;
  return 0.5 * std::erfc(-(x - mu) / (sd * std::numbers::sqrt2));
}

double PBox::area() const {
  double sum = 0.0;
  for (Eigen::Index i = 1; i < grid.size(); ++i) {
    const double h0 = upper_cdf(i - 1) - lower_cdf(i - 1);
    const double h1 = upper_cdf(i) - lower_cdf(i);
    sum += 0.5 * (h0 + h1) * (grid(i) - grid(i - 1));
  }
  return sum;
}

Vector default_pbox_grid(const Vector& means, double cov, int points) {
  if (means.size() == 0) throw InvalidArgument("p-box needs at least one posterior sample");
  if (points < 2) throw InvalidArgument("p-box grid needs at least two points");
  const double lo = means.minCoeff(), hi = means.maxCoeff();
  double spread = 4.0 * cov * means.cwiseAbs().maxCoeff();
  if (!(spread > 0.0)) spread = hi > lo ? 0.05 * (hi - lo) : std::max(1e-3, 1e-3 * std::abs(hi));
  return Vector::LinSpaced(points, lo - spread, hi + spread);
}

PBox pbox_from_posterior(const Vector& means, double cov, const Vector& grid) {
  if (means.size() == 0) throw InvalidArgument("p-box needs at least one posterior sample");
  if (!(cov >= 0.0)) throw InvalidArgument("p-box coefficient of variation must be non-negative");
  PBox box;
  box.grid = grid;
  box.cov = cov;
  box.lower_cdf = Vector::Ones(grid.size());
  box.upper_cdf = Vector::Zero(grid.size());
  for (Eigen::Index s = 0; s < means.size(); ++s) {
    const double mu = means(s), sd = cov * std::abs(mu);
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
      const double f = normal_cdf(grid(i), mu, sd);
      box.lower_cdf(i) = std::min(box.lower_cdf(i), f);
      box.upper_cdf(i) = std::max(box.upper_cdf(i), f);
    }
  }
  return box;
}

PBox pbox_credible(const Vector& means, double cov, const Vector& grid, double mass) {
  if (means.size() == 0) throw InvalidArgument("p-box needs at least one posterior sample");
  const double lo = quantile(means, 0.5 * (1.0 - mass));
  const double hi = quantile(means, 0.5 * (1.0 + mass));
  std::vector<double> kept;
  for (Eigen::Index s = 0; s < means.size(); ++s)
    if (means(s) >= lo && means(s) <= hi) kept.push_back(means(s));
  PBox box = pbox_from_posterior(Eigen::Map<const Vector>(kept.data(), static_cast<Eigen::Index>(kept.size())), cov,
                                 grid);
  box.label = "credible" + std::to_string(static_cast<int>(std::lround(mass * 100)));
  return box;
}

void write_pbox_csv(const PBox& box, std::ostream& out) {
  out << "x,lower_cdf,upper_cdf\n" << std::setprecision(17);
  for (Eigen::Index i = 0; i < box.grid.size(); ++i)
    out << box.grid(i) << ',' << box.lower_cdf(i) << ',' << box.upper_cdf(i) << '\n';
}

void write_pbox_csv(const PBox& box, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_pbox_csv(box, out);
}

}  // namespace biofilm
