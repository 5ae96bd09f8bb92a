#pragma once

#include "biofilm/common.hpp"

#include <iosfwd>
#include <string>

namespace biofilm {

/// Envelope of Normal(mu, (cov * mu)^2) CDFs over a set of posterior means.
struct PBox {
  Vector grid;
  Vector lower_cdf;
  Vector upper_cdf;
  double cov = 0.0;
  std::string label = "all";  // "all" or "credible95"

  /// Integral of upper_cdf - lower_cdf over the grid (trapezoidal rule).
  double area() const;
};

/// Grid of `points` values spanning [min mu - 4 sd_max, max mu + 4 sd_max].
Vector default_pbox_grid(const Vector& means, double cov, int points = 512);

PBox pbox_from_posterior(const Vector& means, double cov, const Vector& grid);
inline PBox pbox_from_posterior(const Vector& means, double cov) {
  return pbox_from_posterior(means, cov, default_pbox_grid(means, cov));
}

/// Same envelope restricted to means inside the central `mass` interval.
PBox pbox_credible(const Vector& means, double cov, const Vector& grid, double mass = 0.95);

double normal_cdf(double x, double mu, double sd);

/// CSV with header x,lower_cdf,upper_cdf.
void write_pbox_csv(const PBox& box, std::ostream& out);
void write_pbox_csv(const PBox& box, const std::string& path);

}  // namespace biofilm
