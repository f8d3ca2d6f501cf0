#include "elastid/elastic.hpp"

#include <cmath>

#include "elastid/errors.hpp"

namespace elastid {

std::pair<double, double> lame_from_elastic(double E, double nu) {
  if (!(E > 0.0)) {
    throw InvalidParameterError("lame_from_elastic: E must be > 0, got " +
                                std::to_string(E));
  }
  if (!(nu >= 0.0 && nu < 0.5)) {
    throw InvalidParameterError("lame_from_elastic: nu must be in [0, 0.5), got " +
                                std::to_string(nu));
  }
  const double mu = E / (2.0 * (1.0 + nu));
  const double lambda = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
  return {mu, lambda};
}

double particle_volume(double d, double o_s, double V_g, double beta,
                       double eps) {
  // Numerically stable logistic: sigmoid(-t) with t = beta * (d + o_s).
  const double t = beta * (d + o_s);
  double sig;
  if (t >= 0.0) {
    sig = std::exp(-t) / (1.0 + std::exp(-t));
  } else {
    sig = 1.0 / (1.0 + std::exp(t));
  }
  return V_g * (sig + eps);
}

}  // namespace elastid
