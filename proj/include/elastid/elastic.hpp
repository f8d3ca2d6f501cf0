#pragma once

#include <utility>

namespace elastid {

// Lame parameters (mu, lambda) from Young's modulus and Poisson ratio.
// Requires E > 0 and nu in (0, 0.5).
std::pair<double, double> lame_from_elastic(double E, double nu);

// Effective particle volume from the signed boundary distance d and the
// segment boundary offset o_s:
//   V = V_g * (sigmoid(-beta * (d + o_s)) + eps)
// Particles outside the shifted boundary get near-zero volume.
double particle_volume(double d, double o_s, double V_g, double beta,
                       double eps);

}  // namespace elastid
