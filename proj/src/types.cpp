#include "elastid/types.hpp"

#include <Eigen/LU>
#include <cmath>
#include <string>

namespace elastid {

void SimConfig::validate() const {
  if (!(grid_spacing > 0.0))
    throw InvalidParameterError("SimConfig: grid_spacing must be > 0");
  if (!(particle_spacing > 0.0))
    throw InvalidParameterError("SimConfig: particle_spacing must be > 0");
  if (!(dt > 0.0)) throw InvalidParameterError("SimConfig: dt must be > 0");
  if (substeps_per_frame < 1)
    throw InvalidParameterError("SimConfig: substeps_per_frame must be >= 1");
  for (int k = 0; k < 3; ++k) {
    if (!(domain_min[k] < domain_max[k]))
      throw InvalidParameterError("SimConfig: domain_min must be < domain_max");
  }
  if (!(volume_floor > 0.0 && volume_floor < 1.0))
    throw InvalidParameterError("SimConfig: volume_floor must be in (0, 1)");
  if (!(boundary_sharpness > 0.0))
    throw InvalidParameterError("SimConfig: boundary_sharpness must be > 0");
  if (!(bc_kappa > 0.0))
    throw InvalidParameterError("SimConfig: bc_kappa must be > 0");
}

void MaterialSegment::validate() const {
  if (!(nu > 0.0 && nu < 0.5))
    throw InvalidParameterError("MaterialSegment " + std::to_string(id) +
                                ": nu must be in (0, 0.5)");
  if (!std::isfinite(log10_E) || !std::isfinite(log10_rho) ||
      !std::isfinite(boundary_offset))
    throw InvalidParameterError("MaterialSegment " + std::to_string(id) +
                                ": parameters must be finite");
}

void ParticleSet::validate(const std::vector<MaterialSegment>& segments,
                           const SimConfig& config) const {
  const std::size_t n = x.size();
  auto check_len = [&](std::size_t len, const char* name) {
    if (len != n)
      throw DataError(std::string("ParticleSet: array '") + name +
                      "' has length " + std::to_string(len) + ", expected " +
                      std::to_string(n));
  };
  check_len(v.size(), "v");
  check_len(F.size(), "F");
  check_len(C.size(), "C");
  check_len(segment.size(), "segment");
  check_len(d.size(), "d");
  check_len(rest_volume.size(), "rest_volume");
  check_len(effective_volume.size(), "effective_volume");
  check_len(mass.size(), "mass");
  check_len(bc_flag.size(), "bc_flag");
  if (dim_D > 0) check_len(z_D.size() / dim_D, "z_D");
  if (dim_A > 0) check_len(z_A.size() / dim_A, "z_A");

  for (std::size_t i = 0; i < n; ++i) {
    if (segment[i] < 0 || segment[i] >= static_cast<int>(segments.size()))
      throw DataError("ParticleSet: particle " + std::to_string(i) +
                      " references missing segment " +
                      std::to_string(segment[i]));
    if (!(F[i].determinant() > 0.0))
      throw DataError("ParticleSet: particle " + std::to_string(i) +
                      " has det(F) <= 0");
    const double vmax = rest_volume[i] * (1.0 + config.volume_floor);
    if (!(effective_volume[i] > 0.0 && effective_volume[i] <= vmax))
      throw DataError("ParticleSet: particle " + std::to_string(i) +
                      " effective_volume out of range");
  }
}

void GridField::reset(const Eigen::Vector3i& new_origin,
                      const Eigen::Vector3i& new_dims) {
  origin = new_origin;
  dims = new_dims;
  mass.assign(node_count(), 0.0);
  momentum.assign(node_count(), Vec3::Zero());
}

void GridField::add(const GridField& other) {
  const std::size_t n = node_count();
  for (std::size_t i = 0; i < n; ++i) {
    mass[i] += other.mass[i];
    momentum[i] += other.momentum[i];
  }
}

}  // namespace elastid
