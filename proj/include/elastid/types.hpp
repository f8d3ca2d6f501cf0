#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "elastid/errors.hpp"

namespace elastid {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Global simulation configuration. Defaults follow the reference setup:
// 11 mm grid, 2 mm particle lattice, sigmoid boundary sharpness 5e3 and
// volume floor 1e-4.
struct SimConfig {
  double grid_spacing = 0.011;    // m
  double particle_spacing = 0.002;  // m
  double dt = 1e-4;               // s, substep size
  int substeps_per_frame = 100;   // n_s
  Vec3 gravity{0.0, 0.0, -9.81};  // m/s^2
  double bc_kappa = 100.0;        // positional-correction stiffness (substeps)
  Vec3 domain_min{0.0, 0.0, 0.0};
  Vec3 domain_max{0.5, 0.5, 0.5};
  double boundary_sharpness = 5e3;  // beta, 1/m
  double volume_floor = 1e-4;       // eps
  bool gravity_compensation = true;

  double frame_dt() const { return dt * substeps_per_frame; }
  void validate() const;
};

// One homogeneous material group. Young's modulus and density are stored in
// log10 space; Poisson ratio is fixed per segment.
struct MaterialSegment {
  int id = 0;
  double log10_E = 4.5;     // E in Pa
  double log10_rho = 2.5;   // rho in kg/m^3
  double nu = 0.3;
  double boundary_offset = 0.0;  // o_s, m, signed

  double youngs_modulus() const { return std::pow(10.0, log10_E); }
  double density() const { return std::pow(10.0, log10_rho); }
  void validate() const;
};

// Per-particle state, structure-of-arrays. All arrays share length size().
struct ParticleSet {
  std::vector<Vec3> x;   // position, m
  std::vector<Vec3> v;   // velocity, m/s
  std::vector<Mat3> F;   // deformation gradient
  std::vector<Mat3> C;   // affine velocity, 1/s
  std::vector<double> z_D;  // flattened [N, dim_D] appearance features
  std::vector<double> z_A;  // flattened [N, dim_A] affinity features
  int dim_D = 0;
  int dim_A = 0;
  std::vector<int> segment;        // material segment index
  std::vector<double> d;           // signed distance to tentative boundary, m
  std::vector<double> rest_volume;      // V_g, m^3
  std::vector<double> effective_volume;  // V, m^3
  std::vector<double> mass;        // kg
  std::vector<std::uint8_t> bc_flag;  // near contact point

  std::size_t size() const { return x.size(); }
  Eigen::Map<const Eigen::VectorXd> feature_D(std::size_t i) const {
    return {z_D.data() + i * dim_D, dim_D};
  }
  Eigen::Map<const Eigen::VectorXd> feature_A(std::size_t i) const {
    return {z_A.data() + i * dim_A, dim_A};
  }

  // Checks array-length agreement, segment references, det F > 0 and the
  // effective-volume range. Throws; never repairs.
  void validate(const std::vector<MaterialSegment>& segments,
                const SimConfig& config) const;
};

// Dense mass/momentum field over the active bounding box of the particles.
struct GridField {
  Eigen::Vector3i origin{0, 0, 0};  // index of node (0,0,0) in world lattice
  Eigen::Vector3i dims{0, 0, 0};    // node count per axis
  std::vector<double> mass;         // kg, dims.prod()
  std::vector<Vec3> momentum;       // kg m/s, dims.prod()

  std::size_t node_count() const {
    return static_cast<std::size_t>(dims.x()) * dims.y() * dims.z();
  }
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * dims.y() + j) * dims.z() + k;
  }
  void reset(const Eigen::Vector3i& new_origin, const Eigen::Vector3i& new_dims);
  void add(const GridField& other);  // other must share origin/dims
};

}  // namespace elastid
