#pragma once

#include <string>
#include <vector>

#include "elastid/mpm.hpp"
#include "elastid/projection.hpp"
#include "elastid/supervision.hpp"
#include "elastid/types.hpp"

namespace elastid {

// Recovered 6D contact-point motion. Quaternions are (w, x, y, z), unit
// norm, sign-aligned between consecutive frames.
struct PoseTrajectory {
  std::vector<Vec3> positions;
  std::vector<Eigen::Vector4d> quats;
  std::vector<int> near_set;  // indices into the tracked-point columns
  double grasp_radius = 0.015;

  int n_frames() const { return static_cast<int>(positions.size()); }
  void validate() const;
};

// One manual 2D annotation of the contact point.
struct Annotation2D {
  int frame = 0;
  int view = 0;
  double u = 0.0, v = 0.0;  // px
};

struct TriangulationResult {
  std::vector<Vec3> points;        // per frame
  std::vector<double> residual_px;  // RMS reprojection residual per frame
  std::vector<std::string> warnings;
};

// Per-frame linear DLT plus one Gauss-Newton polish on the reprojection
// residuals. Requires >= 2 views per annotated frame.
TriangulationResult triangulate(const std::vector<Annotation2D>& annotations,
                                const std::vector<Camera>& cameras,
                                int n_frames);

struct ContactRefineOptions {
  double lambda_ps = 0.1;
  double lambda_rs = 1e-4;
  int max_iterations = 2000;
  double rel_tolerance = 1e-8;
};

struct ContactRefineResult {
  PoseTrajectory trajectory;
  double final_loss = 0.0;
  std::vector<double> loss_trace;  // non-increasing
  bool converged = false;
  std::vector<std::string> warnings;
};

// Indices of tracked points within the grasp radius of the frame-0 coarse
// contact location.
std::vector<int> select_near_set(const std::vector<Vec3>& tracked_rest,
                                 const Vec3& coarse0, double radius);

// Joint refinement of per-frame contact positions and rotations by descent
// on the annotation, tracking and smoothness losses. Quaternions are
// renormalized (and sign-aligned) after every accepted step; the loss trace
// is non-increasing by construction.
ContactRefineResult refine_contact(const std::vector<Vec3>& coarse,
                                   const TrackSet& tracks,
                                   const std::vector<int>& near_set,
                                   const ContactRefineOptions& opts = {});

// Rigid per-frame targets x_c^t + R_c^t (x_i^0 - x_c^0) for the given
// particles; rest_positions[j] is the rest position of particle_ids[j].
ContactScript rigid_targets(const PoseTrajectory& traj,
                            const std::vector<int>& particle_ids,
                            const std::vector<Vec3>& rest_positions);

// Velocity boundary condition: frame-to-frame target velocity plus the
// positional correction spring.
//   v = (target_next - target_cur) / (n_s T) + (target_cur - x) / (kappa T)
Vec3 bc_velocity(const Vec3& x, const Vec3& target_cur,
                 const Vec3& target_next, const SimConfig& config);

// Rotation matrix of a unit quaternion (w, x, y, z).
Mat3 quat_to_rotation(const Eigen::Vector4d& q);

}  // namespace elastid
