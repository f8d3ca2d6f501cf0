#pragma once

#include <string>
#include <vector>

#include "elastid/types.hpp"

namespace elastid {

// Per-frame rigid targets for the particles driven by the contact point.
// targets[t][j] is the prescribed position of particle near_set[j] at frame
// t (absolute frame index, 0 = rest).
struct ContactScript {
  std::vector<int> near_set;
  std::vector<std::vector<Vec3>> targets;

  int n_frames() const { return static_cast<int>(targets.size()); }
  void validate(std::size_t n_particles) const;
};

struct SimState {
  ParticleSet particles;
  double time = 0.0;
  int frame_index = 0;
  int substep_in_frame = 0;
  // Initial internal force, -m_i * g, fixed at simulation start (Eq. of the
  // rest-shape force balance). Rotated by the per-particle polar rotation to
  // form the external force during stepping.
  std::vector<Vec3> f_int0;
};

struct Trajectory {
  int start_frame = 0;
  std::vector<ParticleSet> snapshots;  // n_frames + 1 entries
};

// Rotation factor of the polar decomposition F = Q * S (S symmetric positive
// definite), det Q = +1. Throws SingularDecompositionError on numerically
// singular input.
Mat3 polar_rotation(const Mat3& F);

// Fixed-corotated Kirchhoff stress tau = 2 mu (F - R) F^T + lambda J (J-1) I.
Mat3 corotated_stress(const Mat3& F, double mu, double lambda);

// External force with gravity compensation: f_ext = m g + Q f_int0.
Vec3 gravity_external_force(double m, const Vec3& g, const Mat3& Q,
                            const Vec3& f_int0);

// Recomputes effective volumes and masses from the segment materials
// (density and boundary offset). Call whenever parameters change.
void apply_materials(ParticleSet& particles,
                     const std::vector<MaterialSegment>& segments,
                     const SimConfig& config);

// Builds a simulation state at the given frame: refreshes masses/volumes and
// sets f_int0 = -m g.
SimState make_sim_state(ParticleSet particles,
                        const std::vector<MaterialSegment>& segments,
                        const SimConfig& config, int start_frame = 0);

// One MLS-MPM substep: contact velocity overwrite, P2G with APIC + MLS
// stress and the per-particle external force, grid momentum update with
// sticky domain walls, G2P, advection and F update. The grid covers the
// particle bounding box padded by two cells.
void step(SimState& state, const std::vector<MaterialSegment>& segments,
          const ContactScript* contact, const SimConfig& config,
          int workers = 1);

// Warns (into *warnings) when dt exceeds the CFL bound for the stiffest
// configured material.
void cfl_preflight(const std::vector<MaterialSegment>& segments,
                   const SimConfig& config,
                   std::vector<std::string>* warnings);

// Advances n_frames frames and returns n_frames + 1 snapshots including the
// initial one. Deterministic for a fixed worker count.
Trajectory simulate(const SimState& initial,
                    const std::vector<MaterialSegment>& segments,
                    const ContactScript* contact, const SimConfig& config,
                    int n_frames, int workers = 1,
                    std::vector<std::string>* warnings = nullptr);

}  // namespace elastid
