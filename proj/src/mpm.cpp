#include "elastid/mpm.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "elastid/elastic.hpp"
#include "elastid/parallel.hpp"

namespace elastid {

namespace {

constexpr double kGridMassEps = 1e-12;  // kg, node activation threshold
constexpr int kWallCells = 2;           // sticky band width on domain faces
constexpr std::size_t kChunkSize = 8192;  // fixed particle chunk, keeps
                                          // reductions independent of workers

// Scaled Higham iteration for the polar rotation. Quadratic convergence;
// a handful of iterations for the near-rotation F seen in elastic stepping.
bool polar_higham(const Mat3& F, Mat3& Q) {
  Mat3 X = F;
  for (int it = 0; it < 40; ++it) {
    const double det = X.determinant();
    if (!(std::abs(det) > 0.0) || !X.allFinite()) return false;
    Mat3 Xit = X.inverse().transpose();
    const double gamma = std::sqrt(std::sqrt(Xit.squaredNorm() / X.squaredNorm()));
    Mat3 Xn = 0.5 * (gamma * X + (1.0 / gamma) * Xit);
    const double delta = (Xn - X).cwiseAbs().maxCoeff();
    X = Xn;
    if (delta < 1e-13) {
      Q = X;
      return true;
    }
  }
  return false;
}

Mat3 polar_svd_fallback(const Mat3& F) {
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU();
  Mat3 V = svd.matrixV();
  Mat3 Q = U * V.transpose();
  if (Q.determinant() < 0.0) {
    U.col(2) *= -1.0;
    Q = U * V.transpose();
  }
  return Q;
}

struct SegmentCoeffs {
  double mu = 0.0;
  double lambda = 0.0;
};

struct GridRange {
  Eigen::Vector3i origin;
  Eigen::Vector3i dims;
};

GridRange particle_grid_range(const ParticleSet& p, double inv_dx) {
  Vec3 lo = p.x[0];
  Vec3 hi = p.x[0];
  for (const Vec3& xi : p.x) {
    lo = lo.cwiseMin(xi);
    hi = hi.cwiseMax(xi);
  }
  GridRange r;
  for (int k = 0; k < 3; ++k) {
    const int base_lo = static_cast<int>(std::floor(lo[k] * inv_dx - 0.5));
    const int base_hi = static_cast<int>(std::floor(hi[k] * inv_dx - 0.5));
    r.origin[k] = base_lo - kWallCells;
    r.dims[k] = (base_hi + 2 + kWallCells) - r.origin[k] + 1;
  }
  return r;
}

inline void bspline_weights(double fx, double w[3]) {
  // Quadratic B-spline, fx in [0.5, 1.5) relative to the base node.
  w[0] = 0.5 * (1.5 - fx) * (1.5 - fx);
  w[1] = 0.75 - (fx - 1.0) * (fx - 1.0);
  w[2] = 0.5 * (fx - 0.5) * (fx - 0.5);
}

void scatter_range(const SimState& state,
                   const std::vector<SegmentCoeffs>& coeffs,
                   const SimConfig& config, const GridRange& range,
                   std::size_t begin, std::size_t end, GridField& grid) {
  const ParticleSet& p = state.particles;
  const double dx = config.grid_spacing;
  const double inv_dx = 1.0 / dx;
  const double dt = config.dt;
  const double mls_coeff = 4.0 * inv_dx * inv_dx;
  const bool compensate = config.gravity_compensation;
  const Vec3 g = config.gravity;

  const std::size_t stride_i =
      static_cast<std::size_t>(range.dims.y()) * range.dims.z();
  const std::size_t stride_j = range.dims.z();
  double* gm = grid.mass.data();
  Vec3* gp = grid.momentum.data();

  for (std::size_t i = begin; i < end; ++i) {
    const Vec3& xi = p.x[i];
    const double m = p.mass[i];
    const Mat3& F = p.F[i];
    const SegmentCoeffs& sc = coeffs[p.segment[i]];

    Mat3 Q;
    if (!polar_higham(F, Q)) Q = polar_svd_fallback(F);
    const double J = F.determinant();
    // Kirchhoff stress of the fixed corotated model.
    Mat3 tau = 2.0 * sc.mu * (F - Q) * F.transpose();
    tau.diagonal().array() += sc.lambda * J * (J - 1.0);

    Mat3 affine = (-dt * p.effective_volume[i] * mls_coeff) * tau + m * p.C[i];

    Vec3 f_ext = m * g;
    if (compensate) f_ext += Q * state.f_int0[i];
    const Vec3 force_dt = dt * f_ext;
    const Vec3 mv = m * p.v[i] + force_dt;

    int base[3];
    double w[3][3];
    double fx[3];
    for (int k = 0; k < 3; ++k) {
      base[k] = static_cast<int>(std::floor(xi[k] * inv_dx - 0.5));
      fx[k] = xi[k] * inv_dx - base[k];
      bspline_weights(fx[k], w[k]);
    }

    const std::size_t node0 =
        static_cast<std::size_t>(base[0] - range.origin.x()) * stride_i +
        static_cast<std::size_t>(base[1] - range.origin.y()) * stride_j +
        static_cast<std::size_t>(base[2] - range.origin.z());

    for (int a = 0; a < 3; ++a) {
      const double dpos_x = (a - fx[0]) * dx;
      const Vec3 acol = affine.col(0) * dpos_x;
      for (int b = 0; b < 3; ++b) {
        const double wab = w[0][a] * w[1][b];
        const double dpos_y = (b - fx[1]) * dx;
        const Vec3 acol2 = acol + affine.col(1) * dpos_y;
        const std::size_t row = node0 + a * stride_i + b * stride_j;
        for (int c = 0; c < 3; ++c) {
          const double weight = wab * w[2][c];
          const double dpos_z = (c - fx[2]) * dx;
          const std::size_t idx = row + c;
          gm[idx] += weight * m;
          gp[idx] += weight * (mv + acol2 + affine.col(2) * dpos_z);
        }
      }
    }
  }
}

void gather_range(SimState& state, const SimConfig& config,
                  const GridRange& range, const GridField& grid,
                  std::size_t begin, std::size_t end, int substep_abs) {
  ParticleSet& p = state.particles;
  const double dx = config.grid_spacing;
  const double inv_dx = 1.0 / dx;
  const double dt = config.dt;
  const double apic_coeff = 4.0 * inv_dx * inv_dx;

  const std::size_t stride_i =
      static_cast<std::size_t>(range.dims.y()) * range.dims.z();
  const std::size_t stride_j = range.dims.z();
  const Vec3* gv = grid.momentum.data();  // holds velocities after division

  for (std::size_t i = begin; i < end; ++i) {
    const Vec3 xi = p.x[i];

    int base[3];
    double w[3][3];
    double fx[3];
    for (int k = 0; k < 3; ++k) {
      base[k] = static_cast<int>(std::floor(xi[k] * inv_dx - 0.5));
      fx[k] = xi[k] * inv_dx - base[k];
      bspline_weights(fx[k], w[k]);
    }

    const std::size_t node0 =
        static_cast<std::size_t>(base[0] - range.origin.x()) * stride_i +
        static_cast<std::size_t>(base[1] - range.origin.y()) * stride_j +
        static_cast<std::size_t>(base[2] - range.origin.z());

    Vec3 v_new = Vec3::Zero();
    Mat3 B = Mat3::Zero();  // sum w * v * dpos^T
    for (int a = 0; a < 3; ++a) {
      const double dpos_x = (a - fx[0]) * dx;
      for (int b = 0; b < 3; ++b) {
        const double wab = w[0][a] * w[1][b];
        const double dpos_y = (b - fx[1]) * dx;
        const std::size_t row = node0 + a * stride_i + b * stride_j;
        for (int c = 0; c < 3; ++c) {
          const double weight = wab * w[2][c];
          const double dpos_z = (c - fx[2]) * dx;
          const Vec3 wv = weight * gv[row + c];
          v_new += wv;
          B.col(0) += wv * dpos_x;
          B.col(1) += wv * dpos_y;
          B.col(2) += wv * dpos_z;
        }
      }
    }

    p.v[i] = v_new;
    p.C[i] = apic_coeff * B;
    p.x[i] = xi + dt * v_new;
    Mat3 Fn = (Mat3::Identity() + dt * p.C[i]) * p.F[i];
    const double det = Fn.determinant();
    if (!(det > 0.0)) {
      throw InvertedElementError(
          "step: inverted element (det F <= 0) at particle " +
              std::to_string(i) + ", substep " + std::to_string(substep_abs),
          static_cast<long>(i), substep_abs);
    }
    if (!Fn.allFinite() || !p.x[i].allFinite()) {
      throw NumericBlowupError(
          "step: non-finite particle state at particle " + std::to_string(i),
          v_new.norm());
    }
    p.F[i] = Fn;
  }
}

}  // namespace

void ContactScript::validate(std::size_t n_particles) const {
  if (!targets.empty() && near_set.empty())
    throw DataError("ContactScript: active trajectory with empty near_set");
  for (int idx : near_set) {
    if (idx < 0 || idx >= static_cast<int>(n_particles))
      throw DataError("ContactScript: near_set index out of range");
  }
  for (const auto& frame : targets) {
    if (frame.size() != near_set.size())
      throw DataError("ContactScript: target count does not match near_set");
  }
}

Mat3 polar_rotation(const Mat3& F) {
  if (!F.allFinite())
    throw SingularDecompositionError("polar_rotation: non-finite input");
  const double scale = F.cwiseAbs().maxCoeff();
  const double det = F.determinant();
  if (!(scale > 0.0) || std::abs(det) < 1e-12 * scale * scale * scale)
    throw SingularDecompositionError(
        "polar_rotation: numerically singular deformation gradient");
  Mat3 Q;
  if (!polar_higham(F, Q)) Q = polar_svd_fallback(F);
  if (det < 0.0)
    throw SingularDecompositionError(
        "polar_rotation: negative determinant input");
  return Q;
}

Mat3 corotated_stress(const Mat3& F, double mu, double lambda) {
  const double J = F.determinant();
  if (!(J > 0.0))
    throw InvertedElementError("corotated_stress: det F <= 0", -1);
  const Mat3 Q = polar_rotation(F);
  Mat3 tau = 2.0 * mu * (F - Q) * F.transpose();
  tau.diagonal().array() += lambda * J * (J - 1.0);
  return tau;
}

Vec3 gravity_external_force(double m, const Vec3& g, const Mat3& Q,
                            const Vec3& f_int0) {
  return m * g + Q * f_int0;
}

void apply_materials(ParticleSet& particles,
                     const std::vector<MaterialSegment>& segments,
                     const SimConfig& config) {
  const std::size_t n = particles.size();
  particles.effective_volume.resize(n);
  particles.mass.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const MaterialSegment& seg = segments[particles.segment[i]];
    const double V =
        particle_volume(particles.d[i], seg.boundary_offset,
                        particles.rest_volume[i], config.boundary_sharpness,
                        config.volume_floor);
    particles.effective_volume[i] = V;
    particles.mass[i] = seg.density() * V;
  }
}

SimState make_sim_state(ParticleSet particles,
                        const std::vector<MaterialSegment>& segments,
                        const SimConfig& config, int start_frame) {
  apply_materials(particles, segments, config);
  SimState state;
  state.particles = std::move(particles);
  state.frame_index = start_frame;
  state.time = start_frame * config.frame_dt();
  state.substep_in_frame = 0;
  state.f_int0.resize(state.particles.size());
  for (std::size_t i = 0; i < state.particles.size(); ++i) {
    state.f_int0[i] = -state.particles.mass[i] * config.gravity;
  }
  return state;
}

void step(SimState& state, const std::vector<MaterialSegment>& segments,
          const ContactScript* contact, const SimConfig& config, int workers) {
  ParticleSet& p = state.particles;
  const std::size_t n = p.size();
  if (n == 0) return;

  std::vector<SegmentCoeffs> coeffs(segments.size());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    auto [mu, lambda] =
        lame_from_elastic(segments[s].youngs_modulus(), segments[s].nu);
    coeffs[s] = {mu, lambda};
  }

  // Contact velocity overwrite happens before the particle-to-grid transfer.
  if (contact != nullptr && contact->n_frames() > 0) {
    const int t = std::min(state.frame_index, contact->n_frames() - 1);
    const int t1 = std::min(t + 1, contact->n_frames() - 1);
    const double frame_dt = config.frame_dt();
    const double inv_kappa_t = 1.0 / (config.bc_kappa * config.dt);
    for (std::size_t j = 0; j < contact->near_set.size(); ++j) {
      const int i = contact->near_set[j];
      const Vec3& target_t = contact->targets[t][j];
      const Vec3& target_t1 = contact->targets[t1][j];
      p.v[i] = (target_t1 - target_t) / frame_dt +
               (target_t - p.x[i]) * inv_kappa_t;
    }
  }

  const double inv_dx = 1.0 / config.grid_spacing;
  const GridRange range = particle_grid_range(p, inv_dx);

  static thread_local GridField grid;
  grid.reset(range.origin, range.dims);

  // P2G. Fixed-size chunks with an in-order merge keep the grid sums
  // independent of the worker count.
  const std::size_t n_chunks = (n + kChunkSize - 1) / kChunkSize;
  if (n_chunks <= 1 || workers <= 1) {
    scatter_range(state, coeffs, config, range, 0, n, grid);
  } else {
    std::vector<GridField> partials(n_chunks);
    parallel_for_index(n_chunks, workers, [&](std::size_t c) {
      partials[c].reset(range.origin, range.dims);
      const std::size_t begin = c * kChunkSize;
      const std::size_t end = std::min(n, begin + kChunkSize);
      scatter_range(state, coeffs, config, range, begin, end, partials[c]);
    });
    for (const GridField& part : partials) grid.add(part);
  }

  // Grid update: momentum -> velocity, sticky walls on the domain faces.
  {
    const double dx = config.grid_spacing;
    const Vec3 wall_lo = config.domain_min + Vec3::Constant(kWallCells * dx);
    const Vec3 wall_hi = config.domain_max - Vec3::Constant(kWallCells * dx);
    double max_vel_sq = 0.0;
    bool blowup = false;
    for (int a = 0; a < range.dims.x(); ++a) {
      const double px = (range.origin.x() + a) * dx;
      for (int b = 0; b < range.dims.y(); ++b) {
        const double py = (range.origin.y() + b) * dx;
        const std::size_t row = (static_cast<std::size_t>(a) * range.dims.y() +
                                 b) * range.dims.z();
        for (int c = 0; c < range.dims.z(); ++c) {
          const std::size_t idx = row + c;
          if (grid.mass[idx] <= kGridMassEps) {
            grid.momentum[idx].setZero();
            continue;
          }
          Vec3 vel = grid.momentum[idx] / grid.mass[idx];
          if (!vel.allFinite()) {
            blowup = true;
            vel.setZero();
          }
          const double pz = (range.origin.z() + c) * dx;
          if (px <= wall_lo.x() || px >= wall_hi.x() || py <= wall_lo.y() ||
              py >= wall_hi.y() || pz <= wall_lo.z() || pz >= wall_hi.z()) {
            vel.setZero();
          }
          max_vel_sq = std::max(max_vel_sq, vel.squaredNorm());
          grid.momentum[idx] = vel;
        }
      }
    }
    if (blowup) {
      throw NumericBlowupError("step: non-finite grid velocity",
                               std::sqrt(max_vel_sq));
    }
  }

  // G2P + advection. Pure per-particle writes, deterministic under any
  // worker count.
  const int substep_abs =
      state.frame_index * config.substeps_per_frame + state.substep_in_frame;
  if (n_chunks <= 1 || workers <= 1) {
    gather_range(state, config, range, grid, 0, n, substep_abs);
  } else {
    parallel_for_index(n_chunks, workers, [&](std::size_t c) {
      const std::size_t begin = c * kChunkSize;
      const std::size_t end = std::min(n, begin + kChunkSize);
      gather_range(state, config, range, grid, begin, end, substep_abs);
    });
  }

  state.time += config.dt;
  if (++state.substep_in_frame >= config.substeps_per_frame) {
    state.substep_in_frame = 0;
    ++state.frame_index;
  }
}

void cfl_preflight(const std::vector<MaterialSegment>& segments,
                   const SimConfig& config,
                   std::vector<std::string>* warnings) {
  if (warnings == nullptr || segments.empty()) return;
  double E_max = 0.0;
  double rho_min = std::numeric_limits<double>::infinity();
  for (const MaterialSegment& s : segments) {
    E_max = std::max(E_max, s.youngs_modulus());
    rho_min = std::min(rho_min, s.density());
  }
  const double dt_bound =
      0.1 * config.grid_spacing * std::sqrt(rho_min / E_max);
  if (config.dt > dt_bound) {
    warnings->push_back("cfl: dt " + std::to_string(config.dt) +
                        " exceeds 0.1*dx*sqrt(rho_min/E_max) = " +
                        std::to_string(dt_bound));
  }
}

Trajectory simulate(const SimState& initial,
                    const std::vector<MaterialSegment>& segments,
                    const ContactScript* contact, const SimConfig& config,
                    int n_frames, int workers,
                    std::vector<std::string>* warnings) {
  if (n_frames < 0)
    throw InvalidParameterError("simulate: n_frames must be >= 0");
  config.validate();
  for (const MaterialSegment& s : segments) s.validate();
  if (contact != nullptr) contact->validate(initial.particles.size());
  cfl_preflight(segments, config, warnings);

  SimState state = initial;
  Trajectory traj;
  traj.start_frame = initial.frame_index;
  traj.snapshots.reserve(n_frames + 1);
  traj.snapshots.push_back(state.particles);
  for (int f = 0; f < n_frames; ++f) {
    for (int s = 0; s < config.substeps_per_frame; ++s) {
      try {
        step(state, segments, contact, config, workers);
      } catch (const NumericError&) {
        // Context (frame/substep) already carried by the error message via
        // the absolute substep index; rethrow unchanged.
        throw;
      }
    }
    traj.snapshots.push_back(state.particles);
  }
  return traj;
}

}  // namespace elastid
