#pragma once

#include <optional>
#include <string>
#include <vector>

#include "elastid/mpm.hpp"
#include "elastid/projection.hpp"
#include "elastid/types.hpp"

namespace elastid {

// 3D tracks with particle-id correspondence. frames[t][j] is the position of
// particle ids[j] at frame t (frame 0 = rest/registered state).
struct TrackSet {
  std::vector<int> ids;
  std::vector<std::vector<Vec3>> frames;

  int n_frames() const { return static_cast<int>(frames.size()); }
  void validate(std::size_t n_particles) const;
};

// Everything the estimation consumes from the observed world. 2D components
// (masks, distance maps, rgb, feature maps) may be absent; tracks are
// required for the 3D stages.
struct ObservationBundle {
  TrackSet tracks;
  std::vector<Camera> cameras;
  std::vector<std::vector<MaskImage>> masks;        // [frame][view]
  std::vector<std::vector<ImageF>> distance_maps;   // [frame][view], 1ch px
  std::vector<std::vector<ImageF>> rgb;             // [frame][view], 3ch
  std::vector<std::vector<ImageF>> feature_maps;    // [frame][view], d_D ch

  bool has_2d() const { return !masks.empty() && !rgb.empty(); }
  void validate() const;
};

// One temporal mini-batch: frame window plus the initial particle states the
// window is simulated from.
struct TemporalBatch {
  int t0 = 0;
  int t1 = 0;  // inclusive
  ParticleSet initial;
  std::vector<Vec3> accel;  // track-estimated initial acceleration
};

// Sum of squared distances between simulated and tracked positions over all
// snapshot frames present in the tracks (Eq. of the 3D supervision).
double loss_3d(const Trajectory& traj, const TrackSet& tracks);

// Exact Euclidean distance (px) from each pixel to the nearest mask-interior
// pixel, via the separable lower-envelope transform. Zero inside the mask.
ImageF distance_transform(const MaskImage& mask);

// Mean over views / points of the distance map sampled bilinearly at the
// projected point. Out-of-image projections clamp to the border sample plus
// the pixel distance to the image rectangle; points behind a camera pay the
// image-diagonal penalty.
double loss_dt(const std::vector<Vec3>& points,
               const std::vector<Camera>& cameras,
               const std::vector<ImageF>& distance_maps);

// 0.8 * multiscale L1 + 0.2 * mean D-SSIM over pyramid levels {1, 1/2, 1/4}.
double loss_rgb(const ImageF& rendered, const ImageF& reference);

// Multiscale L1 only (feature maps), same pyramid as loss_rgb.
double loss_l1_multiscale(const ImageF& rendered, const ImageF& reference);

struct Loss2dWeights {
  double rgb = 0.1;
  double dino = 0.1;
  double dt = 1e-3;
};

struct Loss2dBreakdown {
  double total = 0.0;
  double rgb = 0.0;
  double dino = 0.0;
  double dt = 0.0;
};

struct RenderedFrame {
  std::vector<Vec3> points;             // visible particle positions
  std::vector<ImageF> rgb;              // per view
  std::vector<ImageF> features;         // per view, at feature-map resolution
};

// Weighted combination of the 2D terms for one frame against the bundle's
// stored observations at that frame.
Loss2dBreakdown loss_2d(const RenderedFrame& rendered,
                        const ObservationBundle& bundle, int frame,
                        const Loss2dWeights& weights);

// Disc-splat renders of the currently-visible particles for every view:
// RGB from the given colors and feature channels from z_D downscaled to
// feature_resolution. Either output can be skipped by passing empty colors
// or feature_resolution <= 0.
RenderedFrame render_views(const ParticleSet& snap,
                           const std::vector<Vec3>& colors,
                           const std::vector<Camera>& cameras,
                           double particle_spacing, int feature_resolution);

// Initial particle states for a mini-batch starting at frame t0: positions
// and velocities from the tracks (central differences, one-sided at the
// sequence ends) and F/C from weighted least-squares affine fits over the 16
// nearest tracked rest-state neighbors. Untracked particles are filled from
// the local fits.
TemporalBatch init_states_from_tracks(const TrackSet& tracks, int t0, int t1,
                                      double frame_dt,
                                      const ParticleSet& rest,
                                      std::vector<std::string>* warnings);

}  // namespace elastid
