#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "elastid/contact.hpp"
#include "elastid/mpm.hpp"
#include "elastid/projection.hpp"
#include "elastid/supervision.hpp"
#include "elastid/types.hpp"

#include "json.hpp"

namespace elastid {

enum class DType : std::uint8_t { F32, F64, U8, I32 };

std::size_t dtype_size(DType t);
std::string dtype_name(DType t);
DType dtype_from_name(const std::string& name);

struct Tensor {
  DType dtype = DType::F64;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> data;

  std::size_t element_count() const;
  template <typename T>
  T* as() {
    return reinterpret_cast<T*>(data.data());
  }
  template <typename T>
  const T* as() const {
    return reinterpret_cast<const T*>(data.data());
  }
};

enum class LoadMode { Full, Estimation };

// On-disk container: magic + manifest JSON + raw little-endian tensor
// payload, hashed for corruption detection. Tensors named "sealed/..." and
// the manifest's sealed section are dropped in estimation mode.
struct SceneBundle {
  std::string kind;  // "scene" | "trajectory"
  nlohmann::json meta;
  std::map<std::string, Tensor> tensors;
  bool sealed_stripped = false;

  const Tensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
  // Throws SealedAccessError in estimation mode.
  const Tensor& sealed_tensor(const std::string& name) const;
  const nlohmann::json& sealed_meta() const;
};

void write_bundle(const SceneBundle& bundle, const std::string& path);
SceneBundle read_bundle(const std::string& path,
                        LoadMode mode = LoadMode::Full);

// ---------------------------------------------------------------------------
// Synthetic oracle scenes.

struct ScenePart {
  Vec3 min_corner = Vec3::Zero();
  Vec3 size = Vec3::Zero();
  double log10_E = 4.5;
  double log10_rho = 2.5;
  double nu = 0.3;
  int feature_group = -1;  // parts sharing a group share feature centers
};

struct ContactMotionSpec {
  Vec3 grasp = Vec3::Zero();
  double radius = 0.015;
  std::string motion = "sine";  // "sine" | "ramp-hold" | "none"
  Vec3 axis{1.0, 0.0, 0.0};
  double amplitude = 0.0;  // m
  double periods = 1.0;
};

struct CameraRingSpec {
  int count = 3;
  double radius = 0.35;
  double height_offset = 0.05;  // above the object centre
  double fov_deg = 45.0;
  int width = 256;
  int height = 256;
  int feature_resolution = 64;
};

struct SyntheticSceneSpec {
  std::string name = "scene";
  std::string geometry = "cantilever";  // "cantilever" | "branching"
  std::vector<ScenePart> parts;
  double feature_noise = 0.05;
  double track_noise = 0.0;  // m
  CameraRingSpec cameras;
  ContactMotionSpec contact;
  int frames = 80;        // total baked frames (including frame 0)
  int train_frames = 50;  // estimation window
  int band_shells = 0;    // boundary-band lattice shells outside the parts
  int feature_dim = 16;
  int affinity_dim = 8;
  std::uint64_t seed = 0;
  SimConfig config;

  void validate() const;
};

SyntheticSceneSpec scene_spec_from_json(const nlohmann::json& j);
nlohmann::json scene_spec_to_json(const SyntheticSceneSpec& spec);

nlohmann::json config_to_json(const SimConfig& config);
SimConfig config_from_json(const nlohmann::json& j);
nlohmann::json camera_to_json(const Camera& cam);
Camera camera_from_json(const nlohmann::json& j);
nlohmann::json segment_to_json(const MaterialSegment& seg);
MaterialSegment segment_from_json(const nlohmann::json& j);

// Generated scene before observation baking.
struct Scene {
  SyntheticSceneSpec spec;
  ParticleSet rest;                 // labelled with ground-truth part ids
  std::vector<MaterialSegment> true_segments;  // one per part
  std::vector<Vec3> colors;         // per particle, [0,1]
  std::vector<Camera> cameras;
  PoseTrajectory contact_poses;     // per-frame contact pose (may be empty)
  ContactScript contact_script;     // rigid targets for the near-set
};

// Seeds the particle lattice, features, cameras and contact script.
Scene gen_scene(const SyntheticSceneSpec& spec);

// Simulates with the true parameters and exports what the estimation
// consumes: tracks, masks, distance maps, RGB and feature renders. The true
// parameters and part labels go into the sealed section.
struct BakeResult {
  Trajectory trajectory;
  ObservationBundle observations;
  std::vector<std::string> warnings;
};
BakeResult bake_observations(const Scene& scene, int workers = 1);

// Closed-form least-squares rigid alignment (rotation + translation, unit
// scale): minimizes sum |R src + t - dst|^2.
std::pair<Mat3, Vec3> umeyama_rigid(const std::vector<Vec3>& src,
                                    const std::vector<Vec3>& dst);

// ---------------------------------------------------------------------------
// Bundle assembly / extraction.

SceneBundle make_scene_bundle(const Scene& scene, const BakeResult& bake);
SceneBundle make_trajectory_bundle(const Scene& scene,
                                   const std::vector<MaterialSegment>& segments,
                                   const Trajectory& traj);

// Reassembled scene-side inputs from a bundle (estimation mode leaves
// true_segments empty and rest.segment all zero).
struct LoadedScene {
  SimConfig config;
  ParticleSet rest;
  std::vector<Vec3> colors;
  std::vector<Camera> cameras;
  ContactScript contact_script;
  ObservationBundle observations;
  int train_frames = 0;
  int frames = 0;
  // Full mode only:
  std::vector<MaterialSegment> true_segments;
  std::vector<int> true_labels;
};

LoadedScene load_scene(const SceneBundle& bundle);

struct LoadedTrajectory {
  SimConfig config;
  std::vector<MaterialSegment> segments;
  std::vector<Camera> cameras;
  std::vector<Vec3> colors;
  ParticleSet rest;
  Trajectory trajectory;
};

LoadedTrajectory load_trajectory(const SceneBundle& bundle);

}  // namespace elastid
