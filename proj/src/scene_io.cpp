#include "elastid/scene_io.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace elastid {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Tensor container.

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
    case DType::I32: return 4;
  }
  throw FormatError("dtype_size: unknown dtype");
}

std::string dtype_name(DType t) {
  switch (t) {
    case DType::F32: return "f32";
    case DType::F64: return "f64";
    case DType::U8: return "u8";
    case DType::I32: return "i32";
  }
  throw FormatError("dtype_name: unknown dtype");
}

DType dtype_from_name(const std::string& name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  if (name == "u8") return DType::U8;
  if (name == "i32") return DType::I32;
  throw FormatError("unknown dtype '" + name + "'");
}

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (auto s : shape) {
    if (s < 0) throw FormatError("Tensor: negative shape entry");
    n *= static_cast<std::size_t>(s);
  }
  return n;
}

const Tensor& SceneBundle::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw FormatError("bundle: missing tensor '" + name + "'");
  return it->second;
}

bool SceneBundle::has_tensor(const std::string& name) const {
  return tensors.count(name) != 0;
}

const Tensor& SceneBundle::sealed_tensor(const std::string& name) const {
  if (sealed_stripped)
    throw SealedAccessError("bundle: sealed tensor '" + name +
                            "' is not readable in estimation mode");
  return tensor("sealed/" + name);
}

const json& SceneBundle::sealed_meta() const {
  if (sealed_stripped)
    throw SealedAccessError("bundle: sealed metadata is not readable in "
                            "estimation mode");
  if (!meta.contains("sealed"))
    throw FormatError("bundle: no sealed section");
  return meta.at("sealed");
}

namespace {

constexpr char kMagic[8] = {'E', 'L', 'S', 'C', 'N', '0', '0', '1'};

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

void write_bundle(const SceneBundle& bundle, const std::string& path) {
  // Payload first so offsets and the hash are known for the manifest.
  std::vector<std::uint8_t> payload;
  json tensor_list = json::array();
  for (const auto& [name, t] : bundle.tensors) {
    const std::size_t want = t.element_count() * dtype_size(t.dtype);
    if (t.data.size() != want)
      throw FormatError("write_bundle: tensor '" + name +
                        "' data size does not match its shape");
    json entry;
    entry["name"] = name;
    entry["dtype"] = dtype_name(t.dtype);
    entry["shape"] = t.shape;
    entry["offset"] = payload.size();
    entry["nbytes"] = t.data.size();
    tensor_list.push_back(entry);
    payload.insert(payload.end(), t.data.begin(), t.data.end());
  }

  json manifest;
  manifest["format"] = "elastid-scene";
  manifest["version"] = 1;
  manifest["kind"] = bundle.kind;
  manifest["meta"] = bundle.meta;
  manifest["tensors"] = tensor_list;
  manifest["payload_size"] = payload.size();
  char hash_hex[19];
  std::snprintf(hash_hex, sizeof(hash_hex), "0x%016llx",
                static_cast<unsigned long long>(
                    fnv1a64(payload.data(), payload.size())));
  manifest["payload_hash"] = hash_hex;

  const std::string mstr = manifest.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("write_bundle: cannot open '" + tmp + "'");
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t mlen = mstr.size();
    out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("write_bundle: write failed for '" + tmp + "'");
  }
  std::remove(path.c_str());
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw DataError("write_bundle: cannot move '" + tmp + "' into place");
}

SceneBundle read_bundle(const std::string& path, LoadMode mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_bundle: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError("read_bundle: '" + path + "' is not a scene container");
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (!in) throw FormatError("read_bundle: truncated manifest header");
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw CorruptionError("read_bundle: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(mstr);
  } catch (const json::exception& e) {
    throw FormatError(std::string("read_bundle: manifest parse error: ") +
                      e.what());
  }

  const std::size_t payload_size = manifest.at("payload_size").get<std::size_t>();
  std::vector<std::uint8_t> payload(payload_size);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload_size));
  if (static_cast<std::size_t>(in.gcount()) != payload_size)
    throw CorruptionError("read_bundle: truncated payload in '" + path + "'");

  char hash_hex[19];
  std::snprintf(hash_hex, sizeof(hash_hex), "0x%016llx",
                static_cast<unsigned long long>(
                    fnv1a64(payload.data(), payload.size())));
  if (manifest.at("payload_hash").get<std::string>() != hash_hex)
    throw CorruptionError("read_bundle: payload hash mismatch in '" + path +
                          "'");

  SceneBundle bundle;
  bundle.kind = manifest.at("kind").get<std::string>();
  bundle.meta = manifest.at("meta");
  for (const auto& entry : manifest.at("tensors")) {
    Tensor t;
    const std::string name = entry.at("name").get<std::string>();
    t.dtype = dtype_from_name(entry.at("dtype").get<std::string>());
    t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t nbytes = entry.at("nbytes").get<std::size_t>();
    if (nbytes != t.element_count() * dtype_size(t.dtype))
      throw FormatError("read_bundle: tensor '" + name +
                        "' byte count does not match shape/dtype");
    if (offset + nbytes > payload.size())
      throw CorruptionError("read_bundle: tensor '" + name +
                            "' extends past payload");
    t.data.assign(payload.begin() + offset, payload.begin() + offset + nbytes);
    if (mode == LoadMode::Estimation && name.rfind("sealed/", 0) == 0) continue;
    bundle.tensors.emplace(name, std::move(t));
  }
  if (mode == LoadMode::Estimation) {
    bundle.meta.erase("sealed");
    bundle.sealed_stripped = true;
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// JSON helpers.

namespace {

json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3)
    throw FormatError("expected a 3-element array");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

}  // namespace

json config_to_json(const SimConfig& c) {
  json j;
  j["grid_spacing"] = c.grid_spacing;
  j["particle_spacing"] = c.particle_spacing;
  j["dt"] = c.dt;
  j["substeps_per_frame"] = c.substeps_per_frame;
  j["gravity"] = vec3_to_json(c.gravity);
  j["bc_kappa"] = c.bc_kappa;
  j["domain_min"] = vec3_to_json(c.domain_min);
  j["domain_max"] = vec3_to_json(c.domain_max);
  j["boundary_sharpness"] = c.boundary_sharpness;
  j["volume_floor"] = c.volume_floor;
  j["gravity_compensation"] = c.gravity_compensation;
  return j;
}

SimConfig config_from_json(const json& j) {
  SimConfig c;
  if (j.contains("grid_spacing")) c.grid_spacing = j["grid_spacing"];
  if (j.contains("particle_spacing")) c.particle_spacing = j["particle_spacing"];
  if (j.contains("dt")) c.dt = j["dt"];
  if (j.contains("substeps_per_frame"))
    c.substeps_per_frame = j["substeps_per_frame"];
  if (j.contains("gravity")) c.gravity = vec3_from_json(j["gravity"]);
  if (j.contains("bc_kappa")) c.bc_kappa = j["bc_kappa"];
  if (j.contains("domain_min")) c.domain_min = vec3_from_json(j["domain_min"]);
  if (j.contains("domain_max")) c.domain_max = vec3_from_json(j["domain_max"]);
  if (j.contains("boundary_sharpness"))
    c.boundary_sharpness = j["boundary_sharpness"];
  if (j.contains("volume_floor")) c.volume_floor = j["volume_floor"];
  if (j.contains("gravity_compensation"))
    c.gravity_compensation = j["gravity_compensation"];
  c.validate();
  return c;
}

json camera_to_json(const Camera& cam) {
  json j;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["width"] = cam.width;
  j["height"] = cam.height;
  json rows = json::array();
  for (int r = 0; r < 3; ++r)
    rows.push_back(json::array({cam.rotation(r, 0), cam.rotation(r, 1),
                                cam.rotation(r, 2)}));
  j["rotation"] = rows;
  j["translation"] = vec3_to_json(cam.translation);
  return j;
}

Camera camera_from_json(const json& j) {
  Camera cam;
  cam.fx = j.at("fx");
  cam.fy = j.at("fy");
  cam.cx = j.at("cx");
  cam.cy = j.at("cy");
  cam.width = j.at("width");
  cam.height = j.at("height");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cam.rotation(r, c) = j.at("rotation")[r][c];
  cam.translation = vec3_from_json(j.at("translation"));
  cam.validate();
  return cam;
}

json segment_to_json(const MaterialSegment& s) {
  json j;
  j["id"] = s.id;
  j["log10_E"] = s.log10_E;
  j["log10_rho"] = s.log10_rho;
  j["nu"] = s.nu;
  j["boundary_offset"] = s.boundary_offset;
  return j;
}

MaterialSegment segment_from_json(const json& j) {
  MaterialSegment s;
  s.id = j.at("id");
  s.log10_E = j.at("log10_E");
  s.log10_rho = j.at("log10_rho");
  s.nu = j.at("nu");
  s.boundary_offset = j.at("boundary_offset");
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic scene spec.

void SyntheticSceneSpec::validate() const {
  if (parts.empty()) throw DataError("scene spec: no parts");
  for (const auto& p : parts) {
    if (!(p.size.minCoeff() > 0.0))
      throw DataError("scene spec: part sizes must be positive");
  }
  for (std::size_t a = 0; a < parts.size(); ++a) {
    for (std::size_t b = a + 1; b < parts.size(); ++b) {
      bool overlap = true;
      for (int k = 0; k < 3; ++k) {
        const double lo = std::max(parts[a].min_corner[k], parts[b].min_corner[k]);
        const double hi = std::min(parts[a].min_corner[k] + parts[a].size[k],
                                   parts[b].min_corner[k] + parts[b].size[k]);
        if (hi - lo <= 1e-12) overlap = false;
      }
      if (overlap)
        throw DataError("scene spec: parts " + std::to_string(a) + " and " +
                        std::to_string(b) + " overlap");
    }
  }
  if (frames < 1) throw DataError("scene spec: frames must be >= 1");
  if (train_frames < 1 || train_frames > frames)
    throw DataError("scene spec: train_frames must be in [1, frames]");
  config.validate();
}

SyntheticSceneSpec scene_spec_from_json(const json& j) {
  SyntheticSceneSpec spec;
  if (j.contains("name")) spec.name = j["name"];
  if (j.contains("geometry")) spec.geometry = j["geometry"];
  for (const auto& pj : j.at("parts")) {
    ScenePart p;
    p.min_corner = vec3_from_json(pj.at("min"));
    p.size = vec3_from_json(pj.at("size"));
    p.log10_E = pj.at("log10_E");
    p.log10_rho = pj.at("log10_rho");
    if (pj.contains("nu")) p.nu = pj["nu"];
    if (pj.contains("feature_group")) p.feature_group = pj["feature_group"];
    spec.parts.push_back(p);
  }
  if (j.contains("feature_noise")) spec.feature_noise = j["feature_noise"];
  if (j.contains("track_noise")) spec.track_noise = j["track_noise"];
  if (j.contains("cameras")) {
    const auto& cj = j["cameras"];
    if (cj.contains("count")) spec.cameras.count = cj["count"];
    if (cj.contains("radius")) spec.cameras.radius = cj["radius"];
    if (cj.contains("height_offset"))
      spec.cameras.height_offset = cj["height_offset"];
    if (cj.contains("fov_deg")) spec.cameras.fov_deg = cj["fov_deg"];
    if (cj.contains("width")) spec.cameras.width = cj["width"];
    if (cj.contains("height")) spec.cameras.height = cj["height"];
    if (cj.contains("feature_resolution"))
      spec.cameras.feature_resolution = cj["feature_resolution"];
  }
  if (j.contains("contact")) {
    const auto& cj = j["contact"];
    spec.contact.grasp = vec3_from_json(cj.at("grasp"));
    if (cj.contains("radius")) spec.contact.radius = cj["radius"];
    if (cj.contains("motion")) spec.contact.motion = cj["motion"];
    if (cj.contains("axis")) spec.contact.axis = vec3_from_json(cj["axis"]);
    if (cj.contains("amplitude")) spec.contact.amplitude = cj["amplitude"];
    if (cj.contains("periods")) spec.contact.periods = cj["periods"];
  }
  if (j.contains("frames")) spec.frames = j["frames"];
  if (j.contains("train_frames")) spec.train_frames = j["train_frames"];
  if (j.contains("band_shells")) spec.band_shells = j["band_shells"];
  if (j.contains("feature_dim")) spec.feature_dim = j["feature_dim"];
  if (j.contains("affinity_dim")) spec.affinity_dim = j["affinity_dim"];
  if (j.contains("seed")) spec.seed = j["seed"];
  if (j.contains("config")) spec.config = config_from_json(j["config"]);
  spec.validate();
  return spec;
}

json scene_spec_to_json(const SyntheticSceneSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["geometry"] = spec.geometry;
  j["parts"] = json::array();
  for (const auto& p : spec.parts) {
    json pj;
    pj["min"] = vec3_to_json(p.min_corner);
    pj["size"] = vec3_to_json(p.size);
    pj["log10_E"] = p.log10_E;
    pj["log10_rho"] = p.log10_rho;
    pj["nu"] = p.nu;
    pj["feature_group"] = p.feature_group;
    j["parts"].push_back(pj);
  }
  j["feature_noise"] = spec.feature_noise;
  j["track_noise"] = spec.track_noise;
  j["cameras"] = {{"count", spec.cameras.count},
                  {"radius", spec.cameras.radius},
                  {"height_offset", spec.cameras.height_offset},
                  {"fov_deg", spec.cameras.fov_deg},
                  {"width", spec.cameras.width},
                  {"height", spec.cameras.height},
                  {"feature_resolution", spec.cameras.feature_resolution}};
  j["contact"] = {{"grasp", vec3_to_json(spec.contact.grasp)},
                  {"radius", spec.contact.radius},
                  {"motion", spec.contact.motion},
                  {"axis", vec3_to_json(spec.contact.axis)},
                  {"amplitude", spec.contact.amplitude},
                  {"periods", spec.contact.periods}};
  j["frames"] = spec.frames;
  j["train_frames"] = spec.train_frames;
  j["band_shells"] = spec.band_shells;
  j["feature_dim"] = spec.feature_dim;
  j["affinity_dim"] = spec.affinity_dim;
  j["seed"] = spec.seed;
  j["config"] = config_to_json(spec.config);
  return j;
}

// ---------------------------------------------------------------------------
// Scene generation.

namespace {

bool inside_part(const ScenePart& p, const Vec3& x) {
  for (int k = 0; k < 3; ++k) {
    if (x[k] < p.min_corner[k] || x[k] >= p.min_corner[k] + p.size[k])
      return false;
  }
  return true;
}

double box_sdf(const ScenePart& p, const Vec3& x) {
  const Vec3 center = p.min_corner + 0.5 * p.size;
  const Vec3 half = 0.5 * p.size;
  const Vec3 q = (x - center).cwiseAbs() - half;
  const Vec3 q_out = q.cwiseMax(0.0);
  const double outside = q_out.norm();
  const double inside = std::min(q.maxCoeff(), 0.0);
  return outside + inside;
}

// Surface samples of the part union: face grids at half the particle
// spacing, dropping samples buried inside another part. Signed distances are
// nearest-sample distances with the inside/outside sign from containment.
std::vector<Vec3> union_surface_samples(const SyntheticSceneSpec& spec) {
  const double step = 0.5 * spec.config.particle_spacing;
  std::vector<Vec3> samples;
  for (std::size_t pi = 0; pi < spec.parts.size(); ++pi) {
    const ScenePart& p = spec.parts[pi];
    for (int axis = 0; axis < 3; ++axis) {
      const int u = (axis + 1) % 3;
      const int v = (axis + 2) % 3;
      const int nu = std::max(1, static_cast<int>(std::round(p.size[u] / step)));
      const int nv = std::max(1, static_cast<int>(std::round(p.size[v] / step)));
      for (int side = 0; side < 2; ++side) {
        Vec3 x;
        x[axis] = p.min_corner[axis] + side * p.size[axis];
        for (int a = 0; a <= nu; ++a) {
          x[u] = p.min_corner[u] + p.size[u] * a / nu;
          for (int b = 0; b <= nv; ++b) {
            x[v] = p.min_corner[v] + p.size[v] * b / nv;
            bool buried = false;
            for (std::size_t qi = 0; qi < spec.parts.size(); ++qi) {
              if (qi == pi) continue;
              if (box_sdf(spec.parts[qi], x) < -1e-9) {
                buried = true;
                break;
              }
            }
            if (!buried) samples.push_back(x);
          }
        }
      }
    }
  }
  return samples;
}

double nearest_sample_distance(const std::vector<Vec3>& samples,
                               const Vec3& x) {
  double best = std::numeric_limits<double>::infinity();
  for (const Vec3& s : samples) best = std::min(best, (s - x).squaredNorm());
  return std::sqrt(best);
}

Vec3 part_color(int part_index) {
  // Distinct flat colors, snapped to exact 8-bit values so that image
  // quantization is lossless.
  const double hue = std::fmod(0.13 + 0.381966011 * part_index, 1.0);
  const double s = 0.65, v = 0.85;
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  double r, g, b;
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  auto snap = [](double c) { return std::round(c * 255.0) / 255.0; };
  return Vec3(snap(r), snap(g), snap(b));
}

}  // namespace

Scene gen_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  Scene scene;
  scene.spec = spec;

  const double spacing = spec.config.particle_spacing;
  Vec3 bbox_lo = spec.parts[0].min_corner;
  Vec3 bbox_hi = spec.parts[0].min_corner + spec.parts[0].size;
  for (const auto& p : spec.parts) {
    bbox_lo = bbox_lo.cwiseMin(p.min_corner);
    bbox_hi = bbox_hi.cwiseMax(p.min_corner + p.size);
  }
  const double band = spec.band_shells * spacing;
  const Vec3 seed_lo = bbox_lo - Vec3::Constant(band + spacing);
  const Vec3 seed_hi = bbox_hi + Vec3::Constant(band + spacing);

  const std::vector<Vec3> surface = union_surface_samples(spec);

  ParticleSet& ps = scene.rest;
  const double V_g = spacing * spacing * spacing;
  Eigen::Vector3i i_lo, i_hi;
  for (int k = 0; k < 3; ++k) {
    i_lo[k] = static_cast<int>(std::floor(seed_lo[k] / spacing - 0.5));
    i_hi[k] = static_cast<int>(std::ceil(seed_hi[k] / spacing + 0.5));
  }
  for (int ix = i_lo.x(); ix <= i_hi.x(); ++ix) {
    for (int iy = i_lo.y(); iy <= i_hi.y(); ++iy) {
      for (int iz = i_lo.z(); iz <= i_hi.z(); ++iz) {
        const Vec3 x((ix + 0.5) * spacing, (iy + 0.5) * spacing,
                     (iz + 0.5) * spacing);
        int part = -1;
        for (std::size_t p = 0; p < spec.parts.size(); ++p) {
          if (inside_part(spec.parts[p], x)) {
            part = static_cast<int>(p);
            break;
          }
        }
        double dist;
        if (part >= 0) {
          dist = -nearest_sample_distance(surface, x);
        } else {
          if (spec.band_shells <= 0) continue;
          dist = nearest_sample_distance(surface, x);
          if (dist > band + 1e-9) continue;
          // Band particles attach to the nearest part.
          double best = std::numeric_limits<double>::infinity();
          for (std::size_t p = 0; p < spec.parts.size(); ++p) {
            const double sd = box_sdf(spec.parts[p], x);
            if (sd < best) {
              best = sd;
              part = static_cast<int>(p);
            }
          }
        }
        ps.x.push_back(x);
        ps.v.push_back(Vec3::Zero());
        ps.F.push_back(Mat3::Identity());
        ps.C.push_back(Mat3::Zero());
        ps.segment.push_back(part);
        ps.d.push_back(dist);
        ps.rest_volume.push_back(V_g);
        ps.effective_volume.push_back(V_g);
        ps.mass.push_back(0.0);
        ps.bc_flag.push_back(0);
      }
    }
  }
  if (ps.size() == 0) throw DataError("gen_scene: no particles seeded");

  // Features: one cluster centre per feature group, Gaussian noise around
  // it. All draws happen in a fixed order for reproducibility.
  ps.dim_D = spec.feature_dim;
  ps.dim_A = spec.affinity_dim;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  int n_groups = 0;
  std::vector<int> group_of_part(spec.parts.size());
  for (std::size_t p = 0; p < spec.parts.size(); ++p) {
    group_of_part[p] = spec.parts[p].feature_group >= 0
                           ? spec.parts[p].feature_group
                           : static_cast<int>(p);
    n_groups = std::max(n_groups, group_of_part[p] + 1);
  }
  std::vector<double> centers_D(n_groups * spec.feature_dim);
  std::vector<double> centers_A(n_groups * spec.affinity_dim);
  for (double& c : centers_D) c = gauss(rng);
  for (double& c : centers_A) c = gauss(rng);

  ps.z_D.resize(ps.size() * spec.feature_dim);
  ps.z_A.resize(ps.size() * spec.affinity_dim);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const int g = group_of_part[ps.segment[i]];
    for (int d = 0; d < spec.feature_dim; ++d)
      ps.z_D[i * spec.feature_dim + d] =
          centers_D[g * spec.feature_dim + d] + spec.feature_noise * gauss(rng);
    for (int d = 0; d < spec.affinity_dim; ++d)
      ps.z_A[i * spec.affinity_dim + d] =
          centers_A[g * spec.affinity_dim + d] + spec.feature_noise * gauss(rng);
  }

  scene.colors.resize(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i)
    scene.colors[i] = part_color(ps.segment[i]);

  scene.true_segments.resize(spec.parts.size());
  for (std::size_t p = 0; p < spec.parts.size(); ++p) {
    MaterialSegment seg;
    seg.id = static_cast<int>(p);
    seg.log10_E = spec.parts[p].log10_E;
    seg.log10_rho = spec.parts[p].log10_rho;
    seg.nu = spec.parts[p].nu;
    seg.boundary_offset = 0.0;
    seg.validate();
    scene.true_segments[p] = seg;
  }

  // Cameras on a ring around the object centre.
  const Vec3 center = 0.5 * (bbox_lo + bbox_hi);
  const CameraRingSpec& cr = spec.cameras;
  for (int c = 0; c < cr.count; ++c) {
    const double angle = 2.0 * M_PI * c / cr.count;
    const Vec3 pos = center + Vec3(cr.radius * std::cos(angle),
                                   cr.radius * std::sin(angle),
                                   cr.height_offset);
    const Vec3 fwd = (center - pos).normalized();
    Vec3 right = fwd.cross(Vec3(0, 0, 1));
    if (right.norm() < 1e-9) right = Vec3(1, 0, 0);
    right.normalize();
    const Vec3 down = fwd.cross(right).normalized();
    Camera cam;
    cam.width = cr.width;
    cam.height = cr.height;
    cam.fx = cam.fy = 0.5 * cr.width / std::tan(0.5 * cr.fov_deg * M_PI / 180.0);
    cam.cx = 0.5 * (cr.width - 1);
    cam.cy = 0.5 * (cr.height - 1);
    cam.rotation.row(0) = right;
    cam.rotation.row(1) = down;
    cam.rotation.row(2) = fwd;
    cam.translation = -cam.rotation * pos;
    cam.validate();
    scene.cameras.push_back(cam);
  }

  // Contact script.
  if (spec.contact.motion != "none" && spec.contact.amplitude > 0.0) {
    std::vector<int> near_ids;
    std::vector<Vec3> near_rest;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if ((ps.x[i] - spec.contact.grasp).norm() <= spec.contact.radius) {
        near_ids.push_back(static_cast<int>(i));
        near_rest.push_back(ps.x[i]);
        ps.bc_flag[i] = 1;
      }
    }
    if (near_ids.empty())
      throw DataError("gen_scene: no particles within the grasp radius");
    const Vec3 axis = spec.contact.axis.normalized();
    PoseTrajectory poses;
    poses.near_set = near_ids;  // particle ids for synthetic scripts
    poses.grasp_radius = spec.contact.radius;
    const int T = spec.frames;
    for (int t = 0; t < T; ++t) {
      const double tau = T > 1 ? static_cast<double>(t) / (T - 1) : 0.0;
      double offset;
      if (spec.contact.motion == "sine") {
        offset = spec.contact.amplitude *
                 std::sin(2.0 * M_PI * spec.contact.periods * tau);
      } else if (spec.contact.motion == "ramp-hold") {
        const double s = std::min(1.0, tau / 0.6);
        offset = spec.contact.amplitude * (3.0 * s * s - 2.0 * s * s * s);
      } else {
        throw DataError("gen_scene: unknown contact motion '" +
                        spec.contact.motion + "'");
      }
      poses.positions.push_back(spec.contact.grasp + offset * axis);
      poses.quats.push_back(Eigen::Vector4d(1, 0, 0, 0));
    }
    scene.contact_poses = poses;
    scene.contact_script = rigid_targets(poses, near_ids, near_rest);
  }

  return scene;
}

// ---------------------------------------------------------------------------
// Observation baking.

BakeResult bake_observations(const Scene& scene, int workers) {
  BakeResult result;
  const SyntheticSceneSpec& spec = scene.spec;
  SimState state = make_sim_state(scene.rest, scene.true_segments, spec.config);
  try {
    result.trajectory = simulate(
        state, scene.true_segments,
        scene.contact_script.n_frames() > 0 ? &scene.contact_script : nullptr,
        spec.config, spec.frames - 1, workers, &result.warnings);
  } catch (const NumericError& e) {
    throw DataError(std::string("bake_observations: simulation with the true "
                                "parameters failed (ill-posed scene): ") +
                    e.what());
  }

  ObservationBundle& obs = result.observations;
  obs.cameras = scene.cameras;

  // Tracks: every particle, optional Gaussian noise.
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> gauss(0.0, 1.0);
  obs.tracks.ids.resize(scene.rest.size());
  for (std::size_t i = 0; i < scene.rest.size(); ++i)
    obs.tracks.ids[i] = static_cast<int>(i);
  obs.tracks.frames.resize(spec.frames);
  for (int t = 0; t < spec.frames; ++t) {
    obs.tracks.frames[t] = result.trajectory.snapshots[t].x;
    if (spec.track_noise > 0.0) {
      for (Vec3& p : obs.tracks.frames[t]) {
        p.x() += spec.track_noise * gauss(rng);
        p.y() += spec.track_noise * gauss(rng);
        p.z() += spec.track_noise * gauss(rng);
      }
    }
  }

  // Per-frame, per-view renders of the visible particles.
  obs.masks.resize(spec.frames);
  obs.distance_maps.resize(spec.frames);
  obs.rgb.resize(spec.frames);
  obs.feature_maps.resize(spec.frames);
  // Snapshot 0 carries the effective volumes of the true materials, which
  // decide which particles are inside the rendered boundary.
  const std::vector<int> visible =
      visible_particles(result.trajectory.snapshots[0]);
  std::vector<float> colors(visible.size() * 3);
  std::vector<float> feats(visible.size() * spec.feature_dim);
  for (std::size_t j = 0; j < visible.size(); ++j) {
    const int i = visible[j];
    for (int c = 0; c < 3; ++c)
      colors[j * 3 + c] = static_cast<float>(scene.colors[i][c]);
    for (int d = 0; d < spec.feature_dim; ++d)
      feats[j * spec.feature_dim + d] =
          static_cast<float>(scene.rest.z_D[i * spec.feature_dim + d]);
  }

  std::vector<Vec3> pts(visible.size());
  for (int t = 0; t < spec.frames; ++t) {
    const ParticleSet& snap = result.trajectory.snapshots[t];
    for (std::size_t j = 0; j < visible.size(); ++j)
      pts[j] = snap.x[visible[j]];
    obs.masks[t].resize(scene.cameras.size());
    obs.distance_maps[t].resize(scene.cameras.size());
    obs.rgb[t].resize(scene.cameras.size());
    obs.feature_maps[t].resize(scene.cameras.size());
    for (std::size_t c = 0; c < scene.cameras.size(); ++c) {
      const Camera& cam = scene.cameras[c];
      const auto radii = projected_radii(pts, spec.config.particle_spacing, cam);
      SplatResult rgb_splat = splat(pts, colors, 3, radii, cam);
      obs.masks[t][c] = rgb_splat.mask;
      obs.rgb[t][c] = std::move(rgb_splat.image);
      obs.distance_maps[t][c] = distance_transform(obs.masks[t][c]);
      const Camera fcam = scaled_camera(cam, spec.cameras.feature_resolution,
                                        spec.cameras.feature_resolution);
      const auto fradii =
          projected_radii(pts, spec.config.particle_spacing, fcam);
      obs.feature_maps[t][c] =
          splat(pts, feats, spec.feature_dim, fradii, fcam).image;
    }
  }
  obs.validate();
  return result;
}

// ---------------------------------------------------------------------------
// Rigid registration.

std::pair<Mat3, Vec3> umeyama_rigid(const std::vector<Vec3>& src,
                                    const std::vector<Vec3>& dst) {
  if (src.size() != dst.size())
    throw DataError("umeyama_rigid: point counts differ");
  if (src.size() < 3)
    throw DataError("umeyama_rigid: need at least 3 correspondences");
  Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    mu_s += src[i];
    mu_d += dst[i];
  }
  mu_s /= static_cast<double>(src.size());
  mu_d /= static_cast<double>(src.size());
  Mat3 H = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i)
    H += (dst[i] - mu_d) * (src[i] - mu_s).transpose();
  Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sing = svd.singularValues();
  if (sing(1) <= 1e-12 * std::max(sing(0), 1e-300))
    throw DataError("umeyama_rigid: degenerate (collinear) configuration");
  Mat3 U = svd.matrixU();
  Mat3 V = svd.matrixV();
  Mat3 R = U * V.transpose();
  if (R.determinant() < 0.0) {
    U.col(2) *= -1.0;
    R = U * V.transpose();
  }
  const Vec3 t = mu_d - R * mu_s;
  return {R, t};
}

// ---------------------------------------------------------------------------
// Bundle assembly.

namespace {

Tensor tensor_f64(const std::vector<double>& v,
                  std::vector<std::int64_t> shape) {
  Tensor t;
  t.dtype = DType::F64;
  t.shape = std::move(shape);
  t.data.resize(v.size() * sizeof(double));
  std::memcpy(t.data.data(), v.data(), t.data.size());
  return t;
}

Tensor tensor_vec3(const std::vector<Vec3>& v) {
  Tensor t;
  t.dtype = DType::F64;
  t.shape = {static_cast<std::int64_t>(v.size()), 3};
  t.data.resize(v.size() * 3 * sizeof(double));
  auto* out = reinterpret_cast<double*>(t.data.data());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[3 * i] = v[i].x();
    out[3 * i + 1] = v[i].y();
    out[3 * i + 2] = v[i].z();
  }
  return t;
}

Tensor tensor_i32(const std::vector<int>& v, std::vector<std::int64_t> shape) {
  Tensor t;
  t.dtype = DType::I32;
  t.shape = std::move(shape);
  t.data.resize(v.size() * sizeof(std::int32_t));
  auto* out = reinterpret_cast<std::int32_t*>(t.data.data());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i];
  return t;
}

Tensor tensor_f32(const std::vector<float>& v,
                  std::vector<std::int64_t> shape) {
  Tensor t;
  t.dtype = DType::F32;
  t.shape = std::move(shape);
  t.data.resize(v.size() * sizeof(float));
  std::memcpy(t.data.data(), v.data(), t.data.size());
  return t;
}

Tensor tensor_u8(std::vector<std::uint8_t> v, std::vector<std::int64_t> shape) {
  Tensor t;
  t.dtype = DType::U8;
  t.shape = std::move(shape);
  t.data = std::move(v);
  return t;
}

std::vector<Vec3> vec3_from_tensor(const Tensor& t) {
  if (t.dtype != DType::F64 || t.shape.size() != 2 || t.shape[1] != 3)
    throw FormatError("expected an [N,3] f64 tensor");
  std::vector<Vec3> out(t.shape[0]);
  const double* p = t.as<double>();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = Vec3(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
  return out;
}

}  // namespace

SceneBundle make_scene_bundle(const Scene& scene, const BakeResult& bake) {
  const SyntheticSceneSpec& spec = scene.spec;
  const ParticleSet& ps = scene.rest;
  const std::size_t n = ps.size();
  SceneBundle b;
  b.kind = "scene";
  b.meta["config"] = config_to_json(spec.config);
  b.meta["spec"] = scene_spec_to_json(spec);
  b.meta["frames"] = spec.frames;
  b.meta["train_frames"] = spec.train_frames;
  b.meta["feature_dim"] = spec.feature_dim;
  b.meta["affinity_dim"] = spec.affinity_dim;
  b.meta["seed"] = spec.seed;
  b.meta["cameras"] = json::array();
  for (const Camera& cam : scene.cameras)
    b.meta["cameras"].push_back(camera_to_json(cam));

  b.tensors["particles/x0"] = tensor_vec3(ps.x);
  b.tensors["particles/d"] =
      tensor_f64(ps.d, {static_cast<std::int64_t>(n)});
  b.tensors["particles/rest_volume"] =
      tensor_f64(ps.rest_volume, {static_cast<std::int64_t>(n)});
  {
    std::vector<float> zd(ps.z_D.begin(), ps.z_D.end());
    b.tensors["particles/z_D"] = tensor_f32(
        zd, {static_cast<std::int64_t>(n), spec.feature_dim});
    std::vector<float> za(ps.z_A.begin(), ps.z_A.end());
    b.tensors["particles/z_A"] = tensor_f32(
        za, {static_cast<std::int64_t>(n), spec.affinity_dim});
  }
  {
    std::vector<float> col(n * 3);
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c)
        col[3 * i + c] = static_cast<float>(scene.colors[i][c]);
    b.tensors["particles/color"] =
        tensor_f32(col, {static_cast<std::int64_t>(n), 3});
  }
  b.tensors["particles/bc_flag"] = tensor_u8(
      ps.bc_flag, {static_cast<std::int64_t>(n)});

  if (scene.contact_poses.n_frames() > 0) {
    b.tensors["contact/near_set"] = tensor_i32(
        scene.contact_poses.near_set,
        {static_cast<std::int64_t>(scene.contact_poses.near_set.size())});
    b.tensors["contact/positions"] = tensor_vec3(scene.contact_poses.positions);
    std::vector<double> quats;
    quats.reserve(scene.contact_poses.quats.size() * 4);
    for (const auto& q : scene.contact_poses.quats)
      for (int k = 0; k < 4; ++k) quats.push_back(q[k]);
    b.tensors["contact/quats"] = tensor_f64(
        quats,
        {static_cast<std::int64_t>(scene.contact_poses.quats.size()), 4});
    b.meta["contact"] = {{"grasp_radius", scene.contact_poses.grasp_radius}};
  }

  const ObservationBundle& obs = bake.observations;
  b.tensors["tracks/ids"] = tensor_i32(
      obs.tracks.ids, {static_cast<std::int64_t>(obs.tracks.ids.size())});
  {
    const std::int64_t T = obs.tracks.n_frames();
    const std::int64_t Nt = static_cast<std::int64_t>(obs.tracks.ids.size());
    std::vector<double> flat;
    flat.reserve(T * Nt * 3);
    for (const auto& frame : obs.tracks.frames)
      for (const auto& p : frame) {
        flat.push_back(p.x());
        flat.push_back(p.y());
        flat.push_back(p.z());
      }
    b.tensors["tracks/x"] = tensor_f64(flat, {T, Nt, 3});
  }

  if (!obs.masks.empty()) {
    const std::int64_t T = static_cast<std::int64_t>(obs.masks.size());
    const std::int64_t V = static_cast<std::int64_t>(scene.cameras.size());
    const std::int64_t H = obs.masks[0][0].height;
    const std::int64_t W = obs.masks[0][0].width;
    std::vector<std::uint8_t> masks;
    std::vector<float> dmaps;
    std::vector<std::uint8_t> rgb;
    masks.reserve(T * V * H * W);
    dmaps.reserve(T * V * H * W);
    rgb.reserve(T * V * H * W * 3);
    for (const auto& per_frame : obs.masks)
      for (const auto& m : per_frame)
        masks.insert(masks.end(), m.data.begin(), m.data.end());
    for (const auto& per_frame : obs.distance_maps)
      for (const auto& m : per_frame)
        dmaps.insert(dmaps.end(), m.data.begin(), m.data.end());
    for (const auto& per_frame : obs.rgb)
      for (const auto& img : per_frame)
        for (float v : img.data)
          rgb.push_back(static_cast<std::uint8_t>(
              std::lround(std::clamp(v, 0.f, 1.f) * 255.f)));
    b.tensors["obs/masks"] = tensor_u8(std::move(masks), {T, V, H, W});
    b.tensors["obs/dmaps"] = tensor_f32(dmaps, {T, V, H, W});
    b.tensors["obs/rgb"] = tensor_u8(std::move(rgb), {T, V, H, W, 3});

    const std::int64_t fh = obs.feature_maps[0][0].height;
    const std::int64_t fw = obs.feature_maps[0][0].width;
    std::vector<float> fm;
    fm.reserve(T * V * fh * fw * spec.feature_dim);
    for (const auto& per_frame : obs.feature_maps)
      for (const auto& img : per_frame)
        fm.insert(fm.end(), img.data.begin(), img.data.end());
    b.tensors["obs/features"] =
        tensor_f32(fm, {T, V, fh, fw, spec.feature_dim});
  }

  // Sealed ground truth; never readable in estimation mode.
  b.tensors["sealed/part_label"] = tensor_i32(
      ps.segment, {static_cast<std::int64_t>(n)});
  b.meta["sealed"] = json::object();
  b.meta["sealed"]["segments"] = json::array();
  for (const auto& seg : scene.true_segments)
    b.meta["sealed"]["segments"].push_back(segment_to_json(seg));
  return b;
}

SceneBundle make_trajectory_bundle(const Scene& scene,
                                   const std::vector<MaterialSegment>& segments,
                                   const Trajectory& traj) {
  SceneBundle b;
  b.kind = "trajectory";
  b.meta["config"] = config_to_json(scene.spec.config);
  b.meta["start_frame"] = traj.start_frame;
  b.meta["cameras"] = json::array();
  for (const Camera& cam : scene.cameras)
    b.meta["cameras"].push_back(camera_to_json(cam));
  b.meta["segments"] = json::array();
  for (const auto& seg : segments)
    b.meta["segments"].push_back(segment_to_json(seg));

  const ParticleSet& ps = scene.rest;
  const std::size_t n = ps.size();
  b.tensors["particles/x0"] = tensor_vec3(ps.x);
  b.tensors["particles/d"] = tensor_f64(ps.d, {static_cast<std::int64_t>(n)});
  b.tensors["particles/rest_volume"] =
      tensor_f64(ps.rest_volume, {static_cast<std::int64_t>(n)});
  b.tensors["particles/segment"] =
      tensor_i32(ps.segment, {static_cast<std::int64_t>(n)});
  {
    std::vector<float> col(n * 3);
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c)
        col[3 * i + c] = static_cast<float>(scene.colors[i][c]);
    b.tensors["particles/color"] =
        tensor_f32(col, {static_cast<std::int64_t>(n), 3});
  }
  {
    const std::int64_t T = static_cast<std::int64_t>(traj.snapshots.size());
    std::vector<double> flat;
    flat.reserve(T * n * 3);
    for (const auto& snap : traj.snapshots)
      for (const auto& p : snap.x) {
        flat.push_back(p.x());
        flat.push_back(p.y());
        flat.push_back(p.z());
      }
    b.tensors["traj/x"] =
        tensor_f64(flat, {T, static_cast<std::int64_t>(n), 3});
  }
  return b;
}

namespace {

ParticleSet rest_particles_from_bundle(const SceneBundle& b, int dim_D,
                                       int dim_A) {
  ParticleSet ps;
  ps.x = vec3_from_tensor(b.tensor("particles/x0"));
  const std::size_t n = ps.x.size();
  const Tensor& dt = b.tensor("particles/d");
  const Tensor& vt = b.tensor("particles/rest_volume");
  if (dt.element_count() != n || vt.element_count() != n)
    throw FormatError("bundle: particle array lengths disagree");
  ps.d.assign(dt.as<double>(), dt.as<double>() + n);
  ps.rest_volume.assign(vt.as<double>(), vt.as<double>() + n);
  ps.v.assign(n, Vec3::Zero());
  ps.F.assign(n, Mat3::Identity());
  ps.C.assign(n, Mat3::Zero());
  ps.segment.assign(n, 0);
  ps.effective_volume = ps.rest_volume;
  ps.mass.assign(n, 0.0);
  ps.bc_flag.assign(n, 0);
  ps.dim_D = dim_D;
  ps.dim_A = dim_A;
  if (dim_D > 0 && b.has_tensor("particles/z_D")) {
    const Tensor& z = b.tensor("particles/z_D");
    if (z.element_count() != n * static_cast<std::size_t>(dim_D))
      throw FormatError("bundle: z_D shape mismatch");
    ps.z_D.assign(z.as<float>(), z.as<float>() + z.element_count());
  }
  if (dim_A > 0 && b.has_tensor("particles/z_A")) {
    const Tensor& z = b.tensor("particles/z_A");
    if (z.element_count() != n * static_cast<std::size_t>(dim_A))
      throw FormatError("bundle: z_A shape mismatch");
    ps.z_A.assign(z.as<float>(), z.as<float>() + z.element_count());
  }
  return ps;
}

std::vector<Vec3> colors_from_bundle(const SceneBundle& b, std::size_t n) {
  std::vector<Vec3> colors(n, Vec3(0.7, 0.7, 0.7));
  if (b.has_tensor("particles/color")) {
    const Tensor& t = b.tensor("particles/color");
    if (t.element_count() != n * 3)
      throw FormatError("bundle: color shape mismatch");
    const float* p = t.as<float>();
    for (std::size_t i = 0; i < n; ++i)
      colors[i] = Vec3(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
  }
  return colors;
}

}  // namespace

LoadedScene load_scene(const SceneBundle& b) {
  if (b.kind != "scene")
    throw FormatError("load_scene: bundle kind is '" + b.kind + "'");
  LoadedScene out;
  out.config = config_from_json(b.meta.at("config"));
  out.frames = b.meta.at("frames").get<int>();
  out.train_frames = b.meta.at("train_frames").get<int>();
  const int dim_D = b.meta.value("feature_dim", 0);
  const int dim_A = b.meta.value("affinity_dim", 0);
  out.rest = rest_particles_from_bundle(b, dim_D, dim_A);
  out.colors = colors_from_bundle(b, out.rest.size());
  for (const auto& cj : b.meta.at("cameras"))
    out.cameras.push_back(camera_from_json(cj));

  // Observations.
  ObservationBundle& obs = out.observations;
  obs.cameras = out.cameras;
  {
    const Tensor& ids = b.tensor("tracks/ids");
    obs.tracks.ids.assign(ids.as<std::int32_t>(),
                          ids.as<std::int32_t>() + ids.element_count());
    const Tensor& tx = b.tensor("tracks/x");
    if (tx.shape.size() != 3 || tx.shape[2] != 3 ||
        tx.shape[1] != static_cast<std::int64_t>(obs.tracks.ids.size()))
      throw FormatError("bundle: tracks/x shape mismatch");
    const double* p = tx.as<double>();
    obs.tracks.frames.resize(tx.shape[0]);
    for (std::int64_t t = 0; t < tx.shape[0]; ++t) {
      obs.tracks.frames[t].resize(tx.shape[1]);
      for (std::int64_t j = 0; j < tx.shape[1]; ++j) {
        const double* q = p + (t * tx.shape[1] + j) * 3;
        obs.tracks.frames[t][j] = Vec3(q[0], q[1], q[2]);
      }
    }
    obs.tracks.validate(out.rest.size());
  }
  if (b.has_tensor("obs/masks")) {
    const Tensor& mt = b.tensor("obs/masks");
    const Tensor& dt = b.tensor("obs/dmaps");
    const Tensor& ct = b.tensor("obs/rgb");
    const Tensor& ft = b.tensor("obs/features");
    if (mt.shape.size() != 4) throw FormatError("bundle: obs/masks shape");
    const std::int64_t T = mt.shape[0], V = mt.shape[1], H = mt.shape[2],
                       W = mt.shape[3];
    if (V != static_cast<std::int64_t>(out.cameras.size()))
      throw FormatError("bundle: observation view count mismatch");
    obs.masks.resize(T);
    obs.distance_maps.resize(T);
    obs.rgb.resize(T);
    obs.feature_maps.resize(T);
    const std::uint8_t* mp = mt.as<std::uint8_t>();
    const float* dp = dt.as<float>();
    const std::uint8_t* cp = ct.as<std::uint8_t>();
    const float* fp = ft.as<float>();
    const std::int64_t fh = ft.shape[2], fw = ft.shape[3], fd = ft.shape[4];
    for (std::int64_t t = 0; t < T; ++t) {
      obs.masks[t].resize(V);
      obs.distance_maps[t].resize(V);
      obs.rgb[t].resize(V);
      obs.feature_maps[t].resize(V);
      for (std::int64_t v = 0; v < V; ++v) {
        MaskImage m = MaskImage::zeros(H, W);
        std::copy_n(mp + (t * V + v) * H * W, H * W, m.data.begin());
        obs.masks[t][v] = std::move(m);
        ImageF d = ImageF::zeros(H, W, 1);
        std::copy_n(dp + (t * V + v) * H * W, H * W, d.data.begin());
        obs.distance_maps[t][v] = std::move(d);
        ImageF img = ImageF::zeros(H, W, 3);
        const std::uint8_t* src = cp + (t * V + v) * H * W * 3;
        for (std::int64_t i = 0; i < H * W * 3; ++i)
          img.data[i] = static_cast<float>(src[i]) / 255.f;
        obs.rgb[t][v] = std::move(img);
        ImageF fimg = ImageF::zeros(fh, fw, static_cast<int>(fd));
        std::copy_n(fp + (t * V + v) * fh * fw * fd, fh * fw * fd,
                    fimg.data.begin());
        obs.feature_maps[t][v] = std::move(fimg);
      }
    }
    // Distance maps must vanish on mask-interior pixels (spot check).
    for (std::int64_t v = 0; v < V; ++v) {
      for (std::int64_t i = 0; i < H * W; ++i) {
        if (obs.masks[0][v].data[i] && obs.distance_maps[0][v].data[i] != 0.f)
          throw DataError("bundle: distance map nonzero inside mask");
      }
    }
  }
  obs.validate();

  // Contact script (recomputed from the stored poses).
  if (b.has_tensor("contact/near_set")) {
    PoseTrajectory poses;
    const Tensor& ns = b.tensor("contact/near_set");
    poses.near_set.assign(ns.as<std::int32_t>(),
                          ns.as<std::int32_t>() + ns.element_count());
    poses.positions = vec3_from_tensor(b.tensor("contact/positions"));
    const Tensor& qt = b.tensor("contact/quats");
    if (qt.shape.size() != 2 || qt.shape[1] != 4 ||
        qt.shape[0] != static_cast<std::int64_t>(poses.positions.size()))
      throw FormatError("bundle: contact/quats shape mismatch");
    const double* qp = qt.as<double>();
    poses.quats.resize(qt.shape[0]);
    for (std::int64_t t = 0; t < qt.shape[0]; ++t)
      poses.quats[t] = Eigen::Vector4d(qp[4 * t], qp[4 * t + 1], qp[4 * t + 2],
                                       qp[4 * t + 3]);
    if (b.meta.contains("contact"))
      poses.grasp_radius = b.meta["contact"].value("grasp_radius", 0.015);
    std::vector<Vec3> near_rest(poses.near_set.size());
    for (std::size_t j = 0; j < poses.near_set.size(); ++j) {
      const int id = poses.near_set[j];
      if (id < 0 || id >= static_cast<int>(out.rest.size()))
        throw FormatError("bundle: contact near_set index out of range");
      near_rest[j] = out.rest.x[id];
      out.rest.bc_flag[id] = 1;
    }
    out.contact_script = rigid_targets(poses, poses.near_set, near_rest);
  }

  // Ground truth, when present and readable.
  if (!b.sealed_stripped && b.meta.contains("sealed")) {
    for (const auto& sj : b.sealed_meta().at("segments"))
      out.true_segments.push_back(segment_from_json(sj));
    const Tensor& lt = b.sealed_tensor("part_label");
    out.true_labels.assign(lt.as<std::int32_t>(),
                           lt.as<std::int32_t>() + lt.element_count());
    out.rest.segment = out.true_labels;
  }
  return out;
}

LoadedTrajectory load_trajectory(const SceneBundle& b) {
  if (b.kind != "trajectory")
    throw FormatError("load_trajectory: bundle kind is '" + b.kind + "'");
  LoadedTrajectory out;
  out.config = config_from_json(b.meta.at("config"));
  for (const auto& cj : b.meta.at("cameras"))
    out.cameras.push_back(camera_from_json(cj));
  for (const auto& sj : b.meta.at("segments"))
    out.segments.push_back(segment_from_json(sj));
  out.rest = rest_particles_from_bundle(b, 0, 0);
  {
    const Tensor& st = b.tensor("particles/segment");
    if (st.element_count() != out.rest.size())
      throw FormatError("bundle: particles/segment length mismatch");
    out.rest.segment.assign(st.as<std::int32_t>(),
                            st.as<std::int32_t>() + st.element_count());
  }
  out.colors = colors_from_bundle(b, out.rest.size());
  apply_materials(out.rest, out.segments, out.config);
  out.rest.validate(out.segments, out.config);

  const Tensor& tx = b.tensor("traj/x");
  if (tx.shape.size() != 3 || tx.shape[2] != 3 ||
      tx.shape[1] != static_cast<std::int64_t>(out.rest.size()))
    throw FormatError("bundle: traj/x shape mismatch");
  out.trajectory.start_frame = b.meta.value("start_frame", 0);
  out.trajectory.snapshots.resize(tx.shape[0]);
  const double* p = tx.as<double>();
  for (std::int64_t t = 0; t < tx.shape[0]; ++t) {
    ParticleSet snap = out.rest;
    for (std::int64_t i = 0; i < tx.shape[1]; ++i) {
      const double* q = p + (t * tx.shape[1] + i) * 3;
      snap.x[i] = Vec3(q[0], q[1], q[2]);
    }
    out.trajectory.snapshots[t] = std::move(snap);
  }
  return out;
}

}  // namespace elastid
