#pragma once

#include <cstdint>
#include <vector>

#include "elastid/types.hpp"

namespace elastid {

class BehindCameraError : public DataError {
 public:
  using DataError::DataError;
};

// Pinhole camera, world-to-camera extrinsics, pixel intrinsics.
struct Camera {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  Mat3 rotation = Mat3::Identity();  // world -> camera
  Vec3 translation = Vec3::Zero();
  int width = 0, height = 0;

  void validate() const;
};

// Returns a copy with the image plane rescaled to new_w x new_h.
Camera scaled_camera(const Camera& cam, int new_w, int new_h);

struct PixelProjection {
  double u = 0.0, v = 0.0;  // px
  double depth = 0.0;       // m
};

// Pinhole projection; throws BehindCameraError when depth <= 0.
PixelProjection project(const Camera& cam, const Vec3& x);

// Row-major [h][w][c] float image.
struct ImageF {
  int height = 0, width = 0, channels = 1;
  std::vector<float> data;

  static ImageF zeros(int h, int w, int c) {
    return ImageF{h, w, c,
                  std::vector<float>(static_cast<std::size_t>(h) * w * c, 0.f)};
  }
  float* at(int y, int x) {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  const float* at(int y, int x) const {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
};

struct MaskImage {
  int height = 0, width = 0;
  std::vector<std::uint8_t> data;  // 0 / 1

  static MaskImage zeros(int h, int w) {
    return MaskImage{h, w, std::vector<std::uint8_t>(
                               static_cast<std::size_t>(h) * w, 0)};
  }
  std::uint8_t& at(int y, int x) {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t at(int y, int x) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
};

struct SplatResult {
  ImageF image;
  MaskImage mask;
};

// Z-buffered opaque discs. Each covered pixel takes the values of the
// nearest disc; depth ties keep the lowest point index. Points behind the
// camera are skipped. radii are in pixels.
SplatResult splat(const std::vector<Vec3>& points,
                  const std::vector<float>& values, int channels,
                  const std::vector<double>& radii_px, const Camera& cam);

// Disc radius rule for rendering particles: the particle spacing projected
// to pixels at the point's depth, at least one pixel.
std::vector<double> projected_radii(const std::vector<Vec3>& points,
                                    double spacing, const Camera& cam);

// Indices of particles inside the current effective boundary
// (effective_volume >= half the rest volume).
std::vector<int> visible_particles(const ParticleSet& particles);

// Peak signal-to-noise ratio in dB for images with values in [0, 1],
// capped at 60 dB.
double psnr(const ImageF& a, const ImageF& b);

// Intersection over union of two binary masks; 1.0 when both are empty.
double iou(const MaskImage& a, const MaskImage& b);

// Symmetric mean boundary chamfer distance in pixels. Boundary pixels are
// mask pixels with a 4-neighbor outside the mask (image border counts as
// outside).
double chamfer2d(const MaskImage& a, const MaskImage& b);

}  // namespace elastid
