#include "elastid/projection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "elastid/supervision.hpp"

namespace elastid {

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0))
    throw InvalidParameterError("Camera: fx, fy must be > 0");
  if (width <= 0 || height <= 0)
    throw InvalidParameterError("Camera: image dimensions must be positive");
  const Mat3 rtr = rotation.transpose() * rotation;
  if ((rtr - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-8 ||
      rotation.determinant() < 0.0)
    throw InvalidParameterError("Camera: rotation must be orthonormal, det +1");
}

Camera scaled_camera(const Camera& cam, int new_w, int new_h) {
  Camera out = cam;
  const double sx = static_cast<double>(new_w) / cam.width;
  const double sy = static_cast<double>(new_h) / cam.height;
  out.fx *= sx;
  out.fy *= sy;
  out.cx = (cam.cx + 0.5) * sx - 0.5;
  out.cy = (cam.cy + 0.5) * sy - 0.5;
  out.width = new_w;
  out.height = new_h;
  return out;
}

PixelProjection project(const Camera& cam, const Vec3& x) {
  const Vec3 p = cam.rotation * x + cam.translation;
  if (!(p.z() > 0.0))
    throw BehindCameraError("project: point at depth " + std::to_string(p.z()));
  return {cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy,
          p.z()};
}

SplatResult splat(const std::vector<Vec3>& points,
                  const std::vector<float>& values, int channels,
                  const std::vector<double>& radii_px, const Camera& cam) {
  if (channels < 1) throw InvalidParameterError("splat: channels must be >= 1");
  if (values.size() != points.size() * static_cast<std::size_t>(channels))
    throw InvalidParameterError("splat: values size mismatch");
  if (radii_px.size() != points.size())
    throw InvalidParameterError("splat: radii size mismatch");

  SplatResult out;
  out.image = ImageF::zeros(cam.height, cam.width, channels);
  out.mask = MaskImage::zeros(cam.height, cam.width);
  std::vector<double> zbuf(static_cast<std::size_t>(cam.height) * cam.width,
                           std::numeric_limits<double>::infinity());

  for (std::size_t i = 0; i < points.size(); ++i) {
    PixelProjection pp;
    try {
      pp = project(cam, points[i]);
    } catch (const BehindCameraError&) {
      continue;
    }
    const double r = radii_px[i];
    if (!(r > 0.0)) throw InvalidParameterError("splat: radii must be > 0");
    const int x0 = std::max(0, static_cast<int>(std::ceil(pp.u - r)));
    const int x1 = std::min(cam.width - 1, static_cast<int>(std::floor(pp.u + r)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(pp.v - r)));
    const int y1 = std::min(cam.height - 1, static_cast<int>(std::floor(pp.v + r)));
    const double r2 = r * r;
    const float* val = values.data() + i * channels;
    for (int y = y0; y <= y1; ++y) {
      const double dy = y - pp.v;
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - pp.u;
        if (dx * dx + dy * dy > r2) continue;
        const std::size_t px = static_cast<std::size_t>(y) * cam.width + x;
        if (pp.depth < zbuf[px]) {  // ties keep the earlier (lower) index
          zbuf[px] = pp.depth;
          out.mask.data[px] = 1;
          float* dst = out.image.data.data() + px * channels;
          for (int c = 0; c < channels; ++c) dst[c] = val[c];
        }
      }
    }
  }
  return out;
}

std::vector<double> projected_radii(const std::vector<Vec3>& points,
                                    double spacing, const Camera& cam) {
  std::vector<double> radii(points.size(), 1.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 p = cam.rotation * points[i] + cam.translation;
    if (p.z() > 0.0)
      radii[i] = std::max(1.0, cam.fx * spacing / p.z());
  }
  return radii;
}

std::vector<int> visible_particles(const ParticleSet& particles) {
  std::vector<int> idx;
  idx.reserve(particles.size());
  for (std::size_t i = 0; i < particles.size(); ++i) {
    if (particles.effective_volume[i] >= 0.5 * particles.rest_volume[i])
      idx.push_back(static_cast<int>(i));
  }
  return idx;
}

double psnr(const ImageF& a, const ImageF& b) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw InvalidParameterError("psnr: image dimensions differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(a.data.size());
  if (mse < 1e-6) return 60.0;
  return 10.0 * std::log10(1.0 / mse);
}

double iou(const MaskImage& a, const MaskImage& b) {
  if (a.height != b.height || a.width != b.width)
    throw InvalidParameterError("iou: mask dimensions differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0;
    const bool pb = b.data[i] != 0;
    inter += (pa && pb);
    uni += (pa || pb);
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

MaskImage boundary_pixels(const MaskImage& m) {
  MaskImage b = MaskImage::zeros(m.height, m.width);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      const bool edge =
          y == 0 || y == m.height - 1 || x == 0 || x == m.width - 1 ||
          !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) ||
          !m.at(y, x + 1);
      if (edge) b.at(y, x) = 1;
    }
  }
  return b;
}

double directed_boundary_mean(const MaskImage& from, const ImageF& dist_to) {
  double sum = 0.0;
  std::size_t count = 0;
  for (int y = 0; y < from.height; ++y) {
    for (int x = 0; x < from.width; ++x) {
      if (!from.at(y, x)) continue;
      sum += dist_to.at(y, x)[0];
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

}  // namespace

double chamfer2d(const MaskImage& a, const MaskImage& b) {
  if (a.height != b.height || a.width != b.width)
    throw InvalidParameterError("chamfer2d: mask dimensions differ");
  const auto nonempty = [](const MaskImage& m) {
    for (auto v : m.data)
      if (v) return true;
    return false;
  };
  if (!nonempty(a) || !nonempty(b))
    throw DataError("chamfer2d: empty mask");
  const MaskImage ba = boundary_pixels(a);
  const MaskImage bb = boundary_pixels(b);
  const ImageF da = distance_transform(ba);
  const ImageF db = distance_transform(bb);
  return 0.5 * (directed_boundary_mean(ba, db) + directed_boundary_mean(bb, da));
}

}  // namespace elastid
