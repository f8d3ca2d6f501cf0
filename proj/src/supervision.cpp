#include "elastid/supervision.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace elastid {

void TrackSet::validate(std::size_t n_particles) const {
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(n_particles))
      throw DataError("TrackSet: id " + std::to_string(id) +
                      " does not reference a particle");
  }
  for (const auto& f : frames) {
    if (f.size() != ids.size())
      throw DataError("TrackSet: frame entry count does not match ids");
  }
}

void ObservationBundle::validate() const {
  const std::size_t n_views = cameras.size();
  auto check = [&](const auto& seq, const char* name) {
    for (const auto& per_frame : seq) {
      if (per_frame.size() != n_views)
        throw DataError(std::string("ObservationBundle: ") + name +
                        " view count does not match cameras");
    }
  };
  check(masks, "masks");
  check(distance_maps, "distance_maps");
  check(rgb, "rgb");
  check(feature_maps, "feature_maps");
  if (!masks.empty() && !distance_maps.empty() &&
      masks.size() != distance_maps.size())
    throw DataError("ObservationBundle: masks/distance_maps frame counts differ");
  if (!masks.empty() && !rgb.empty() && masks.size() != rgb.size())
    throw DataError("ObservationBundle: masks/rgb frame counts differ");
}

double loss_3d(const Trajectory& traj, const TrackSet& tracks) {
  double total = 0.0;
  for (std::size_t k = 0; k < traj.snapshots.size(); ++k) {
    const int frame = traj.start_frame + static_cast<int>(k);
    if (frame >= tracks.n_frames()) break;
    const ParticleSet& snap = traj.snapshots[k];
    const std::vector<Vec3>& obs = tracks.frames[frame];
    double frame_sum = 0.0;
    for (std::size_t j = 0; j < tracks.ids.size(); ++j) {
      const int id = tracks.ids[j];
      if (id >= static_cast<int>(snap.size()))
        throw DataError("loss_3d: track id " + std::to_string(id) +
                        " missing from simulated state");
      frame_sum += (snap.x[id] - obs[j]).squaredNorm();
    }
    total += frame_sum;
  }
  return total;
}

namespace {

// Far-field sentinel for the lower-envelope passes. Sentinel parabolas
// always lose against any real one at image scale, so the final distances
// stay exact.
constexpr double kEdtFar = 1e18;

// 1D squared-distance lower envelope (two-pass separable transform).
void edt_1d(const double* f, int n, double* d, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    for (;;) {
      s = ((f[q] + q * static_cast<double>(q)) -
           (f[v[k]] + v[k] * static_cast<double>(v[k]))) /
          (2.0 * q - 2.0 * v[k]);
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[k]) {
      // Replaces the single remaining parabola.
      v[k] = q;
      z[k] = -std::numeric_limits<double>::infinity();
    } else {
      ++k;
      v[k] = q;
      z[k] = s;
    }
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - static_cast<double>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace

ImageF distance_transform(const MaskImage& mask) {
  bool any = false;
  for (auto v : mask.data)
    if (v) {
      any = true;
      break;
    }
  if (!any) throw DataError("distance_transform: empty mask");

  const int h = mask.height;
  const int w = mask.width;
  std::vector<double> g(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = mask.data[i] ? 0.0 : kEdtFar;

  const int nmax = std::max(h, w);
  std::vector<double> f(nmax), d(nmax), z(nmax + 1);
  std::vector<int> v(nmax);

  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = g[static_cast<std::size_t>(y) * w + x];
    edt_1d(f.data(), h, d.data(), v.data(), z.data());
    for (int y = 0; y < h; ++y) g[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    double* row = g.data() + static_cast<std::size_t>(y) * w;
    edt_1d(row, w, d.data(), v.data(), z.data());
    std::copy(d.begin(), d.begin() + w, row);
  }

  ImageF out = ImageF::zeros(h, w, 1);
  for (std::size_t i = 0; i < g.size(); ++i)
    out.data[i] = static_cast<float>(std::sqrt(std::min(g[i], kEdtFar)));
  return out;
}

namespace {

double sample_distance_map(const ImageF& dmap, double u, double v) {
  const int w = dmap.width;
  const int h = dmap.height;
  const double uc = std::clamp(u, 0.0, static_cast<double>(w - 1));
  const double vc = std::clamp(v, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(uc));
  const int y0 = static_cast<int>(std::floor(vc));
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double ax = uc - x0;
  const double ay = vc - y0;
  const double d00 = dmap.at(y0, x0)[0];
  const double d01 = dmap.at(y0, x1)[0];
  const double d10 = dmap.at(y1, x0)[0];
  const double d11 = dmap.at(y1, x1)[0];
  const double bilinear = (1 - ay) * ((1 - ax) * d00 + ax * d01) +
                          ay * ((1 - ax) * d10 + ax * d11);
  // Out-of-image projections pay the distance back to the image rectangle.
  const double du = std::max({0.0, -u, u - (w - 1.0)});
  const double dv = std::max({0.0, -v, v - (h - 1.0)});
  return bilinear + std::hypot(du, dv);
}

}  // namespace

double loss_dt(const std::vector<Vec3>& points,
               const std::vector<Camera>& cameras,
               const std::vector<ImageF>& distance_maps) {
  if (cameras.empty())
    throw InvalidParameterError("loss_dt: no views configured");
  if (cameras.size() != distance_maps.size())
    throw InvalidParameterError("loss_dt: cameras/distance_maps mismatch");
  if (points.empty()) return 0.0;
  double view_sum = 0.0;
  for (std::size_t c = 0; c < cameras.size(); ++c) {
    const Camera& cam = cameras[c];
    const ImageF& dmap = distance_maps[c];
    const double behind_penalty = std::hypot(dmap.width, dmap.height);
    double point_sum = 0.0;
    for (const Vec3& p : points) {
      const Vec3 pc = cam.rotation * p + cam.translation;
      if (!(pc.z() > 0.0)) {
        point_sum += behind_penalty;
        continue;
      }
      const double u = cam.fx * pc.x() / pc.z() + cam.cx;
      const double v = cam.fy * pc.y() / pc.z() + cam.cy;
      point_sum += sample_distance_map(dmap, u, v);
    }
    view_sum += point_sum / static_cast<double>(points.size());
  }
  return view_sum / static_cast<double>(cameras.size());
}

namespace {

ImageF downsample_half(const ImageF& img) {
  const int nh = (img.height + 1) / 2;
  const int nw = (img.width + 1) / 2;
  ImageF out = ImageF::zeros(nh, nw, img.channels);
  for (int y = 0; y < nh; ++y) {
    for (int x = 0; x < nw; ++x) {
      const int y1 = std::min(2 * y + 1, img.height - 1);
      const int x1 = std::min(2 * x + 1, img.width - 1);
      for (int c = 0; c < img.channels; ++c) {
        const float sum = img.at(2 * y, 2 * x)[c] + img.at(2 * y, x1)[c] +
                          img.at(y1, 2 * x)[c] + img.at(y1, x1)[c];
        out.at(y, x)[c] = 0.25f * sum;
      }
    }
  }
  return out;
}

double mean_abs_diff(const ImageF& a, const ImageF& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    sum += std::abs(static_cast<double>(a.data[i]) - b.data[i]);
  return sum / static_cast<double>(a.data.size());
}

// Single-scale SSIM with an 11 x 11 Gaussian window (sigma 1.5), channel
// averaged. Border windows renormalize over the in-image taps.
double ssim(const ImageF& a, const ImageF& b) {
  constexpr int kRadius = 5;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  double kernel[2 * kRadius + 1];
  double ksum = 0.0;
  for (int i = -kRadius; i <= kRadius; ++i) {
    kernel[i + kRadius] = std::exp(-0.5 * i * i / (kSigma * kSigma));
    ksum += kernel[i + kRadius];
  }
  for (double& k : kernel) k /= ksum;

  const int h = a.height, w = a.width, ch = a.channels;
  auto blur = [&](const std::vector<double>& src, std::vector<double>& dst) {
    // Horizontal then vertical pass with border renormalization.
    std::vector<double> tmp(src.size());
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < ch; ++c) {
          double acc = 0.0, wacc = 0.0;
          for (int k = -kRadius; k <= kRadius; ++k) {
            const int xx = x + k;
            if (xx < 0 || xx >= w) continue;
            const double kw = kernel[k + kRadius];
            acc += kw * src[(static_cast<std::size_t>(y) * w + xx) * ch + c];
            wacc += kw;
          }
          tmp[(static_cast<std::size_t>(y) * w + x) * ch + c] = acc / wacc;
        }
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < ch; ++c) {
          double acc = 0.0, wacc = 0.0;
          for (int k = -kRadius; k <= kRadius; ++k) {
            const int yy = y + k;
            if (yy < 0 || yy >= h) continue;
            const double kw = kernel[k + kRadius];
            acc += kw * tmp[(static_cast<std::size_t>(yy) * w + x) * ch + c];
            wacc += kw;
          }
          dst[(static_cast<std::size_t>(y) * w + x) * ch + c] = acc / wacc;
        }
      }
    }
  };

  const std::size_t n = a.data.size();
  std::vector<double> xa(n), xb(n), xaa(n), xbb(n), xab(n);
  for (std::size_t i = 0; i < n; ++i) {
    xa[i] = a.data[i];
    xb[i] = b.data[i];
    xaa[i] = xa[i] * xa[i];
    xbb[i] = xb[i] * xb[i];
    xab[i] = xa[i] * xb[i];
  }
  std::vector<double> mu_a(n), mu_b(n), m_aa(n), m_bb(n), m_ab(n);
  blur(xa, mu_a);
  blur(xb, mu_b);
  blur(xaa, m_aa);
  blur(xbb, m_bb);
  blur(xab, m_ab);

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double va = m_aa[i] - mu_a[i] * mu_a[i];
    const double vb = m_bb[i] - mu_b[i] * mu_b[i];
    const double cov = m_ab[i] - mu_a[i] * mu_b[i];
    const double num = (2.0 * mu_a[i] * mu_b[i] + kC1) * (2.0 * cov + kC2);
    const double den =
        (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (va + vb + kC2);
    total += num / den;
  }
  return total / static_cast<double>(n);
}

void check_same_shape(const ImageF& a, const ImageF& b, const char* who) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw InvalidParameterError(std::string(who) + ": image dimensions differ");
}

}  // namespace

double loss_l1_multiscale(const ImageF& rendered, const ImageF& reference) {
  check_same_shape(rendered, reference, "loss_l1_multiscale");
  ImageF a = rendered;
  ImageF b = reference;
  double l1 = mean_abs_diff(a, b);
  for (int level = 1; level < 3; ++level) {
    a = downsample_half(a);
    b = downsample_half(b);
    l1 += mean_abs_diff(a, b);
  }
  return l1 / 3.0;
}

double loss_rgb(const ImageF& rendered, const ImageF& reference) {
  check_same_shape(rendered, reference, "loss_rgb");
  ImageF a = rendered;
  ImageF b = reference;
  double l1 = 0.0;
  double dssim = 0.0;
  for (int level = 0; level < 3; ++level) {
    if (level > 0) {
      a = downsample_half(a);
      b = downsample_half(b);
    }
    l1 += mean_abs_diff(a, b);
    dssim += 0.5 * (1.0 - ssim(a, b));
  }
  return 0.8 * (l1 / 3.0) + 0.2 * (dssim / 3.0);
}

Loss2dBreakdown loss_2d(const RenderedFrame& rendered,
                        const ObservationBundle& bundle, int frame,
                        const Loss2dWeights& weights) {
  Loss2dBreakdown out;
  const std::size_t n_views = bundle.cameras.size();
  if (n_views == 0) throw InvalidParameterError("loss_2d: no views");

  if (!bundle.rgb.empty()) {
    if (frame >= static_cast<int>(bundle.rgb.size()))
      throw DataError("loss_2d: frame beyond stored rgb observations");
    double sum = 0.0;
    for (std::size_t c = 0; c < n_views; ++c)
      sum += loss_rgb(rendered.rgb[c], bundle.rgb[frame][c]);
    out.rgb = sum / static_cast<double>(n_views);
  }
  if (!bundle.feature_maps.empty()) {
    if (frame >= static_cast<int>(bundle.feature_maps.size()))
      throw DataError("loss_2d: frame beyond stored feature maps");
    double sum = 0.0;
    for (std::size_t c = 0; c < n_views; ++c)
      sum += loss_l1_multiscale(rendered.features[c],
                                bundle.feature_maps[frame][c]);
    out.dino = sum / static_cast<double>(n_views);
  }
  if (!bundle.distance_maps.empty()) {
    if (frame >= static_cast<int>(bundle.distance_maps.size()))
      throw DataError("loss_2d: frame beyond stored distance maps");
    out.dt = loss_dt(rendered.points, bundle.cameras,
                     bundle.distance_maps[frame]);
  }
  out.total = weights.rgb * out.rgb + weights.dino * out.dino +
              weights.dt * out.dt;
  return out;
}

RenderedFrame render_views(const ParticleSet& snap,
                           const std::vector<Vec3>& colors,
                           const std::vector<Camera>& cameras,
                           double particle_spacing, int feature_resolution) {
  RenderedFrame out;
  const std::vector<int> vis = visible_particles(snap);
  out.points.resize(vis.size());
  for (std::size_t j = 0; j < vis.size(); ++j) out.points[j] = snap.x[vis[j]];

  std::vector<float> color_vals;
  if (!colors.empty()) {
    color_vals.resize(vis.size() * 3);
    for (std::size_t j = 0; j < vis.size(); ++j)
      for (int c = 0; c < 3; ++c)
        color_vals[j * 3 + c] = static_cast<float>(colors[vis[j]][c]);
  }
  std::vector<float> feat_vals;
  if (feature_resolution > 0 && snap.dim_D > 0) {
    feat_vals.resize(vis.size() * snap.dim_D);
    for (std::size_t j = 0; j < vis.size(); ++j)
      for (int d = 0; d < snap.dim_D; ++d)
        feat_vals[j * snap.dim_D + d] =
            static_cast<float>(snap.z_D[vis[j] * snap.dim_D + d]);
  }

  for (const Camera& cam : cameras) {
    if (!color_vals.empty()) {
      const auto radii = projected_radii(out.points, particle_spacing, cam);
      out.rgb.push_back(splat(out.points, color_vals, 3, radii, cam).image);
    }
    if (!feat_vals.empty()) {
      const Camera fcam =
          scaled_camera(cam, feature_resolution, feature_resolution);
      const auto fradii = projected_radii(out.points, particle_spacing, fcam);
      out.features.push_back(
          splat(out.points, feat_vals, snap.dim_D, fradii, fcam).image);
    }
  }
  return out;
}

namespace {

// Indices of the k nearest tracked rest positions (excluding self when self
// is tracked), plus Gaussian weights.
void nearest_tracked(const std::vector<Vec3>& rest_tracked, const Vec3& query,
                     int k, std::vector<int>& idx, std::vector<double>& wgt,
                     int self = -1) {
  const int n = static_cast<int>(rest_tracked.size());
  std::vector<std::pair<double, int>> dist;
  dist.reserve(n);
  for (int j = 0; j < n; ++j) {
    if (j == self) continue;
    dist.emplace_back((rest_tracked[j] - query).squaredNorm(), j);
  }
  const int kk = std::min<int>(k, static_cast<int>(dist.size()));
  std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
  idx.resize(kk);
  wgt.resize(kk);
  const double h2 = std::max(dist[kk - 1].first, 1e-24);
  for (int j = 0; j < kk; ++j) {
    idx[j] = dist[j].second;
    wgt[j] = std::exp(-dist[j].first / h2);
  }
}

Mat3 fit_affine(const std::vector<Vec3>& from, const std::vector<Vec3>& to,
                const std::vector<double>& w, const Vec3& from_mean,
                const Vec3& to_mean) {
  Mat3 cov = Mat3::Zero();
  Mat3 gram = Mat3::Zero();
  for (std::size_t j = 0; j < from.size(); ++j) {
    const Vec3 df = from[j] - from_mean;
    const Vec3 dt = to[j] - to_mean;
    cov += w[j] * dt * df.transpose();
    gram += w[j] * df * df.transpose();
  }
  // Tikhonov floor keeps thin neighborhoods invertible.
  const double reg = 1e-12 * std::max(gram.trace(), 1e-30);
  gram.diagonal().array() += reg;
  return cov * gram.inverse();
}

// Projects a degenerate affine fit back to det > 0 by flooring the singular
// values.
Mat3 repair_deformation(const Mat3& A) {
  if (A.determinant() > 1e-12 && A.allFinite()) return A;
  Eigen::JacobiSVD<Mat3> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 s = svd.singularValues();
  Mat3 U = svd.matrixU();
  Mat3 V = svd.matrixV();
  if ((U * V.transpose()).determinant() < 0.0) U.col(2) *= -1.0;
  for (int i = 0; i < 3; ++i) s[i] = std::max(s[i], 1e-3);
  return U * s.asDiagonal() * V.transpose();
}

}  // namespace

TemporalBatch init_states_from_tracks(const TrackSet& tracks, int t0, int t1,
                                      double frame_dt,
                                      const ParticleSet& rest,
                                      std::vector<std::string>* warnings) {
  if (tracks.ids.empty()) throw DataError("init_states_from_tracks: no tracks");
  tracks.validate(rest.size());
  const int T = tracks.n_frames();
  if (t0 < 0 || t0 >= T || t1 < t0)
    throw DataError("init_states_from_tracks: invalid frame window");

  TemporalBatch batch;
  batch.t0 = t0;
  batch.t1 = t1;
  batch.initial = rest;
  batch.accel.assign(rest.size(), Vec3::Zero());

  // Frame 0 starts from the registered rest state itself.
  if (t0 == 0) {
    for (std::size_t i = 0; i < rest.size(); ++i) {
      batch.initial.v[i].setZero();
      batch.initial.F[i].setIdentity();
      batch.initial.C[i].setZero();
    }
    return batch;
  }

  const int tm = t0 - 1;
  const int tp = t0 + 1;
  const bool central = tp < T;  // pre: tracks cover t0-1, t0, t0+1
  if (!central && warnings != nullptr) {
    warnings->push_back(
        "init_states_from_tracks: frame " + std::to_string(t0) +
        " at sequence end, falling back to one-sided differences");
  }

  const std::size_t n_tracked = tracks.ids.size();
  std::vector<Vec3> rest_tracked(n_tracked);
  std::vector<Vec3> cur(n_tracked), vel(n_tracked), acc(n_tracked);
  for (std::size_t j = 0; j < n_tracked; ++j) {
    rest_tracked[j] = rest.x[tracks.ids[j]];
    cur[j] = tracks.frames[t0][j];
    if (central) {
      vel[j] = (tracks.frames[tp][j] - tracks.frames[tm][j]) / (2.0 * frame_dt);
      acc[j] = (tracks.frames[tp][j] - 2.0 * tracks.frames[t0][j] +
                tracks.frames[tm][j]) /
               (frame_dt * frame_dt);
    } else {
      vel[j] = (tracks.frames[t0][j] - tracks.frames[tm][j]) / frame_dt;
      acc[j].setZero();
    }
  }

  std::vector<int> tracked_slot(rest.size(), -1);
  for (std::size_t j = 0; j < n_tracked; ++j) tracked_slot[tracks.ids[j]] = static_cast<int>(j);

  constexpr int kFitNeighbors = 16;
  std::vector<int> nidx;
  std::vector<double> nwgt;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const int slot = tracked_slot[i];
    nearest_tracked(rest_tracked, rest.x[i], kFitNeighbors, nidx, nwgt, slot);

    Vec3 rest_mean = Vec3::Zero(), cur_mean = Vec3::Zero(),
         vel_mean = Vec3::Zero(), acc_mean = Vec3::Zero();
    double wsum = 0.0;
    std::vector<Vec3> nb_rest(nidx.size()), nb_cur(nidx.size()),
        nb_vel(nidx.size());
    for (std::size_t j = 0; j < nidx.size(); ++j) {
      nb_rest[j] = rest_tracked[nidx[j]];
      nb_cur[j] = cur[nidx[j]];
      nb_vel[j] = vel[nidx[j]];
      rest_mean += nwgt[j] * nb_rest[j];
      cur_mean += nwgt[j] * nb_cur[j];
      vel_mean += nwgt[j] * nb_vel[j];
      acc_mean += nwgt[j] * acc[nidx[j]];
      wsum += nwgt[j];
    }
    rest_mean /= wsum;
    cur_mean /= wsum;
    vel_mean /= wsum;
    acc_mean /= wsum;

    const Mat3 Fi =
        repair_deformation(fit_affine(nb_rest, nb_cur, nwgt, rest_mean, cur_mean));
    const Mat3 Ci = fit_affine(nb_cur, nb_vel, nwgt, cur_mean, vel_mean);

    batch.initial.F[i] = Fi;
    batch.initial.C[i] = Ci;
    if (slot >= 0) {
      batch.initial.x[i] = cur[slot];
      batch.initial.v[i] = vel[slot];
      batch.accel[i] = acc[slot];
    } else {
      batch.initial.x[i] = cur_mean + Fi * (rest.x[i] - rest_mean);
      batch.initial.v[i] = vel_mean + Ci * (batch.initial.x[i] - cur_mean);
      batch.accel[i] = acc_mean;
    }
  }
  return batch;
}

}  // namespace elastid
