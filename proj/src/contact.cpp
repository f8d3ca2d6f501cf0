#include "elastid/contact.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>

namespace elastid {

void PoseTrajectory::validate() const {
  if (quats.size() != positions.size())
    throw DataError("PoseTrajectory: position/quaternion counts differ");
  for (const auto& q : quats) {
    if (std::abs(q.norm() - 1.0) > 1e-9)
      throw DataError("PoseTrajectory: quaternion not unit norm");
  }
  if (!positions.empty() && near_set.empty())
    throw DataError("PoseTrajectory: active trajectory with empty near_set");
}

Mat3 quat_to_rotation(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

TriangulationResult triangulate(const std::vector<Annotation2D>& annotations,
                                const std::vector<Camera>& cameras,
                                int n_frames) {
  std::map<int, std::vector<const Annotation2D*>> by_frame;
  for (const auto& a : annotations) {
    if (a.view < 0 || a.view >= static_cast<int>(cameras.size()))
      throw DataError("triangulate: annotation references unknown view " +
                      std::to_string(a.view));
    by_frame[a.frame].push_back(&a);
  }

  TriangulationResult res;
  res.points.resize(n_frames);
  res.residual_px.assign(n_frames, 0.0);
  for (int t = 0; t < n_frames; ++t) {
    auto it = by_frame.find(t);
    if (it == by_frame.end() || it->second.size() < 2)
      throw DataError("triangulate: frame " + std::to_string(t) +
                      " has fewer than 2 annotated views (underdetermined)");
    const auto& anns = it->second;

    // Linear DLT: two rows per view on normalized pixel coordinates.
    Eigen::MatrixXd A(2 * anns.size(), 3);
    Eigen::VectorXd b(2 * anns.size());
    for (std::size_t k = 0; k < anns.size(); ++k) {
      const Camera& cam = cameras[anns[k]->view];
      const double un = (anns[k]->u - cam.cx) / cam.fx;
      const double vn = (anns[k]->v - cam.cy) / cam.fy;
      const Mat3& R = cam.rotation;
      const Vec3& tr = cam.translation;
      A.row(2 * k) = (un * R.row(2) - R.row(0));
      b(2 * k) = tr.x() - un * tr.z();
      A.row(2 * k + 1) = (vn * R.row(2) - R.row(1));
      b(2 * k + 1) = tr.y() - vn * tr.z();
    }
    Vec3 X = A.colPivHouseholderQr().solve(b);

    // One Gauss-Newton polish on the pixel reprojection residuals.
    Eigen::MatrixXd J(2 * anns.size(), 3);
    Eigen::VectorXd r(2 * anns.size());
    auto residuals = [&](const Vec3& P, Eigen::VectorXd& out,
                         Eigen::MatrixXd* jac) {
      for (std::size_t k = 0; k < anns.size(); ++k) {
        const Camera& cam = cameras[anns[k]->view];
        const Vec3 pc = cam.rotation * P + cam.translation;
        const double iz = 1.0 / pc.z();
        out(2 * k) = cam.fx * pc.x() * iz + cam.cx - anns[k]->u;
        out(2 * k + 1) = cam.fy * pc.y() * iz + cam.cy - anns[k]->v;
        if (jac != nullptr) {
          // d(u)/dP = fx * (R0 * z - x * R2) / z^2
          jac->row(2 * k) =
              cam.fx * iz * (cam.rotation.row(0) - pc.x() * iz * cam.rotation.row(2));
          jac->row(2 * k + 1) =
              cam.fy * iz * (cam.rotation.row(1) - pc.y() * iz * cam.rotation.row(2));
        }
      }
    };
    residuals(X, r, &J);
    const Vec3 delta =
        (J.transpose() * J).ldlt().solve(J.transpose() * r);
    const Vec3 X_polished = X - delta;
    Eigen::VectorXd r2(2 * anns.size());
    residuals(X_polished, r2, nullptr);
    if (r2.squaredNorm() <= r.squaredNorm()) {
      X = X_polished;
      r = r2;
    }

    res.points[t] = X;
    res.residual_px[t] = std::sqrt(r.squaredNorm() / (2.0 * anns.size()));
    if (res.residual_px[t] > 5.0) {
      res.warnings.push_back("triangulate: frame " + std::to_string(t) +
                             " residual " + std::to_string(res.residual_px[t]) +
                             " px");
    }
  }
  return res;
}

std::vector<int> select_near_set(const std::vector<Vec3>& tracked_rest,
                                 const Vec3& coarse0, double radius) {
  std::vector<int> out;
  for (std::size_t j = 0; j < tracked_rest.size(); ++j) {
    if ((tracked_rest[j] - coarse0).norm() <= radius)
      out.push_back(static_cast<int>(j));
  }
  return out;
}

namespace {

// Ambient-space derivatives of the unit-quaternion rotation applied to a
// fixed vector r: d(R(q) r)/dq_k.
void rotation_jacobian(const Eigen::Vector4d& q, const Vec3& r,
                       Vec3 out[4]) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const double rx = r.x(), ry = r.y(), rz = r.z();
  out[0] = 2.0 * Vec3(-z * ry + y * rz, z * rx - x * rz, -y * rx + x * ry);
  out[1] = 2.0 * Vec3(y * ry + z * rz, y * rx - 2 * x * ry - w * rz,
                      z * rx + w * ry - 2 * x * rz);
  out[2] = 2.0 * Vec3(-2 * y * rx + x * ry + w * rz, x * rx + z * rz,
                      -w * rx + z * ry - 2 * y * rz);
  out[3] = 2.0 * Vec3(-2 * z * rx - w * ry + x * rz,
                      w * rx - 2 * z * ry + y * rz, x * rx + y * ry);
}

struct ContactProblem {
  const std::vector<Vec3>& coarse;
  const TrackSet& tracks;
  const std::vector<int>& near_set;
  ContactRefineOptions opts;
  int T;

  // Canonical form: unit quaternions, consecutive signs aligned.
  void project(std::vector<Vec3>&, std::vector<Eigen::Vector4d>& q) const {
    for (auto& qi : q) {
      const double n = qi.norm();
      if (n < 1e-12) {
        qi = Eigen::Vector4d(1, 0, 0, 0);
      } else {
        qi /= n;
      }
    }
    for (int t = 1; t < T; ++t) {
      if (q[t - 1].dot(q[t]) < 0.0) q[t] = -q[t];
    }
  }

  double loss(const std::vector<Vec3>& xs,
              const std::vector<Eigen::Vector4d>& qs) const {
    double L = 0.0;
    for (int t = 0; t < T; ++t) L += (xs[t] - coarse[t]).squaredNorm();
    for (int t = 0; t < T; ++t) {
      const Mat3 R = quat_to_rotation(qs[t]);
      for (int j : near_set) {
        const Vec3 e =
            xs[t] + R * (tracks.frames[0][j] - xs[0]) - tracks.frames[t][j];
        L += e.squaredNorm();
      }
    }
    for (int t = 1; t + 1 < T; ++t) {
      L += opts.lambda_ps *
           (xs[t - 1] + xs[t + 1] - 2.0 * xs[t]).squaredNorm();
      L += opts.lambda_rs *
           (qs[t - 1] + qs[t + 1] - 2.0 * qs[t]).squaredNorm();
    }
    return L;
  }

  void gradient(const std::vector<Vec3>& xs,
                const std::vector<Eigen::Vector4d>& qs,
                std::vector<Vec3>& gx,
                std::vector<Eigen::Vector4d>& gq) const {
    gx.assign(T, Vec3::Zero());
    gq.assign(T, Eigen::Vector4d::Zero());
    for (int t = 0; t < T; ++t) gx[t] += 2.0 * (xs[t] - coarse[t]);
    Vec3 Jq[4];
    for (int t = 0; t < T; ++t) {
      const Mat3 R = quat_to_rotation(qs[t]);
      for (int j : near_set) {
        const Vec3 r = tracks.frames[0][j] - xs[0];
        const Vec3 e = xs[t] + R * r - tracks.frames[t][j];
        gx[t] += 2.0 * e;
        gx[0] -= 2.0 * (R.transpose() * e);
        rotation_jacobian(qs[t], r, Jq);
        for (int k = 0; k < 4; ++k) gq[t][k] += 2.0 * e.dot(Jq[k]);
      }
    }
    for (int t = 1; t + 1 < T; ++t) {
      const Vec3 sp = xs[t - 1] + xs[t + 1] - 2.0 * xs[t];
      gx[t - 1] += 2.0 * opts.lambda_ps * sp;
      gx[t + 1] += 2.0 * opts.lambda_ps * sp;
      gx[t] -= 4.0 * opts.lambda_ps * sp;
      const Eigen::Vector4d sq = qs[t - 1] + qs[t + 1] - 2.0 * qs[t];
      gq[t - 1] += 2.0 * opts.lambda_rs * sq;
      gq[t + 1] += 2.0 * opts.lambda_rs * sq;
      gq[t] -= 4.0 * opts.lambda_rs * sq;
    }
  }
};

}  // namespace

ContactRefineResult refine_contact(const std::vector<Vec3>& coarse,
                                   const TrackSet& tracks,
                                   const std::vector<int>& near_set,
                                   const ContactRefineOptions& opts) {
  if (near_set.empty())
    throw DataError("refine_contact: empty near_set");
  const int T = static_cast<int>(coarse.size());
  if (tracks.n_frames() < T)
    throw DataError("refine_contact: tracks shorter than coarse trajectory");
  for (int j : near_set) {
    if (j < 0 || j >= static_cast<int>(tracks.ids.size()))
      throw DataError("refine_contact: near_set index out of range");
  }

  ContactProblem prob{coarse, tracks, near_set, opts, T};
  std::vector<Vec3> xs = coarse;
  std::vector<Eigen::Vector4d> qs(T, Eigen::Vector4d(1, 0, 0, 0));
  prob.project(xs, qs);

  ContactRefineResult res;
  double L = prob.loss(xs, qs);
  res.loss_trace.push_back(L);

  std::vector<Vec3> gx, gq_prev_x;
  std::vector<Eigen::Vector4d> gq;
  std::vector<Vec3> prev_x;
  std::vector<Eigen::Vector4d> prev_q;
  std::vector<Vec3> prev_gx;
  std::vector<Eigen::Vector4d> prev_gq;
  bool have_prev = false;
  double step = 0.0;

  for (int it = 0; it < opts.max_iterations; ++it) {
    prob.gradient(xs, qs, gx, gq);
    double gnorm2 = 0.0;
    for (const auto& g : gx) gnorm2 += g.squaredNorm();
    for (const auto& g : gq) gnorm2 += g.squaredNorm();
    if (gnorm2 < 1e-30) {
      res.converged = true;
      break;
    }

    // Barzilai-Borwein step seed, safeguarded by Armijo backtracking.
    if (have_prev) {
      double ss = 0.0, sy = 0.0;
      for (int t = 0; t < T; ++t) {
        const Vec3 s = xs[t] - prev_x[t];
        const Vec3 y = gx[t] - prev_gx[t];
        ss += s.squaredNorm();
        sy += s.dot(y);
        const Eigen::Vector4d sq = qs[t] - prev_q[t];
        const Eigen::Vector4d yq = gq[t] - prev_gq[t];
        ss += sq.squaredNorm();
        sy += sq.dot(yq);
      }
      step = (sy > 1e-30) ? ss / sy : 1.0 / std::sqrt(gnorm2);
    } else {
      step = 1.0 / std::sqrt(gnorm2);
    }
    step = std::clamp(step, 1e-12, 1e6);

    prev_x = xs;
    prev_q = qs;
    prev_gx = gx;
    prev_gq = gq;

    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      std::vector<Vec3> xs_new(T);
      std::vector<Eigen::Vector4d> qs_new(T);
      for (int t = 0; t < T; ++t) {
        xs_new[t] = xs[t] - step * gx[t];
        qs_new[t] = qs[t] - step * gq[t];
      }
      prob.project(xs_new, qs_new);
      const double L_new = prob.loss(xs_new, qs_new);
      if (L_new <= L - 1e-4 * step * gnorm2 || (ls > 20 && L_new <= L)) {
        xs = std::move(xs_new);
        qs = std::move(qs_new);
        const double rel = (L - L_new) / std::max(L, 1e-30);
        L = L_new;
        res.loss_trace.push_back(L);
        accepted = true;
        if (rel < opts.rel_tolerance) res.converged = true;
        break;
      }
      step *= 0.5;
    }
    have_prev = accepted;
    if (!accepted || res.converged) {
      if (!accepted) res.converged = true;  // descent stalled at a minimum
      break;
    }
  }

  if (!res.converged) {
    res.warnings.push_back(
        "refine_contact: iteration budget exhausted, returning best iterate");
  }
  res.final_loss = L;
  res.trajectory.positions = std::move(xs);
  res.trajectory.quats = std::move(qs);
  res.trajectory.near_set = near_set;
  return res;
}

ContactScript rigid_targets(const PoseTrajectory& traj,
                            const std::vector<int>& particle_ids,
                            const std::vector<Vec3>& rest_positions) {
  if (particle_ids.size() != rest_positions.size())
    throw DataError("rigid_targets: ids/positions size mismatch");
  traj.validate();
  ContactScript script;
  script.near_set = particle_ids;
  const int T = traj.n_frames();
  script.targets.resize(T);
  for (int t = 0; t < T; ++t) {
    const Mat3 R = quat_to_rotation(traj.quats[t]);
    const Mat3 R0t = quat_to_rotation(traj.quats[0]).transpose();
    // Offsets are taken in the frame-0 contact frame.
    script.targets[t].resize(particle_ids.size());
    for (std::size_t j = 0; j < particle_ids.size(); ++j) {
      const Vec3 offset = rest_positions[j] - traj.positions[0];
      script.targets[t][j] =
          traj.positions[t] + R * (R0t * offset);
    }
  }
  return script;
}

Vec3 bc_velocity(const Vec3& x, const Vec3& target_cur,
                 const Vec3& target_next, const SimConfig& config) {
  const double frame_dt = config.frame_dt();
  return (target_next - target_cur) / frame_dt +
         (target_cur - x) / (config.bc_kappa * config.dt);
}

}  // namespace elastid
