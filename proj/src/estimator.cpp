#include "elastid/estimator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "elastid/parallel.hpp"

namespace elastid {

std::string loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::ThreeD: return "3D";
    case LossKind::ThreeDFull: return "3D-full";
    case LossKind::TwoDFull: return "2D-full";
  }
  return "?";
}

EstimationPlan default_plan(int n_frames, std::vector<std::string>* warnings) {
  if (n_frames < 2)
    throw InvalidParameterError("default_plan: need at least 2 frames");
  EstimationPlan plan;
  if (n_frames < 10 && warnings != nullptr) {
    warnings->push_back("default_plan: fewer than 10 frames, reduced plan");
  }
  struct Base {
    int size;
    int count;
  };
  const Base bases[] = {{5, 3}, {10, 3}, {15, 3}, {25, 2}};
  for (const Base& b : bases) {
    if (b.size >= n_frames) continue;
    const int count = std::min(b.count, n_frames / b.size);
    if (count < 2) continue;
    plan.stages.push_back({b.size, count, LossKind::ThreeD, 150});
  }
  plan.stages.push_back({n_frames, 1, LossKind::ThreeDFull, 150});
  plan.stages.push_back({n_frames, 1, LossKind::TwoDFull, 150});
  return plan;
}

ParameterVector pack_parameters(const std::vector<MaterialSegment>& segments) {
  ParameterVector theta;
  theta.values.reserve(segments.size() * ParameterVector::kPerSegment);
  for (const auto& s : segments) {
    theta.values.push_back(s.log10_E);
    theta.values.push_back(s.log10_rho);
    theta.values.push_back(s.boundary_offset);
  }
  return theta;
}

void unpack_parameters(const ParameterVector& theta,
                       std::vector<MaterialSegment>& segments) {
  if (theta.values.size() != segments.size() * ParameterVector::kPerSegment)
    throw InvalidParameterError("unpack_parameters: size mismatch");
  for (std::size_t s = 0; s < segments.size(); ++s) {
    segments[s].log10_E = theta.values[3 * s];
    segments[s].log10_rho = theta.values[3 * s + 1];
    segments[s].boundary_offset = theta.values[3 * s + 2];
  }
}

std::vector<double> fd_gradient(const LossFn& loss, const ParameterVector& theta,
                                const std::vector<double>& h,
                                double center_loss, int workers,
                                std::vector<std::string>* warnings) {
  const std::size_t dim = theta.values.size();
  if (h.size() != dim)
    throw InvalidParameterError("fd_gradient: step vector size mismatch");

  std::vector<std::size_t> active;
  for (std::size_t p = 0; p < dim; ++p)
    if (h[p] > 0.0) active.push_back(p);

  // Probe slots: 2 per active coordinate, written by index so the result is
  // independent of the worker count.
  std::vector<double> probes(2 * active.size(),
                             std::numeric_limits<double>::quiet_NaN());
  parallel_for_index(2 * active.size(), workers, [&](std::size_t slot) {
    const std::size_t p = active[slot / 2];
    const double sign = (slot % 2 == 0) ? 1.0 : -1.0;
    ParameterVector probe = theta;
    probe.values[p] += sign * h[p];
    probes[slot] = loss(probe);
  });

  std::vector<double> grad(dim, 0.0);
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t p = active[a];
    const double lp = probes[2 * a];
    const double lm = probes[2 * a + 1];
    const bool fp = std::isfinite(lp);
    const bool fm = std::isfinite(lm);
    if (fp && fm) {
      grad[p] = (lp - lm) / (2.0 * h[p]);
    } else if (fp && std::isfinite(center_loss)) {
      grad[p] = (lp - center_loss) / h[p];
      if (warnings != nullptr)
        warnings->push_back("fd_gradient: coordinate " + std::to_string(p) +
                            " used a one-sided difference (probe blew up)");
    } else if (fm && std::isfinite(center_loss)) {
      grad[p] = (center_loss - lm) / h[p];
      if (warnings != nullptr)
        warnings->push_back("fd_gradient: coordinate " + std::to_string(p) +
                            " used a one-sided difference (probe blew up)");
    } else {
      grad[p] = 0.0;
      if (warnings != nullptr)
        warnings->push_back("fd_gradient: coordinate " + std::to_string(p) +
                            " has no finite probes, gradient set to 0");
    }
  }
  return grad;
}

StageResult optimize_stage(const LossFn& loss, ParameterVector theta,
                           const std::vector<double>& h,
                           const std::vector<double>& lo,
                           const std::vector<double>& hi, double lr,
                           int iterations, const EstimationPlan& plan,
                           int workers, std::vector<std::string>* warnings) {
  const std::size_t dim = theta.values.size();
  StageResult res;
  double L = loss(theta);
  if (!std::isfinite(L))
    throw NumericError("optimize_stage: non-finite loss at the initial point");
  res.loss_trace.push_back(L);
  res.best_loss = L;
  res.best_theta = theta;

  std::vector<double> m(dim, 0.0), v(dim, 0.0);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  int adam_t = 0;
  int halvings = 0;
  std::vector<double> best_history{L};

  for (int it = 0; it < iterations; ++it) {
    const std::vector<double> grad =
        fd_gradient(loss, theta, h, L, workers, warnings);

    ParameterVector trial = theta;
    std::vector<double> m_new = m, v_new = v;
    const int t_new = adam_t + 1;
    for (std::size_t p = 0; p < dim; ++p) {
      if (h[p] <= 0.0) continue;
      m_new[p] = kBeta1 * m[p] + (1.0 - kBeta1) * grad[p];
      v_new[p] = kBeta2 * v[p] + (1.0 - kBeta2) * grad[p] * grad[p];
      const double mhat = m_new[p] / (1.0 - std::pow(kBeta1, t_new));
      const double vhat = v_new[p] / (1.0 - std::pow(kBeta2, t_new));
      trial.values[p] = std::clamp(
          theta.values[p] - lr * mhat / (std::sqrt(vhat) + kEps), lo[p], hi[p]);
    }

    const double L_trial = loss(trial);
    res.iterations_run = it + 1;
    if (!std::isfinite(L_trial)) {
      // Reject the step, keep the moments untouched, halve the rate.
      lr *= 0.5;
      ++halvings;
      if (warnings != nullptr)
        warnings->push_back("optimize_stage: rejected a step onto a "
                            "non-finite loss; lr halved to " +
                            std::to_string(lr));
      res.loss_trace.push_back(L);
      best_history.push_back(res.best_loss);
      if (halvings > 5) {
        res.aborted = true;
        if (warnings != nullptr)
          warnings->push_back("optimize_stage: aborted after 5 halvings");
        break;
      }
      continue;
    }

    theta = trial;
    m = std::move(m_new);
    v = std::move(v_new);
    adam_t = t_new;
    L = L_trial;
    res.loss_trace.push_back(L);
    if (L < res.best_loss) {
      res.best_loss = L;
      res.best_theta = theta;
    }
    best_history.push_back(res.best_loss);

    const int w = plan.converge_window;
    if (static_cast<int>(best_history.size()) > w) {
      const double before = best_history[best_history.size() - 1 - w];
      const double rel = (before - res.best_loss) /
                         std::max(std::abs(before), 1e-30);
      if (rel < plan.converge_rel) break;
    }
  }
  return res;
}

namespace {

struct StageContext {
  const EstimationInput& input;
  const EstimationPlan& plan;
  const FeatureNeighborhood& nbhd;
  std::vector<TemporalBatch> batches;
  LossKind kind;
  int workers;
  int feature_resolution = 0;
};

double batch_data_loss(const StageContext& ctx,
                       const std::vector<MaterialSegment>& segments) {
  const std::size_t nb = ctx.batches.size();
  std::vector<double> losses(nb, 0.0);
  const int batch_workers =
      std::min<int>(ctx.workers, static_cast<int>(nb));
  parallel_for_index(nb, batch_workers, [&](std::size_t bi) {
    const TemporalBatch& batch = ctx.batches[bi];
    SimState state = make_sim_state(batch.initial, segments, ctx.input.config,
                                    batch.t0);
    const ContactScript* contact =
        ctx.input.contact.n_frames() > 0 ? &ctx.input.contact : nullptr;
    Trajectory traj = simulate(state, segments, contact, ctx.input.config,
                               batch.t1 - batch.t0, 1, nullptr);
    if (ctx.kind == LossKind::TwoDFull) {
      double L = 0.0;
      for (std::size_t k = 0; k < traj.snapshots.size(); ++k) {
        const int frame = traj.start_frame + static_cast<int>(k);
        const RenderedFrame rendered = render_views(
            traj.snapshots[k], ctx.input.colors, ctx.input.observations.cameras,
            ctx.input.config.particle_spacing, ctx.feature_resolution);
        L += loss_2d(rendered, ctx.input.observations, frame, ctx.plan.loss2d)
                 .total;
      }
      losses[bi] = L;
    } else {
      losses[bi] = loss_3d(traj, ctx.input.observations.tracks);
    }
  });
  double total = 0.0;
  for (double l : losses) total += l;  // fixed batch order
  return total;
}

}  // namespace

EstimateReport estimate(const EstimationInput& input,
                        const EstimationPlan& plan, int workers) {
  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();

  EstimateReport report;
  input.config.validate();
  if (input.train_frames < 2)
    throw InvalidParameterError("estimate: train_frames must be >= 2");
  if (input.observations.tracks.ids.empty())
    throw DataError("estimate: observation bundle has no tracks");
  if (input.observations.tracks.n_frames() < input.train_frames)
    throw DataError("estimate: tracks shorter than the training window");
  if (input.init_segments.empty())
    throw DataError("estimate: no initial segments");
  input.rest.validate(input.init_segments, input.config);

  cfl_preflight(input.init_segments, input.config, &report.warnings);

  const FeatureNeighborhood nbhd = build_neighborhoods(
      input.rest.z_D, input.rest.dim_D, input.rest.size(), plan.knn_k,
      plan.knn_alpha, plan.knn_eps);

  std::vector<MaterialSegment> segments = input.init_segments;
  ParameterVector theta = pack_parameters(segments);
  const std::size_t S = segments.size();

  std::vector<double> lo(3 * S), hi(3 * S);
  for (std::size_t s = 0; s < S; ++s) {
    lo[3 * s] = plan.min_log10_E;
    hi[3 * s] = plan.max_log10_E;
    lo[3 * s + 1] = plan.min_log10_rho;
    hi[3 * s + 1] = plan.max_log10_rho;
    lo[3 * s + 2] = -plan.max_offset;
    hi[3 * s + 2] = plan.max_offset;
  }

  const int feature_resolution =
      !input.observations.feature_maps.empty()
          ? input.observations.feature_maps[0][0].width
          : 0;

  double lr = plan.lr0;
  for (std::size_t stage_i = 0; stage_i < plan.stages.size(); ++stage_i) {
    const PlanStage& stage = plan.stages[stage_i];
    if (stage.kind == LossKind::TwoDFull && !input.observations.has_2d()) {
      report.partial = true;
      report.warnings.push_back(
          "estimate: no 2D observations, stopping after the 3D stages");
      break;
    }

    const auto t_stage = clock::now();
    StageContext ctx{input, plan, nbhd, {}, stage.kind, workers,
                     feature_resolution};

    // Consecutive windows partitioning the stage prefix of the training
    // frames; the first window starts from the registered rest state.
    const int B = std::min(stage.batch_frames, input.train_frames);
    for (int b = 0; b < stage.n_batches; ++b) {
      const int t0 = b * B;
      if (t0 >= input.train_frames) break;
      const int t1 = std::min(t0 + B - 1, input.train_frames - 1);
      ctx.batches.push_back(init_states_from_tracks(
          input.observations.tracks, t0, t1, input.config.frame_dt(),
          input.rest, &report.warnings));
    }

    // Boundary offsets move only under silhouette-sensitive supervision.
    std::vector<double> h(3 * S, 0.0);
    for (std::size_t s = 0; s < S; ++s) {
      h[3 * s] = plan.fd_step;
      h[3 * s + 1] = plan.fd_step;
      h[3 * s + 2] = stage.kind == LossKind::TwoDFull
                         ? plan.fd_step * plan.offset_fd_scale
                         : 0.0;
    }

    const LossFn stage_loss = [&](const ParameterVector& th) -> double {
      std::vector<MaterialSegment> segs = segments;
      unpack_parameters(th, segs);
      double L;
      try {
        L = batch_data_loss(ctx, segs);
      } catch (const NumericError&) {
        return std::numeric_limits<double>::infinity();
      }
      L += plan.grouping_weight *
           grouping_loss(input.rest.segment, segs, nbhd, 1.0);
      return L;
    };

    StageResult sr = optimize_stage(stage_loss, theta, h, lo, hi, lr,
                                    stage.iterations, plan, workers,
                                    &report.warnings);
    theta = sr.best_theta;
    unpack_parameters(theta, segments);

    StageReport sp;
    sp.kind = loss_kind_name(stage.kind);
    sp.batch_frames = B;
    sp.n_batches = static_cast<int>(ctx.batches.size());
    sp.iterations_run = sr.iterations_run;
    sp.aborted = sr.aborted;
    sp.best_loss = sr.best_loss;
    int stage_frames = 0;
    for (const auto& b : ctx.batches) stage_frames += b.t1 - b.t0 + 1;
    sp.best_loss_per_frame =
        stage_frames > 0 ? sr.best_loss / stage_frames : sr.best_loss;
    sp.loss_trace = std::move(sr.loss_trace);
    sp.segments = segments;
    sp.seconds = std::chrono::duration<double>(clock::now() - t_stage).count();
    report.stages.push_back(std::move(sp));

    lr *= plan.lr_stage_decay;
  }

  report.final_segments = segments;
  report.seconds = std::chrono::duration<double>(clock::now() - t_start).count();
  return report;
}

}  // namespace elastid
