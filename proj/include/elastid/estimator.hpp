#pragma once

#include <functional>
#include <string>
#include <vector>

#include "elastid/mpm.hpp"
#include "elastid/segmentation.hpp"
#include "elastid/supervision.hpp"
#include "elastid/types.hpp"

namespace elastid {

enum class LossKind { ThreeD, ThreeDFull, TwoDFull };

std::string loss_kind_name(LossKind kind);

struct PlanStage {
  int batch_frames = 0;
  int n_batches = 1;
  LossKind kind = LossKind::ThreeD;
  int iterations = 150;
};

struct EstimationPlan {
  std::vector<PlanStage> stages;
  double lr0 = 0.1;               // log10 units per step
  double lr_stage_decay = 0.5;
  double fd_step = 0.05;          // central-difference step, log10 units
  double offset_fd_scale = 0.004; // m of boundary offset per log10 unit
  double grouping_weight = 1.0;
  double min_log10_E = 2.0, max_log10_E = 9.0;
  double min_log10_rho = 1.0, max_log10_rho = 4.0;
  double max_offset = 0.005;  // m
  Loss2dWeights loss2d;
  int knn_k = 20;
  double knn_alpha = 20.0;
  double knn_eps = 1e-9;
  // Early stop: relative best-loss change below this over 20 iterations.
  double converge_rel = 1e-5;
  int converge_window = 20;
};

// The staged mini-batch schedule: batch sizes 5/10/15/25 with 3/3/3/2
// batches over a 50-frame window, then full-window 3D and 2D refinement,
// 150 iterations each. Other window lengths keep the batch sizes and trim
// the batch counts; fewer than 10 frames falls back to a reduced plan with
// a warning.
EstimationPlan default_plan(int n_frames,
                            std::vector<std::string>* warnings = nullptr);

// Flattened (log10_E, log10_rho, boundary_offset) per segment.
struct ParameterVector {
  std::vector<double> values;

  static constexpr int kPerSegment = 3;
  std::size_t n_segments() const { return values.size() / kPerSegment; }
};

ParameterVector pack_parameters(const std::vector<MaterialSegment>& segments);
void unpack_parameters(const ParameterVector& theta,
                       std::vector<MaterialSegment>& segments);

using LossFn = std::function<double(const ParameterVector&)>;

// Central finite differences, one pair of probe evaluations per coordinate
// with step h[p] (coordinates with h[p] == 0 are frozen at gradient 0).
// Probes run concurrently; a non-finite probe downgrades that coordinate to
// a one-sided difference against center_loss with a warning.
std::vector<double> fd_gradient(const LossFn& loss, const ParameterVector& theta,
                                const std::vector<double>& h,
                                double center_loss, int workers,
                                std::vector<std::string>* warnings = nullptr);

struct StageResult {
  std::vector<double> loss_trace;  // center loss per iteration (incl. start)
  double best_loss = 0.0;
  ParameterVector best_theta;
  int iterations_run = 0;
  bool aborted = false;
};

// Adam in parameter space on the stage loss; steps that land on a
// non-finite loss are rejected with the learning rate halved (at most 5
// halvings, then the stage aborts). Returns the best-loss iterate.
StageResult optimize_stage(const LossFn& loss, ParameterVector theta,
                           const std::vector<double>& h,
                           const std::vector<double>& lo,
                           const std::vector<double>& hi, double lr,
                           int iterations, const EstimationPlan& plan,
                           int workers,
                           std::vector<std::string>* warnings = nullptr);

struct EstimationInput {
  ParticleSet rest;          // registered rest state, segment = labels
  std::vector<MaterialSegment> init_segments;
  ContactScript contact;     // empty when no contact
  ObservationBundle observations;
  std::vector<Vec3> colors;  // per particle, for the 2D RGB term
  SimConfig config;
  int train_frames = 0;
};

struct StageReport {
  std::string kind;
  int batch_frames = 0;
  int n_batches = 0;
  int iterations_run = 0;
  bool aborted = false;
  double best_loss = 0.0;
  double best_loss_per_frame = 0.0;
  std::vector<double> loss_trace;
  std::vector<MaterialSegment> segments;
  double seconds = 0.0;
};

struct EstimateReport {
  std::vector<StageReport> stages;
  std::vector<MaterialSegment> final_segments;
  bool partial = false;  // 2D stages skipped for lack of image data
  double seconds = 0.0;
  std::vector<std::string> warnings;
};

// Runs the staged cascade: temporal mini-batch 3D stages, full-window 3D,
// then full-window 2D refinement, each over the shared per-segment
// parameters with the grouping-loss regularizer. Boundary offsets are only
// optimized in 2D stages. Deterministic for a fixed worker count.
EstimateReport estimate(const EstimationInput& input,
                        const EstimationPlan& plan, int workers);

}  // namespace elastid
