// elastid command-line tool: synthetic scene generation, forward simulation,
// material estimation, prediction, evaluation and rendering.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "elastid/estimator.hpp"
#include "elastid/image_io.hpp"
#include "elastid/scene_io.hpp"
#include "elastid/segmentation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace elastid;

namespace {

constexpr const char* kVersion = "0.1.0";

struct GlobalOpts {
  int workers = 0;  // 0 -> hardware
  std::uint64_t seed = 0;
  bool skip_existing = false;
};

int effective_workers(const GlobalOpts& g) {
  if (g.workers > 0) return g.workers;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

bool should_skip(const GlobalOpts& g, const std::string& out) {
  if (g.skip_existing && fs::exists(out)) {
    std::cout << "skip-existing: '" << out << "' already present\n";
    return true;
  }
  return false;
}

void write_manifest(const std::string& out_path, const std::string& command,
                    const GlobalOpts& g, const json& inputs,
                    const json& extra, double seconds) {
  json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["inputs"] = inputs;
  m["output"] = out_path;
  m["workers"] = effective_workers(g);
  m["seed"] = g.seed;
  m["seconds"] = seconds;
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = *it;
  std::ofstream out(out_path + ".manifest.json", std::ios::trunc);
  out << m.dump(2) << "\n";
}

json segments_to_json(const std::vector<MaterialSegment>& segments) {
  json arr = json::array();
  for (const auto& s : segments) arr.push_back(segment_to_json(s));
  return arr;
}

std::pair<int, int> parse_frame_range(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos)
    throw InvalidParameterError("frame range must look like 'a:b', got '" +
                                text + "'");
  const int lo = std::stoi(text.substr(0, colon));
  const int hi = std::stoi(text.substr(colon + 1));
  if (lo < 1 || hi < lo)
    throw InvalidParameterError("frame range '" + text +
                                "' must satisfy 1 <= a <= b");
  return {lo, hi};  // 1-based inclusive
}

// Rigid registration of the rest particles onto the first tracked frame.
void align_rest_to_tracks(LoadedScene& scene,
                          std::vector<std::string>& warnings) {
  const TrackSet& tracks = scene.observations.tracks;
  if (tracks.n_frames() == 0) return;
  std::vector<Vec3> src, dst;
  src.reserve(tracks.ids.size());
  for (std::size_t j = 0; j < tracks.ids.size(); ++j) {
    src.push_back(scene.rest.x[tracks.ids[j]]);
    dst.push_back(tracks.frames[0][j]);
  }
  double rms = 0.0;
  for (std::size_t j = 0; j < src.size(); ++j)
    rms += (src[j] - dst[j]).squaredNorm();
  rms = std::sqrt(rms / src.size());
  if (rms < 1e-9) return;

  const auto [R, t] = umeyama_rigid(src, dst);
  for (Vec3& x : scene.rest.x) x = R * x + t;
  for (auto& frame : scene.contact_script.targets)
    for (Vec3& p : frame) p = R * p + t;
  warnings.push_back("estimate: applied rigid registration to the rest state "
                     "(rms offset " + std::to_string(rms) + " m)");
}

json metrics_for_frames(const LoadedTrajectory& pred,
                        const LoadedScene* truth_scene,
                        const LoadedTrajectory* truth_traj) {
  json frames = json::array();
  double sum_psnr = 0.0, sum_iou = 0.0, sum_cd = 0.0;
  int counted = 0;

  const std::vector<Camera>& cams = pred.cameras;
  for (std::size_t k = 0; k < pred.trajectory.snapshots.size(); ++k) {
    const int frame = pred.trajectory.start_frame + static_cast<int>(k);
    ParticleSet snap = pred.trajectory.snapshots[k];
    const RenderedFrame rp = render_views(snap, pred.colors, cams,
                                          pred.config.particle_spacing, 0);
    double f_psnr = 0.0, f_iou = 0.0, f_cd = 0.0;
    int views = 0;
    for (std::size_t c = 0; c < cams.size(); ++c) {
      MaskImage pm = MaskImage::zeros(cams[c].height, cams[c].width);
      {
        const auto radii =
            projected_radii(rp.points, pred.config.particle_spacing, cams[c]);
        std::vector<float> dummy(rp.points.size(), 1.f);
        pm = splat(rp.points, dummy, 1, radii, cams[c]).mask;
      }
      const ImageF& pi = rp.rgb[c];
      if (truth_scene != nullptr) {
        if (frame >= static_cast<int>(truth_scene->observations.masks.size()))
          continue;
        const MaskImage& tm = truth_scene->observations.masks[frame][c];
        const ImageF& ti = truth_scene->observations.rgb[frame][c];
        f_psnr += psnr(pi, ti);
        f_iou += iou(pm, tm);
        f_cd += chamfer2d(pm, tm);
      } else {
        const Trajectory& tt = truth_traj->trajectory;
        const int tk = frame - tt.start_frame;
        if (tk < 0 || tk >= static_cast<int>(tt.snapshots.size())) continue;
        const RenderedFrame rt = render_views(
            tt.snapshots[tk], truth_traj->colors, cams,
            truth_traj->config.particle_spacing, 0);
        std::vector<float> dummy(rt.points.size(), 1.f);
        const auto radii = projected_radii(
            rt.points, truth_traj->config.particle_spacing, cams[c]);
        const MaskImage tm = splat(rt.points, dummy, 1, radii, cams[c]).mask;
        f_psnr += psnr(pi, rt.rgb[c]);
        f_iou += iou(pm, tm);
        f_cd += chamfer2d(pm, tm);
      }
      ++views;
    }
    if (views == 0) continue;
    f_psnr /= views;
    f_iou /= views;
    f_cd /= views;
    frames.push_back({{"frame", frame + 1},  // 1-based for reporting
                      {"psnr", f_psnr},
                      {"iou", f_iou},
                      {"cd", f_cd}});
    sum_psnr += f_psnr;
    sum_iou += f_iou;
    sum_cd += f_cd;
    ++counted;
  }
  if (counted == 0) throw DataError("evaluate: no overlapping frames");
  json out;
  out["schema_version"] = 1;
  out["frames"] = frames;
  out["mean"] = {{"psnr", sum_psnr / counted},
                 {"iou", sum_iou / counted},
                 {"cd", sum_cd / counted}};
  return out;
}

EstimationPlan plan_from_json(const json& j, int train_frames,
                              std::vector<std::string>* warnings) {
  EstimationPlan plan = default_plan(train_frames, warnings);
  if (j.contains("stages")) {
    plan.stages.clear();
    for (const auto& sj : j["stages"]) {
      PlanStage st;
      st.batch_frames = sj.at("batch_frames");
      st.n_batches = sj.at("n_batches");
      const std::string kind = sj.at("kind");
      if (kind == "3D") st.kind = LossKind::ThreeD;
      else if (kind == "3D-full") st.kind = LossKind::ThreeDFull;
      else if (kind == "2D-full") st.kind = LossKind::TwoDFull;
      else throw FormatError("plan: unknown loss kind '" + kind + "'");
      st.iterations = sj.value("iterations", 150);
      plan.stages.push_back(st);
    }
  }
  if (j.contains("lr0")) plan.lr0 = j["lr0"];
  if (j.contains("lr_stage_decay")) plan.lr_stage_decay = j["lr_stage_decay"];
  if (j.contains("fd_step")) plan.fd_step = j["fd_step"];
  if (j.contains("grouping_weight")) plan.grouping_weight = j["grouping_weight"];
  if (j.contains("iterations")) {
    for (auto& st : plan.stages) st.iterations = j["iterations"];
  }
  return plan;
}

json plan_to_json(const EstimationPlan& plan) {
  json j;
  j["stages"] = json::array();
  for (const auto& st : plan.stages) {
    j["stages"].push_back({{"batch_frames", st.batch_frames},
                           {"n_batches", st.n_batches},
                           {"kind", loss_kind_name(st.kind)},
                           {"iterations", st.iterations}});
  }
  j["lr0"] = plan.lr0;
  j["lr_stage_decay"] = plan.lr_stage_decay;
  j["fd_step"] = plan.fd_step;
  j["grouping_weight"] = plan.grouping_weight;
  return j;
}

int cmd_gen_scene(const GlobalOpts& g, const std::string& spec_path,
                  const std::string& out, bool seed_set) {
  if (should_skip(g, out)) return 0;
  const auto t0 = std::chrono::steady_clock::now();
  std::ifstream in(spec_path);
  if (!in) throw DataError("gen-scene: cannot open '" + spec_path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("gen-scene: bad spec JSON: " + std::string(e.what()));
  }
  SyntheticSceneSpec spec = scene_spec_from_json(j);
  if (seed_set) spec.seed = g.seed;
  Scene scene = gen_scene(spec);
  BakeResult bake = bake_observations(scene, effective_workers(g));
  for (const auto& w : bake.warnings) std::cerr << "warning: " << w << "\n";
  SceneBundle bundle = make_scene_bundle(scene, bake);
  write_bundle(bundle, out);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_manifest(out, "gen-scene", g, {{"spec", spec_path}},
                 {{"config", config_to_json(spec.config)},
                  {"particles", scene.rest.size()},
                  {"frames", spec.frames}},
                 secs);
  std::cout << "gen-scene: " << scene.rest.size() << " particles, "
            << spec.frames << " frames -> " << out << "\n";
  return 0;
}

int cmd_simulate(const GlobalOpts& g, const std::string& scene_path,
                 int n_frames, const std::string& out) {
  if (should_skip(g, out)) return 0;
  const auto t0 = std::chrono::steady_clock::now();
  SceneBundle bundle = read_bundle(scene_path, LoadMode::Full);
  LoadedScene scene = load_scene(bundle);
  if (scene.true_segments.empty())
    throw DataError("simulate: bundle has no reference materials");
  if (n_frames < 1) n_frames = scene.frames - 1;

  std::vector<std::string> warnings;
  SimState state =
      make_sim_state(scene.rest, scene.true_segments, scene.config);
  Trajectory traj = simulate(
      state, scene.true_segments,
      scene.contact_script.n_frames() > 0 ? &scene.contact_script : nullptr,
      scene.config, n_frames, effective_workers(g), &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

  Scene shell;
  shell.spec.config = scene.config;
  shell.rest = scene.rest;
  shell.colors = scene.colors;
  shell.cameras = scene.cameras;
  SceneBundle out_bundle =
      make_trajectory_bundle(shell, scene.true_segments, traj);
  write_bundle(out_bundle, out);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_manifest(out, "simulate", g, {{"scene", scene_path}},
                 {{"frames", n_frames},
                  {"config", config_to_json(scene.config)}},
                 secs);
  std::cout << "simulate: " << n_frames << " frames -> " << out << "\n";
  return 0;
}

int cmd_estimate(const GlobalOpts& g, const std::string& scene_path,
                 const std::string& plan_path, int granularity, double nu,
                 const std::string& out) {
  if (should_skip(g, out)) return 0;
  const auto t0 = std::chrono::steady_clock::now();
  SceneBundle bundle = read_bundle(scene_path, LoadMode::Estimation);
  LoadedScene scene = load_scene(bundle);

  std::vector<std::string> warnings;
  align_rest_to_tracks(scene, warnings);

  OversegmentResult seg = oversegment(scene.rest.z_D, scene.rest.dim_D,
                                      scene.rest.z_A, scene.rest.dim_A,
                                      scene.rest.size(), granularity);
  for (const auto& w : seg.warnings) warnings.push_back(w);

  EstimationInput input;
  input.rest = scene.rest;
  input.rest.segment = seg.labels;
  input.init_segments.resize(seg.n_segments);
  for (int s = 0; s < seg.n_segments; ++s) {
    input.init_segments[s].id = s;
    input.init_segments[s].nu = nu;
  }
  input.contact = scene.contact_script;
  input.observations = scene.observations;
  input.colors = scene.colors;
  input.config = scene.config;
  input.train_frames = scene.train_frames;

  EstimationPlan plan;
  if (!plan_path.empty()) {
    std::ifstream in(plan_path);
    if (!in) throw DataError("estimate: cannot open plan '" + plan_path + "'");
    plan = plan_from_json(json::parse(in), scene.train_frames, &warnings);
  } else {
    plan = default_plan(scene.train_frames, &warnings);
  }

  EstimateReport report = estimate(input, plan, effective_workers(g));
  for (const auto& w : warnings) report.warnings.insert(report.warnings.begin(), w);

  json result;
  result["schema_version"] = 1;
  result["final_segments"] = segments_to_json(report.final_segments);
  result["labels"] = seg.labels;
  result["partial"] = report.partial;
  result["plan"] = plan_to_json(plan);
  result["config"] = config_to_json(scene.config);
  result["nu"] = nu;
  result["granularity"] = granularity;
  result["seconds"] = report.seconds;
  result["warnings"] = report.warnings;
  result["stages"] = json::array();
  for (const auto& st : report.stages) {
    result["stages"].push_back({{"kind", st.kind},
                                {"batch_frames", st.batch_frames},
                                {"n_batches", st.n_batches},
                                {"iterations_run", st.iterations_run},
                                {"aborted", st.aborted},
                                {"best_loss", st.best_loss},
                                {"best_loss_per_frame", st.best_loss_per_frame},
                                {"loss_trace", st.loss_trace},
                                {"segments", segments_to_json(st.segments)},
                                {"seconds", st.seconds}});
  }
  {
    std::ofstream o(out, std::ios::trunc);
    if (!o) throw DataError("estimate: cannot open '" + out + "'");
    o << result.dump(2) << "\n";
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_manifest(out, "estimate", g,
                 {{"scene", scene_path}, {"plan", plan_path}},
                 {{"granularity", granularity}}, secs);
  std::cout << "estimate: " << report.final_segments.size() << " segments";
  if (report.partial) std::cout << " (partial: 3D only)";
  std::cout << " -> " << out << "\n";
  return 0;
}

int cmd_predict(const GlobalOpts& g, const std::string& scene_path,
                const std::string& result_path, const std::string& range,
                const std::string& out) {
  if (should_skip(g, out)) return 0;
  const auto t0 = std::chrono::steady_clock::now();
  const auto [lo1, hi1] = parse_frame_range(range);
  SceneBundle bundle = read_bundle(scene_path, LoadMode::Estimation);
  LoadedScene scene = load_scene(bundle);

  std::ifstream in(result_path);
  if (!in) throw DataError("predict: cannot open '" + result_path + "'");
  const json result = json::parse(in);
  std::vector<MaterialSegment> segments;
  for (const auto& sj : result.at("final_segments"))
    segments.push_back(segment_from_json(sj));
  const std::vector<int> labels = result.at("labels").get<std::vector<int>>();
  if (labels.size() != scene.rest.size())
    throw DataError("predict: label count does not match the scene");
  scene.rest.segment = labels;

  const int lo = lo1 - 1, hi = hi1 - 1;  // 0-based snapshots
  std::vector<std::string> warnings;
  SimState state = make_sim_state(scene.rest, segments, scene.config);
  Trajectory traj = simulate(
      state, segments,
      scene.contact_script.n_frames() > 0 ? &scene.contact_script : nullptr,
      scene.config, hi, effective_workers(g), &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

  Trajectory window;
  window.start_frame = lo;
  for (int f = lo; f <= hi; ++f) window.snapshots.push_back(traj.snapshots[f]);

  Scene shell;
  shell.spec.config = scene.config;
  shell.rest = scene.rest;
  shell.colors = scene.colors;
  shell.cameras = scene.cameras;
  SceneBundle out_bundle = make_trajectory_bundle(shell, segments, window);
  write_bundle(out_bundle, out);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_manifest(out, "predict", g,
                 {{"scene", scene_path}, {"result", result_path}},
                 {{"frames", range}}, secs);
  std::cout << "predict: frames " << range << " -> " << out << "\n";
  return 0;
}

int cmd_evaluate(const GlobalOpts& g, const std::string& pred_path,
                 const std::string& truth_path, const std::string& out) {
  if (should_skip(g, out)) return 0;
  const auto t0 = std::chrono::steady_clock::now();
  SceneBundle pred_bundle = read_bundle(pred_path, LoadMode::Full);
  LoadedTrajectory pred = load_trajectory(pred_bundle);

  SceneBundle truth_bundle = read_bundle(truth_path, LoadMode::Full);
  json metrics;
  if (truth_bundle.kind == "scene") {
    LoadedScene truth = load_scene(truth_bundle);
    if (truth.observations.masks.empty())
      throw DataError("evaluate: truth scene has no stored observations");
    metrics = metrics_for_frames(pred, &truth, nullptr);
  } else {
    LoadedTrajectory truth = load_trajectory(truth_bundle);
    metrics = metrics_for_frames(pred, nullptr, &truth);
  }
  {
    std::ofstream o(out, std::ios::trunc);
    if (!o) throw DataError("evaluate: cannot open '" + out + "'");
    o << metrics.dump(2) << "\n";
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_manifest(out, "evaluate", g,
                 {{"pred", pred_path}, {"truth", truth_path}}, {}, secs);
  std::cout << "evaluate: mean psnr " << metrics["mean"]["psnr"] << " dB, iou "
            << metrics["mean"]["iou"] << ", cd " << metrics["mean"]["cd"]
            << " px -> " << out << "\n";
  return 0;
}

int cmd_render(const GlobalOpts& g, const std::string& traj_path, int view,
               const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  SceneBundle bundle = read_bundle(traj_path, LoadMode::Full);
  LoadedTrajectory traj = load_trajectory(bundle);
  if (view < 0 || view >= static_cast<int>(traj.cameras.size()))
    throw DataError("render: view index out of range");
  fs::create_directories(out_dir);
  const Camera& cam = traj.cameras[view];
  for (std::size_t k = 0; k < traj.trajectory.snapshots.size(); ++k) {
    const int frame = traj.trajectory.start_frame + static_cast<int>(k);
    const RenderedFrame rf =
        render_views(traj.trajectory.snapshots[k], traj.colors, {cam},
                     traj.config.particle_spacing, 0);
    char name[64];
    std::snprintf(name, sizeof(name), "frame_%04d", frame + 1);
    write_ppm(rf.rgb[0], out_dir + "/" + name + ".ppm");
    std::vector<float> dummy(rf.points.size(), 1.f);
    const auto radii =
        projected_radii(rf.points, traj.config.particle_spacing, cam);
    write_pgm(splat(rf.points, dummy, 1, radii, cam).mask,
              out_dir + "/" + name + ".pgm");
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_manifest(out_dir + "/render", "render", g, {{"trajectory", traj_path}},
                 {{"view", view}}, secs);
  std::cout << "render: " << traj.trajectory.snapshots.size()
            << " frames of view " << view << " -> " << out_dir << "\n";
  return 0;
}

void print_error_json(const std::string& kind, const std::string& message) {
  json e;
  e["error"] = kind;
  e["message"] = message;
  std::cerr << e.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-material elastic system identification toolkit"};
  app.require_subcommand(1);
  GlobalOpts g;
  app.add_option("--workers", g.workers, "Worker threads (0 = hardware)");
  bool seed_set = false;
  app.add_option("--seed", g.seed, "Noise seed")->each([&](const std::string&) {
    seed_set = true;
  });
  app.add_flag("--skip-existing", g.skip_existing,
               "Skip commands whose output already exists");

  std::string spec_path, scene_path, out_path, plan_path, result_path,
      pred_path, truth_path, traj_path, range = "1:1", out_dir;
  int n_frames = 0, granularity = 8, view = 0;
  double nu = 0.3;

  auto* gen = app.add_subcommand("gen-scene", "Generate a synthetic scene");
  gen->add_option("spec", spec_path, "Scene spec JSON")->required();
  gen->add_option("-o,--output", out_path, "Output .scene bundle")->required();

  auto* sim = app.add_subcommand("simulate", "Forward-simulate a scene");
  sim->add_option("scene", scene_path, "Scene bundle")->required();
  sim->add_option("--frames", n_frames, "Frame count (default: scene frames)");
  sim->add_option("-o,--output", out_path, "Output trajectory bundle")
      ->required();

  auto* est = app.add_subcommand("estimate", "Estimate segment materials");
  est->add_option("scene", scene_path, "Observation bundle")->required();
  est->add_option("--plan", plan_path, "Estimation plan JSON");
  est->add_option("--granularity", granularity, "Oversegmentation target");
  est->add_option("--nu", nu, "Fixed Poisson ratio");
  est->add_option("-o,--output", out_path, "Output result JSON")->required();

  auto* pre = app.add_subcommand("predict", "Simulate with estimated materials");
  pre->add_option("scene", scene_path, "Scene bundle")->required();
  pre->add_option("result", result_path, "Estimation result JSON")->required();
  pre->add_option("--frames", range, "1-based inclusive range a:b")->required();
  pre->add_option("-o,--output", out_path, "Output trajectory bundle")
      ->required();

  auto* eva = app.add_subcommand("evaluate", "Score a predicted trajectory");
  eva->add_option("pred", pred_path, "Predicted trajectory bundle")->required();
  eva->add_option("truth", truth_path, "Truth scene or trajectory bundle")
      ->required();
  eva->add_option("-o,--output", out_path, "Output metrics JSON")->required();

  auto* ren = app.add_subcommand("render", "Render a trajectory to images");
  ren->add_option("trajectory", traj_path, "Trajectory bundle")->required();
  ren->add_option("--view", view, "Camera index");
  ren->add_option("-o,--output", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_scene(g, spec_path, out_path, seed_set);
    if (sim->parsed()) return cmd_simulate(g, scene_path, n_frames, out_path);
    if (est->parsed())
      return cmd_estimate(g, scene_path, plan_path, granularity, nu, out_path);
    if (pre->parsed())
      return cmd_predict(g, scene_path, result_path, range, out_path);
    if (eva->parsed()) return cmd_evaluate(g, pred_path, truth_path, out_path);
    if (ren->parsed()) return cmd_render(g, traj_path, view, out_dir);
  } catch (const InvalidParameterError& e) {
    print_error_json("invalid-parameter", e.what());
    return 2;
  } catch (const NumericError& e) {
    print_error_json("numeric", e.what());
    return 4;
  } catch (const DataError& e) {
    print_error_json("data", e.what());
    return 3;
  } catch (const Error& e) {
    print_error_json("error", e.what());
    return 3;
  } catch (const std::exception& e) {
    print_error_json("internal", e.what());
    return 3;
  }
  return 2;
}
