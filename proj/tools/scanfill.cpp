#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <spdlog/spdlog.h>

#include "hemisphere_fixture.hpp"
#include "scanfill/error.hpp"
#include "scanfill/evalx.hpp"
#include "scanfill/guidance.hpp"
#include "scanfill/ingest.hpp"
#include "scanfill/io.hpp"
#include "scanfill/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

namespace fs = std::filesystem;
using namespace scanfill;

namespace {

std::vector<double> parse_numbers(const std::string& text, std::size_t expected, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      fail(ErrorCode::kInvalidArgument, what + ": bad number '" + item + "'");
    }
  }
  if (expected != 0 && out.size() != expected) {
    fail(ErrorCode::kInvalidArgument, what + ": expected " + std::to_string(expected) + " numbers");
  }
  return out;
}

struct InputOptions {
  std::string depth, mask, intrinsics, pose;
  std::string points, scene;
  std::string plane;
  double plane_threshold = 0.01;
};

void add_input_options(CLI::App* cmd, InputOptions& in) {
  cmd->add_option("--depth", in.depth, "16-bit PNG z-depth in millimeters (depth camera)");
  cmd->add_option("--mask", in.mask, "8-bit PNG foreground mask (depth camera)");
  cmd->add_option("--intrinsics", in.intrinsics, "intrinsics file: 'fx fy cx cy' then 'width height'");
  cmd->add_option("--pose", in.pose, "camera-to-world pose file (default identity)");
  cmd->add_option("--points", in.points, "object points, PLY or XYZ (LiDAR, sensor frame)");
  cmd->add_option("--scene", in.scene, "non-object scene points for the ground plane (LiDAR)");
  cmd->add_option("--plane", in.plane, "ground plane 'a,b,c,d' in the input frame; skips RANSAC");
  cmd->add_option("--plane-threshold", in.plane_threshold, "RANSAC inlier distance, normalized units");
}

SensorObservation load_observation(const InputOptions& in, SensorKind kind) {
  SensorObservation raw;
  if (kind == SensorKind::kDepthCamera) {
    if (in.depth.empty() || in.mask.empty() || in.intrinsics.empty()) {
      fail(ErrorCode::kInvalidArgument, "depth-camera input needs --depth, --mask and --intrinsics");
    }
    const CameraPose pose = in.pose.empty() ? CameraPose{} : read_pose(in.pose);
    raw = depth_to_observation(read_png_gray16(in.depth), read_png8(in.mask), read_intrinsics(in.intrinsics),
                               pose);
  } else {
    if (in.points.empty()) fail(ErrorCode::kInvalidArgument, "LiDAR input needs --points");
    const auto object = load_points(in.points);
    const auto scene = in.scene.empty() ? std::vector<Vec3>{} : load_points(in.scene);
    raw = lidar_to_observation(object, scene);
  }
  PrepareOptions prep;
  prep.plane_threshold = in.plane_threshold;
  if (!in.plane.empty()) {
    const auto v = parse_numbers(in.plane, 4, "--plane");
    const Vec3 n(v[0], v[1], v[2]);
    if (!(n.norm() > 0.0)) fail(ErrorCode::kInvalidArgument, "--plane: zero normal");
    prep.plane = Plane{n / n.norm(), v[3] / n.norm()};
  } else if (raw.background.size() < 3) {
    fail(ErrorCode::kNoPlaneFound, "no background points to fit a ground plane; pass --plane");
  }
  return prepare_observation(raw, prep);
}

std::unique_ptr<GuidanceProvider> make_guidance(const std::string& spec) {
  if (spec == "none") return nullptr;
  if (spec.rfind("mock:", 0) == 0) {
    auto refs = load_references(spec.substr(5));
    spdlog::info("mock guidance: {} reference views", refs.size());
    return std::make_unique<DenoiserGuidance>(std::make_shared<MockDenoiser>(std::move(refs)));
  }
  if (spec.rfind("remote:", 0) == 0) {
    RemoteGuidanceConfig cfg;
    cfg.url = spec.substr(7);
    auto remote = std::make_unique<RemoteGuidance>(cfg.with_env_override());
    spdlog::info("remote guidance at {}: model {}", remote->config().url, remote->health());
    return remote;
  }
  fail(ErrorCode::kInvalidArgument, "--guidance must be none, mock:<dir> or remote:<url>");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path.string());
  out << text;
}

std::vector<Vec3> surface_points(const TriangleMesh& mesh, int samples, std::uint64_t seed) {
  if (!mesh.triangles.empty()) return sample_mesh(mesh, samples, seed);
  if (mesh.vertices.empty()) fail(ErrorCode::kInvalidArgument, "empty point set");
  return mesh.vertices;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shape completion of partial scans with score-distillation guidance"};
  app.require_subcommand(1);

  // complete
  auto* complete = app.add_subcommand("complete", "complete a partial scan into a closed surface");
  std::string config_path, prompt, guidance_spec = "none", out_dir;
  std::optional<std::uint64_t> seed;
  int log_every = 100;
  InputOptions inputs;
  complete->add_option("--config", config_path, "key = value training config");
  add_input_options(complete, inputs);
  complete->add_option("--prompt", prompt, "text prompt (overrides the config)");
  complete->add_option("--guidance", guidance_spec, "none | mock:<dir> | remote:<url>");
  complete->add_option("--seed", seed, "run seed (overrides the config)");
  complete->add_option("--out", out_dir, "output directory")->required();
  complete->add_option("--log-every", log_every, "progress line every N iterations");

  // eval
  auto* eval = app.add_subcommand("eval", "Chamfer distance between a predicted and a reference surface");
  std::string pred_path, gt_path;
  bool use_icp = false;
  int samples = 100000;
  std::uint64_t eval_seed = 0;
  double meters_per_unit = 1.0;
  eval->add_option("--pred", pred_path, "predicted mesh or points (PLY)")->required();
  eval->add_option("--gt", gt_path, "reference mesh or points (PLY)")->required();
  eval->add_flag("--icp", use_icp, "refine the alignment with ICP first");
  eval->add_option("--samples", samples, "surface samples per mesh");
  eval->add_option("--seed", eval_seed, "sampling seed");
  eval->add_option("--meters-per-unit", meters_per_unit, "scale of the input coordinates");

  // references
  auto* refs = app.add_subcommand("references", "render reference views for mock guidance");
  std::string ref_config, ref_out, sphere_spec, color_spec = "0.8,0.45,0.25", ckpt_path;
  std::string azimuth_spec, elevation_spec;
  InputOptions ref_inputs;
  refs->add_option("--config", ref_config, "training config (render size, sampling, gamma0)");
  add_input_options(refs, ref_inputs);
  refs->add_option("--sphere", sphere_spec, "target sphere 'x,y,z,r' in the input frame");
  refs->add_option("--color", color_spec, "sphere color 'r,g,b'");
  refs->add_option("--checkpoint", ckpt_path, "target field checkpoint (training frame)");
  refs->add_option("--azimuths", azimuth_spec, "comma-separated total azimuths (default 12 every 30)");
  refs->add_option("--elevations", elevation_spec, "comma-separated elevations (default sensor's down to 0)");
  refs->add_option("--out", ref_out, "output directory")->required();

  // demo
  auto* demo = app.add_subcommand("demo", "write a synthetic hemisphere scan and its mock references");
  std::string demo_out;
  demo->add_option("--out", demo_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*complete) {
      TrainConfig config = config_path.empty() ? TrainConfig{} : load_config(config_path);
      if (!prompt.empty()) config.prompt = prompt;
      if (seed) config.seed = *seed;
      config.validate();
      auto guidance = make_guidance(guidance_spec);
      const SensorObservation obs = load_observation(inputs, config.kind);
      spdlog::info("{} observed points, {} rays, sensor elevation {:.2f} deg", obs.points.size(),
                   obs.rays.size(), sensor_elevation(obs));

      const fs::path out(out_dir);
      fs::create_directories(out / "checkpoints");
      write_text(out / "config.txt", format_config(config));
      {
        std::ostringstream n;
        n.precision(17);
        const auto& c = obs.normalization.center;
        n << "center " << c.x() << ' ' << c.y() << ' ' << c.z() << "\nscale " << obs.normalization.scale << '\n';
        write_text(out / "normalization.txt", n.str());
      }
      std::ofstream log(out / "train_log.csv");
      log << log_csv_header() << '\n';
      TrainCallbacks cb;
      cb.on_iteration = [&](const LogRow& row, const FieldParams&) {
        log << log_csv_line(row) << '\n';
        if (log_every > 0 && row.iteration % log_every == 0) {
          spdlog::info("iter {} epoch {} total {:.6g} L_p {:.4g} sds {:.4g}", row.iteration, row.epoch,
                       row.losses.total, row.losses.point, row.sds_grad_norm);
        }
      };
      cb.on_checkpoint = [&](int epoch, const FieldParams& params) {
        char name[64];
        std::snprintf(name, sizeof(name), "epoch_%05d.ckpt", epoch);
        write_checkpoint(out / "checkpoints" / name, params, config.density);
      };
      const TrainResult result = train(config, obs, guidance.get(), cb);
      write_checkpoint(out / "final.ckpt", result.params, config.density);
      write_mesh_ply(out / "mesh.ply", result.mesh);
      write_mesh_ply(out / "mesh_normalized.ply", result.mesh_normalized);
      if (result.guidance_failures > 0) {
        spdlog::warn("{} iterations ran without guidance", result.guidance_failures);
      }
      spdlog::info("wrote {} ({} vertices, {} triangles)", (out / "mesh.ply").string(),
                   result.mesh.vertices.size(), result.mesh.triangles.size());
    } else if (*eval) {
      if (!(meters_per_unit > 0.0)) fail(ErrorCode::kInvalidArgument, "--meters-per-unit must be > 0");
      if (samples < 1) fail(ErrorCode::kInvalidArgument, "--samples must be >= 1");
      std::vector<Vec3> pred = surface_points(read_ply(pred_path), samples, eval_seed);
      std::vector<Vec3> gt = surface_points(read_ply(gt_path), samples, eval_seed + 1);
      for (auto* set : {&pred, &gt})
        for (Vec3& p : *set) p *= meters_per_unit;
      nlohmann::json record;
      if (use_icp) {
        const IcpResult icp = icp_align(pred, gt, RigidTransform{}, 50, 1e-10);
        for (Vec3& p : pred) p = icp.transform.apply(p);
        record["icp_converged"] = icp.converged;
        record["icp_rms_m"] = icp.rms;
        record["icp_iterations"] = icp.iterations;
      }
      const double cd = chamfer_mm(pred, gt);
      record["chamfer_mm"] = cd;
      record["icp"] = use_icp;
      record["samples"] = samples;
      record["seed"] = eval_seed;
      record["pred"] = pred_path;
      record["gt"] = gt_path;
      std::cout << cd << '\n' << record.dump() << '\n';
    } else if (*refs) {
      TrainConfig config = ref_config.empty() ? TrainConfig{} : load_config(ref_config);
      const SensorObservation obs = load_observation(ref_inputs, config.kind);
      std::vector<double> azimuths, elevations;
      if (azimuth_spec.empty()) {
        for (int k = 0; k < 12; ++k) azimuths.push_back(wrap_degrees(config.gamma0_azimuth + 30.0 * k));
      } else {
        azimuths = parse_numbers(azimuth_spec, 0, "--azimuths");
      }
      if (elevation_spec.empty()) {
        for (double e = sensor_elevation(obs); e > 0.0; e -= 15.0) elevations.push_back(e);
        elevations.push_back(0.0);
      } else {
        elevations = parse_numbers(elevation_spec, 0, "--elevations");
      }
      std::vector<ReferenceView> views;
      if (!sphere_spec.empty() == !ckpt_path.empty()) {
        fail(ErrorCode::kInvalidArgument, "give exactly one of --sphere and --checkpoint");
      }
      if (!sphere_spec.empty()) {
        const auto s = parse_numbers(sphere_spec, 4, "--sphere");
        const auto c = parse_numbers(color_spec, 3, "--color");
        const AnalyticSphere sphere(obs.normalization.apply(Vec3(s[0], s[1], s[2])),
                                    s[3] * obs.normalization.scale, Vec3(c[0], c[1], c[2]));
        views = render_references(sphere, config, obs, azimuths, elevations);
      } else {
        DensityParams density;
        const FieldParams params = read_checkpoint(ckpt_path, &density);
        config.density = density;
        const NeuralField field(params);
        views = render_references(field, config, obs, azimuths, elevations);
      }
      save_references(ref_out, views);
      spdlog::info("wrote {} reference views to {}", views.size(), ref_out);
    } else if (*demo) {
      using scanfill::testing::HemisphereFixture;
      const fs::path out(demo_out);
      fs::create_directories(out);
      const auto images = HemisphereFixture::sensor_images();
      write_png_gray16(out / "depth.png", images.depth.width, images.depth.height, images.depth.pixels);
      write_png_gray8(out / "mask.png", images.mask.width, images.mask.height, images.mask.pixels);
      write_intrinsics(out / "intrinsics.txt", images.intrinsics);
      write_pose(out / "pose.txt", images.pose);
      const TrainConfig config = HemisphereFixture::config(0);
      write_text(out / "config.txt", format_config(config));
      const HemisphereFixture f = HemisphereFixture::make();
      save_references(out / "references", f.references(config));
      std::vector<Vec3> gt = HemisphereFixture::ground_truth(100000, 1);
      write_points_ply_ascii(out / "sphere_gt.ply", gt);
      std::cout << "scanfill complete --config " << (out / "config.txt").string() << " --depth "
                << (out / "depth.png").string() << " --mask " << (out / "mask.png").string()
                << " --intrinsics " << (out / "intrinsics.txt").string() << " --pose "
                << (out / "pose.txt").string() << " --guidance mock:" << (out / "references").string()
                << " --out " << (out / "run").string() << '\n';
    }
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
