#include "scanfill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "scanfill/error.hpp"
#include "scanfill/evalx.hpp"

namespace scanfill {

using Eigen::Matrix3Xd;
using Eigen::VectorXd;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class Stream : std::uint64_t { kInit = 1, kBatch, kSensor, kAux, kSds, kSdsRender };

std::uint64_t derive_seed(std::uint64_t seed, long iteration, Stream stream) {
  return splitmix64(splitmix64(seed ^ static_cast<std::uint64_t>(stream) * 0x2545f4914f6cdd1dULL) +
                    static_cast<std::uint64_t>(iteration));
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// ---- Config keys --------------------------------------------------------------------------

struct Key {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

double to_double(const std::string& v) {
  std::size_t used = 0;
  const double x = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument(v);
  return x;
}

long long to_integer(const std::string& v) {
  std::size_t used = 0;
  const long long x = std::stoll(v, &used);
  if (used != v.size()) throw std::invalid_argument(v);
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(v);
}

std::string fmt_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

Key dbl(double TrainConfig::*field) {
  return {[field](TrainConfig& c, const std::string& v) { c.*field = to_double(v); },
          [field](const TrainConfig& c) { return fmt_double(c.*field); }};
}

Key integer(int TrainConfig::*field) {
  return {[field](TrainConfig& c, const std::string& v) { c.*field = static_cast<int>(to_integer(v)); },
          [field](const TrainConfig& c) { return std::to_string(c.*field); }};
}

template <typename Get>
Key nested_double(Get get) {
  return {[get](TrainConfig& c, const std::string& v) { get(c) = to_double(v); },
          [get](const TrainConfig& c) { return fmt_double(get(const_cast<TrainConfig&>(c))); }};
}

template <typename Get>
Key nested_int(Get get) {
  return {[get](TrainConfig& c, const std::string& v) { get(c) = static_cast<int>(to_integer(v)); },
          [get](const TrainConfig& c) { return std::to_string(get(const_cast<TrainConfig&>(c))); }};
}

const std::map<std::string, Key>& config_keys() {
  static const std::map<std::string, Key> keys = [] {
    std::map<std::string, Key> k;
    k["epochs"] = integer(&TrainConfig::epochs);
    k["iterations_per_epoch"] = integer(&TrainConfig::iterations_per_epoch);
    k["learning_rate"] = dbl(&TrainConfig::learning_rate);
    k["weights.mask"] = nested_double([](TrainConfig& c) -> double& { return c.weights.mask; });
    k["weights.depth"] = nested_double([](TrainConfig& c) -> double& { return c.weights.depth; });
    k["weights.point"] = nested_double([](TrainConfig& c) -> double& { return c.weights.point; });
    k["weights.eikonal"] = nested_double([](TrainConfig& c) -> double& { return c.weights.eikonal; });
    k["weights.plane"] = nested_double([](TrainConfig& c) -> double& { return c.weights.plane; });
    k["sds_weight"] = dbl(&TrainConfig::sds_weight);
    k["sampling.near"] = nested_double([](TrainConfig& c) -> double& { return c.sampling.near; });
    k["sampling.far"] = nested_double([](TrainConfig& c) -> double& { return c.sampling.far; });
    k["sampling.samples_per_ray"] =
        nested_int([](TrainConfig& c) -> int& { return c.sampling.samples_per_ray; });
    k["sampling.stratified"] = {
        [](TrainConfig& c, const std::string& v) { c.sampling.stratified = to_bool(v); },
        [](const TrainConfig& c) { return std::string(c.sampling.stratified ? "true" : "false"); }};
    k["render_width"] = integer(&TrainConfig::render_width);
    k["render_height"] = integer(&TrainConfig::render_height);
    k["pixel_batch"] = integer(&TrainConfig::pixel_batch);
    k["aux_samples"] = integer(&TrainConfig::aux_samples);
    k["kind"] = {[](TrainConfig& c, const std::string& v) {
                   if (v == "depth_camera") c.kind = SensorKind::kDepthCamera;
                   else if (v == "lidar") c.kind = SensorKind::kLidar;
                   else throw std::invalid_argument(v);
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.kind == SensorKind::kLidar ? "lidar" : "depth_camera");
                 }};
    k["init_radius"] = dbl(&TrainConfig::init_radius);
    k["prompt"] = {[](TrainConfig& c, const std::string& v) { c.prompt = v; },
                   [](const TrainConfig& c) { return c.prompt; }};
    k["gamma0_azimuth"] = dbl(&TrainConfig::gamma0_azimuth);
    k["seed"] = {[](TrainConfig& c, const std::string& v) {
                   std::size_t used = 0;
                   c.seed = std::stoull(v, &used);
                   if (used != v.size() || v.front() == '-') throw std::invalid_argument(v);
                 },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }};
    k["guidance_scale"] = dbl(&TrainConfig::guidance_scale);
    k["grad_clip"] = dbl(&TrainConfig::grad_clip);
    k["checkpoint_every"] = integer(&TrainConfig::checkpoint_every);
    k["mesh_resolution"] = integer(&TrainConfig::mesh_resolution);
    k["on_guidance_failure"] = {
        [](TrainConfig& c, const std::string& v) {
          if (v == "fail") c.on_guidance_failure = GuidanceFailurePolicy::kFail;
          else if (v == "continue") c.on_guidance_failure = GuidanceFailurePolicy::kContinue;
          else throw std::invalid_argument(v);
        },
        [](const TrainConfig& c) {
          return std::string(c.on_guidance_failure == GuidanceFailurePolicy::kFail ? "fail" : "continue");
        }};
    k["render_cutoff"] = dbl(&TrainConfig::render_cutoff);
    k["lidar_render_fov_deg"] = dbl(&TrainConfig::lidar_render_fov_deg);
    k["field.encoding_levels"] = nested_int([](TrainConfig& c) -> int& { return c.field.encoding.levels; });
    k["field.include_input"] = {
        [](TrainConfig& c, const std::string& v) { c.field.encoding.include_input = to_bool(v); },
        [](const TrainConfig& c) { return std::string(c.field.encoding.include_input ? "true" : "false"); }};
    k["field.sdf_width"] = nested_int([](TrainConfig& c) -> int& { return c.field.sdf_width; });
    k["field.color_width"] = nested_int([](TrainConfig& c) -> int& { return c.field.color_width; });
    k["density.alpha"] = nested_double([](TrainConfig& c) -> double& { return c.density.alpha; });
    k["density.beta"] = nested_double([](TrainConfig& c) -> double& { return c.density.beta; });
    k["roi.half_extent"] = {
        [](TrainConfig& c, const std::string& v) {
          const double h = to_double(v);
          c.roi = Box3{Vec3::Constant(-h), Vec3::Constant(h)};
        },
        [](const TrainConfig& c) { return fmt_double(c.roi.hi.x()); }};
    return k;
  }();
  return keys;
}

}  // namespace

double TrainConfig::effective_init_radius() const {
  if (init_radius > 0.0) return init_radius;
  return kind == SensorKind::kLidar ? 0.9 : 0.5;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) fail(ErrorCode::kInvalidArgument, std::string("train config: ") + what);
  };
  require(epochs >= 1 && iterations_per_epoch >= 1, "epochs and iterations_per_epoch must be >= 1");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be > 0");
  weights.validate();
  require(sds_weight >= 0.0 && std::isfinite(sds_weight), "sds_weight must be >= 0");
  sampling.validate();
  require(render_width >= 1 && render_height >= 1, "render size must be >= 1");
  require(pixel_batch >= 1 && aux_samples >= 1, "pixel_batch and aux_samples must be >= 1");
  require(init_radius >= 0.0 && std::isfinite(init_radius), "init_radius must be >= 0");
  require(std::isfinite(gamma0_azimuth), "gamma0_azimuth must be finite");
  require(guidance_scale > 0.0, "guidance_scale must be > 0");
  require(grad_clip > 0.0, "grad_clip must be > 0");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(mesh_resolution >= 2, "mesh_resolution must be >= 2");
  require(render_cutoff >= 0.0 && render_cutoff < 1.0, "render_cutoff must be in [0, 1)");
  require(lidar_render_fov_deg > 0.0 && lidar_render_fov_deg < 180.0, "lidar_render_fov_deg must be in (0, 180)");
  require(field.encoding.levels >= 0 && field.sdf_width >= 1 && field.color_width >= 1, "field sizes");
  density.validate();
  require((roi.hi.array() > roi.lo.array()).all(), "roi must be non-empty");
}

TrainConfig parse_config(std::istream& in, const std::string& source) {
  TrainConfig config;
  const auto& keys = config_keys();
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    // Trailing comments are stripped, except from prompts.
    std::string body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    if (body.rfind("prompt", 0) != 0 && hash != std::string::npos) body = trim(line.substr(0, hash));
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(number) + ": ";
    if (eq == std::string::npos) fail(ErrorCode::kFormatError, where + "expected key = value");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const auto it = keys.find(key);
    if (it == keys.end()) fail(ErrorCode::kFormatError, where + "unknown key '" + key + "'");
    try {
      it->second.set(config, value);
    } catch (const std::logic_error&) {
      fail(ErrorCode::kFormatError, where + "bad value '" + value + "' for " + key);
    }
  }
  config.validate();
  return config;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open config " + path.string());
  return parse_config(in, path.string());
}

std::string format_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [name, key] : config_keys()) out += name + " = " + key.get(config) + "\n";
  return out;
}

// ---- Curriculum ------------------------------------------------------------------------------

double curriculum_nu(int epoch) {
  if (epoch >= 120) return 180.0;
  if (epoch >= 100) return 90.0;
  if (epoch >= 80) return 60.0;
  if (epoch >= 50) return 45.0;
  if (epoch >= 20) return 30.0;
  return 0.0;
}

CurriculumState CurriculumState::at(int epoch, double xi0) {
  if (epoch < 0) fail(ErrorCode::kInvalidArgument, "curriculum: negative epoch");
  return CurriculumState{epoch, curriculum_nu(epoch), epoch >= 20, xi0};
}

CameraSample curriculum_sample(const CurriculumState& state, SensorKind kind, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  CameraSample s;
  // Draws happen unconditionally so the stream layout does not depend on the epoch.
  const double ua = unit(rng), ue = unit(rng), ud = unit(rng);
  s.gamma_azimuth = state.nu * (2.0 * ua - 1.0);
  if (state.elevation_enabled) {
    if (kind == SensorKind::kLidar) {
      s.gamma_elevation = state.xi0 * (2.0 * ue - 1.0);
      s.distance_scale = 1.0 + ud;
    } else {
      s.gamma_elevation = -state.xi0 * ue;
    }
  }
  return s;
}

CameraSample curriculum_sample(const CurriculumState& state, SensorKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return curriculum_sample(state, kind, rng);
}

double wrap_degrees(double deg) {
  double w = std::fmod(deg, 360.0);
  if (w <= -180.0) w += 360.0;
  if (w > 180.0) w -= 360.0;
  return w;
}

std::string view_suffix(double gamma0_azimuth, double gamma_azimuth, double elevation_deg) {
  if (elevation_deg >= 60.0) return "overhead view";
  if (elevation_deg <= -15.0) return "bottom view";
  const double theta = std::abs(wrap_degrees(gamma0_azimuth + gamma_azimuth));
  if (theta <= 45.0) return "front view";
  if (theta <= 135.0) return "side view";
  return "back view";
}

std::string view_text(const std::string& base, double gamma0_azimuth, double gamma_azimuth,
                      double elevation_deg) {
  return base + ", " + view_suffix(gamma0_azimuth, gamma_azimuth, elevation_deg);
}

CameraPose curriculum_camera(const CameraPose& c0, const Plane& plane, const CameraSample& sample) {
  CameraPose pose = camera_update(c0, plane, sample.gamma_azimuth, sample.gamma_elevation);
  pose.translation *= sample.distance_scale;
  return pose;
}

// ---- Optimizer -------------------------------------------------------------------------------

AdamState AdamState::zeros(Eigen::Index size) {
  AdamState s;
  s.m = VectorXd::Zero(size);
  s.v = VectorXd::Zero(size);
  return s;
}

void adam_step(VectorXd& params, const VectorXd& grads, AdamState& state, double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    fail(ErrorCode::kInvalidArgument, "adam: shape mismatch");
  }
  if (!(lr > 0.0)) fail(ErrorCode::kInvalidArgument, "adam: learning rate must be > 0");
  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

double clip_global_norm(VectorXd& grad, double max_norm) {
  const double norm = grad.norm();
  if (norm > max_norm) grad *= max_norm / norm;
  return norm;
}

// ---- Logging ---------------------------------------------------------------------------------

std::string log_csv_header() {
  return "iteration,epoch,loss_p,loss_m,loss_d,loss_eikonal,loss_plane,total,sds_grad_norm,azimuth,"
         "elevation";
}

std::string log_csv_line(const LogRow& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.iteration << ',' << r.epoch << ',' << r.losses.point << ',' << r.losses.mask << ','
     << r.losses.depth << ',' << r.losses.eikonal << ',' << r.losses.plane << ',' << r.losses.total
     << ',';
  if (std::isnan(r.sds_grad_norm)) os << "nan";
  else os << r.sds_grad_norm;
  os << ',' << r.azimuth << ',' << r.elevation;
  return os.str();
}

// ---- Training --------------------------------------------------------------------------------

double sensor_elevation(const SensorObservation& obs) {
  if (!obs.plane) fail(ErrorCode::kInvalidArgument, "observation has no ground plane");
  return elevation_of(obs.pose, obs.plane->oriented_toward(obs.pose.translation));
}

CameraIntrinsics sds_intrinsics(const TrainConfig& config, const SensorObservation& obs) {
  if (obs.intrinsics) return obs.intrinsics->resized(config.render_width, config.render_height);
  const double half = deg2rad(0.5 * config.lidar_render_fov_deg);
  CameraIntrinsics k;
  k.width = config.render_width;
  k.height = config.render_height;
  k.fx = k.fy = 0.5 * config.render_width / std::tan(half);
  k.cx = 0.5 * (config.render_width - 1);
  k.cy = 0.5 * (config.render_height - 1);
  return k;
}

TriangleMesh extract_mesh(const FieldParams& params, const Box3& roi, int resolution) {
  return marching_cubes([&](const Matrix3Xd& p) { return sdf_values(params, p); }, roi, resolution);
}

TriangleMesh to_original_frame(const TriangleMesh& mesh, const Normalization& normalization) {
  TriangleMesh out = mesh;
  for (Vec3& v : out.vertices) v = normalization.invert(v);
  return out;
}

std::vector<ReferenceView> render_references(const RadianceField& field, const TrainConfig& config,
                                             const SensorObservation& obs,
                                             const std::vector<double>& azimuths_deg,
                                             const std::vector<double>& elevations_deg) {
  const Plane plane = obs.plane.value_or(Plane{}).oriented_toward(obs.pose.translation);
  const double xi0 = sensor_elevation(obs);
  const CameraIntrinsics intr = sds_intrinsics(config, obs);
  RenderOptions options;
  options.clip_box = config.roi;
  SamplingConfig sampling = config.sampling;
  sampling.stratified = false;
  std::vector<ReferenceView> refs;
  for (double el : elevations_deg) {
    for (double az : azimuths_deg) {
      CameraSample s;
      s.gamma_azimuth = wrap_degrees(az - config.gamma0_azimuth);
      s.gamma_elevation = el - xi0;
      const CameraPose cam = curriculum_camera(obs.pose, plane, s);
      // A black background leaves premultiplied color.
      const RenderOutput view = render_view(field, config.density, cam, intr, config.render_width,
                                            config.render_height, Vec3::Zero(), sampling, 0, options);
      ReferenceView ref;
      ref.azimuth_deg = wrap_degrees(az);
      ref.elevation_deg = el;
      ref.width = config.render_width;
      ref.height = config.render_height;
      ref.color = view.rgb;
      ref.coverage = view.opacity;
      refs.push_back(std::move(ref));
    }
  }
  return refs;
}

FieldParams initial_field(const TrainConfig& config) {
  return sphere_init(config.field, config.effective_init_radius(),
                     derive_seed(config.seed, 0, Stream::kInit));
}

TrainResult train(const TrainConfig& config, const SensorObservation& obs, GuidanceProvider* guidance,
                  const TrainCallbacks& callbacks) {
  config.validate();
  if (!obs.plane) fail(ErrorCode::kInvalidArgument, "train: observation has no ground plane");
  obs.validate();
  if (obs.points.empty() || obs.rays.empty())
    fail(ErrorCode::kEmptyObservation, "train: observation has no points");

  const std::uint64_t seed = config.seed;
  TrainResult result;
  result.params = initial_field(config);
  FieldParams& params = result.params;
  const NeuralField field(params);
  AdamState adam = AdamState::zeros(params.values.size());

  const Plane plane = obs.plane->oriented_toward(obs.pose.translation);
  const double xi0 = guidance ? sensor_elevation(obs) : 0.0;
  const CameraIntrinsics intr = sds_intrinsics(config, obs);
  const NoiseSchedule schedule = default_schedule();
  const DensityParams& dp = config.density;
  const LossWeights& w = config.weights;

  Matrix3Xd points(3, static_cast<Eigen::Index>(obs.points.size()));
  for (std::size_t i = 0; i < obs.points.size(); ++i) points.col(static_cast<Eigen::Index>(i)) = obs.points[i];

  RenderOptions sensor_options;
  sensor_options.need_color = false;
  sensor_options.cutoff = config.render_cutoff;
  sensor_options.clip_box = config.roi;
  RenderOptions sds_options = sensor_options;
  sds_options.need_color = true;

  const std::size_t ray_count = obs.rays.size();
  const std::size_t batch = std::min<std::size_t>(ray_count, static_cast<std::size_t>(config.pixel_batch));
  std::vector<std::size_t> order(ray_count);
  std::vector<Ray> batch_rays(batch);
  VectorXd batch_mask(static_cast<Eigen::Index>(batch));
  VectorXd batch_depth(static_cast<Eigen::Index>(batch));

  auto checkpoint = [&](int epoch) {
    if (callbacks.on_checkpoint) callbacks.on_checkpoint(epoch, params);
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (int it = 0; it < config.iterations_per_epoch; ++it) {
      const long iteration = static_cast<long>(epoch) * config.iterations_per_epoch + it;
      FieldGradient grad = FieldGradient::Zero(params.values.size());
      LossBreakdown terms;
      LogRow row;
      row.iteration = iteration;
      row.epoch = epoch;
      row.sds_grad_norm = std::numeric_limits<double>::quiet_NaN();

      // Sensor view: mask and depth on a random pixel batch.
      std::iota(order.begin(), order.end(), std::size_t{0});
      if (batch < ray_count) {
        std::mt19937_64 rng(derive_seed(seed, iteration, Stream::kBatch));
        for (std::size_t i = 0; i < batch; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, ray_count - 1);
          std::swap(order[i], order[pick(rng)]);
        }
      }
      for (std::size_t i = 0; i < batch; ++i) {
        const auto k = static_cast<Eigen::Index>(order[i]);
        batch_rays[i] = obs.rays[order[i]];
        batch_mask[static_cast<Eigen::Index>(i)] = obs.mask[k];
        batch_depth[static_cast<Eigen::Index>(i)] = obs.depth[k];
      }
      const SensorRender sensor = render_sensor(field, dp, batch_rays, config.sampling,
                                                derive_seed(seed, iteration, Stream::kSensor),
                                                sensor_options);
      terms.mask = mask_loss(batch_mask, sensor.opacity);
      const DepthLoss depth = depth_loss(batch_depth, sensor.depth, batch_mask);
      terms.depth = depth.value;
      const VectorXd d_opacity = w.mask * mask_loss_grad(batch_mask, sensor.opacity);
      const VectorXd d_depth = depth.no_observed_rays
                                   ? VectorXd::Zero(static_cast<Eigen::Index>(batch)).eval()
                                   : (w.depth * depth_loss_grad(batch_depth, sensor.depth, batch_mask)).eval();
      accumulate_field_gradient(
          params, render_backward(sensor.batch, dp, nullptr, &d_opacity, &d_depth, config.render_cutoff),
          grad);

      // Surface, eikonal and ground terms.
      terms.point = point_term(params, points, w.point, &grad);
      const AuxSamples aux = sample_aux_points(plane, config.roi, config.aux_samples,
                                               derive_seed(seed, iteration, Stream::kAux));
      terms.eikonal = eikonal_term(params, aux.uniform, w.eikonal, &grad);
      if (!aux.plane_empty) terms.plane = plane_term(params, aux.below_plane, w.plane, &grad);

      // Score distillation from a curriculum camera.
      if (guidance != nullptr) {
        std::mt19937_64 rng(derive_seed(seed, iteration, Stream::kSds));
        const CameraSample cam = curriculum_sample(CurriculumState::at(epoch, xi0), config.kind, rng);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const Vec3 background(unit(rng), unit(rng), unit(rng));
        row.azimuth = wrap_degrees(config.gamma0_azimuth + cam.gamma_azimuth);
        row.elevation = xi0 + cam.gamma_elevation;
        const RenderOutput view = render_view(field, dp, curriculum_camera(obs.pose, plane, cam), intr,
                                              config.render_width, config.render_height, background,
                                              config.sampling,
                                              derive_seed(seed, iteration, Stream::kSdsRender), sds_options);
        GuidanceRequest request;
        request.image = ImageRGB{config.render_width, config.render_height, view.rgb};
        request.prompt = config.prompt;
        request.view_suffix = view_suffix(config.gamma0_azimuth, cam.gamma_azimuth, row.elevation);
        request.t = sample_timestep(schedule, rng);
        request.epsilon = sample_noise(view.rgb.cols(), rng);
        request.guidance_scale = config.guidance_scale;
        request.background = background;
        request.azimuth_deg = row.azimuth;
        request.elevation_deg = row.elevation;
        try {
          const Matrix3Xd g = guidance->sds_grad(request, schedule);
          row.sds_grad_norm = g.norm();
          if (config.sds_weight > 0.0) {
            accumulate_field_gradient(
                params, render_view_backward(view, dp, config.sds_weight * g, config.render_cutoff), grad);
          }
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kGuidanceUnavailable ||
              config.on_guidance_failure == GuidanceFailurePolicy::kFail) {
            throw;
          }
          ++result.guidance_failures;
          spdlog::warn("iteration {}: guidance unavailable, sensor losses only ({})", iteration, e.what());
        }
      }

      row.losses = total_loss(terms, w);
      if (!grad.allFinite()) fail(ErrorCode::kInvalidArgument, "train: non-finite gradient");
      clip_global_norm(grad, config.grad_clip);
      adam_step(params.values, grad, adam, config.learning_rate);

      result.log.push_back(row);
      if (callbacks.on_iteration) callbacks.on_iteration(row, params);
    }
    const bool last = epoch + 1 == config.epochs;
    if (!last && config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) checkpoint(epoch + 1);
  }
  checkpoint(config.epochs);

  result.mesh_normalized = extract_mesh(params, config.roi, config.mesh_resolution);
  result.mesh = to_original_frame(result.mesh_normalized, obs.normalization);
  return result;
}

}  // namespace scanfill
