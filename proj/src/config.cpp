#include "handiff/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace handiff {

namespace {

// Reads fields of one JSON object onto an existing value, remembering which
// keys were consumed so leftovers can be reported.
class Reader {
 public:
  Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw Error(ErrorKind::Config, where_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Config, where_ + "." + key + ": " + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw Error(ErrorKind::Config, "unknown key " + where_ + "." + it.key());
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

Json mat3_json(const Mat3& m) {
  Json j = Json::array();
  for (int r = 0; r < 3; ++r) j.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return j;
}

Mat3 mat3_from(const Json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorKind::Config, where + " must be a 3x3 array");
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    if (!j[r].is_array() || j[r].size() != 3) throw Error(ErrorKind::Config, where + " must be a 3x3 array");
    for (int c = 0; c < 3; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

RigConfig read_rig(const Json& j, RigConfig c, const std::string& where) {
  Reader r(j, where);
  r.get("target_vertices", c.target_vertices);
  r.get("palm_width", c.palm_width);
  r.get("palm_length", c.palm_length);
  r.get("palm_thickness", c.palm_thickness);
  r.get("segment_lengths", c.segment_lengths);
  r.get("base_radius", c.base_radius);
  r.get("tip_radius", c.tip_radius);
  r.get("blend_fraction", c.blend_fraction);
  r.get("palm_blend_mm", c.palm_blend_mm);
  if (const Json* lim = r.child("limits")) {
    if (!lim->is_array() || lim->size() != static_cast<std::size_t>(kNumDofs))
      throw Error(ErrorKind::Config, r.path("limits") + " needs " + std::to_string(kNumDofs) + " [lo, hi] pairs");
    for (int i = 0; i < kNumDofs; ++i) {
      const auto pair = (*lim)[i].get<std::array<double, 2>>();
      c.limits[i] = {pair[0], pair[1]};
    }
  }
  r.finish();
  return c;
}

Camera read_camera(const Json& j, Camera c, const std::string& where) {
  Reader r(j, where);
  r.get("focal", c.focal);
  r.get("cx", c.cx);
  r.get("cy", c.cy);
  r.get("width", c.width);
  r.get("height", c.height);
  if (const Json* rot = r.child("rotation")) c.rotation = mat3_from(*rot, r.path("rotation"));
  if (const Json* t = r.child("translation")) {
    const auto v = t->get<std::array<double, 3>>();
    c.translation = Vec3(v[0], v[1], v[2]);
  }
  r.finish();
  return c;
}

DatasetConfig read_dataset(const Json& j, DatasetConfig c, const std::string& where) {
  Reader r(j, where);
  if (const Json* x = r.child("rig")) c.rig = read_rig(*x, c.rig, r.path("rig"));
  if (const Json* x = r.child("camera")) c.camera = read_camera(*x, c.camera, r.path("camera"));
  if (const Json* x = r.child("render")) {
    Reader rr(*x, r.path("render"));
    rr.get("near_mm", c.render.near_mm);
    rr.get("far_mm", c.render.far_mm);
    rr.finish();
  }
  r.get("depth_min_mm", c.depth_min_mm);
  r.get("depth_max_mm", c.depth_max_mm);
  r.get("center_jitter_mm", c.center_jitter_mm);
  r.get("pose_only_fraction", c.pose_only_fraction);
  r.get("occlusion_tolerance_mm", c.occlusion_tolerance_mm);
  r.get("regressor_poses", c.regressor_poses);
  r.finish();
  return c;
}

SplitRatios read_splits(const Json& j, SplitRatios c, const std::string& where) {
  Reader r(j, where);
  r.get("train", c.train);
  r.get("val", c.val);
  r.get("test", c.test);
  r.finish();
  return c;
}

DenoiserConfig read_denoiser(const Json& j, DenoiserConfig c, const std::string& where) {
  Reader r(j, where);
  r.get("levels", c.levels);
  r.get("channels", c.channels);
  r.get("cheb_order", c.cheb_order);
  r.get("heads", c.heads);
  r.get("token_dim", c.token_dim);
  r.get("time_dim", c.time_dim);
  r.get("use_gcn", c.use_gcn);
  r.get("cross_attention_all", c.cross_attention_all);
  r.finish();
  return c;
}

EncoderConfig read_encoder(const Json& j, EncoderConfig c, const std::string& where) {
  Reader r(j, where);
  r.get("image_size", c.image_size);
  r.get("image_channels", c.image_channels);
  r.get("conv_channels", c.conv_channels);
  r.get("patch_grid", c.patch_grid);
  r.get("mlp_hidden", c.mlp_hidden);
  r.get("dropout", c.dropout);
  r.get("heads", c.heads);
  r.get("skel2d_center", c.skel2d_center);
  r.get("skel2d_scale", c.skel2d_scale);
  r.get("skel3d_scale", c.skel3d_scale);
  r.finish();
  return c;
}

ScheduleConfig read_schedule(const Json& j, ScheduleConfig c, const std::string& where) {
  Reader r(j, where);
  r.get("steps", c.steps);
  r.get("kind", c.kind);
  r.get("beta_start", c.beta_start);
  r.get("beta_end", c.beta_end);
  r.finish();
  return c;
}

ModelConfig read_model(const Json& j, ModelConfig c, const std::string& where) {
  Reader r(j, where);
  if (const Json* x = r.child("denoiser")) c.denoiser = read_denoiser(*x, c.denoiser, r.path("denoiser"));
  if (const Json* x = r.child("encoder")) c.encoder = read_encoder(*x, c.encoder, r.path("encoder"));
  if (const Json* x = r.child("schedule")) c.schedule = read_schedule(*x, c.schedule, r.path("schedule"));
  r.get("coord_scale", c.coord_scale);
  r.finish();
  return c;
}

MaskConfig read_masks(const Json& j, MaskConfig c, const std::string& where) {
  Reader r(j, where);
  r.get("p_m", c.p_m);
  r.get("p_all", c.p_all);
  r.get("p_image", c.p_image);
  r.get("p_skel", c.p_skel);
  r.get("sigma_joint3d", c.sigma_joint3d);
  r.get("sigma_joint2d", c.sigma_joint2d);
  r.finish();
  return c;
}

LossWeights read_loss(const Json& j, LossWeights c, const std::string& where) {
  Reader r(j, where);
  r.get("data", c.data);
  r.get("vertex", c.vertex);
  r.get("joint", c.joint);
  r.get("normal", c.normal);
  r.get("edge", c.edge);
  r.finish();
  return c;
}

OptimizerConfig read_optimizer(const Json& j, OptimizerConfig c, const std::string& where) {
  Reader r(j, where);
  r.get("lr", c.lr);
  r.get("lr_min", c.lr_min);
  r.get("warmup_steps", c.warmup_steps);
  r.get("weight_decay", c.weight_decay);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps", c.eps);
  r.get("grad_clip", c.grad_clip);
  r.get("batch_size", c.batch_size);
  r.get("steps", c.steps);
  r.get("log_every", c.log_every);
  r.get("validate_every", c.validate_every);
  r.get("validation_samples", c.validation_samples);
  r.get("checkpoint_every", c.checkpoint_every);
  r.finish();
  return c;
}

SamplerConfig read_sampler(const Json& j, SamplerConfig c, const std::string& where) {
  Reader r(j, where);
  std::string kind = to_string(c.kind);
  r.get("kind", kind);
  c.kind = sampler_kind_from_string(kind);
  r.get("num_steps", c.num_steps);
  r.get("eta", c.eta);
  r.get("scale", c.scale);
  r.get("hypotheses", c.hypotheses);
  r.get("seed", c.seed);
  r.get("locally_constant", c.locally_constant);
  r.finish();
  return c;
}

Seeds read_seeds(const Json& j, Seeds c, const std::string& where) {
  Reader r(j, where);
  r.get("data", c.data);
  r.get("init", c.init);
  r.get("sampling", c.sampling);
  r.finish();
  return c;
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(lr > 0) || !(lr_min >= 0) || lr_min > lr) throw Error(ErrorKind::Config, "need 0 <= lr_min <= lr, lr > 0");
  if (warmup_steps < 0) throw Error(ErrorKind::Config, "warmup_steps must be >= 0");
  if (weight_decay < 0) throw Error(ErrorKind::Config, "weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw Error(ErrorKind::Config, "betas must be in [0, 1)");
  if (!(eps > 0)) throw Error(ErrorKind::Config, "eps must be > 0");
  if (grad_clip < 0) throw Error(ErrorKind::Config, "grad_clip must be >= 0");
  if (batch_size < 1) throw Error(ErrorKind::Config, "batch_size must be >= 1");
  if (steps < 0) throw Error(ErrorKind::Config, "steps must be >= 0");
  if (log_every < 1 || validate_every < 1 || checkpoint_every < 1)
    throw Error(ErrorKind::Config, "logging, validation and checkpoint intervals must be >= 1");
  if (validation_samples < 0) throw Error(ErrorKind::Config, "validation_samples must be >= 0");
}

double OptimizerConfig::learning_rate(int step) const {
  if (step < warmup_steps) return lr * (step + 1) / static_cast<double>(warmup_steps);
  const int span = std::max(1, steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  return lr_min + 0.5 * (lr - lr_min) * (1.0 + std::cos(M_PI * progress));
}

void RunConfig::validate() const {
  if (dataset_size < 1) throw Error(ErrorKind::Config, "dataset_size must be >= 1");
  if (dataset.rig.target_vertices < 300 || dataset.rig.target_vertices > 1000)
    throw Error(ErrorKind::Config, "rig target_vertices must be in [300, 1000]");
  dataset.camera.validate();
  if (!(dataset.pose_only_fraction >= 0 && dataset.pose_only_fraction <= 1))
    throw Error(ErrorKind::Config, "pose_only_fraction must be in [0, 1]");
  if (splits.train < 0 || splits.val < 0 || splits.test < 0 ||
      std::abs(splits.train + splits.val + splits.test - 1.0) > 1e-9)
    throw Error(ErrorKind::Config, "split ratios must be non-negative and sum to 1");
  model.validate();
  masks.validate();
  loss.validate();
  optimizer.validate();
  sampler.validate(model.schedule.build());
  if (dataset.camera.width != model.encoder.image_size || dataset.camera.height != model.encoder.image_size)
    throw Error(ErrorKind::Config, "camera image size must match the encoder image size");
}

std::uint64_t RunConfig::hash() const {
  const std::string s = to_json(*this).dump();
  return fnv1a(s.data(), s.size());
}

RunConfig named_profile(const std::string& name) {
  RunConfig c;
  c.profile = name;
  if (name == "desk") return c;
  if (name == "toy") {
    c.model.denoiser.channels = {16, 32, 64};
    c.model.denoiser.token_dim = 32;
    c.model.denoiser.time_dim = 32;
    c.model.denoiser.heads = 2;
    c.model.encoder.conv_channels = {8, 16, 16, 32};
    c.model.encoder.mlp_hidden = 64;
    c.model.encoder.heads = 2;
    c.dataset.rig.target_vertices = 340;
    c.optimizer.lr = 1e-3;
    c.optimizer.batch_size = 4;
    c.optimizer.steps = 20000;
    c.optimizer.validate_every = 2000;
    c.optimizer.checkpoint_every = 2000;
    c.optimizer.validation_samples = 16;
    return c;
  }
  if (name == "full") {
    c.model.encoder.patch_grid = 8;
    c.optimizer.lr = 5e-4;
    c.optimizer.batch_size = 64;
    c.optimizer.steps = 1000000;
    c.optimizer.validate_every = 10000;
    c.optimizer.checkpoint_every = 10000;
    return c;
  }
  throw Error(ErrorKind::Config, "unknown profile '" + name + "'");
}

std::vector<std::string> profile_names() { return {"desk", "toy", "full"}; }

Json to_json(const RigConfig& c) {
  Json limits = Json::array();
  for (const DofLimit& l : c.limits) limits.push_back({l.lo, l.hi});
  return Json{{"target_vertices", c.target_vertices}, {"palm_width", c.palm_width},
              {"palm_length", c.palm_length},         {"palm_thickness", c.palm_thickness},
              {"segment_lengths", c.segment_lengths}, {"base_radius", c.base_radius},
              {"tip_radius", c.tip_radius},           {"blend_fraction", c.blend_fraction}, {"palm_blend_mm", c.palm_blend_mm},
              {"limits", limits}};
}

Json to_json(const Camera& c) {
  return Json{{"focal", c.focal},
              {"cx", c.cx},
              {"cy", c.cy},
              {"width", c.width},
              {"height", c.height},
              {"rotation", mat3_json(c.rotation)},
              {"translation", {c.translation.x(), c.translation.y(), c.translation.z()}}};
}

Json to_json(const DatasetConfig& c) {
  return Json{{"rig", to_json(c.rig)},
              {"camera", to_json(c.camera)},
              {"render", {{"near_mm", c.render.near_mm}, {"far_mm", c.render.far_mm}}},
              {"depth_min_mm", c.depth_min_mm},
              {"depth_max_mm", c.depth_max_mm},
              {"center_jitter_mm", c.center_jitter_mm},
              {"pose_only_fraction", c.pose_only_fraction},
              {"occlusion_tolerance_mm", c.occlusion_tolerance_mm},
              {"regressor_poses", c.regressor_poses}};
}

Json to_json(const SplitRatios& c) { return Json{{"train", c.train}, {"val", c.val}, {"test", c.test}}; }

Json to_json(const DenoiserConfig& c) {
  return Json{{"levels", c.levels},       {"channels", c.channels},   {"cheb_order", c.cheb_order},
              {"heads", c.heads},         {"token_dim", c.token_dim}, {"time_dim", c.time_dim},
              {"use_gcn", c.use_gcn},     {"cross_attention_all", c.cross_attention_all}};
}

Json to_json(const EncoderConfig& c) {
  return Json{{"image_size", c.image_size},       {"image_channels", c.image_channels},
              {"conv_channels", c.conv_channels}, {"patch_grid", c.patch_grid},
              {"mlp_hidden", c.mlp_hidden},       {"dropout", c.dropout},
              {"heads", c.heads},                 {"skel2d_center", c.skel2d_center},
              {"skel2d_scale", c.skel2d_scale},   {"skel3d_scale", c.skel3d_scale}};
}

Json to_json(const ScheduleConfig& c) {
  return Json{{"steps", c.steps}, {"kind", c.kind}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
}

Json to_json(const ModelConfig& c) {
  return Json{{"denoiser", to_json(c.denoiser)},
              {"encoder", to_json(c.encoder)},
              {"schedule", to_json(c.schedule)},
              {"coord_scale", c.coord_scale}};
}

Json to_json(const MaskConfig& c) {
  return Json{{"p_m", c.p_m},       {"p_all", c.p_all},
              {"p_image", c.p_image}, {"p_skel", c.p_skel},
              {"sigma_joint3d", c.sigma_joint3d}, {"sigma_joint2d", c.sigma_joint2d}};
}

Json to_json(const LossWeights& c) {
  return Json{{"data", c.data}, {"vertex", c.vertex}, {"joint", c.joint}, {"normal", c.normal}, {"edge", c.edge}};
}

Json to_json(const OptimizerConfig& c) {
  return Json{{"lr", c.lr},
              {"lr_min", c.lr_min},
              {"warmup_steps", c.warmup_steps},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"grad_clip", c.grad_clip},
              {"batch_size", c.batch_size},
              {"steps", c.steps},
              {"log_every", c.log_every},
              {"validate_every", c.validate_every},
              {"validation_samples", c.validation_samples},
              {"checkpoint_every", c.checkpoint_every}};
}

Json to_json(const SamplerConfig& c) {
  return Json{{"kind", to_string(c.kind)}, {"num_steps", c.num_steps},   {"eta", c.eta},
              {"scale", c.scale},          {"hypotheses", c.hypotheses}, {"seed", c.seed},
              {"locally_constant", c.locally_constant}};
}

Json to_json(const Seeds& c) { return Json{{"data", c.data}, {"init", c.init}, {"sampling", c.sampling}}; }

Json to_json(const RunConfig& c) {
  return Json{{"profile", c.profile},
              {"dataset", to_json(c.dataset)},
              {"dataset_path", c.dataset_path},
              {"dataset_size", c.dataset_size},
              {"splits", to_json(c.splits)},
              {"model", to_json(c.model)},
              {"masks", to_json(c.masks)},
              {"loss", to_json(c.loss)},
              {"optimizer", to_json(c.optimizer)},
              {"sampler", to_json(c.sampler)},
              {"seeds", to_json(c.seeds)}};
}

RigConfig rig_config_from_json(const Json& j) { return read_rig(j, {}, "rig"); }
Camera camera_from_json(const Json& j) { return read_camera(j, {}, "camera"); }
DatasetConfig dataset_config_from_json(const Json& j) { return read_dataset(j, {}, "dataset"); }
ModelConfig model_config_from_json(const Json& j) { return read_model(j, {}, "model"); }
SamplerConfig sampler_config_from_json(const Json& j) { return read_sampler(j, {}, "sampler"); }

RunConfig run_config_from_json(const Json& j) {
  if (!j.is_object()) throw Error(ErrorKind::Config, "config must be a JSON object");
  std::string profile = "desk";
  if (auto it = j.find("profile"); it != j.end()) profile = it->get<std::string>();
  RunConfig c = named_profile(profile);
  Reader r(j, "config");
  r.get("profile", c.profile);
  if (const Json* x = r.child("dataset")) c.dataset = read_dataset(*x, c.dataset, "dataset");
  r.get("dataset_path", c.dataset_path);
  r.get("dataset_size", c.dataset_size);
  if (const Json* x = r.child("splits")) c.splits = read_splits(*x, c.splits, "splits");
  if (const Json* x = r.child("model")) c.model = read_model(*x, c.model, "model");
  if (const Json* x = r.child("masks")) c.masks = read_masks(*x, c.masks, "masks");
  if (const Json* x = r.child("loss")) c.loss = read_loss(*x, c.loss, "loss");
  if (const Json* x = r.child("optimizer")) c.optimizer = read_optimizer(*x, c.optimizer, "optimizer");
  if (const Json* x = r.child("sampler")) c.sampler = read_sampler(*x, c.sampler, "sampler");
  if (const Json* x = r.child("seeds")) c.seeds = read_seeds(*x, c.seeds, "seeds");
  r.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Storage, "cannot read " + path.string());
  Json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, "malformed config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void save_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorKind::Storage, "cannot write " + path.string());
  f << to_json(config).dump(2) << "\n";
  if (!f) throw Error(ErrorKind::Storage, "write failed for " + path.string());
}

std::string to_string(SamplerKind kind) { return kind == SamplerKind::Ddim ? "ddim" : "ddpm"; }

SamplerKind sampler_kind_from_string(const std::string& s) {
  if (s == "ddim") return SamplerKind::Ddim;
  if (s == "ddpm") return SamplerKind::Ddpm;
  throw Error(ErrorKind::Config, "sampler kind must be ddim or ddpm, got '" + s + "'");
}

}  // namespace handiff
