#include "cli.hpp"

#include "handiff/geom_kernel_abi.hpp"
#include "handiff/kernels.hpp"
#include "handiff/mesh_export.hpp"
#include "handiff/tasks.hpp"
#include "handiff/training.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace handiff::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::string input;
  std::string dataset;
  std::string format = "obj";
  std::string split = "test";
  std::string protocol = "generation";
  std::string sampler;
  std::string missing_fingers = "3,4";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int steps = 0;
  int n = 0;
  int train_steps = -1;
  int limit = 0;
  std::vector<int> grid_steps{10, 25, 50};
  std::vector<int> grid_n{8, 16, 32};
  double scale = -1.0;
  double eta = -1.0;
  bool resume = false;
  bool hard_replace = false;
  bool locally_constant = false;
};

const char* kInpaintMeshSchema =
    R"({"vertices": [[x, y, z], ...] (V rows, wrist-relative mm), "given": [0|1, ...] (V flags)})";
const char* kInpaintSkelSchema =
    R"({"joints": [[x, y, z], ...] (21 rows, wrist-relative mm), "given": [0|1, ...] (21 flags)})";
const char* kFit2dSchema =
    R"({"joints2d": [[u, v], ...] (21 rows, px), "confidence": [...] (21), "root": [x, y, z] (mm), "camera": {...}})";

Json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Storage, "cannot read " + path.string());
  Json j = Json::parse(f, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorKind::Input, "malformed JSON in " + path.string());
  return j;
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Storage, "cannot write " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw Error(ErrorKind::Storage, "write failed for " + path.string());
}

Mat matrix_from_json(const Json& j, int cols, const std::string& what) {
  if (!j.is_array()) throw Error(ErrorKind::Input, what + " must be an array of rows");
  Mat m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || static_cast<int>(j[r].size()) != cols)
      throw Error(ErrorKind::Input, what + " rows must have " + std::to_string(cols) + " numbers");
    for (int c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), c) = j[r][c].get<double>();
  }
  return m;
}

std::vector<char> flags_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw Error(ErrorKind::Input, what + " must be an array of 0/1 flags");
  std::vector<char> out;
  for (const Json& x : j) out.push_back(x.get<int>() != 0 ? 1 : 0);
  return out;
}

// Observation problems are usage errors that print the expected schema.
[[noreturn]] void schema_error(const std::string& what, const char* schema) {
  throw Error(ErrorKind::Usage, what + "\nexpected observation: " + schema);
}

bool is_record(const fs::path& p) { return p.extension() == ".rec"; }

std::vector<int> parse_fingers(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    int f = -1;
    try {
      f = std::stoi(tok);
    } catch (const std::exception&) {
    }
    if (f < 0 || f >= kNumFingers) throw Error(ErrorKind::Usage, "finger indices must be in 0..4, got '" + tok + "'");
    out.push_back(f);
  }
  return out;
}

struct Loaded {
  Checkpoint ckpt;
  std::string checkpoint_hash;
};

Loaded load(const Options& o) {
  if (o.checkpoint.empty()) throw Error(ErrorKind::Usage, "--checkpoint is required");
  Loaded l;
  l.ckpt = load_checkpoint(o.checkpoint);
  l.checkpoint_hash = hex64(l.ckpt.hash());
  return l;
}

SamplerConfig sampler_for(const Options& o, const RunConfig& cfg) {
  SamplerConfig s = cfg.sampler;
  if (!o.sampler.empty()) s.kind = sampler_kind_from_string(o.sampler);
  if (o.steps > 0) s.num_steps = o.steps;
  if (o.n > 0) s.hypotheses = o.n;
  if (o.scale >= 0) s.scale = o.scale;
  if (o.eta >= 0) s.eta = o.eta;
  s.seed = o.seed_set ? o.seed : cfg.seeds.sampling;
  s.locally_constant = s.locally_constant || o.locally_constant;
  return s;
}

Json sampler_json(const SamplerConfig& s) { return to_json(s); }

// Writes hypothesis meshes and returns their manifest entries.
Json write_hypotheses(const HypothesisSet& set, const HandModel& model, const fs::path& out, MeshFormat format,
                      const std::optional<Mat>& gt) {
  fs::create_directories(out);
  const char* ext = format == MeshFormat::Obj ? ".obj" : ".ply";
  Json list = Json::array();
  std::vector<double> mpjpe, mpvpe;
  std::vector<PaError> errs;
  if (gt) errs = pa_error(set.meshes(), *gt, model.regressor, true);
  for (int i = 0; i < set.size(); ++i) {
    const Hypothesis& h = set.hypotheses[i];
    std::ostringstream name;
    name << "hyp_" << std::setw(3) << std::setfill('0') << i << ext;
    export_mesh(h.vertices, model.topology, format, out / name.str());
    Json e{{"file", name.str()}, {"stream", hex64(h.stream)}};
    if (!set.residual_units.empty()) e["residual"] = h.residual;
    if (!h.residual_trace.empty()) e["objective_trace"] = h.residual_trace;
    if (gt) {
      e["pa_mpjpe"] = errs[i].mpjpe;
      e["pa_mpvpe"] = errs[i].mpvpe;
      mpjpe.push_back(errs[i].mpjpe);
      mpvpe.push_back(errs[i].mpvpe);
    }
    list.push_back(e);
  }
  Json j{{"hypotheses", list}};
  if (gt) {
    j["min_pa_mpjpe"] = min_over_hypotheses(mpjpe);
    j["min_pa_mpvpe"] = min_over_hypotheses(mpvpe);
  }
  return j;
}

Json base_manifest(const std::string& command, const Loaded& l, const SamplerConfig& s) {
  return Json{{"command", command},
              {"config_hash", hex64(l.ckpt.config.hash())},
              {"checkpoint_hash", l.checkpoint_hash},
              {"checkpoint_step", l.ckpt.step},
              {"seeds", to_json(l.ckpt.config.seeds)},
              {"sampler", sampler_json(s)},
              {"T", s.num_steps},
              {"scale", s.scale}};
}

fs::path require_out(const Options& o) {
  if (o.out.empty()) throw Error(ErrorKind::Usage, "--out is required");
  return o.out;
}

int cmd_dataset(const Options& o, std::ostream& out) {
  RunConfig cfg = o.config.empty() ? named_profile("desk") : load_config(o.config);
  const fs::path dir = o.out.empty() ? fs::path(cfg.dataset_path) : fs::path(o.out);
  const int n = o.n > 0 ? o.n : cfg.dataset_size;
  const std::uint64_t seed = o.seed_set ? o.seed : cfg.seeds.data;
  const DatasetManifest m = generate_dataset(dir, n, seed, cfg.splits, cfg.dataset);
  out << "dataset " << dir.string() << ": " << m.count << " records (" << m.train << "/" << m.val << "/" << m.test
      << "), rig " << m.rig_hash << "\n";
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  const fs::path run = require_out(o);
  RunConfig cfg;
  if (o.resume) {
    cfg = load_checkpoint(run).config;
  } else {
    cfg = o.config.empty() ? named_profile("desk") : load_config(o.config);
    if (o.seed_set) cfg.seeds.init = o.seed;
  }
  if (o.train_steps >= 0) cfg.optimizer.steps = o.train_steps;
  const fs::path data_dir = o.dataset.empty() ? fs::path(cfg.dataset_path) : fs::path(o.dataset);
  const TrainingData data = load_training_data(data_dir);
  TrainOptions opt;
  opt.run_dir = run;
  opt.resume = o.resume;
  opt.on_record = [&out](const Json& j) {
    if (j.contains("event")) out << j.dump() << "\n";
  };
  const TrainResult r = run_train(cfg, data, opt);
  out << "trained to step " << r.step << ", checkpoint " << r.checkpoint.string() << "\n";
  return r.status == TrainStatus::Ok ? kOk : kNumeric;
}

int run_task(const std::string& command, const Options& o, std::ostream& out) {
  const Loaded l = load(o);
  const HandModel& model = l.ckpt.model;
  const SamplerConfig s = sampler_for(o, l.ckpt.config);
  const fs::path dir = require_out(o);
  const MeshFormat format = mesh_format_from_string(o.format);
  Json manifest = base_manifest(command, l, s);
  std::optional<Mat> gt;
  HypothesisSet set;

  if (command == "generate") {
    set = generate(model, s);
  } else if (command == "inpaint-mesh" || command == "inpaint-skel") {
    const bool mesh = command == "inpaint-mesh";
    const char* schema = mesh ? kInpaintMeshSchema : kInpaintSkelSchema;
    if (o.input.empty()) schema_error(command + " needs --input", schema);
    Mat partial;
    std::vector<char> given;
    if (is_record(o.input)) {
      const HandSample rec = read_sample(o.input);
      const Mat verts = wrist_relative(rec);
      gt = verts;
      const std::vector<int> missing = parse_fingers(o.missing_fingers);
      if (mesh) {
        if (rec.vertices.rows() != model.vertex_count()) schema_error("record does not match the model template", schema);
        const HandRig rig = build_template(l.ckpt.config.dataset.rig);
        partial = verts;
        given.assign(model.vertex_count(), 1);
        for (int v = 0; v < model.vertex_count(); ++v)
          for (int f : missing)
            if (rig.vertex_finger[v] == f) given[v] = 0;
      } else {
        partial = rec.joints3d.rowwise() - rec.joints3d.row(0);
        given.assign(kNumJoints, 1);
        for (int f : missing)
          for (int k = 0; k < 4; ++k) given[finger_joint(f, k)] = 0;
      }
      manifest["missing_fingers"] = missing;
    } else {
      const Json j = read_json(o.input);
      const char* key = mesh ? "vertices" : "joints";
      if (!j.contains(key) || !j.contains("given")) schema_error("observation is missing fields", schema);
      partial = matrix_from_json(j[key], 3, key);
      given = flags_from_json(j["given"], "given");
      if (mesh && partial.rows() != model.vertex_count())
        schema_error("observation has " + std::to_string(partial.rows()) + " vertices, the model has " +
                         std::to_string(model.vertex_count()),
                     schema);
      if (!mesh && partial.rows() != kNumJoints) schema_error("observation must have 21 joints", schema);
      if (static_cast<Eigen::Index>(given.size()) != partial.rows()) schema_error("given has the wrong length", schema);
    }
    int n_given = 0;
    for (char g : given) n_given += g;
    manifest["given_count"] = n_given;
    set = mesh ? inpaint_mesh(model, partial, given, s, o.hard_replace) : inpaint_skeleton(model, partial, given, s);
  } else if (command == "reconstruct") {
    const char* schema = "dataset record (.rec) carrying an image";
    if (o.input.empty() || !is_record(o.input)) schema_error("reconstruct needs --input <record.rec>", schema);
    const HandSample rec = read_sample(o.input);
    if (!rec.image) schema_error("record " + o.input + " has no image", schema);
    if (rec.vertices.rows() == model.vertex_count()) gt = wrist_relative(rec);
    set = reconstruct(model, *rec.image, s);
  } else if (command == "fit2d") {
    if (o.input.empty()) schema_error("fit2d needs --input", kFit2dSchema);
    Fit2dInput in;
    if (is_record(o.input)) {
      const HandSample rec = read_sample(o.input);
      in.joints2d = rec.joints2d;
      in.confidence = rec.confidence;
      in.camera = rec.camera;
      in.root = rec.joints3d.row(0).transpose();
      in.image = rec.image;
      if (rec.vertices.rows() == model.vertex_count()) gt = wrist_relative(rec);
    } else {
      const Json j = read_json(o.input);
      if (!j.contains("joints2d") || !j.contains("confidence") || !j.contains("root"))
        schema_error("observation is missing fields", kFit2dSchema);
      in.joints2d = matrix_from_json(j["joints2d"], 2, "joints2d");
      const Mat conf = matrix_from_json(Json::array({j["confidence"]}), static_cast<int>(j["confidence"].size()),
                                        "confidence");
      in.confidence = conf.row(0).transpose();
      const Mat root = matrix_from_json(Json::array({j["root"]}), 3, "root");
      in.root = root.row(0).transpose();
      in.camera = j.contains("camera") ? camera_from_json(j["camera"]) : l.ckpt.config.dataset.camera;
      if (in.joints2d.rows() != kNumJoints || in.confidence.size() != kNumJoints)
        schema_error("observation must have 21 joints and 21 confidences", kFit2dSchema);
    }
    set = fit2d(model, in, s);
  } else {
    throw Error(ErrorKind::Usage, "unknown task " + command);
  }

  manifest["task"] = set.task;
  if (!set.residual_units.empty()) manifest["residual_units"] = set.residual_units;
  manifest.update(write_hypotheses(set, model, dir, format, gt));
  write_json(dir / "manifest.json", manifest);
  out << command << ": wrote " << set.size() << " meshes to " << dir.string() << "\n";
  return kOk;
}

Json report_json(const EvalReport& r, const Json& extra = Json::object()) {
  r.validate();
  Json j{{"metric", r.metric}, {"value", r.value}, {"units", r.units}, {"n", r.n},
         {"T", r.steps},       {"seed", r.seed},   {"config_hash", r.config_hash}, {"path", r.path}};
  j.update(extra);
  return j;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const Loaded l = load(o);
  const HandModel& model = l.ckpt.model;
  const RunConfig& cfg = l.ckpt.config;
  const GeomKernel kernel = GeomKernel::load();
  if (!kernel.fallback_reason().empty()) out << "geometry kernel: " << kernel.fallback_reason() << "\n";
  const fs::path dir = require_out(o);
  fs::create_directories(dir);
  const std::uint64_t seed = o.seed_set ? o.seed : cfg.seeds.sampling;
  const std::string config_hash = hex64(cfg.hash());
  std::vector<Json> records;

  if (o.protocol == "generation") {
    SamplerConfig s = sampler_for(o, cfg);
    s.hypotheses = o.n > 0 ? o.n : 500;
    s.seed = seed;
    const std::vector<Mat> meshes = generate(model, s).meshes();
    const double apd_value = kernel.apd(meshes);
    double si_total = 0.0;
    for (const Mat& m : meshes) si_total += kernel.si(m, model.topology).percent;
    const int n = static_cast<int>(meshes.size());
    records.push_back(report_json({"apd", apd_value, "mm", n, s.num_steps, seed, config_hash, kernel.path()}));
    records.push_back(report_json({"si", si_total / n, "percent", n, s.num_steps, seed, config_hash, kernel.path()}));
  } else if (o.protocol == "reconstruction") {
    const fs::path data_dir = o.dataset.empty() ? fs::path(cfg.dataset_path) : fs::path(o.dataset);
    DatasetConfig dcfg;
    const DatasetManifest dm = read_manifest(data_dir / "manifest.json", &dcfg);
    std::vector<HandSample> samples;
    for (int i : split_indices(dm, o.split)) {
      HandSample rec = read_sample(record_path(data_dir, i));
      if (!rec.image) continue;
      samples.push_back(std::move(rec));
      if (o.limit > 0 && static_cast<int>(samples.size()) >= o.limit) break;
    }
    if (samples.empty()) throw Error(ErrorKind::Input, "split " + o.split + " has no image records");
    for (int T : o.grid_steps)
      for (int n : o.grid_n) {
        SamplerConfig s = sampler_for(o, cfg);
        s.num_steps = T;
        s.hypotheses = n;
        s.seed = seed;
        double mpjpe = 0.0, mpvpe = 0.0;
        for (const HandSample& rec : samples) {
          const std::vector<PaError> e =
              pa_error(reconstruct(model, *rec.image, s).meshes(), wrist_relative(rec), model.regressor, true);
          std::vector<double> j, v;
          for (const PaError& x : e) {
            j.push_back(x.mpjpe);
            v.push_back(x.mpvpe);
          }
          mpjpe += min_over_hypotheses(j);
          mpvpe += min_over_hypotheses(v);
        }
        const int count = static_cast<int>(samples.size());
        const Json cell{{"hypotheses", n}, {"split", o.split}};
        records.push_back(report_json({"min_pa_mpjpe", mpjpe / count, "mm", count, T, seed, config_hash, "reference"}, cell));
        records.push_back(report_json({"min_pa_mpvpe", mpvpe / count, "mm", count, T, seed, config_hash, "reference"}, cell));
      }
  } else {
    throw Error(ErrorKind::Usage, "unknown protocol '" + o.protocol + "' (generation|reconstruction)");
  }

  std::ofstream f(dir / "eval_reports.jsonl");
  if (!f) throw Error(ErrorKind::Storage, "cannot write " + (dir / "eval_reports.jsonl").string());
  for (const Json& r : records) {
    f << r.dump() << "\n";
    out << r.dump() << "\n";
  }
  return kOk;
}

int cmd_export(const Options& o, std::ostream& out) {
  const fs::path path = require_out(o);
  const Loaded l = load(o);
  Mat vertices = l.ckpt.model.template_vertices;
  if (!o.input.empty()) {
    const HandSample rec = read_sample(o.input);
    if (rec.vertices.rows() != l.ckpt.model.vertex_count())
      throw Error(ErrorKind::Input, "record does not match the checkpoint template");
    vertices = rec.vertices;
  }
  const MeshFormat format = path.has_extension() ? mesh_format_for(path) : mesh_format_from_string(o.format);
  export_mesh(vertices, l.ckpt.model.topology, format, path);
  out << "wrote " << path.string() << "\n";
  return kOk;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
    case ErrorKind::Config:
      return kUsage;
    case ErrorKind::Numeric:
      return kNumeric;
    default:
      return kData;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  par::apply_worker_env();
  CLI::App app{"Hand mesh diffusion: synthetic data, training, sampling tasks and evaluation", "handiff"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "run configuration (JSON)");
    c->add_option("--checkpoint", o.checkpoint, "checkpoint or run directory");
    c->add_option("--out", o.out, "output directory or file");
    c->add_option("--seed", o.seed, "seed override")->each([&](const std::string&) { o.seed_set = true; });
    c->add_option("--steps", o.steps, "sampling steps T")->check(CLI::PositiveNumber);
    c->add_option("--n", o.n, "number of hypotheses (dataset: records)")->check(CLI::PositiveNumber);
    c->add_option("--scale", o.scale, "guidance scale s")->check(CLI::NonNegativeNumber);
  };
  auto task = [&](const std::string& name, const std::string& help) {
    CLI::App* c = app.add_subcommand(name, help);
    common(c);
    c->add_option("--input", o.input, "observation (JSON) or dataset record (.rec)");
    c->add_option("--format", o.format, "mesh format")->check(CLI::IsMember({"obj", "ply"}));
    c->add_option("--sampler", o.sampler, "ddim or ddpm")->check(CLI::IsMember({"ddim", "ddpm"}));
    c->add_option("--eta", o.eta, "DDIM eta")->check(CLI::Range(0.0, 1.0));
    c->add_flag("--locally-constant", o.locally_constant, "guidance with the network treated as constant");
    return c;
  };

  CLI::App* dataset = app.add_subcommand("dataset", "generate a synthetic dataset");
  common(dataset);
  CLI::App* train = app.add_subcommand("train", "train a model");
  common(train);
  train->add_option("--dataset", o.dataset, "dataset directory (default: config dataset_path)");
  train->add_option("--train-steps", o.train_steps, "optimizer steps (overrides the config)")
      ->check(CLI::NonNegativeNumber);
  train->add_flag("--resume", o.resume, "continue the run in --out");
  task("generate", "unconditional generation");
  CLI::App* inpaint_mesh_cmd = task("inpaint-mesh", "complete a partial mesh");
  inpaint_mesh_cmd->add_flag("--hard-replace", o.hard_replace, "overwrite given vertices after every step");
  inpaint_mesh_cmd->add_option("--missing-fingers", o.missing_fingers, "fingers removed from a record input");
  task("inpaint-skel", "mesh from a partial 3D skeleton")
      ->add_option("--missing-fingers", o.missing_fingers, "fingers removed from a record input");
  task("reconstruct", "mesh from an image");
  task("fit2d", "mesh from 2D joints");
  CLI::App* eval = app.add_subcommand("eval", "evaluation protocols");
  common(eval);
  eval->add_option("--protocol", o.protocol, "generation or reconstruction");
  eval->add_option("--dataset", o.dataset, "dataset directory (reconstruction)");
  eval->add_option("--split", o.split, "dataset split (reconstruction)");
  eval->add_option("--limit", o.limit, "maximum number of records (reconstruction)")->check(CLI::PositiveNumber);
  eval->add_option("--grid-steps", o.grid_steps, "sampler step counts of the grid (reconstruction)")
      ->delimiter(',')
      ->check(CLI::PositiveNumber);
  eval->add_option("--grid-n", o.grid_n, "hypothesis counts of the grid (reconstruction)")
      ->delimiter(',')
      ->check(CLI::PositiveNumber);
  eval->add_option("--sampler", o.sampler, "ddim or ddpm")->check(CLI::IsMember({"ddim", "ddpm"}));
  CLI::App* exp = app.add_subcommand("export", "export the template or a record as a mesh file");
  common(exp);
  exp->add_option("--input", o.input, "dataset record (.rec)");
  exp->add_option("--format", o.format, "mesh format when --out has no extension")
      ->check(CLI::IsMember({"obj", "ply"}));

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "dataset") return cmd_dataset(o, out);
    if (name == "train") return cmd_train(o, out);
    if (name == "eval") return cmd_eval(o, out);
    if (name == "export") return cmd_export(o, out);
    return run_task(name, o, out);
  } catch (const Error& e) {
    err << "handiff: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "handiff: " << e.what() << "\n";
    return kData;
  }
}

}  // namespace handiff::cli
