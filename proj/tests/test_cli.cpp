#include "cli.hpp"
#include "handiff/mesh_export.hpp"
#include "handiff/training.hpp"
#include "test_util.hpp"

#include <unistd.h>

#include <fstream>
#include <sstream>

using namespace handiff;
using namespace handiff::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("handiff_cli_" + std::to_string(getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

RunConfig tiny_run_config() {
  RunConfig c = named_profile("toy");
  c.dataset_size = 20;
  c.dataset.regressor_poses = 150;
  c.model.denoiser.channels = {8, 12, 16};
  c.model.denoiser.token_dim = 8;
  c.model.denoiser.time_dim = 8;
  c.model.encoder.conv_channels = {4, 4, 4, 4};
  c.model.encoder.mlp_hidden = 16;
  c.model.schedule.steps = 50;
  c.optimizer.batch_size = 2;
  c.optimizer.steps = 4;
  c.optimizer.warmup_steps = 2;
  c.optimizer.log_every = 1;
  c.optimizer.validate_every = 2;
  c.optimizer.checkpoint_every = 2;
  c.optimizer.validation_samples = 1;
  c.sampler.num_steps = 3;
  return c;
}

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "handiff");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// Shared fixture: one tiny dataset and one 0-step checkpoint per test binary.
struct World {
  fs::path root = scratch("world");
  fs::path config = root / "config.json";
  fs::path data = root / "data";
  fs::path run = root / "run";

  World() {
    fs::create_directories(root);
    RunConfig c = tiny_run_config();
    c.dataset_path = data.string();
    save_config(config, c);
    REQUIRE(invoke({"dataset", "--config", config.string()}).code == 0);
    const CliRun t = invoke({"train", "--config", config.string(), "--out", run.string(), "--train-steps", "0"});
    REQUIRE(t.code == 0);
  }

  fs::path record(const std::string& split, bool with_image) const {
    DatasetConfig dc;
    const DatasetManifest m = read_manifest(data / "manifest.json", &dc);
    for (int i : split_indices(m, split)) {
      const HandSample s = read_sample(record_path(data, i));
      if (s.image.has_value() == with_image) return record_path(data, i);
    }
    FAIL("no suitable record");
    return {};
  }
};

const World& world() {
  static const World w;
  return w;
}

}  // namespace

TEST_CASE("config round trip, hashing and unknown keys") {
  const fs::path dir = scratch("config");
  fs::create_directories(dir);
  for (const std::string& name : profile_names()) {
    const RunConfig c = named_profile(name);
    save_config(dir / (name + ".json"), c);
    const RunConfig back = load_config(dir / (name + ".json"));
    CHECK(back.hash() == c.hash());
    CHECK(to_json(back) == to_json(c));
  }
  RunConfig c = tiny_run_config();
  const std::uint64_t h = c.hash();
  c.optimizer.lr *= 2;
  CHECK(c.hash() != h);

  Json j = to_json(tiny_run_config());
  j["optimizer"]["learning_rat"] = 1.0;
  try {
    run_config_from_json(j);
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
  }
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK_THROWS_AS(load_config(dir / "broken.json"), Error);
  CHECK_THROWS_AS(named_profile("huge"), Error);
  RunConfig mismatch = tiny_run_config();
  mismatch.model.encoder.image_size = 64;
  CHECK_THROWS_AS(mismatch.validate(), Error);
}

TEST_CASE("mesh export formats") {
  const fs::path dir = scratch("export");
  fs::create_directories(dir);
  Mat tri(3, 3);
  tri << 0, 0, 0, 1.5, 0, 0, 0, 2.25, -1;
  const MeshTopology topo = build_topology({{0, 1, 2}}, 3);
  export_mesh(tri, topo, dir / "tri.obj");
  CHECK(slurp(dir / "tri.obj") ==
        "v 0.000000 0.000000 0.000000\nv 1.500000 0.000000 0.000000\nv 0.000000 2.250000 -1.000000\nf 1 2 3\n");

  const HandRig& rig = default_rig();
  Rng rng(1);
  const Mat v = rig.template_vertices + randn(rng, rig.vertex_count(), 3) * 3.0;
  export_mesh(v, rig.topology, dir / "hand.obj");
  export_mesh(v, rig.topology, MeshFormat::Ply, dir / "hand.ply");
  const ImportedMesh obj = import_mesh(dir / "hand.obj");
  const ImportedMesh ply = import_mesh(dir / "hand.ply");
  CHECK((obj.vertices - v).cwiseAbs().maxCoeff() <= 1e-5 + 1e-9);
  CHECK(ply.vertices == v.cast<float>().cast<double>());
  CHECK(obj.faces == rig.topology.faces);
  CHECK(ply.faces == rig.topology.faces);

  export_mesh(v, rig.topology, dir / "again.ply");
  CHECK(slurp(dir / "again.ply") == slurp(dir / "hand.ply"));
  try {
    export_mesh(v, rig.topology, fs::path("/proc/handiff/x.obj"));
    FAIL("expected storage error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Storage);
  }
  CHECK_THROWS_AS(mesh_format_for("mesh.stl"), Error);
}

TEST_CASE("checkpoint: zero-step run, reload and resume") {
  const World& w = world();
  const Checkpoint c0 = load_checkpoint(w.run);
  CHECK(c0.step == 0);
  CHECK(c0.history.empty());

  // A fresh run trained in two legs matches the step and history contract.
  const fs::path run = scratch("resume");
  const RunConfig cfg = load_config(w.config);
  const TrainingData data = load_training_data(w.data);
  TrainOptions opt;
  opt.run_dir = run;
  RunConfig first = cfg;
  first.optimizer.steps = 2;
  const TrainResult a = run_train(first, data, opt);
  CHECK(a.status == TrainStatus::Ok);
  CHECK(a.step == 2);
  const Checkpoint mid = load_checkpoint(run, true);
  CHECK(mid.step == 2);
  REQUIRE(mid.optimizer.has_value());
  CHECK(mid.optimizer->step == 2);

  opt.resume = true;
  const TrainResult b = run_train(cfg, data, opt);
  CHECK(b.step == 4);
  const Checkpoint end = load_checkpoint(run);
  CHECK(end.step == 4);
  int last = 0;
  for (const Json& h : end.history) {
    CHECK(h.at("step").get<int>() > last);
    last = h.at("step").get<int>();
  }
  CHECK(last == 4);
  const std::vector<Json> log = read_train_log(run);
  for (std::size_t i = 1; i < log.size(); ++i) CHECK(log[i].at("step").get<int>() > log[i - 1].at("step").get<int>());

  // Same seeds, same run: the single-leg run ends on the same parameters.
  const fs::path straight = scratch("straight");
  TrainOptions o2;
  o2.run_dir = straight;
  run_train(cfg, data, o2);
  CHECK(load_checkpoint(straight).model.params.hash() == end.model.params.hash());

  CHECK_THROWS_AS(load_checkpoint(scratch("missing")), Error);
}

TEST_CASE("cli: generate writes meshes and a reproducible manifest") {
  const World& w = world();
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const CliRun r1 = invoke({"generate", "--checkpoint", w.run.string(), "--n", "4", "--out", a.string(), "--seed", "9"});
  REQUIRE(r1.code == 0);
  const CliRun r2 = invoke({"generate", "--checkpoint", w.run.string(), "--n", "4", "--out", b.string(), "--seed", "9"});
  REQUIRE(r2.code == 0);
  for (int i = 0; i < 4; ++i) {
    const std::string name = "hyp_00" + std::to_string(i) + ".obj";
    CHECK(fs::exists(a / name));
    CHECK(slurp(a / name) == slurp(b / name));
  }
  CHECK_FALSE(fs::exists(a / "hyp_004.obj"));
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  const Json m = Json::parse(slurp(a / "manifest.json"));
  CHECK(m.at("hypotheses").size() == 4);
  CHECK(m.contains("config_hash"));
  CHECK(m.contains("checkpoint_hash"));
  CHECK(m.at("sampler").at("seed").get<std::uint64_t>() == 9);
  CHECK(m.contains("seeds"));

  const fs::path c = scratch("gen_c");
  REQUIRE(invoke({"generate", "--checkpoint", w.run.string(), "--n", "4", "--out", c.string(), "--seed", "10"}).code == 0);
  CHECK(slurp(a / "hyp_000.obj") != slurp(c / "hyp_000.obj"));
  const fs::path p = scratch("gen_ply");
  REQUIRE(invoke({"generate", "--checkpoint", w.run.string(), "--n", "1", "--out", p.string(), "--format", "ply"}).code ==
          0);
  CHECK(fs::exists(p / "hyp_000.ply"));
}

TEST_CASE("cli: tasks with ground truth report per-hypothesis errors") {
  const World& w = world();
  const fs::path rec = w.record("test", true);
  const fs::path out = scratch("recon");
  REQUIRE(invoke({"reconstruct", "--checkpoint", w.run.string(), "--input", rec.string(), "--n", "3", "--out",
               out.string()})
              .code == 0);
  const Json m = Json::parse(slurp(out / "manifest.json"));
  REQUIRE(m.at("hypotheses").size() == 3);
  double lowest = 1e300;
  for (const Json& h : m.at("hypotheses")) lowest = std::min(lowest, h.at("pa_mpvpe").get<double>());
  CHECK(m.at("min_pa_mpvpe").get<double>() == lowest);
  CHECK(m.contains("min_pa_mpjpe"));

  const fs::path fit = scratch("fit");
  REQUIRE(invoke({"fit2d", "--checkpoint", w.run.string(), "--input", rec.string(), "--out", fit.string()}).code == 0);
  CHECK(Json::parse(slurp(fit / "manifest.json")).at("residual_units") == "px");

  const fs::path inp = scratch("inpaint");
  REQUIRE(invoke({"inpaint-mesh", "--checkpoint", w.run.string(), "--input", rec.string(), "--missing-fingers", "1",
               "--out", inp.string(), "--scale", "0.5"})
              .code == 0);
  const Json im = Json::parse(slurp(inp / "manifest.json"));
  CHECK(im.at("residual_units") == "mm");
  CHECK(im.at("scale").get<double>() == 0.5);

  const fs::path sk = scratch("skel");
  REQUIRE(invoke({"inpaint-skel", "--checkpoint", w.run.string(), "--input", rec.string(), "--out", sk.string()}).code ==
          0);
}

TEST_CASE("cli: JSON observations and schema errors") {
  const World& w = world();
  const Checkpoint ck = load_checkpoint(w.run);
  const fs::path dir = scratch("obs");
  fs::create_directories(dir);
  Json joints = Json::array();
  Json given = Json::array();
  for (int j = 0; j < kNumJoints; ++j) {
    joints.push_back({j * 1.0, 2.0, 3.0});
    given.push_back(j < 10 ? 1 : 0);
  }
  std::ofstream(dir / "skel.json") << Json{{"joints", joints}, {"given", given}}.dump();
  CHECK(invoke({"inpaint-skel", "--checkpoint", w.run.string(), "--input", (dir / "skel.json").string(), "--out",
             (dir / "skel_out").string()})
            .code == 0);

  std::ofstream(dir / "bad.json") << Json{{"joints", joints}}.dump();
  const CliRun bad = invoke({"inpaint-skel", "--checkpoint", w.run.string(), "--input", (dir / "bad.json").string(),
                          "--out", (dir / "bad_out").string()});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("expected observation") != std::string::npos);

  // An image-only task given a skeleton observation.
  const CliRun wrong = invoke({"reconstruct", "--checkpoint", w.run.string(), "--input", (dir / "skel.json").string(),
                            "--out", (dir / "wrong").string()});
  CHECK(wrong.code == 2);
  CHECK(wrong.err.find("expected observation") != std::string::npos);
  const CliRun pose_only = invoke({"reconstruct", "--checkpoint", w.run.string(), "--input",
                                w.record("train", false).string(), "--out", (dir / "po").string()});
  CHECK(pose_only.code == 2);
}

TEST_CASE("cli: exit codes") {
  const World& w = world();
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"frobnicate"}).code == 2);
  CHECK(invoke({"generate", "--n", "0", "--checkpoint", w.run.string(), "--out", "x"}).code == 2);
  CHECK(invoke({"generate", "--out", "x"}).code == 2);
  CHECK(invoke({"generate", "--checkpoint", scratch("nothing").string(), "--out", scratch("x").string()}).code == 3);
  CHECK(invoke({"train", "--config", w.config.string(), "--out", scratch("t").string(), "--dataset",
             scratch("nodata").string()})
            .code == 3);
  CHECK(invoke({"--help"}).code == 0);
}

TEST_CASE("cli: eval and export") {
  const World& w = world();
  const fs::path out = scratch("eval");
  unsetenv("HANDIFF_GEOM_KERNEL");
  const CliRun r = invoke({"eval", "--checkpoint", w.run.string(), "--protocol", "generation", "--n", "3", "--steps", "2",
                        "--out", out.string()});
  REQUIRE(r.code == 0);
  std::ifstream f(out / "eval_reports.jsonl");
  std::vector<Json> recs;
  for (std::string line; std::getline(f, line);) recs.push_back(Json::parse(line));
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].at("metric") == "apd");
  CHECK(recs[1].at("metric") == "si");
  CHECK(recs[1].at("units") == "percent");
  CHECK(recs[0].at("path") == "reference");
  CHECK(recs[0].at("n") == 3);

  const fs::path grid = scratch("grid");
  REQUIRE(invoke({"eval", "--checkpoint", w.run.string(), "--protocol", "reconstruction", "--dataset", w.data.string(),
               "--limit", "1", "--grid-steps", "2,3", "--grid-n", "1,2,3", "--out", grid.string()})
              .code == 0);
  std::ifstream g(grid / "eval_reports.jsonl");
  int lines = 0;
  for (std::string line; std::getline(g, line);) ++lines;
  CHECK(lines == 12);  // 2 x 3 cells, two metrics each

  const fs::path mesh = scratch("template") / "t.ply";
  fs::create_directories(mesh.parent_path());
  REQUIRE(invoke({"export", "--checkpoint", w.run.string(), "--out", mesh.string()}).code == 0);
  CHECK(import_mesh(mesh).vertices.rows() == load_checkpoint(w.run).model.vertex_count());
  const fs::path rec_mesh = mesh.parent_path() / "r.obj";
  REQUIRE(invoke({"export", "--checkpoint", w.run.string(), "--input", w.record("val", true).string(), "--out",
               rec_mesh.string()})
              .code == 0);
  CHECK(fs::exists(rec_mesh));
}
