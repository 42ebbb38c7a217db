#include "handiff/training.hpp"

#include "handiff/metrics.hpp"
#include "handiff/tasks.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>

namespace handiff {

namespace fs = std::filesystem;

TrainingData load_training_data(const fs::path& dir, bool load_test) {
  if (!fs::exists(dir / "manifest.json")) throw Error(ErrorKind::Storage, "no dataset manifest in " + dir.string());
  TrainingData d;
  d.manifest = read_manifest(dir / "manifest.json", &d.config);
  d.rig = build_template(d.config.rig);
  if (hex64(d.rig.hash()) != d.manifest.rig_hash)
    throw Error(ErrorKind::Storage, "rig hash in " + dir.string() + " does not match the configured rig");
  d.regressor = read_regressor(dir / "regressor.bin");
  auto load = [&](const std::string& split, std::vector<HandSample>& out) {
    for (int i : split_indices(d.manifest, split)) out.push_back(read_sample(record_path(dir, i)));
  };
  load("train", d.train);
  load("val", d.val);
  if (load_test) load("test", d.test);
  if (d.train.empty()) throw Error(ErrorKind::Storage, "dataset has no training records");
  return d;
}

Mat wrist_relative(const HandSample& s) { return s.vertices.rowwise() - s.joints3d.row(0); }

namespace {

bool decays(const std::string& name, const Mat& m) {
  return m.rows() > 1 && name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
}

double global_norm(const ModelParams& g) {
  double s = 0.0;
  for (const auto& [_, m] : g.tensors) s += m.squaredNorm();
  return std::sqrt(s);
}

class JsonlLog {
 public:
  JsonlLog(const fs::path& path, bool append, std::function<void(const Json&)> cb)
      : out_(path, append ? std::ios::app : std::ios::trunc), cb_(std::move(cb)) {
    if (!out_) throw Error(ErrorKind::Storage, "cannot write " + path.string());
  }
  void write(const Json& j) {
    out_ << j.dump() << "\n";
    out_.flush();
    if (cb_) cb_(j);
  }

 private:
  std::ofstream out_;
  std::function<void(const Json&)> cb_;
};

struct SampleGrad {
  ModelParams grads;
  LossTerms terms;
  double loss = 0.0;
};

void train_sample(const HandModel& model, const RunConfig& cfg, const HandSample& s, const LossOperators& ops,
                  std::uint64_t seed, SampleGrad& out) {
  Rng rng = make_rng(seed, 0);
  const ConditionBundle bundle = bundle_from_sample(s, model.config.encoder);
  const MaskedBundle masked = apply_random_masks(bundle, cfg.masks, rng, true);
  std::uniform_int_distribution<int> pick_t(1, model.schedule.steps);
  const int t = pick_t(rng);
  const Mat gt_mm = wrist_relative(s);
  const Mat x0 = model.to_state(gt_mm);
  const Mat noise = randn(rng, x0.rows(), 3);
  const Mat x_t = q_sample(x0, t, noise, model.schedule);

  ag::Tape tape;
  ParamSet p(tape, model.params, true);
  const TokenVars tokens =
      assemble_tokens_var(p, model.config.encoder, model.config.denoiser.token_dim, masked.bundle, &rng);
  ag::Var pred = denoise_var(p, model.config.denoiser, model.hierarchy, tape.constant(x_t), t, tokens);
  ag::Var pred_mm = ag::scale(pred, model.config.coord_scale);
  const LossTargets targets = make_loss_targets(gt_mm, ops);
  const ag::LossVars lv = ag::total_loss(pred, x0, pred_mm, targets, ops, cfg.loss);
  out.loss = lv.total.value()(0, 0);
  out.terms = lv.terms;
  if (!std::isfinite(out.loss)) return;
  tape.backward(lv.total);
  p.accumulate_grads(out.grads);
}

}  // namespace

void adamw_update(ModelParams& params, const ModelParams& grads, OptimizerState& st, const OptimizerConfig& cfg,
                  double lr) {
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, st.step), c2 = 1.0 - std::pow(cfg.beta2, st.step);
  for (auto& [name, w] : params.tensors) {
    const Mat& g = grads.at(name);
    Mat& m = st.m.at(name);
    Mat& v = st.v.at(name);
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const Mat step = (m / c1).array() / ((v / c2).array().sqrt() + cfg.eps);
    if (decays(name, w)) w -= lr * cfg.weight_decay * w;
    w -= lr * step;
  }
}

ValidationResult validate_reconstruction(const HandModel& model, const std::vector<HandSample>& samples,
                                         int max_samples, const SamplerConfig& sampler) {
  ValidationResult r;
  double v = 0.0, j = 0.0;
  SamplerConfig sc = sampler;
  sc.hypotheses = 1;
  for (const HandSample& s : samples) {
    if (r.n >= max_samples) break;
    if (!s.image) continue;
    const HypothesisSet hs = reconstruct(model, *s.image, sc);
    const PaError e = pa_error(hs.meshes(), wrist_relative(s), model.regressor, true).front();
    if (e.degenerate) continue;
    v += e.mpvpe;
    j += e.mpjpe;
    ++r.n;
  }
  if (r.n > 0) {
    r.pa_mpvpe = v / r.n;
    r.pa_mpjpe = j / r.n;
  }
  return r;
}

TrainResult run_train(const RunConfig& config_in, const TrainingData& data, const TrainOptions& opt) {
  if (opt.run_dir.empty()) throw Error(ErrorKind::Usage, "training needs a run directory");
  fs::create_directories(opt.run_dir);

  Checkpoint ck;
  OptimizerState st;
  if (opt.resume) {
    ck = load_checkpoint(opt.run_dir, true);
    ck.config.optimizer.steps = config_in.optimizer.steps;
    if (ck.optimizer) {
      st = *ck.optimizer;
    } else {
      st.m = ck.model.params.zeros_like();
      st.v = ck.model.params.zeros_like();
    }
  } else {
    config_in.validate();
    ck.config = config_in;
    ck.model = make_model(config_in.model, data.rig.topology, data.rig.template_vertices, data.regressor,
                          config_in.seeds.init);
    st.m = ck.model.params.zeros_like();
    st.v = ck.model.params.zeros_like();
  }
  const RunConfig& cfg = ck.config;
  HandModel& model = ck.model;
  if (model.vertex_count() != data.rig.vertex_count())
    throw Error(ErrorKind::Storage, "dataset mesh does not match the checkpoint template");

  JsonlLog log(opt.run_dir / "train_log.jsonl", opt.resume, opt.on_record);
  TrainResult result;
  auto save = [&]() {
    ck.optimizer = st;
    result.checkpoint = save_run_checkpoint(opt.run_dir, ck);
  };
  if (!opt.resume) {
    save_config(opt.run_dir / "config.json", cfg);
    save();
  }

  const LossOperators ops = make_loss_operators(model.topology, model.regressor);
  const int B = cfg.optimizer.batch_size;
  std::vector<SampleGrad> per(B);
  for (auto& g : per) g.grads = model.params.zeros_like();
  ModelParams total = model.params.zeros_like();
  const auto t0 = std::chrono::steady_clock::now();

  while (ck.step < cfg.optimizer.steps) {
    const int step = ck.step;
    Rng batch_rng = make_rng(mix_seed(cfg.seeds.data, 0xba7c), static_cast<std::uint64_t>(step));
    std::uniform_int_distribution<int> pick(0, static_cast<int>(data.train.size()) - 1);
    std::vector<int> idx(B);
    for (int& i : idx) i = pick(batch_rng);

    std::vector<std::exception_ptr> errors(B);
#pragma omp parallel for schedule(dynamic, 1)
    for (int b = 0; b < B; ++b) {
      try {
        for (auto& [_, m] : per[b].grads.tensors) m.setZero();
        train_sample(model, cfg, data.train[idx[b]], ops,
                     mix_seed(cfg.seeds.data, static_cast<std::uint64_t>(step) * B + b + 1), per[b]);
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    double loss = 0.0;
    LossTerms terms;
    for (auto& [name, m] : total.tensors) {
      m.setZero();
      for (int b = 0; b < B; ++b) m += per[b].grads.tensors.at(name);
      m /= B;
    }
    for (int b = 0; b < B; ++b) {
      loss += per[b].loss / B;
      terms.data += per[b].terms.data / B;
      terms.vertex += per[b].terms.vertex / B;
      terms.joint += per[b].terms.joint / B;
      terms.normal += per[b].terms.normal / B;
      terms.edge += per[b].terms.edge / B;
    }
    double gnorm = global_norm(total);
    if (!std::isfinite(loss) || !std::isfinite(gnorm)) {
      log.write(Json{{"event", "non_finite"}, {"step", step}, {"loss", std::isfinite(loss) ? loss : -1.0}});
      result.status = TrainStatus::NonFinite;
      result.step = step;
      return result;
    }
    if (cfg.optimizer.grad_clip > 0 && gnorm > cfg.optimizer.grad_clip)
      for (auto& [_, m] : total.tensors) m *= cfg.optimizer.grad_clip / gnorm;
    const double lr = cfg.optimizer.learning_rate(step);
    adamw_update(model.params, total, st, cfg.optimizer, lr);
    ck.step = step + 1;
    result.last_loss = loss;

    if (step % cfg.optimizer.log_every == 0 || ck.step == cfg.optimizer.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.write(Json{{"step", ck.step},
                     {"loss", loss},
                     {"data", terms.data},
                     {"vertex", terms.vertex},
                     {"joint", terms.joint},
                     {"normal", terms.normal},
                     {"edge", terms.edge},
                     {"lr", lr},
                     {"grad_norm", gnorm},
                     {"seconds", secs}});
    }
    const bool last = ck.step == cfg.optimizer.steps;
    if (ck.step % cfg.optimizer.validate_every == 0 || last) {
      if (!model.params.all_finite()) {
        log.write(Json{{"event", "non_finite"}, {"step", ck.step}});
        result.status = TrainStatus::NonFinite;
        result.step = ck.step;
        return result;
      }
      SamplerConfig vs;
      vs.seed = cfg.seeds.sampling;
      const ValidationResult v = validate_reconstruction(model, data.val, cfg.optimizer.validation_samples, vs);
      Json rec{{"step", ck.step}, {"val_pa_mpvpe", v.pa_mpvpe}, {"val_pa_mpjpe", v.pa_mpjpe}, {"val_n", v.n},
               {"loss", loss}};
      ck.history.push_back(rec);
      log.write(Json{{"event", "validation"}, {"step", ck.step}, {"val_pa_mpvpe", v.pa_mpvpe},
                     {"val_pa_mpjpe", v.pa_mpjpe}, {"val_n", v.n}});
    }
    if (ck.step % cfg.optimizer.checkpoint_every == 0 || last) save();
  }
  result.step = ck.step;
  if (result.checkpoint.empty()) result.checkpoint = resolve_checkpoint(opt.run_dir);
  return result;
}

std::vector<Json> read_train_log(const fs::path& run_dir) {
  std::ifstream f(run_dir / "train_log.jsonl");
  if (!f) throw Error(ErrorKind::Storage, "no training log in " + run_dir.string());
  std::vector<Json> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;  // a torn final line from an interrupted run
    if (!j.contains("event") && j.contains("loss")) out.push_back(std::move(j));
  }
  return out;
}

double mean_loss(const std::vector<Json>& records, int begin, int end) {
  double s = 0.0;
  int n = 0;
  for (const Json& r : records) {
    const int step = r.at("step").get<int>();
    if (step >= begin && step < end) {
      s += r.at("loss").get<double>();
      ++n;
    }
  }
  if (n == 0) throw Error(ErrorKind::Input, "no loss records in the requested window");
  return s / n;
}

}  // namespace handiff
