#include "handiff/diffusion.hpp"

#include <cmath>
#include <exception>

namespace handiff {

std::uint64_t NoiseSchedule::hash() const {
  std::uint64_t h = fnv1a(betas.data(), betas.size() * sizeof(double));
  return fnv1a(kind.data(), kind.size(), h);
}

NoiseSchedule make_schedule(int steps, const std::string& kind, double beta_start, double beta_end) {
  if (steps < 2) throw Error(ErrorKind::Config, "schedule needs T >= 2");
  NoiseSchedule s;
  s.steps = steps;
  s.kind = kind;
  s.betas.assign(steps + 1, 0.0);
  if (kind == "linear") {
    if (!(beta_start > 0 && beta_start < 1 && beta_end > 0 && beta_end < 1 && beta_start <= beta_end))
      throw Error(ErrorKind::Config, "linear schedule endpoints must satisfy 0 < start <= end < 1");
    for (int t = 1; t <= steps; ++t)
      s.betas[t] = beta_start + (beta_end - beta_start) * (t - 1) / static_cast<double>(steps - 1);
  } else if (kind == "cosine") {
    const double off = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + off) / (1 + off) * M_PI / 2);
      return c * c;
    };
    for (int t = 1; t <= steps; ++t) s.betas[t] = std::min(1.0 - f(t) / f(t - 1), 0.999);
  } else {
    throw Error(ErrorKind::Config, "unknown schedule kind '" + kind + "'");
  }
  s.alphas.assign(steps + 1, 1.0);
  s.alpha_bars.assign(steps + 1, 1.0);
  s.posterior_variance.assign(steps + 1, 0.0);
  s.coef_x0.assign(steps + 1, 1.0);
  s.coef_xt.assign(steps + 1, 0.0);
  for (int t = 1; t <= steps; ++t) {
    s.alphas[t] = 1.0 - s.betas[t];
    s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
    const double ab = s.alpha_bars[t], abp = s.alpha_bars[t - 1];
    s.posterior_variance[t] = (1.0 - abp) / (1.0 - ab) * s.betas[t];
    // exact collapse onto x0 at t = 1
    s.coef_x0[t] = t == 1 ? 1.0 : std::sqrt(abp) * s.betas[t] / (1.0 - ab);
    s.coef_xt[t] = std::sqrt(s.alphas[t]) * (1.0 - abp) / (1.0 - ab);
  }
  return s;
}

namespace {

void check_t(int t, const NoiseSchedule& s) {
  if (t < 1 || t > s.steps)
    throw Error(ErrorKind::Input, "timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.steps) + "]");
}

}  // namespace

Mat q_sample(const Mat& x0, int t, const Mat& noise, const NoiseSchedule& schedule) {
  check_t(t, schedule);
  if (noise.rows() != x0.rows() || noise.cols() != x0.cols())
    throw Error(ErrorKind::Input, "noise shape does not match x0");
  const double ab = schedule.alpha_bars[t];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

Mat posterior_mean(const Mat& x0_pred, const Mat& x_t, int t, const NoiseSchedule& schedule) {
  check_t(t, schedule);
  return schedule.coef_x0[t] * x0_pred + schedule.coef_xt[t] * x_t;
}

Mat ddpm_step(const Mat& x_t, int t, const Mat& x0_pred, const NoiseSchedule& schedule, Rng& rng,
              double variance) {
  Mat mean = posterior_mean(x0_pred, x_t, t, schedule);
  const double var = variance < 0 ? schedule.posterior_variance[t] : variance;
  if (t == 1 || var == 0.0) return mean;
  return mean + std::sqrt(var) * randn(rng, mean.rows(), mean.cols());
}

DdimParts ddim_parts(const Mat& x_t, int t, int t_prev, const Mat& x0_pred, double eta,
                     const NoiseSchedule& schedule) {
  check_t(t, schedule);
  if (t_prev < 0 || t_prev >= t) throw Error(ErrorKind::Input, "ddim needs 0 <= t_prev < t");
  const double ab = schedule.alpha_bars[t], abp = schedule.alpha_bars[t_prev];
  const Mat eps = (x_t - std::sqrt(ab) * x0_pred) / std::sqrt(1.0 - ab);
  DdimParts p;
  p.guidance_var = (1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp);
  p.sigma = eta * std::sqrt(std::max(0.0, p.guidance_var));
  const double dir = std::sqrt(std::max(0.0, 1.0 - abp - p.sigma * p.sigma));
  p.mean = std::sqrt(abp) * x0_pred + dir * eps;
  return p;
}

Mat ddim_step(const Mat& x_t, int t, int t_prev, const Mat& x0_pred, double eta, const NoiseSchedule& schedule,
              Rng& rng) {
  DdimParts p = ddim_parts(x_t, t, t_prev, x0_pred, eta, schedule);
  if (p.sigma == 0.0) return p.mean;
  return p.mean + p.sigma * randn(rng, p.mean.rows(), p.mean.cols());
}

Mat guided_mean(const Mat& mean, double variance, const Mat& gradient, double scale) {
  if (mean.rows() != gradient.rows() || mean.cols() != gradient.cols())
    throw Error(ErrorKind::Input, "guidance gradient shape mismatch");
  if (scale < 0) throw Error(ErrorKind::Input, "guidance scale must be >= 0");
  return mean - (scale * variance) * gradient;
}

std::vector<int> ddim_timesteps(int steps, int num_steps) {
  if (num_steps < 1 || num_steps > steps)
    throw Error(ErrorKind::Config, "num_steps must be in [1, T]");
  std::vector<int> ts;
  if (num_steps == 1) return {steps};
  for (int i = num_steps - 1; i >= 0; --i)
    ts.push_back(1 + static_cast<int>(std::llround(static_cast<double>(i) * (steps - 1) / (num_steps - 1))));
  return ts;
}

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
  if (num_steps < 1 || num_steps > schedule.steps) throw Error(ErrorKind::Config, "num_steps must be in [1, T]");
  if (eta < 0 || eta > 1) throw Error(ErrorKind::Config, "eta must be in [0, 1]");
  if (!(scale >= 0) || !std::isfinite(scale)) throw Error(ErrorKind::Config, "guidance scale must be finite and >= 0");
  if (hypotheses < 1) throw Error(ErrorKind::Config, "hypotheses must be >= 1");
}

namespace {

// Returns x0 and, when guidance is active, the guidance gradient and objective.
Mat predict_guided(const X0Model& model, const Mat& x, int t, const GuidanceObjective* guidance, bool active,
                   bool locally_constant, Mat* grad, double* objective) {
  if (!active) return model.predict(x, t);
  if (locally_constant) {
    Mat x0 = model.predict(x, t);
    *objective = (*guidance)(x0, grad);
    return x0;
  }
  return model.predict_vjp(
      x, t,
      [&](const Mat& x0) {
        Mat g;
        *objective = (*guidance)(x0, &g);
        return g;
      },
      grad);
}

}  // namespace

SampleOutput sample(const X0Model& model, const NoiseSchedule& schedule, const SamplerConfig& config,
                    const GuidanceObjective* guidance, const StepHook* hook) {
  config.validate(schedule);
  const int n = config.hypotheses;
  const int v = model.vertex_count();
  const bool active = guidance != nullptr && config.scale > 0.0;
  SampleOutput out;
  out.meshes.resize(n);
  out.traces.resize(n);

  std::vector<int> ts;
  if (config.kind == SamplerKind::Ddim) {
    ts = ddim_timesteps(schedule.steps, config.num_steps);
  } else {
    for (int t = schedule.steps; t >= 1; --t) ts.push_back(t);
  }

  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (int h = 0; h < n; ++h) {
    try {
      Rng rng = make_rng(config.seed, static_cast<std::uint64_t>(h));
      HypothesisTrace trace;
      trace.stream = mix_seed(config.seed, static_cast<std::uint64_t>(h));
      Mat x = randn(rng, v, 3);
      for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        Mat grad;
        double objective = 0.0;
        const Mat x0 = predict_guided(model, x, t, guidance, active, config.locally_constant, &grad, &objective);
        if (!x0.allFinite()) throw Error(ErrorKind::Numeric, "denoiser produced non-finite values");
        if (active) trace.objective.push_back(objective);
        if (config.kind == SamplerKind::Ddim) {
          DdimParts p = ddim_parts(x, t, t_prev, x0, config.eta, schedule);
          Mat mean = active ? guided_mean(p.mean, p.guidance_var, grad, config.scale) : std::move(p.mean);
          x = p.sigma > 0.0 ? Mat(mean + p.sigma * randn(rng, v, 3)) : std::move(mean);
        } else {
          Mat mean = posterior_mean(x0, x, t, schedule);
          const double var = schedule.posterior_variance[t];
          if (active) mean = guided_mean(mean, var, grad, config.scale);
          x = (t > 1 && var > 0.0) ? Mat(mean + std::sqrt(var) * randn(rng, v, 3)) : std::move(mean);
        }
        if (hook) (*hook)(x, t_prev, rng);
      }
      out.meshes[h] = std::move(x);
      out.traces[h] = std::move(trace);
    } catch (...) {
#pragma omp critical(handiff_sample_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace handiff
