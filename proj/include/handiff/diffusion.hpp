#pragma once

#include "handiff/common.hpp"

#include <functional>
#include <string>
#include <vector>

namespace handiff {

// All per-step arrays are indexed by t in [0, T]; entry 0 holds the t = 0
// convention (alpha_bar = 1, beta = 0).
struct NoiseSchedule {
  int steps = 0;
  std::string kind;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> posterior_variance;
  std::vector<double> coef_x0;  // posterior mean = coef_x0 * x0 + coef_xt * x_t
  std::vector<double> coef_xt;

  std::uint64_t hash() const;
};

NoiseSchedule make_schedule(int steps, const std::string& kind = "linear", double beta_start = 1e-4,
                            double beta_end = 0.02);

Mat q_sample(const Mat& x0, int t, const Mat& noise, const NoiseSchedule& schedule);
Mat posterior_mean(const Mat& x0_pred, const Mat& x_t, int t, const NoiseSchedule& schedule);

// Ancestral step; variance < 0 selects the schedule's posterior variance.
Mat ddpm_step(const Mat& x_t, int t, const Mat& x0_pred, const NoiseSchedule& schedule, Rng& rng,
              double variance = -1.0);

struct DdimParts {
  Mat mean;
  double sigma = 0.0;         // std-dev of the injected noise (eta-scaled)
  double guidance_var = 0.0;  // posterior variance of the strided chain
};

DdimParts ddim_parts(const Mat& x_t, int t, int t_prev, const Mat& x0_pred, double eta,
                     const NoiseSchedule& schedule);
Mat ddim_step(const Mat& x_t, int t, int t_prev, const Mat& x0_pred, double eta, const NoiseSchedule& schedule,
              Rng& rng);

// mean - s * variance * gradient
Mat guided_mean(const Mat& mean, double variance, const Mat& gradient, double scale);

// Decreasing timesteps used by the DDIM sampler, uniform stride over [1, T].
std::vector<int> ddim_timesteps(int steps, int num_steps);

enum class SamplerKind { Ddim, Ddpm };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Ddim;
  int num_steps = 10;
  double eta = 0.0;
  double scale = 1.0;
  int hypotheses = 1;
  std::uint64_t seed = 0;
  // Guidance gradient through the network (false) or with the network
  // treated as locally constant (true).
  bool locally_constant = false;

  void validate(const NoiseSchedule& schedule) const;
};

// Scalar objective on an x0 prediction, returning its value and writing the
// gradient w.r.t. the prediction.
using GuidanceObjective = std::function<double(const Mat& x0, Mat* grad_x0)>;

// Anything that predicts x0 from (x_t, t) with conditions already bound.
class X0Model {
 public:
  virtual ~X0Model() = default;
  virtual int vertex_count() const = 0;
  virtual Mat predict(const Mat& x_t, int t) const = 0;
  // Returns x0 and writes J^T g into grad_x_t, with J = dx0/dx_t and g the
  // upstream gradient computed from x0 by `upstream`.
  virtual Mat predict_vjp(const Mat& x_t, int t, const std::function<Mat(const Mat&)>& upstream,
                          Mat* grad_x_t) const = 0;
};

struct HypothesisTrace {
  std::uint64_t stream = 0;
  std::vector<double> objective;  // guidance objective before each guided step
};

// Called after each reverse step with the new state and its timestep.
using StepHook = std::function<void(Mat& x, int t_prev, Rng& rng)>;

struct SampleOutput {
  std::vector<Mat> meshes;
  std::vector<HypothesisTrace> traces;
};

SampleOutput sample(const X0Model& model, const NoiseSchedule& schedule, const SamplerConfig& config,
                    const GuidanceObjective* guidance = nullptr, const StepHook* hook = nullptr);

}  // namespace handiff
