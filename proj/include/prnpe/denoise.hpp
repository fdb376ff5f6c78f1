#pragma once

#include <functional>
#include <vector>

#include "prnpe/core.hpp"
#include "prnpe/flow.hpp"

namespace prnpe::denoise {

enum class SlabFamily { Cauchy, Gaussian };

/// Per-coordinate spike-and-slab error density p(s_y | s), marginalised over
/// the indicator: (1 − γ)·N(s_y; s, σ_spike²) + γ·slab(s_y; s, σ_slab).
struct ErrorModel {
  double sigma_spike = 0.01;
  double sigma_slab = 0.25;
  double gamma = 0.5;  // slab weight
  SlabFamily slab = SlabFamily::Cauchy;

  void validate() const;
};

double error_logpdf(const ErrorModel& em, const SummaryVector& s_y, const SummaryVector& s);
/// Gradient with respect to s.
Vector error_logpdf_grad(const ErrorModel& em, const SummaryVector& s_y, const SummaryVector& s);
/// Posterior slab probability per coordinate at a fixed s.
Vector slab_responsibility(const ErrorModel& em, const SummaryVector& s_y, const SummaryVector& s);

struct NutsConfig {
  double target_accept = 0.9;
  int warmup = 1000;
  int samples = 2000;
  int max_depth = 10;
  double max_energy_error = 1000.0;  // divergence threshold
  bool adapt_metric = true;          // windowed diagonal mass matrix

  void validate() const;
};

/// Log density and its gradient; `grad` is resized by the callee.
using LogTarget = std::function<double(const Vector& x, Vector& grad)>;

struct NutsResult {
  Matrix draws;  // samples × d, in order
  double step_size = 0.0;
  double mean_accept = 0.0;  // post-warmup mean acceptance statistic
  Index divergences = 0;     // post-warmup
  Index warmup_divergences = 0;
  double mean_depth = 0.0;
  Index gradient_evaluations = 0;
  Vector inverse_metric;
  std::vector<double> warmup_step_sizes;  // step size after each warmup iteration
  std::vector<double> warmup_accept;      // acceptance statistic per warmup iteration
};

NutsResult nuts_sample(const LogTarget& target, const Vector& init, const NutsConfig& config, Rng& rng);

/// Autocorrelation-based effective sample size of one chain (Geyer's initial
/// monotone sequence).
double chain_ess(const Vector& series);

struct DenoiseResult {
  Matrix draws;          // M × d_s latent summaries
  Vector shift;          // mean(s̃_k − s_{y,k})
  Vector slab_probability;  // mean slab responsibility per coordinate
  NutsResult sampler;    // draws moved out; diagnostics only
};

/// Log target log p(s_y | s) + log h(s) and its gradient.
double denoise_logpdf(const ErrorModel& em, const flow::FlowParams& marginal, const SummaryVector& s_y,
                      const SummaryVector& s, Vector* grad = nullptr);

/// Draws s̃ ∝ p(s_y | s)·h(s) with NUTS, started at s_y clipped to the flow box.
DenoiseResult denoise(const ErrorModel& em, const flow::FlowParams& marginal, const SummaryVector& s_y,
                      const NutsConfig& config, Rng& rng);

}  // namespace prnpe::denoise
