#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "prnpe/core.hpp"
#include "prnpe/denoise.hpp"
#include "prnpe/flow.hpp"
#include "prnpe/forest.hpp"
#include "prnpe/models.hpp"
#include "prnpe/smc_abc.hpp"

namespace prnpe::pipeline {

enum class Method { PrnpeSmc, PrnpeRf, Npe, Rnpe, PnpeSmc, PnpeRf };

enum class Preconditioner { None, Smc, Forest };

std::string method_name(Method m);
/// Accepts the display names ("PRNPE-SMC", …) case-insensitively.
Method parse_method(const std::string& name);
std::vector<Method> all_methods();
bool is_robust(Method m);
Preconditioner preconditioner(Method m);

/// Settings shared by every method of a run.
struct PipelineConfig {
  Index budget = 20000;
  Index posterior_samples = 2000;
  Index ppd_draws = 500;
  /// Forest methods: train on an M-row resample (true) or on the weighted
  /// prior-predictive set (false).
  bool forest_resample_training = true;
  Index forest_resample_size = 0;  // 0 = budget
  double kappa = 2.0;
  smc::SmcConfig smc;
  forest::TreeConfig forest;
  flow::FlowArchitecture flow;
  flow::TrainConfig train;
  denoise::ErrorModel error;
  denoise::NutsConfig nuts;

  void validate() const;
};

struct MethodSpec {
  Method method = Method::PrnpeRf;
  Index budget = 20000;
  Index posterior_samples = 2000;
};

struct TrainingSummary {
  int epochs = 0;
  int best_epoch = 0;
  double best_validation_nll = 0.0;
  double initial_train_nll = 0.0;
  double final_train_nll = 0.0;
  Index train_rows = 0;
  Index validation_rows = 0;
};

struct GapDiagnostics {
  double first = 0.0;        // E[w‖s − s_y‖]
  double second_root = 0.0;  // √E[w‖s − s_y‖²]
  double kappa_moment = 0.0; // E[w‖s − s_y‖^κ]
  double kappa = 2.0;
};

struct PosteriorResult {
  Method method = Method::Npe;
  Matrix thetas;  // M × d_θ on the prior's scale
  /// Standardised latent summaries s̃ (robust methods).
  std::optional<Matrix> latent;
  SummaryVector observed;
  SummaryVector observed_standardised;
  flow::FlowBundle conditional;
  std::optional<flow::FlowBundle> marginal;

  // Budget accounting.
  Index budget = 0;
  Index simulations = 0;  // inference simulator calls
  Index invalid_simulations = 0;
  Index training_rows = 0;

  // Preconditioning diagnostics.
  double ess = 0.0;
  std::vector<double> tolerances;
  std::vector<double> acceptance_rates;
  std::string smc_stop_reason;
  GapDiagnostics gap;  // raw summaries: forest weights on the prior-predictive set, else the training set

  TrainingSummary conditional_training;
  std::optional<TrainingSummary> marginal_training;
  std::optional<denoise::NutsResult> sampler;  // draws cleared
  Vector denoise_shift;                        // standardised scale
  Vector slab_probability;
};

/// Runs one method end to end. Uses `config` for everything except the
/// budget and posterior sample size, which come from `spec`.
PosteriorResult run_method(const MethodSpec& spec, const models::Task& task, const SummaryVector& observation,
                           const PipelineConfig& config, Rng& rng);

/// Runs several methods on one observation, sharing the prior-predictive set,
/// preconditioning, and conditional flows between the methods that use them.
/// Each stage draws from its own named stream of `rng`, so a method's result
/// does not depend on which other methods are run.
class Replicate {
 public:
  Replicate(const models::Task& task, SummaryVector observation, PipelineConfig config, Rng rng);
  ~Replicate();
  Replicate(const Replicate&) = delete;
  Replicate& operator=(const Replicate&) = delete;

  PosteriorResult run(Method method);

  /// Shared stages, computed on first use.
  const SimDataset& prior_predictive();
  /// Forest proximity weights over prior_predictive(), normalised.
  const Vector& forest_weights();
  double forest_ess();
  const smc::SmcResult& smc_result();

 private:
  struct Cache;
  std::unique_ptr<Cache> cache_;
};

/// log (1/M) Σ_m q(θ | s̃_m) on the original θ scale; q(θ | s_y) for
/// non-robust results. −∞ outside the prior support.
double ensemble_logpdf(const PosteriorResult& result, const ParamVector& theta, const models::Prior& prior);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Shortest interval holding ⌈level·M⌉ sorted draws; ties go to the leftmost.
Interval hpdi(std::vector<double> samples, double level = 0.95);

/// Weighted moments of ‖s − s_y‖ with weights normalised to a pmf (the
/// E_{p_train}[w] = 1 convention multiplies by N and averages).
GapDiagnostics gap_diagnostics(const SimDataset& dataset, const Vector& weights, const SummaryVector& s_y,
                               double kappa = 2.0);

/// Median over posterior draws of the compatible-summary distance between a
/// fresh simulation and the observation, as log(median), floored at log(1e-12).
/// Simulator calls are added to *calls; the compatible summaries of each
/// simulation are stored in *simulated when given.
double log_median_ppd(const models::Task& task, const Matrix& thetas, const SummaryVector& observed, Index draws,
                      Rng& rng, Index* calls = nullptr, Matrix* simulated = nullptr);

/// One replicate's contribution to the tables.
struct ReplicateOutcome {
  Vector posterior_mean;
  std::vector<Interval> intervals;  // 95% HPDI per parameter
  double log_ppd = 0.0;
  Matrix predictive;  // PPD simulations, compatible summaries only
};

ReplicateOutcome summarise(const PosteriorResult& result, const models::Task& task, Index ppd_draws, Rng& rng,
                           Index* ppd_calls = nullptr);

struct MetricRow {
  Index replicates = 0;
  Vector bias;      // mean of (posterior mean − θ*)
  Vector bias_sd;   // sd of the per-replicate errors
  Vector rmse;      // root mean squared error of the posterior mean
  Vector rmse_sd;   // sd of the per-replicate absolute errors
  Vector coverage;  // fraction of 95% HPDIs containing θ*
  double log_ppd_mean = 0.0;
  double log_ppd_sd = 0.0;
  double log_ppd_median = 0.0;
};

MetricRow metrics(const std::vector<ReplicateOutcome>& outcomes, const ParamVector& pseudo_truth);

}  // namespace prnpe::pipeline
