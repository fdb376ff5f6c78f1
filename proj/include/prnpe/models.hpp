#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "prnpe/core.hpp"

namespace prnpe::models {

/// One independent prior component.
struct PriorComponent {
  enum class Kind { Normal, LogNormal, Uniform };
  Kind kind = Kind::Normal;
  double a = 0.0;  // Normal/LogNormal: location μ; Uniform: lower bound
  double b = 1.0;  // Normal/LogNormal: scale σ; Uniform: upper bound

  static PriorComponent normal(double mu, double sigma) { return {Kind::Normal, mu, sigma}; }
  static PriorComponent log_normal(double mu, double sigma) {
    return {Kind::LogNormal, mu, sigma};
  }
  static PriorComponent uniform(double lo, double hi) { return {Kind::Uniform, lo, hi}; }

  double logpdf(double x) const;
  double sample(Rng& rng) const;
  double lower() const;  // -inf when unbounded
  double upper() const;  // +inf when unbounded
};

/// Product of independent components.
class Prior {
 public:
  Prior() = default;
  explicit Prior(std::vector<PriorComponent> components);

  Index dim() const noexcept { return static_cast<Index>(components_.size()); }
  const std::vector<PriorComponent>& components() const noexcept { return components_; }

  /// -inf outside the support; throws on dimension mismatch.
  double logpdf(const ParamVector& theta) const;
  ParamVector sample(Rng& rng) const;
  bool in_support(const ParamVector& theta) const;

 private:
  std::vector<PriorComponent> components_;
};

inline double prior_logpdf(const Prior& prior, const ParamVector& theta) {
  return prior.logpdf(theta);
}
inline ParamVector prior_sample(const Prior& prior, Rng& rng) { return prior.sample(rng); }

// ---------------------------------------------------------------------------
// Contaminated Weibull

struct WeibullTask {
  int n = 200;
  double scale = 1.0;
  double contamination = 0.05;
  double contaminant_mean = -1.0;
  double contaminant_sd = 0.2;
  /// Shape used to generate observations under the contaminated process.
  double true_shape = 0.8;
};

struct PseudoTruth {
  ParamVector theta_star;
  double objective = 0.0;
  bool at_boundary = false;
};

/// n i.i.d. Weibull(k, λ) draws by inverse CDF.
Vector weibull_simulate(double shape, const WeibullTask& task, Rng& rng);
/// Weibull(k, λ) mixed with N(contaminant_mean, contaminant_sd²).
Vector weibull_true_dgp(double shape, const WeibullTask& task, Rng& rng);
/// (mean, unbiased variance, minimum).
SummaryVector weibull_summaries(const Vector& data);

/// Analytic Weibull(k, 1) mean and variance.
std::pair<double, double> weibull_moments(double shape, double scale = 1.0);
/// Population mean and variance of the contaminated process at task.true_shape.
std::pair<double, double> contaminated_moments(const WeibullTask& task);

/// Grid search for the shape whose (mean, variance) is closest in Euclidean
/// distance to the contaminated process's population moments.
PseudoTruth weibull_pseudo_true(const WeibullTask& task, double lo = 0.1, double hi = 5.0,
                                double step = 1e-4);

// ---------------------------------------------------------------------------
// Sparse VAR(1)

struct SvarTask {
  int dim = 6;
  int length = 1000;
  double diagonal = -0.1;
  /// Active off-diagonal pairs; each contributes A(i,j) then A(j,i) to θ.
  std::vector<std::pair<int, int>> pairs = {{0, 1}, {2, 3}, {4, 5}};
  /// Drift of the true process; the assumed model has none.
  double drift = 0.05;
  ParamVector true_theta = (ParamVector(7) << 0.579, -0.143, 0.836, 0.745, -0.660, -0.254, 0.1)
                               .finished();

  Index theta_dim() const { return 2 * static_cast<Index>(pairs.size()) + 1; }
  Matrix transition(const ParamVector& theta) const;
};

/// T × d series from y_0 = 0: y_t = A y_{t−1} + drift + σ ξ_t.
Matrix svar_simulate(const ParamVector& theta, const SvarTask& task, double drift, Rng& rng);
/// Lag-1 cross-covariances for the ordered active pairs, pooled sd, global mean.
SummaryVector svar_summaries(const Matrix& series, const SvarTask& task);

// ---------------------------------------------------------------------------
// Linear-Gaussian toy: θ ~ N(0, 1), s = θ + N(0, noise²).

struct LinearGaussianTask {
  double noise_sd = 0.1;
  double true_theta = 0.5;
};

// ---------------------------------------------------------------------------

/// Everything the inference pipeline needs to know about a benchmark.
class Task {
 public:
  virtual ~Task() = default;

  virtual std::string name() const = 0;
  virtual const Prior& prior() const = 0;
  virtual Index theta_dim() const { return prior().dim(); }
  virtual Index summary_dim() const = 0;
  /// Summaries under the assumed model.
  virtual SummaryVector simulate(const ParamVector& theta, Rng& rng) const = 0;
  /// Summaries of one observed dataset from the true process.
  virtual SummaryVector observe(Rng& rng) const = 0;
  virtual ParamVector pseudo_truth() const = 0;
  /// Summary coordinates used for posterior-predictive distances.
  virtual std::vector<Index> compatible_summaries() const = 0;
  virtual std::vector<std::string> param_names() const = 0;
  /// Parameter component reported in the aggregate tables.
  virtual Index focus_parameter() const = 0;
};

class WeibullModel final : public Task {
 public:
  explicit WeibullModel(WeibullTask task = {});
  std::string name() const override { return "weibull"; }
  const Prior& prior() const override { return prior_; }
  Index summary_dim() const override { return 3; }
  SummaryVector simulate(const ParamVector& theta, Rng& rng) const override;
  SummaryVector observe(Rng& rng) const override;
  ParamVector pseudo_truth() const override { return pseudo_.theta_star; }
  std::vector<Index> compatible_summaries() const override { return {0, 1}; }
  std::vector<std::string> param_names() const override { return {"k"}; }
  Index focus_parameter() const override { return 0; }
  const WeibullTask& config() const { return task_; }

 private:
  WeibullTask task_;
  Prior prior_;
  PseudoTruth pseudo_;
};

class SvarModel final : public Task {
 public:
  explicit SvarModel(SvarTask task = {});
  std::string name() const override { return "svar"; }
  const Prior& prior() const override { return prior_; }
  Index summary_dim() const override { return task_.theta_dim() + 1; }
  SummaryVector simulate(const ParamVector& theta, Rng& rng) const override;
  SummaryVector observe(Rng& rng) const override;
  ParamVector pseudo_truth() const override { return task_.true_theta; }
  std::vector<Index> compatible_summaries() const override;
  std::vector<std::string> param_names() const override;
  Index focus_parameter() const override { return task_.theta_dim() - 1; }
  const SvarTask& config() const { return task_; }

 private:
  SvarTask task_;
  Prior prior_;
};

class LinearGaussianModel final : public Task {
 public:
  explicit LinearGaussianModel(LinearGaussianTask task = {});
  std::string name() const override { return "linear-gaussian-toy"; }
  const Prior& prior() const override { return prior_; }
  Index summary_dim() const override { return 1; }
  SummaryVector simulate(const ParamVector& theta, Rng& rng) const override;
  SummaryVector observe(Rng& rng) const override;
  ParamVector pseudo_truth() const override;
  std::vector<Index> compatible_summaries() const override { return {0}; }
  std::vector<std::string> param_names() const override { return {"theta"}; }
  Index focus_parameter() const override { return 0; }
  /// Exact posterior N(mean, var) given an observed summary.
  std::pair<double, double> posterior(double observed) const;

 private:
  LinearGaussianTask task_;
  Prior prior_;
};

}  // namespace prnpe::models
