#include "prnpe/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace prnpe::models {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
const double kLogSqrt2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

double PriorComponent::logpdf(double x) const {
  switch (kind) {
    case Kind::Normal: {
      const double z = (x - a) / b;
      return -0.5 * z * z - std::log(b) - kLogSqrt2Pi;
    }
    case Kind::LogNormal: {
      if (!(x > 0.0)) return -kInf;
      const double z = (std::log(x) - a) / b;
      return -0.5 * z * z - std::log(b) - kLogSqrt2Pi - std::log(x);
    }
    case Kind::Uniform:
      if (x < a || x > b) return -kInf;
      return -std::log(b - a);
  }
  return -kInf;
}

double PriorComponent::sample(Rng& rng) const {
  switch (kind) {
    case Kind::Normal:
      return a + b * rng.normal();
    case Kind::LogNormal:
      return std::exp(a + b * rng.normal());
    case Kind::Uniform:
      return a + (b - a) * rng.uniform();
  }
  return 0.0;
}

double PriorComponent::lower() const {
  switch (kind) {
    case Kind::Normal:
      return -kInf;
    case Kind::LogNormal:
      return 0.0;
    case Kind::Uniform:
      return a;
  }
  return -kInf;
}

double PriorComponent::upper() const { return kind == Kind::Uniform ? b : kInf; }

Prior::Prior(std::vector<PriorComponent> components) : components_(std::move(components)) {
  for (const auto& c : components_) {
    if (c.kind == PriorComponent::Kind::Uniform ? !(c.b > c.a) : !(c.b > 0.0)) {
      throw Error("prior: invalid component parameters");
    }
  }
}

double Prior::logpdf(const ParamVector& theta) const {
  if (theta.size() != dim()) {
    throw Error("prior: expected " + std::to_string(dim()) + " parameters, got " +
                std::to_string(theta.size()));
  }
  double lp = 0.0;
  for (Index i = 0; i < dim(); ++i) {
    lp += components_[static_cast<std::size_t>(i)].logpdf(theta[i]);
    if (lp == -kInf) return lp;
  }
  return lp;
}

ParamVector Prior::sample(Rng& rng) const {
  ParamVector out(dim());
  for (Index i = 0; i < dim(); ++i) out[i] = components_[static_cast<std::size_t>(i)].sample(rng);
  return out;
}

bool Prior::in_support(const ParamVector& theta) const { return logpdf(theta) > -kInf; }

// ---------------------------------------------------------------------------

Vector weibull_simulate(double shape, const WeibullTask& task, Rng& rng) {
  if (!(shape > 0.0) || !std::isfinite(shape)) throw Error("weibull: shape must be positive");
  if (task.n < 1) throw Error("weibull: sample size must be positive");
  const double inv_shape = 1.0 / shape;
  Vector x(task.n);
  for (Index i = 0; i < x.size(); ++i) {
    x[i] = task.scale * std::pow(-std::log(rng.uniform()), inv_shape);
  }
  return x;
}

Vector weibull_true_dgp(double shape, const WeibullTask& task, Rng& rng) {
  if (!(shape > 0.0) || !std::isfinite(shape)) throw Error("weibull: shape must be positive");
  if (task.n < 1) throw Error("weibull: sample size must be positive");
  if (task.contamination < 0.0 || task.contamination >= 1.0) {
    throw Error("weibull: contamination rate must lie in [0, 1)");
  }
  const double inv_shape = 1.0 / shape;
  Vector x(task.n);
  for (Index i = 0; i < x.size(); ++i) {
    const bool contaminated = rng.uniform() < task.contamination;
    if (contaminated) {
      x[i] = task.contaminant_mean + task.contaminant_sd * rng.normal();
    } else {
      x[i] = task.scale * std::pow(-std::log(rng.uniform()), inv_shape);
    }
  }
  return x;
}

SummaryVector weibull_summaries(const Vector& data) {
  if (data.size() == 0) throw Error("weibull_summaries: empty data");
  const auto n = static_cast<double>(data.size());
  const double mean = stable_sum(data.data(), static_cast<std::size_t>(data.size())) / n;
  double ss = 0.0;
  for (Index i = 0; i < data.size(); ++i) ss += (data[i] - mean) * (data[i] - mean);
  const double var = data.size() > 1 ? ss / (n - 1.0) : 0.0;
  SummaryVector s(3);
  s << mean, var, data.minCoeff();
  return s;
}

std::pair<double, double> weibull_moments(double shape, double scale) {
  const double m1 = std::tgamma(1.0 + 1.0 / shape);
  const double m2 = std::tgamma(1.0 + 2.0 / shape);
  return {scale * m1, scale * scale * (m2 - m1 * m1)};
}

std::pair<double, double> contaminated_moments(const WeibullTask& task) {
  const auto [mw, vw] = weibull_moments(task.true_shape, task.scale);
  const double r = task.contamination;
  const double mc = task.contaminant_mean;
  const double vc = task.contaminant_sd * task.contaminant_sd;
  const double mean = (1.0 - r) * mw + r * mc;
  const double second = (1.0 - r) * (vw + mw * mw) + r * (vc + mc * mc);
  return {mean, second - mean * mean};
}

PseudoTruth weibull_pseudo_true(const WeibullTask& task, double lo, double hi, double step) {
  if (!(lo > 0.0) || !(hi > lo) || !(step > 0.0)) throw Error("pseudo-truth: invalid grid");
  const auto [mt, vt] = contaminated_moments(task);
  const auto points = static_cast<Index>(std::floor((hi - lo) / step + 0.5)) + 1;
  double best = kInf;
  Index best_i = 0;
  for (Index i = 0; i < points; ++i) {
    const double k = lo + static_cast<double>(i) * step;
    const auto [m, v] = weibull_moments(k, task.scale);
    const double d = std::hypot(m - mt, v - vt);
    if (d < best) {
      best = d;
      best_i = i;
    }
  }
  PseudoTruth out;
  out.theta_star = ParamVector::Constant(1, lo + static_cast<double>(best_i) * step);
  out.objective = best;
  out.at_boundary = best_i == 0 || best_i == points - 1;
  if (out.at_boundary) {
    warn("pseudo-truth: minimiser at grid boundary k = " + std::to_string(out.theta_star[0]));
  }
  return out;
}

// ---------------------------------------------------------------------------

Matrix SvarTask::transition(const ParamVector& theta) const {
  if (theta.size() != theta_dim()) throw Error("svar: parameter dimension mismatch");
  Matrix a = Matrix::Zero(dim, dim);
  a.diagonal().setConstant(diagonal);
  Index k = 0;
  for (const auto& [i, j] : pairs) {
    a(i, j) = theta[k++];
    a(j, i) = theta[k++];
  }
  return a;
}

Matrix svar_simulate(const ParamVector& theta, const SvarTask& task, double drift, Rng& rng) {
  const Matrix a = task.transition(theta);
  const double sigma = theta[theta.size() - 1];
  if (!(sigma > 0.0)) throw Error("svar: noise scale must be positive");
  if (task.length < 1) throw Error("svar: series length must be positive");
  const Index d = task.dim;
  Matrix series(task.length, d);
  Vector prev = Vector::Zero(d);
  Vector next(d);
  for (Index t = 0; t < task.length; ++t) {
    next.noalias() = a * prev;
    for (Index i = 0; i < d; ++i) next[i] += drift + sigma * rng.normal();
    series.row(t) = next.transpose();
    prev = next;
  }
  return series;
}

SummaryVector svar_summaries(const Matrix& series, const SvarTask& task) {
  const Index t_len = series.rows();
  const Index d = series.cols();
  if (t_len < 2) throw Error("svar_summaries: need at least two time points");
  const Vector means = series.colwise().mean().transpose();
  const Matrix centred = series.rowwise() - means.transpose();
  const auto inv_t = 1.0 / static_cast<double>(t_len);

  SummaryVector s(2 * static_cast<Index>(task.pairs.size()) + 2);
  Index k = 0;
  auto lag_cov = [&](Index i, Index j) {
    return centred.col(i).tail(t_len - 1).dot(centred.col(j).head(t_len - 1)) * inv_t;
  };
  for (const auto& [i, j] : task.pairs) {
    s[k++] = lag_cov(i, j);
    s[k++] = lag_cov(j, i);
  }
  s[k++] = std::sqrt(centred.squaredNorm() / static_cast<double>(t_len * d));
  s[k++] = means.mean();
  return s;
}

// ---------------------------------------------------------------------------

WeibullModel::WeibullModel(WeibullTask task)
    : task_(task),
      prior_({PriorComponent::log_normal(1.0, 1.0)}),
      pseudo_(weibull_pseudo_true(task_)) {}

SummaryVector WeibullModel::simulate(const ParamVector& theta, Rng& rng) const {
  return weibull_summaries(weibull_simulate(theta[0], task_, rng));
}

SummaryVector WeibullModel::observe(Rng& rng) const {
  return weibull_summaries(weibull_true_dgp(task_.true_shape, task_, rng));
}

SvarModel::SvarModel(SvarTask task) : task_(std::move(task)) {
  std::vector<PriorComponent> comps(static_cast<std::size_t>(task_.theta_dim() - 1),
                                    PriorComponent::uniform(-1.0, 1.0));
  comps.push_back(PriorComponent::uniform(0.0, 1.0));
  prior_ = Prior(std::move(comps));
  if (task_.true_theta.size() != task_.theta_dim()) {
    throw Error("svar: true parameter has the wrong dimension");
  }
}

SummaryVector SvarModel::simulate(const ParamVector& theta, Rng& rng) const {
  return svar_summaries(svar_simulate(theta, task_, 0.0, rng), task_);
}

SummaryVector SvarModel::observe(Rng& rng) const {
  return svar_summaries(svar_simulate(task_.true_theta, task_, task_.drift, rng), task_);
}

std::vector<Index> SvarModel::compatible_summaries() const {
  std::vector<Index> idx(static_cast<std::size_t>(summary_dim() - 1));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Index>(i);
  return idx;
}

std::vector<std::string> SvarModel::param_names() const {
  std::vector<std::string> names;
  for (const auto& [i, j] : task_.pairs) {
    names.push_back("A" + std::to_string(i + 1) + std::to_string(j + 1));
    names.push_back("A" + std::to_string(j + 1) + std::to_string(i + 1));
  }
  names.emplace_back("sigma");
  return names;
}

LinearGaussianModel::LinearGaussianModel(LinearGaussianTask task)
    : task_(task), prior_({PriorComponent::normal(0.0, 1.0)}) {
  if (!(task_.noise_sd > 0.0)) throw Error("linear-gaussian: noise sd must be positive");
}

SummaryVector LinearGaussianModel::simulate(const ParamVector& theta, Rng& rng) const {
  return SummaryVector::Constant(1, theta[0] + task_.noise_sd * rng.normal());
}

SummaryVector LinearGaussianModel::observe(Rng& rng) const {
  return SummaryVector::Constant(1, task_.true_theta + task_.noise_sd * rng.normal());
}

ParamVector LinearGaussianModel::pseudo_truth() const {
  return ParamVector::Constant(1, task_.true_theta);
}

std::pair<double, double> LinearGaussianModel::posterior(double observed) const {
  const double noise_var = task_.noise_sd * task_.noise_sd;
  return {observed / (1.0 + noise_var), noise_var / (1.0 + noise_var)};
}

}  // namespace prnpe::models
