#include "prnpe/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

namespace prnpe::pipeline {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct MethodInfo {
  Method method;
  const char* name;
  Preconditioner pre;
  bool robust;
};

constexpr MethodInfo kMethods[] = {
    {Method::PrnpeSmc, "PRNPE-SMC", Preconditioner::Smc, true},
    {Method::PrnpeRf, "PRNPE-RF", Preconditioner::Forest, true},
    {Method::Npe, "NPE", Preconditioner::None, false},
    {Method::Rnpe, "RNPE", Preconditioner::None, true},
    {Method::PnpeSmc, "PNPE-SMC", Preconditioner::Smc, false},
    {Method::PnpeRf, "PNPE-RF", Preconditioner::Forest, false},
};

const MethodInfo& info(Method m) {
  for (const auto& i : kMethods) {
    if (i.method == m) return i;
  }
  throw Error("pipeline: unknown method");
}

const char* stage_tag(Preconditioner p) {
  switch (p) {
    case Preconditioner::None: return "uniform";
    case Preconditioner::Smc: return "smc";
    case Preconditioner::Forest: return "forest";
  }
  return "";
}

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

TrainingSummary training_summary(const flow::TrainResult& r) {
  return {r.epochs, r.best_epoch, r.best_validation_nll, r.initial_train_nll, r.final_train_nll, r.train_rows,
          r.validation_rows};
}

// Prior-predictive draws, invalid rows removed.
struct PriorPredictive {
  SimDataset data;
  Index calls = 0;
  Index invalid = 0;
};

struct SmcStage {
  smc::SmcResult result;
  SimDataset data;
};

struct ForestStage {
  Vector weights;
  SimDataset resampled;
  double ess = 0.0;
};

// A standardised training set.
struct TrainingSet {
  SimDataset raw;
  Vector weights;  // normalised
  flow::BoundTransform bounds;
  Standardiser theta_std;
  Standardiser summary_std;
  Matrix targets;     // standardised transformed θ
  Matrix conditions;  // standardised s
  Index simulations = 0;
  Index invalid = 0;
  double ess = 0.0;
};

struct FlowStage {
  flow::FlowBundle bundle;
  TrainingSummary training;
};

}  // namespace

std::string method_name(Method m) { return info(m).name; }

Method parse_method(const std::string& name) {
  const std::string key = upper(name);
  for (const auto& i : kMethods) {
    if (key == i.name) return i.method;
  }
  throw Error("unknown method '" + name + "'");
}

std::vector<Method> all_methods() {
  std::vector<Method> out;
  for (const auto& i : kMethods) out.push_back(i.method);
  return out;
}

bool is_robust(Method m) { return info(m).robust; }
Preconditioner preconditioner(Method m) { return info(m).pre; }

void PipelineConfig::validate() const {
  if (budget <= 0) throw Error("pipeline: budget must be positive");
  if (posterior_samples < 1) throw Error("pipeline: posterior_samples must be positive");
  if (ppd_draws < 1) throw Error("pipeline: ppd_draws must be positive");
  if (forest_resample_size < 0) throw Error("pipeline: forest_resample_size must be nonnegative");
  if (!(kappa > 1.0)) throw Error("pipeline: kappa must exceed 1");
  smc.validate();
  forest.validate();
  flow.validate();
  train.validate();
  error.validate();
  nuts.validate();
}

// ---------------------------------------------------------------------------

struct Replicate::Cache {
  const models::Task& task;
  SummaryVector observed;
  PipelineConfig config;
  Rng rng;

  std::optional<PriorPredictive> prior_predictive;
  std::optional<SmcStage> smc_stage;
  std::optional<ForestStage> forest_stage;
  std::map<Preconditioner, TrainingSet> sets;
  std::map<Preconditioner, FlowStage> conditionals;
  std::map<Preconditioner, FlowStage> marginals;

  Cache(const models::Task& t, SummaryVector obs, PipelineConfig cfg, Rng r)
      : task(t), observed(std::move(obs)), config(std::move(cfg)), rng(r) {}

  const PriorPredictive& prior_pred() {
    if (prior_predictive) return *prior_predictive;
    Rng r = rng.split("prior-predictive");
    const Index n = config.budget;
    SimDataset d;
    d.thetas.resize(n, task.theta_dim());
    d.summaries.resize(n, task.summary_dim());
    for (Index i = 0; i < n; ++i) {
      const ParamVector theta = task.prior().sample(r);
      d.thetas.row(i) = theta.transpose();
      d.summaries.row(i) = task.simulate(theta, r).transpose();
    }
    FilterResult f = filter_invalid(d);
    PriorPredictive out;
    out.calls = n;
    out.invalid = n - f.dataset.size();
    out.data = std::move(f.dataset);
    if (out.data.size() < 2) throw Error("pipeline: fewer than two valid prior-predictive simulations");
    prior_predictive = std::move(out);
    return *prior_predictive;
  }

  const SmcStage& smc() {
    if (smc_stage) return *smc_stage;
    Rng r = rng.split("smc");
    const smc::Simulator sim = [this](const ParamVector& theta, Rng& g) { return task.simulate(theta, g); };
    SmcStage out;
    out.result = smc::run_smc_abc(task.prior(), sim, observed, config.smc, r, config.budget);
    if (out.result.ledger.calls > config.budget) {
      throw Error("pipeline: SMC-ABC used " + std::to_string(out.result.ledger.calls) +
                  " simulations, over the budget of " + std::to_string(config.budget));
    }
    out.data = smc::smc_to_dataset(out.result.population);
    smc_stage = std::move(out);
    return *smc_stage;
  }

  const ForestStage& forest() {
    if (forest_stage) return *forest_stage;
    const PriorPredictive& pp = prior_pred();
    Rng r = rng.split("forest");
    const Index m = config.forest_resample_size > 0 ? config.forest_resample_size : pp.data.size();
    forest::PreconditionResult p = forest::forest_precondition(pp.data, observed, config.forest, m, r);
    forest_stage = ForestStage{std::move(p.weights), std::move(p.resampled), p.ess};
    return *forest_stage;
  }

  const TrainingSet& training_set(Preconditioner pre) {
    if (auto it = sets.find(pre); it != sets.end()) return it->second;
    TrainingSet t;
    switch (pre) {
      case Preconditioner::None: {
        const PriorPredictive& pp = prior_pred();
        t.raw = pp.data;
        t.weights = Vector::Constant(t.raw.size(), 1.0 / static_cast<double>(t.raw.size()));
        t.simulations = pp.calls;
        t.invalid = pp.invalid;
        break;
      }
      case Preconditioner::Smc: {
        const SmcStage& s = smc();
        t.raw = s.data;
        t.weights = s.data.normalised_weights();
        t.simulations = s.result.ledger.calls;
        t.invalid = s.result.ledger.invalid;
        break;
      }
      case Preconditioner::Forest: {
        const PriorPredictive& pp = prior_pred();
        const ForestStage& f = forest();
        if (config.forest_resample_training) {
          t.raw = f.resampled;
          t.weights = Vector::Constant(t.raw.size(), 1.0 / static_cast<double>(t.raw.size()));
        } else {
          t.raw = pp.data;
          t.weights = f.weights;
        }
        t.simulations = pp.calls;
        t.invalid = pp.invalid;
        break;
      }
    }
    t.ess = pre == Preconditioner::Forest ? forest().ess : ess(t.weights);
    t.bounds = flow::BoundTransform::from_prior(task.prior());
    const Matrix z = t.bounds.apply_rows(t.raw.thetas);
    t.theta_std = fit_standardiser(z, t.weights);
    t.summary_std = fit_standardiser(t.raw.summaries, t.weights);
    t.targets = t.theta_std.transform_rows(z);
    t.conditions = t.summary_std.transform_rows(t.raw.summaries);
    return sets.emplace(pre, std::move(t)).first->second;
  }

  const FlowStage& conditional(Preconditioner pre) {
    if (auto it = conditionals.find(pre); it != conditionals.end()) return it->second;
    const TrainingSet& t = training_set(pre);
    Rng r = rng.split("conditional").split(stage_tag(pre));
    flow::TrainResult res = flow::train_flow(t.targets, t.conditions, t.weights, config.flow, config.train, r);
    FlowStage out;
    out.training = training_summary(res);
    out.bundle = flow::FlowBundle{std::move(res.params), t.theta_std, t.summary_std, t.bounds};
    return conditionals.emplace(pre, std::move(out)).first->second;
  }

  const FlowStage& marginal(Preconditioner pre) {
    if (auto it = marginals.find(pre); it != marginals.end()) return it->second;
    const TrainingSet& t = training_set(pre);
    Rng r = rng.split("marginal").split(stage_tag(pre));
    const Matrix none(t.conditions.rows(), 0);
    flow::TrainResult res = flow::train_flow(t.conditions, none, t.weights, config.flow, config.train, r);
    FlowStage out;
    out.training = training_summary(res);
    out.bundle = flow::FlowBundle{std::move(res.params), t.summary_std, std::nullopt,
                                  flow::BoundTransform::identity(t.conditions.cols())};
    return marginals.emplace(pre, std::move(out)).first->second;
  }

  PosteriorResult run(Method method) {
    const MethodInfo& mi = info(method);
    const TrainingSet& t = training_set(mi.pre);
    if (t.simulations > config.budget) {
      throw Error("pipeline: " + std::string(mi.name) + " exceeded the simulation budget");
    }
    const FlowStage& cond = conditional(mi.pre);

    PosteriorResult out;
    out.method = method;
    out.observed = observed;
    out.observed_standardised = t.summary_std.transform(observed);
    out.conditional = cond.bundle;
    out.conditional_training = cond.training;
    out.budget = config.budget;
    out.simulations = t.simulations;
    out.invalid_simulations = t.invalid;
    out.training_rows = t.raw.size();
    out.ess = t.ess;
    if (mi.pre == Preconditioner::Forest) {
      out.gap = gap_diagnostics(prior_pred().data, forest().weights, observed, config.kappa);
    } else {
      out.gap = gap_diagnostics(t.raw, t.weights, observed, config.kappa);
    }
    if (mi.pre == Preconditioner::Smc) {
      const SmcStage& s = smc();
      out.tolerances = s.result.population.tolerance_history;
      out.acceptance_rates = s.result.population.acceptance_history;
      out.smc_stop_reason = s.result.stop_reason;
    }

    Rng r = rng.split("posterior").split(mi.name);
    const Index m = config.posterior_samples;
    Matrix z;
    if (mi.robust) {
      const FlowStage& marg = marginal(mi.pre);
      out.marginal = marg.bundle;
      out.marginal_training = marg.training;
      denoise::NutsConfig nuts = config.nuts;
      nuts.samples = static_cast<int>(m);
      Rng dr = r.split("denoise");
      denoise::DenoiseResult den =
          denoise::denoise(config.error, marg.bundle.flow, out.observed_standardised, nuts, dr);
      Rng sr = r.split("sample");
      z = flow::flow_sample_rows(cond.bundle.flow, den.draws, sr);
      out.latent = std::move(den.draws);
      out.denoise_shift = den.shift;
      out.slab_probability = den.slab_probability;
      out.sampler = std::move(den.sampler);
    } else {
      Rng sr = r.split("sample");
      z = flow::flow_sample(cond.bundle.flow, out.observed_standardised, m, sr);
    }
    out.thetas = t.bounds.invert_rows(t.theta_std.inverse_rows(z));
    if (!out.thetas.allFinite()) throw Error("pipeline: non-finite posterior draw for " + std::string(mi.name));
    return out;
  }
};

Replicate::Replicate(const models::Task& task, SummaryVector observation, PipelineConfig config, Rng rng) {
  config.validate();
  if (observation.size() != task.summary_dim()) throw Error("pipeline: observation has the wrong dimension");
  if (!observation.allFinite()) throw Error("pipeline: observation is not finite");
  cache_ = std::make_unique<Cache>(task, std::move(observation), std::move(config), rng);
}

Replicate::~Replicate() = default;

PosteriorResult Replicate::run(Method method) { return cache_->run(method); }
const SimDataset& Replicate::prior_predictive() { return cache_->prior_pred().data; }
const Vector& Replicate::forest_weights() { return cache_->forest().weights; }
double Replicate::forest_ess() { return cache_->forest().ess; }
const smc::SmcResult& Replicate::smc_result() { return cache_->smc().result; }

PosteriorResult run_method(const MethodSpec& spec, const models::Task& task, const SummaryVector& observation,
                           const PipelineConfig& config, Rng& rng) {
  if (spec.budget <= 0) throw Error("pipeline: budget must be positive");
  PipelineConfig cfg = config;
  cfg.budget = spec.budget;
  cfg.posterior_samples = spec.posterior_samples;
  Replicate rep(task, observation, cfg, rng);
  return rep.run(spec.method);
}

// ---------------------------------------------------------------------------

double ensemble_logpdf(const PosteriorResult& result, const ParamVector& theta, const models::Prior& prior) {
  if (!prior.in_support(theta)) return -kInf;
  const flow::FlowBundle& b = result.conditional;
  double log_jac = 0.0;
  const Vector z = b.bounds.apply(theta, &log_jac);
  const Vector zs = b.target_standardiser.transform(z);
  const double offset = log_jac - b.target_standardiser.log_scale();
  const Matrix conds = result.latent ? *result.latent : Matrix(result.observed_standardised.transpose());
  const Index m = conds.rows();
  const Matrix targets = zs.transpose().replicate(m, 1);
  const Vector lp = flow::flow_logpdf_batch(b.flow, targets, conds);
  const double mx = lp.maxCoeff();
  if (mx == -kInf) return -kInf;
  const double lse = mx + std::log((lp.array() - mx).exp().sum());
  return lse - std::log(static_cast<double>(m)) + offset;
}

Interval hpdi(std::vector<double> samples, double level) {
  if (samples.size() < 100) {
    throw Error("hpdi: need at least 100 samples, got " + std::to_string(samples.size()));
  }
  if (!(level > 0.0 && level <= 1.0)) throw Error("hpdi: level must lie in (0, 1]");
  for (double x : samples) {
    if (std::isnan(x)) throw Error("hpdi: NaN sample");
  }
  std::sort(samples.begin(), samples.end());
  const auto n = samples.size();
  const auto k = static_cast<std::size_t>(std::ceil(level * static_cast<double>(n) - 1e-9));
  std::size_t best = 0;
  double width = kInf;
  for (std::size_t i = 0; i + k <= n; ++i) {
    const double w = samples[i + k - 1] - samples[i];
    if (w < width) {
      width = w;
      best = i;
    }
  }
  return {samples[best], samples[best + k - 1]};
}

GapDiagnostics gap_diagnostics(const SimDataset& dataset, const Vector& weights, const SummaryVector& s_y,
                               double kappa) {
  if (weights.size() != dataset.size()) throw Error("gap diagnostics: weight count mismatch");
  if (s_y.size() != dataset.summary_dim()) throw Error("gap diagnostics: observation dimension mismatch");
  const Vector w = normalise_weights(weights);
  std::vector<double> t1, t2, tk;
  for (Index i = 0; i < dataset.size(); ++i) {
    if (w[i] == 0.0) continue;
    const double d = (dataset.summaries.row(i).transpose() - s_y).norm();
    t1.push_back(w[i] * d);
    t2.push_back(w[i] * d * d);
    tk.push_back(w[i] * std::pow(d, kappa));
  }
  GapDiagnostics g;
  g.kappa = kappa;
  g.first = stable_sum(t1.data(), t1.size());
  g.second_root = std::sqrt(stable_sum(t2.data(), t2.size()));
  g.kappa_moment = stable_sum(tk.data(), tk.size());
  return g;
}

double log_median_ppd(const models::Task& task, const Matrix& thetas, const SummaryVector& observed, Index draws,
                      Rng& rng, Index* calls, Matrix* simulated) {
  const Index m = thetas.rows();
  if (m == 0) throw Error("ppd: no posterior draws");
  const Index n = std::min(draws, m);
  const std::vector<Index> keep = task.compatible_summaries();
  std::vector<double> dist(static_cast<std::size_t>(n));
  if (simulated) simulated->resize(n, static_cast<Index>(keep.size()));
  for (Index i = 0; i < n; ++i) {
    // Evenly spaced draws through the sample.
    const Index row = i * m / n;
    const SummaryVector s = task.simulate(thetas.row(row).transpose(), rng);
    double acc = 0.0;
    for (std::size_t c = 0; c < keep.size(); ++c) {
      const Index k = keep[c];
      acc += (s[k] - observed[k]) * (s[k] - observed[k]);
      if (simulated) (*simulated)(i, static_cast<Index>(c)) = s[k];
    }
    const double d = std::sqrt(acc);
    dist[static_cast<std::size_t>(i)] = std::isnan(d) ? kInf : d;
  }
  if (calls) *calls += n;
  std::sort(dist.begin(), dist.end());
  const auto h = dist.size() / 2;
  const double med = dist.size() % 2 == 1 ? dist[h] : 0.5 * dist[h - 1] + 0.5 * dist[h];
  return std::log(std::max(med, 1e-12));
}

ReplicateOutcome summarise(const PosteriorResult& result, const models::Task& task, Index ppd_draws, Rng& rng,
                           Index* ppd_calls) {
  ReplicateOutcome o;
  o.posterior_mean = result.thetas.colwise().mean().transpose();
  for (Index j = 0; j < result.thetas.cols(); ++j) {
    const Vector col = result.thetas.col(j);
    o.intervals.push_back(hpdi(std::vector<double>(col.data(), col.data() + col.size())));
  }
  o.log_ppd = log_median_ppd(task, result.thetas, result.observed, ppd_draws, rng, ppd_calls, &o.predictive);
  return o;
}

MetricRow metrics(const std::vector<ReplicateOutcome>& outcomes, const ParamVector& pseudo_truth) {
  if (outcomes.empty()) throw Error("metrics: no replicates");
  const Index d = pseudo_truth.size();
  const auto r = static_cast<double>(outcomes.size());
  MetricRow row;
  row.replicates = static_cast<Index>(outcomes.size());
  row.bias = Vector::Zero(d);
  row.bias_sd = Vector::Zero(d);
  row.rmse = Vector::Zero(d);
  row.rmse_sd = Vector::Zero(d);
  row.coverage = Vector::Zero(d);
  for (Index j = 0; j < d; ++j) {
    double sum = 0.0, sq = 0.0, abs_sum = 0.0, covered = 0.0;
    for (const auto& o : outcomes) {
      if (o.posterior_mean.size() != d) throw Error("metrics: parameter dimension mismatch");
      const double e = o.posterior_mean[j] - pseudo_truth[j];
      sum += e;
      sq += e * e;
      abs_sum += std::abs(e);
      const Interval& iv = o.intervals[static_cast<std::size_t>(j)];
      covered += (iv.lo <= pseudo_truth[j] && pseudo_truth[j] <= iv.hi) ? 1.0 : 0.0;
    }
    row.bias[j] = sum / r;
    row.rmse[j] = std::sqrt(sq / r);
    row.coverage[j] = covered / r;
    if (outcomes.size() > 1) {
      double vb = 0.0, va = 0.0;
      const double mean_abs = abs_sum / r;
      for (const auto& o : outcomes) {
        const double e = o.posterior_mean[j] - pseudo_truth[j];
        vb += (e - row.bias[j]) * (e - row.bias[j]);
        va += (std::abs(e) - mean_abs) * (std::abs(e) - mean_abs);
      }
      row.bias_sd[j] = std::sqrt(vb / (r - 1.0));
      row.rmse_sd[j] = std::sqrt(va / (r - 1.0));
    }
  }
  std::vector<double> ppd;
  for (const auto& o : outcomes) ppd.push_back(o.log_ppd);
  double mean = 0.0;
  for (double v : ppd) mean += v;
  mean /= r;
  double var = 0.0;
  for (double v : ppd) var += (v - mean) * (v - mean);
  row.log_ppd_mean = mean;
  row.log_ppd_sd = outcomes.size() > 1 ? std::sqrt(var / (r - 1.0)) : 0.0;
  std::sort(ppd.begin(), ppd.end());
  const auto h = ppd.size() / 2;
  row.log_ppd_median = ppd.size() % 2 == 1 ? ppd[h] : 0.5 * (ppd[h - 1] + ppd[h]);
  return row;
}

}  // namespace prnpe::pipeline
