#include "prnpe/denoise.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace prnpe::denoise {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
const double kLogSqrt2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

double log_sum_exp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double normal_log(double d, double sigma) {
  const double z = d / sigma;
  return -0.5 * z * z - std::log(sigma) - kLogSqrt2Pi;
}

double slab_log(const ErrorModel& em, double d) {
  if (em.slab == SlabFamily::Gaussian) return normal_log(d, em.sigma_slab);
  const double z = d / em.sigma_slab;
  return -std::log(std::numbers::pi * em.sigma_slab) - std::log1p(z * z);
}

// d/ds of the log slab density at offset d = s_y − s.
double slab_score(const ErrorModel& em, double d) {
  const double s2 = em.sigma_slab * em.sigma_slab;
  if (em.slab == SlabFamily::Gaussian) return d / s2;
  return 2.0 * d / (s2 + d * d);
}

struct Terms {
  double log_spike;  // including log(1 − γ)
  double log_slab;   // including log γ
};

Terms terms(const ErrorModel& em, double d) {
  const double ls = em.gamma < 1.0 ? std::log1p(-em.gamma) + normal_log(d, em.sigma_spike) : -kInf;
  const double lb = em.gamma > 0.0 ? std::log(em.gamma) + slab_log(em, d) : -kInf;
  return {ls, lb};
}

void check_dims(const SummaryVector& s_y, const SummaryVector& s) {
  if (s_y.size() != s.size()) {
    throw Error("error model: dimension mismatch (" + std::to_string(s_y.size()) + " vs " +
                std::to_string(s.size()) + ")");
  }
}

// Phase-space point for Hamiltonian dynamics.
struct Point {
  Vector q, p, grad;
  double logp = 0.0;
};

class Nuts {
 public:
  Nuts(const LogTarget& target, const NutsConfig& config, Rng& rng, Index dim)
      : target_(target), config_(config), rng_(rng), inv_metric_(Vector::Ones(dim)) {}

  double kinetic(const Vector& p) const { return 0.5 * p.dot(inv_metric_.cwiseProduct(p)); }
  double hamiltonian(const Point& z) const { return -z.logp + kinetic(z.p); }
  Vector velocity(const Vector& p) const { return inv_metric_.cwiseProduct(p); }

  void evaluate(Point& z) {
    z.logp = target_(z.q, z.grad);
    ++gradient_evaluations_;
    if (std::isnan(z.logp) || !z.grad.allFinite()) z.logp = -kInf;
  }

  void sample_momentum(Point& z) {
    z.p.resize(z.q.size());
    for (Index i = 0; i < z.p.size(); ++i) z.p[i] = rng_.normal() / std::sqrt(inv_metric_[i]);
  }

  void leapfrog(Point& z, double eps) {
    z.p += 0.5 * eps * z.grad;
    z.q += eps * velocity(z.p);
    evaluate(z);
    if (z.logp == -kInf) return;
    z.p += 0.5 * eps * z.grad;
  }

  double energy(const Point& z) const {
    const double h = hamiltonian(z);
    return std::isnan(h) ? kInf : h;
  }

  static bool criterion(const Vector& p_sharp_minus, const Vector& p_sharp_plus, const Vector& rho) {
    return p_sharp_plus.dot(rho) > 0.0 && p_sharp_minus.dot(rho) > 0.0;
  }

  // Doubling step; returns false on divergence or a U-turn inside the subtree.
  bool build_tree(int depth, Point& z, Point& propose, Vector& p_sharp_beg, Vector& p_sharp_end,
                  Vector& rho, Vector& p_beg, Vector& p_end, double h0, double sign,
                  double& log_sum_weight) {
    if (depth == 0) {
      leapfrog(z, sign * eps_);
      ++n_leapfrog_;
      const double h = energy(z);
      if (h - h0 > config_.max_energy_error) divergent_ = true;
      log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
      sum_metro_prob_ += h0 - h > 0.0 ? 1.0 : std::exp(h0 - h);
      propose = z;
      p_sharp_beg = velocity(z.p);
      p_sharp_end = p_sharp_beg;
      rho += z.p;
      p_beg = z.p;
      p_end = p_beg;
      return !divergent_;
    }
    const Index d = z.q.size();
    double lsw_init = -kInf;
    Vector p_init_end(d), p_sharp_init_end(d), rho_init = Vector::Zero(d);
    if (!build_tree(depth - 1, z, propose, p_sharp_beg, p_sharp_init_end, rho_init, p_beg, p_init_end, h0,
                    sign, lsw_init)) {
      return false;
    }
    Point propose_final = z;
    double lsw_final = -kInf;
    Vector p_final_beg(d), p_sharp_final_beg(d), rho_final = Vector::Zero(d);
    if (!build_tree(depth - 1, z, propose_final, p_sharp_final_beg, p_sharp_end, rho_final, p_final_beg, p_end,
                    h0, sign, lsw_final)) {
      return false;
    }
    const double lsw_subtree = log_sum_exp(lsw_init, lsw_final);
    log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
    if (lsw_final > lsw_subtree) {
      propose = propose_final;
    } else if (rng_.uniform() < std::exp(lsw_final - lsw_subtree)) {
      propose = propose_final;
    }
    const Vector rho_subtree = rho_init + rho_final;
    rho += rho_subtree;
    bool persist = criterion(p_sharp_beg, p_sharp_end, rho_subtree);
    persist = persist && criterion(p_sharp_beg, p_sharp_final_beg, rho_init + p_final_beg);
    persist = persist && criterion(p_sharp_init_end, p_sharp_end, rho_final + p_init_end);
    return persist;
  }

  // One multinomial NUTS transition from `current`; returns the acceptance statistic.
  double transition(Point& current) {
    Point z = current;
    sample_momentum(z);
    const Index d = z.q.size();
    const double h0 = energy(z);
    Point z_fwd = z, z_bck = z, z_sample = z, z_propose = z;
    Vector p_sharp_fwd_fwd = velocity(z.p), p_sharp_fwd_bck = p_sharp_fwd_fwd;
    Vector p_sharp_bck_fwd = p_sharp_fwd_fwd, p_sharp_bck_bck = p_sharp_fwd_fwd;
    Vector p_fwd_fwd = z.p, p_fwd_bck = z.p, p_bck_fwd = z.p, p_bck_bck = z.p;
    Vector rho = z.p;
    double log_sum_weight = 0.0;
    depth_ = 0;
    n_leapfrog_ = 0;
    sum_metro_prob_ = 0.0;
    divergent_ = false;
    while (depth_ < config_.max_depth) {
      Vector rho_fwd = Vector::Zero(d), rho_bck = Vector::Zero(d);
      double lsw_subtree = -kInf;
      bool valid = false;
      if (rng_.uniform() > 0.5) {
        z = z_fwd;
        rho_bck = rho;
        p_bck_fwd = p_fwd_bck;
        p_sharp_bck_fwd = p_sharp_fwd_bck;
        valid = build_tree(depth_, z, z_propose, p_sharp_fwd_bck, p_sharp_fwd_fwd, rho_fwd, p_fwd_bck, p_fwd_fwd,
                           h0, 1.0, lsw_subtree);
        z_fwd = z;
      } else {
        z = z_bck;
        rho_fwd = rho;
        p_fwd_bck = p_bck_fwd;
        p_sharp_fwd_bck = p_sharp_bck_fwd;
        valid = build_tree(depth_, z, z_propose, p_sharp_bck_fwd, p_sharp_bck_bck, rho_bck, p_bck_fwd, p_bck_bck,
                           h0, -1.0, lsw_subtree);
        z_bck = z;
      }
      if (!valid) break;
      ++depth_;
      if (lsw_subtree > log_sum_weight) {
        z_sample = z_propose;
      } else if (rng_.uniform() < std::exp(lsw_subtree - log_sum_weight)) {
        z_sample = z_propose;
      }
      log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
      rho = rho_bck + rho_fwd;
      bool persist = criterion(p_sharp_bck_bck, p_sharp_fwd_fwd, rho);
      persist = persist && criterion(p_sharp_bck_bck, p_sharp_fwd_bck, rho_bck + p_fwd_bck);
      persist = persist && criterion(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_fwd + p_bck_fwd);
      if (!persist) break;
    }
    current = z_sample;
    return n_leapfrog_ > 0 ? sum_metro_prob_ / static_cast<double>(n_leapfrog_) : 0.0;
  }

  // Doubles or halves ε until one leapfrog step crosses acceptance 0.8.
  void init_step_size(const Point& start) {
    const double log08 = std::log(0.8);
    auto trial = [&]() {
      Point z = start;
      sample_momentum(z);
      const double h0 = energy(z);
      leapfrog(z, eps_);
      return h0 - energy(z);
    };
    double delta_h = trial();
    const int direction = delta_h > log08 ? 1 : -1;
    for (int iter = 0; iter < 200; ++iter) {
      delta_h = trial();
      if (direction == 1 && !(delta_h > log08)) break;
      if (direction == -1 && !(delta_h < log08)) break;
      eps_ = direction == 1 ? 2.0 * eps_ : 0.5 * eps_;
      if (eps_ > 1e7) throw Error("nuts: step size diverged to infinity during initialisation");
      if (eps_ == 0.0) throw Error("nuts: step size collapsed to zero during initialisation");
    }
  }

  double eps_ = 1.0;
  int depth_ = 0;
  Index gradient_evaluations_ = 0;
  bool divergent_ = false;
  const LogTarget& target_;
  const NutsConfig& config_;
  Rng& rng_;
  Vector inv_metric_;

 private:
  Index n_leapfrog_ = 0;
  double sum_metro_prob_ = 0.0;
};

// Nesterov dual averaging of log ε.
struct DualAveraging {
  double delta = 0.9, gamma = 0.05, t0 = 10.0, kappa = 0.75;
  double mu = 0.0, s_bar = 0.0, x_bar = 0.0;
  double counter = 0.0;

  void restart(double eps) {
    mu = std::log(10.0 * eps);
    s_bar = 0.0;
    x_bar = 0.0;
    counter = 0.0;
  }
  double learn(double accept) {
    counter += 1.0;
    accept = std::min(1.0, accept);
    const double eta = 1.0 / (counter + t0);
    s_bar = (1.0 - eta) * s_bar + eta * (delta - accept);
    const double x = mu - s_bar * std::sqrt(counter) / gamma;
    const double x_eta = std::pow(counter, -kappa);
    x_bar = (1.0 - x_eta) * x_bar + x_eta * x;
    return std::exp(x);
  }
  double final_step() const { return std::exp(x_bar); }
};

// Slow adaptation windows for the diagonal metric: an initial fast buffer,
// doubling windows, and a terminal fast buffer.
class MetricWindows {
 public:
  explicit MetricWindows(int warmup) : warmup_(warmup) {
    if (warmup < 20) {
      enabled_ = false;
      return;
    }
    if (init_buffer_ + base_window_ + term_buffer_ > warmup) {
      init_buffer_ = static_cast<int>(0.15 * warmup);
      term_buffer_ = static_cast<int>(0.1 * warmup);
      base_window_ = warmup - (init_buffer_ + term_buffer_);
    }
    window_size_ = base_window_;
    next_window_ = init_buffer_ + base_window_ - 1;
  }

  bool enabled() const { return enabled_; }

  // Feeds the draw at warmup iteration `counter_`; returns true when a window closes.
  bool learn(const Vector& q, Vector& inv_metric) {
    if (!enabled_) return false;
    const bool in_window = counter_ >= init_buffer_ && counter_ < warmup_ - term_buffer_ && counter_ != warmup_;
    if (in_window) add(q);
    if (counter_ == next_window_ && counter_ != warmup_) {
      compute_next_window();
      const double n = static_cast<double>(count_);
      const Vector var = m2_ / (n - 1.0);
      inv_metric = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
      count_ = 0;
      ++counter_;
      return true;
    }
    ++counter_;
    return false;
  }

 private:
  void add(const Vector& q) {
    if (count_ == 0) {
      mean_ = Vector::Zero(q.size());
      m2_ = Vector::Zero(q.size());
    }
    ++count_;
    const Vector delta = q - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta.cwiseProduct(q - mean_);
  }

  void compute_next_window() {
    if (next_window_ == warmup_ - term_buffer_ - 1) return;
    window_size_ *= 2;
    next_window_ = counter_ + window_size_;
    if (next_window_ != warmup_ - term_buffer_ - 1) {
      const int boundary = next_window_ + 2 * window_size_;
      if (boundary >= warmup_ - term_buffer_) next_window_ = warmup_ - term_buffer_ - 1;
    }
  }

  int warmup_;
  bool enabled_ = true;
  int init_buffer_ = 75;
  int term_buffer_ = 50;
  int base_window_ = 25;
  int window_size_ = 0;
  int next_window_ = 0;
  int counter_ = 0;
  Index count_ = 0;
  Vector mean_, m2_;
};

}  // namespace

void ErrorModel::validate() const {
  if (!(sigma_spike > 0.0) || !std::isfinite(sigma_spike)) throw Error("error model: sigma_spike must be positive");
  if (!(sigma_slab > 0.0) || !std::isfinite(sigma_slab)) throw Error("error model: sigma_slab must be positive");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw Error("error model: gamma must lie in [0, 1)");
}

double error_logpdf(const ErrorModel& em, const SummaryVector& s_y, const SummaryVector& s) {
  check_dims(s_y, s);
  double acc = 0.0;
  for (Index k = 0; k < s.size(); ++k) {
    const Terms t = terms(em, s_y[k] - s[k]);
    acc += log_sum_exp(t.log_spike, t.log_slab);
  }
  return acc;
}

Vector error_logpdf_grad(const ErrorModel& em, const SummaryVector& s_y, const SummaryVector& s) {
  check_dims(s_y, s);
  Vector g(s.size());
  const double s2 = em.sigma_spike * em.sigma_spike;
  for (Index k = 0; k < s.size(); ++k) {
    const double d = s_y[k] - s[k];
    const Terms t = terms(em, d);
    const double total = log_sum_exp(t.log_spike, t.log_slab);
    const double r_spike = t.log_spike == -kInf ? 0.0 : std::exp(t.log_spike - total);
    const double r_slab = t.log_slab == -kInf ? 0.0 : std::exp(t.log_slab - total);
    g[k] = r_spike * d / s2 + r_slab * slab_score(em, d);
  }
  return g;
}

Vector slab_responsibility(const ErrorModel& em, const SummaryVector& s_y, const SummaryVector& s) {
  check_dims(s_y, s);
  Vector r(s.size());
  for (Index k = 0; k < s.size(); ++k) {
    const Terms t = terms(em, s_y[k] - s[k]);
    r[k] = t.log_slab == -kInf ? 0.0 : std::exp(t.log_slab - log_sum_exp(t.log_spike, t.log_slab));
  }
  return r;
}

void NutsConfig::validate() const {
  if (!(target_accept > 0.0 && target_accept < 1.0)) throw Error("nuts: target_accept must lie in (0, 1)");
  if (warmup < 0) throw Error("nuts: warmup must be nonnegative");
  if (samples < 1) throw Error("nuts: samples must be positive");
  if (max_depth < 1) throw Error("nuts: max_depth must be positive");
  if (!(max_energy_error > 0.0)) throw Error("nuts: max_energy_error must be positive");
}

NutsResult nuts_sample(const LogTarget& target, const Vector& init, const NutsConfig& config, Rng& rng) {
  config.validate();
  const Index d = init.size();
  if (d == 0) throw Error("nuts: empty initial point");
  Nuts nuts(target, config, rng, d);
  Point current;
  current.q = init;
  nuts.evaluate(current);
  if (!std::isfinite(current.logp) || !current.grad.allFinite() || current.grad.size() != d) {
    throw Error("nuts: log target or gradient is not finite at the initial point");
  }

  NutsResult out;
  nuts.init_step_size(current);
  DualAveraging da;
  da.delta = config.target_accept;
  da.restart(nuts.eps_);
  MetricWindows windows(config.warmup);
  const bool adapt_metric = config.adapt_metric && windows.enabled();
  out.warmup_step_sizes.reserve(static_cast<std::size_t>(config.warmup));
  for (int it = 0; it < config.warmup; ++it) {
    const double accept = nuts.transition(current);
    if (nuts.divergent_) ++out.warmup_divergences;
    nuts.eps_ = da.learn(accept);
    if (adapt_metric && windows.learn(current.q, nuts.inv_metric_)) {
      nuts.init_step_size(current);
      da.restart(nuts.eps_);
    }
    out.warmup_step_sizes.push_back(nuts.eps_);
    out.warmup_accept.push_back(accept);
  }
  if (config.warmup > 0) nuts.eps_ = da.final_step();

  out.draws.resize(config.samples, d);
  double accept_sum = 0.0, depth_sum = 0.0;
  for (int it = 0; it < config.samples; ++it) {
    accept_sum += nuts.transition(current);
    depth_sum += nuts.depth_;
    if (nuts.divergent_) ++out.divergences;
    out.draws.row(it) = current.q.transpose();
  }
  out.step_size = nuts.eps_;
  out.mean_accept = accept_sum / config.samples;
  out.mean_depth = depth_sum / config.samples;
  out.gradient_evaluations = nuts.gradient_evaluations_;
  out.inverse_metric = nuts.inv_metric_;
  return out;
}

double chain_ess(const Vector& series) {
  const Index n = series.size();
  if (n < 4) return static_cast<double>(n);
  const Vector c = series.array() - series.mean();
  const double var = c.squaredNorm() / static_cast<double>(n);
  if (var == 0.0) return static_cast<double>(n);
  auto rho = [&](Index lag) {
    return c.head(n - lag).dot(c.tail(n - lag)) / (static_cast<double>(n) * var);
  };
  // Sum of autocorrelation pairs while positive, forced nonincreasing.
  double tau = -1.0;
  double prev = std::numeric_limits<double>::infinity();
  for (Index k = 0; k + 1 < n; k += 2) {
    double pair = rho(k) + rho(k + 1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev);
    prev = pair;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / std::log10(static_cast<double>(n)));
  return static_cast<double>(n) / tau;
}

double denoise_logpdf(const ErrorModel& em, const flow::FlowParams& marginal, const SummaryVector& s_y,
                      const SummaryVector& s, Vector* grad) {
  if (marginal.conditional()) throw Error("denoise: the marginal flow must be unconditional");
  const Matrix row = s.transpose();
  const Matrix none(1, 0);
  if (!grad) return error_logpdf(em, s_y, s) + flow::flow_logpdf_batch(marginal, row, none)[0];
  const flow::FlowGradient g = flow::flow_logpdf_grad(marginal, row, none, Vector::Ones(1), false, true);
  *grad = error_logpdf_grad(em, s_y, s) + g.targets.row(0).transpose();
  return error_logpdf(em, s_y, s) + g.logpdf[0];
}

DenoiseResult denoise(const ErrorModel& em, const flow::FlowParams& marginal, const SummaryVector& s_y,
                      const NutsConfig& config, Rng& rng) {
  em.validate();
  if (marginal.arch().target_dim != s_y.size()) {
    throw Error("denoise: observation has dimension " + std::to_string(s_y.size()) + ", flow expects " +
                std::to_string(marginal.arch().target_dim));
  }
  const double box = marginal.arch().bound;
  const Vector init = s_y.cwiseMax(-box).cwiseMin(box);
  const LogTarget target = [&](const Vector& s, Vector& grad) {
    return denoise_logpdf(em, marginal, s_y, s, &grad);
  };
  DenoiseResult out;
  out.sampler = nuts_sample(target, init, config, rng);
  out.draws = std::move(out.sampler.draws);
  out.sampler.draws.resize(0, 0);
  const Index m = out.draws.rows();
  out.shift = (out.draws.rowwise() - s_y.transpose()).colwise().mean().transpose();
  out.slab_probability = Vector::Zero(s_y.size());
  for (Index i = 0; i < m; ++i) out.slab_probability += slab_responsibility(em, s_y, out.draws.row(i).transpose());
  out.slab_probability /= static_cast<double>(m);
  return out;
}

}  // namespace prnpe::denoise
