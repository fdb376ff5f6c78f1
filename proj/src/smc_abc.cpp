#include "prnpe/smc_abc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace prnpe::smc {

void SmcConfig::validate() const {
  if (population < 2) throw Error("smc: population must be at least 2");
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("smc: alpha must lie in (0, 1)");
  if (!(dup_prob > 0.0 && dup_prob < 1.0)) throw Error("smc: dup_prob must lie in (0, 1)");
  if (static_cast<Index>(std::floor(alpha * static_cast<double>(population))) < 1) {
    throw Error("smc: alpha * population must drop at least one particle");
  }
  if (max_generations < 0) throw Error("smc: max_generations must be nonnegative");
  if (max_init_retries < 1) throw Error("smc: max_init_retries must be positive");
}

double discrepancy(const SummaryVector& s, const SummaryVector& s_y) {
  if (s.size() != s_y.size()) throw Error("smc: summary dimension mismatch");
  return (s - s_y).norm();
}

int next_move_count(double acceptance, double dup_prob) {
  const double p = std::clamp(acceptance, 1e-6, 1.0 - 1e-6);
  const double r = std::ceil(std::log(dup_prob) / std::log1p(-p));
  return std::max(1, static_cast<int>(r));
}

ParticlePopulation smc_init(const models::Prior& prior, const Simulator& simulator,
                            const SummaryVector& s_y, const SmcConfig& config, Rng& rng,
                            SimulationLedger& ledger) {
  config.validate();
  const Index n = config.population;
  ParticlePopulation pop;
  pop.thetas.resize(n, prior.dim());
  pop.summaries.resize(n, s_y.size());
  pop.discrepancies.resize(n);
  for (Index i = 0; i < n; ++i) {
    Rng particle_rng = rng.split(static_cast<std::uint64_t>(i));
    bool ok = false;
    for (int attempt = 0; attempt < config.max_init_retries && !ok; ++attempt) {
      const ParamVector theta = prior.sample(particle_rng);
      const SummaryVector s = simulator(theta, particle_rng);
      ++ledger.calls;
      ++ledger.executed;
      if (s.size() != s_y.size()) throw Error("smc: simulator returned wrong summary size");
      if (!s.allFinite()) {
        ++ledger.invalid;
        continue;
      }
      pop.thetas.row(i) = theta.transpose();
      pop.summaries.row(i) = s.transpose();
      pop.discrepancies[i] = discrepancy(s, s_y);
      ok = true;
    }
    if (!ok) {
      throw Error("smc: simulator failed " + std::to_string(config.max_init_retries) +
                  " consecutive draws (invalid rate " +
                  std::to_string(static_cast<double>(ledger.invalid) /
                                 static_cast<double>(ledger.executed)) +
                  ")");
    }
  }
  pop.epsilon = pop.discrepancies.maxCoeff();
  pop.tolerance_history.push_back(config.eps0);
  return pop;
}

GenerationResult smc_generation(const ParticlePopulation& population,
                                const models::Prior& prior, const Simulator& simulator,
                                const SummaryVector& s_y, const SmcConfig& config, int moves,
                                Rng& rng, SimulationLedger& ledger) {
  config.validate();
  if (moves < 1) throw Error("smc: move count must be at least 1");
  const Index n = population.size();
  const Index d = population.thetas.cols();
  const auto n_drop = static_cast<Index>(std::floor(config.alpha * static_cast<double>(n)));
  const Index n_alive = n - n_drop;

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return population.discrepancies[a] < population.discrepancies[b];
  });

  GenerationResult out;
  ParticlePopulation& next = out.population;
  next.thetas.resize(n, d);
  next.summaries.resize(n, population.summaries.cols());
  next.discrepancies.resize(n);
  for (Index r = 0; r < n_alive; ++r) {
    const Index src = order[static_cast<std::size_t>(r)];
    next.thetas.row(r) = population.thetas.row(src);
    next.summaries.row(r) = population.summaries.row(src);
    next.discrepancies[r] = population.discrepancies[src];
  }
  const double epsilon = next.discrepancies[n_alive - 1];

  // Proposal covariance of the alive parameters.
  const Matrix alive = next.thetas.topRows(n_alive);
  const Vector mean = alive.colwise().mean().transpose();
  const Matrix centred = alive.rowwise() - mean.transpose();
  Matrix cov = (centred.transpose() * centred) / static_cast<double>(std::max<Index>(n_alive - 1, 1));
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) {
    warn("smc: singular proposal covariance; adding 1e-10 jitter");
    cov += 1e-10 * Matrix::Identity(d, d);
    llt.compute(cov);
    if (llt.info() != Eigen::Success) throw Error("smc: proposal covariance is not positive definite");
  }
  const Matrix chol = llt.matrixL();

  Rng resample_rng = rng.split("resample");
  Index accepted = 0;
  ParamVector z(d);
  for (Index r = n_alive; r < n; ++r) {
    const auto pick = static_cast<Index>(resample_rng.uniform_index(static_cast<std::uint64_t>(n_alive)));
    ParamVector theta = next.thetas.row(pick).transpose();
    SummaryVector s = next.summaries.row(pick).transpose();
    double rho = next.discrepancies[pick];
    double log_prior = prior.logpdf(theta);

    Rng move_rng = rng.split(static_cast<std::uint64_t>(r));
    for (int m = 0; m < moves; ++m) {
      for (Index k = 0; k < d; ++k) z[k] = move_rng.normal();
      const ParamVector proposal = theta + chol * z;
      const double u = move_rng.uniform();
      ++ledger.calls;
      const double log_prior_prop = prior.logpdf(proposal);
      if (!std::isfinite(log_prior_prop)) continue;
      const SummaryVector s_prop = simulator(proposal, move_rng);
      ++ledger.executed;
      if (!s_prop.allFinite()) {
        ++ledger.invalid;
        continue;
      }
      const double rho_prop = discrepancy(s_prop, s_y);
      if (rho_prop > epsilon) continue;
      if (std::log(u) < log_prior_prop - log_prior) {
        theta = proposal;
        s = s_prop;
        rho = rho_prop;
        log_prior = log_prior_prop;
        ++accepted;
      }
    }
    next.thetas.row(r) = theta.transpose();
    next.summaries.row(r) = s.transpose();
    next.discrepancies[r] = rho;
  }

  next.epsilon = epsilon;
  next.generation = population.generation + 1;
  next.tolerance_history = population.tolerance_history;
  next.tolerance_history.push_back(epsilon);
  out.acceptance = static_cast<double>(accepted) / static_cast<double>(n_drop * moves);
  next.acceptance_history = population.acceptance_history;
  next.acceptance_history.push_back(out.acceptance);
  out.next_moves = next_move_count(out.acceptance, config.dup_prob);
  return out;
}

SmcResult run_smc_abc(const models::Prior& prior, const Simulator& simulator,
                      const SummaryVector& s_y, const SmcConfig& config, Rng& rng,
                      std::optional<Index> budget) {
  config.validate();
  if (budget && *budget < config.population) {
    throw Error("smc: budget " + std::to_string(*budget) + " cannot fund the initial population");
  }
  SmcResult result;
  Rng init_rng = rng.split("init");
  result.population = smc_init(prior, simulator, s_y, config, init_rng, result.ledger);
  if (budget && result.ledger.calls > *budget) {
    throw Error("smc: initial population exceeded the simulation budget (invalid draws)");
  }
  const auto n_drop =
      static_cast<Index>(std::floor(config.alpha * static_cast<double>(config.population)));

  int moves = 1;
  result.stop_reason = "max_generations";
  for (int t = 1; t <= config.max_generations; ++t) {
    if (budget) {
      const Index remaining = *budget - result.ledger.calls;
      const auto affordable = static_cast<int>(std::min<Index>(remaining / n_drop, 1 << 30));
      if (affordable < 1) {
        result.stop_reason = "budget";
        break;
      }
      moves = std::min(moves, affordable);
    }
    Rng gen_rng = rng.split(static_cast<std::uint64_t>(t));
    GenerationResult gen = smc_generation(result.population, prior, simulator, s_y, config,
                                          moves, gen_rng, result.ledger);
    result.moves_per_generation.push_back(moves);
    result.population = std::move(gen.population);
    moves = gen.next_moves;
    if (result.population.epsilon <= config.eps_min) {
      result.stop_reason = "eps_min";
      break;
    }
    if (gen.acceptance < config.p_min) {
      result.stop_reason = "acceptance";
      break;
    }
  }
  return result;
}

SimDataset smc_to_dataset(const ParticlePopulation& population) {
  if (population.size() == 0) throw Error("smc: empty population");
  SimDataset out;
  out.thetas = population.thetas;
  out.summaries = population.summaries;
  out.weights = Vector::Constant(population.size(), 1.0 / static_cast<double>(population.size()));
  return out;
}

}  // namespace prnpe::smc
