#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prnpe/core.hpp"
#include "prnpe/models.hpp"

namespace prnpe::smc {

/// Summaries of one simulated dataset; non-finite entries mark a failed run.
using Simulator = std::function<SummaryVector(const ParamVector&, Rng&)>;

struct SmcConfig {
  Index population = 4000;
  double alpha = 0.5;          // fraction dropped each generation
  double eps0 = 1e6;           // starting tolerance reported before generation 1
  double eps_min = 1e-3;
  double p_min = 0.10;         // stop when the move acceptance rate falls below this
  double dup_prob = 0.01;      // c: target probability a duplicate is never moved
  int max_generations = 3;
  int max_init_retries = 100;  // redraws per particle when the simulator fails

  void validate() const;
};

/// Simulation budget ledger. `calls` counts budgeted simulator slots, including
/// move proposals that fall outside the prior support and are rejected without
/// running the simulator; `executed` counts actual simulator runs.
struct SimulationLedger {
  Index calls = 0;
  Index executed = 0;
  Index invalid = 0;
};

struct ParticlePopulation {
  Matrix thetas;         // N × d_θ
  Matrix summaries;      // N × d_s
  Vector discrepancies;  // ρ(s_i, s_y)
  double epsilon = 0.0;
  int generation = 0;
  std::vector<double> tolerance_history;
  std::vector<double> acceptance_history;

  Index size() const { return thetas.rows(); }
};

/// Euclidean distance on raw summaries.
double discrepancy(const SummaryVector& s, const SummaryVector& s_y);

/// R_next = max(1, ⌈log c / log(1 − p̂)⌉) with p̂ clamped to [1e-6, 1 − 1e-6].
int next_move_count(double acceptance, double dup_prob);

ParticlePopulation smc_init(const models::Prior& prior, const Simulator& simulator,
                            const SummaryVector& s_y, const SmcConfig& config, Rng& rng,
                            SimulationLedger& ledger);

struct GenerationResult {
  ParticlePopulation population;
  double acceptance = 0.0;
  int next_moves = 1;
};

/// One drop / resample / move cycle with `moves` Metropolis updates per
/// replenished particle.
GenerationResult smc_generation(const ParticlePopulation& population,
                                const models::Prior& prior, const Simulator& simulator,
                                const SummaryVector& s_y, const SmcConfig& config, int moves,
                                Rng& rng, SimulationLedger& ledger);

struct SmcResult {
  ParticlePopulation population;
  SimulationLedger ledger;
  std::vector<int> moves_per_generation;
  std::string stop_reason;

  Index total_simulations() const { return ledger.calls; }
};

/// Generations until ε ≤ eps_min, p̂ < p_min, max_generations, or the budget
/// cannot fund another generation. A generation whose planned move count
/// would overrun `budget` is run with the largest affordable move count.
SmcResult run_smc_abc(const models::Prior& prior, const Simulator& simulator,
                      const SummaryVector& s_y, const SmcConfig& config, Rng& rng,
                      std::optional<Index> budget = std::nullopt);

/// Final particles as a uniformly weighted training set.
SimDataset smc_to_dataset(const ParticlePopulation& population);

}  // namespace prnpe::smc
