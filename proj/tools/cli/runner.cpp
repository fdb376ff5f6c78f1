#include "cli/runner.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace prnpe::cli {
namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

Json vec(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(number(v[i]));
  return a;
}

Json vec(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(number(x));
  return a;
}

Json rows(const Matrix& m) {
  Json a = Json::array();
  for (Index i = 0; i < m.rows(); ++i) a.push_back(vec(Vector(m.row(i).transpose())));
  return a;
}

Json training(const pipeline::TrainingSummary& t) {
  return Json{{"epochs", t.epochs},
              {"best_epoch", t.best_epoch},
              {"best_validation_nll", number(t.best_validation_nll)},
              {"initial_train_nll", number(t.initial_train_nll)},
              {"final_train_nll", number(t.final_train_nll)},
              {"train_rows", t.train_rows},
              {"validation_rows", t.validation_rows}};
}

Json gap(const pipeline::GapDiagnostics& g) {
  return Json{{"first", number(g.first)},
              {"second_root", number(g.second_root)},
              {"kappa_moment", number(g.kappa_moment)},
              {"kappa", number(g.kappa)}};
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

const char* kCsvHeader =
    "task,method,parameter,replicates,failed,bias,bias_sd,rmse,rmse_sd,coverage,log_ppd_mean,log_ppd_sd,"
    "log_ppd_median\n";

void csv_row(std::ostringstream& out, const std::string& task, const MethodRow& row, const std::string& name,
             Index j) {
  out << task << ',' << pipeline::method_name(row.method) << ',' << name << ',';
  if (!row.metrics) {
    out << 0 << ',' << row.failed << ",,,,,,,,\n";
    return;
  }
  const auto& m = *row.metrics;
  out << m.replicates << ',' << row.failed << ',' << csv_number(m.bias[j]) << ',' << csv_number(m.bias_sd[j]) << ','
      << csv_number(m.rmse[j]) << ',' << csv_number(m.rmse_sd[j]) << ',' << csv_number(m.coverage[j]) << ','
      << csv_number(m.log_ppd_mean) << ',' << csv_number(m.log_ppd_sd) << ',' << csv_number(m.log_ppd_median)
      << '\n';
}

Rng replicate_rng(std::uint64_t seed) { return Rng(seed, 0); }

}  // namespace

double round12(double v) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.11e", v);
  return std::strtod(buf, nullptr);
}

nlohmann::ordered_json number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return round12(v);
}

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out << text;
    out.flush();
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, p);
}

std::string report_path(const RunConfig& config, pipeline::Method method, std::uint64_t seed) {
  return (fs::path(config.outdir) / config.task / pipeline::method_name(method) / (std::to_string(seed) + ".json"))
      .string();
}

nlohmann::ordered_json replicate_report(const RunConfig& config, const models::Task& task, std::uint64_t seed,
                                        pipeline::Method method, const pipeline::PosteriorResult* result,
                                        const pipeline::ReplicateOutcome* outcome, Index ppd_calls,
                                        const std::string& error) {
  Json r;
  r["task"] = config.task;
  r["method"] = pipeline::method_name(method);
  r["seed"] = seed;
  r["status"] = error.empty() ? "ok" : "error";
  if (!error.empty()) r["error"] = error;
  r["config"] = echo(config);
  Json names = Json::array();
  for (const auto& n : task.param_names()) names.push_back(n);
  r["param_names"] = names;
  r["focus_parameter"] = task.focus_parameter();
  r["pseudo_truth"] = vec(task.pseudo_truth());
  Json compat = Json::array();
  for (Index k : task.compatible_summaries()) compat.push_back(k);
  r["compatible_summaries"] = compat;
  if (!result) return r;

  r["observed"] = vec(result->observed);
  r["budget"] = Json{{"limit", result->budget},
                     {"inference_simulations", result->simulations},
                     {"invalid_simulations", result->invalid_simulations},
                     {"ppd_simulations", ppd_calls},
                     {"total_simulations", result->simulations + ppd_calls},
                     {"training_rows", result->training_rows}};

  if (outcome) {
    const ParamVector truth = task.pseudo_truth();
    Json lo = Json::array(), hi = Json::array(), err = Json::array(), covered = Json::array();
    for (std::size_t j = 0; j < outcome->intervals.size(); ++j) {
      const auto& iv = outcome->intervals[j];
      const auto jj = static_cast<Index>(j);
      lo.push_back(number(iv.lo));
      hi.push_back(number(iv.hi));
      err.push_back(number(outcome->posterior_mean[jj] - truth[jj]));
      covered.push_back(iv.lo <= truth[jj] && truth[jj] <= iv.hi);
    }
    double at_truth = std::nan("");
    try {
      at_truth = pipeline::ensemble_logpdf(*result, truth, task.prior());
    } catch (const Error&) {
    }
    r["metrics"] = Json{{"posterior_mean", vec(outcome->posterior_mean)},
                        {"hpdi_lo", lo},
                        {"hpdi_hi", hi},
                        {"error", err},
                        {"covered", covered},
                        {"log_ppd", number(outcome->log_ppd)},
                        {"ensemble_logpdf_at_truth", number(at_truth)}};
  }

  Json d;
  d["ess"] = number(result->ess);
  if (pipeline::preconditioner(method) == pipeline::Preconditioner::Smc) {
    d["smc"] = Json{{"tolerances", vec(result->tolerances)},
                    {"acceptance_rates", vec(result->acceptance_rates)},
                    {"stop_reason", result->smc_stop_reason}};
  }
  d["gap"] = gap(result->gap);
  d["conditional_training"] = training(result->conditional_training);
  if (result->marginal_training) d["marginal_training"] = training(*result->marginal_training);
  if (result->sampler) {
    const auto& s = *result->sampler;
    d["sampler"] = Json{{"step_size", number(s.step_size)},
                        {"mean_accept", number(s.mean_accept)},
                        {"divergences", s.divergences},
                        {"warmup_divergences", s.warmup_divergences},
                        {"mean_depth", number(s.mean_depth)},
                        {"gradient_evaluations", s.gradient_evaluations},
                        {"inverse_metric", vec(s.inverse_metric)}};
    d["denoise_shift"] = vec(result->denoise_shift);
    d["slab_probability"] = vec(result->slab_probability);
  }
  r["diagnostics"] = d;

  if (config.save_draws) {
    Json draws;
    draws["theta"] = rows(result->thetas);
    if (outcome) draws["predictive"] = rows(outcome->predictive);
    r["draws"] = draws;
  }
  return r;
}

std::string summary_csv(const std::string& task, const std::vector<MethodRow>& rows, Index focus,
                        const std::vector<std::string>& param_names) {
  std::ostringstream out;
  out << kCsvHeader;
  for (const auto& row : rows) csv_row(out, task, row, param_names[static_cast<std::size_t>(focus)], focus);
  return out.str();
}

std::string summary_all_csv(const std::string& task, const std::vector<MethodRow>& rows,
                            const std::vector<std::string>& param_names) {
  std::ostringstream out;
  out << kCsvHeader;
  for (const auto& row : rows) {
    for (std::size_t j = 0; j < param_names.size(); ++j) {
      csv_row(out, task, row, param_names[j], static_cast<Index>(j));
    }
  }
  return out.str();
}

RunStatus run_experiment(const RunConfig& config, std::ostream& log) {
  validate(config);
  const auto task = make_task(config);
  const auto n_rep = static_cast<std::size_t>(config.replicates);
  const std::size_t n_meth = config.methods.size();

  // outcomes[r][m]
  std::vector<std::vector<std::optional<pipeline::ReplicateOutcome>>> outcomes(
      n_rep, std::vector<std::optional<pipeline::ReplicateOutcome>>(n_meth));
  std::vector<std::vector<std::string>> paths(n_rep, std::vector<std::string>(n_meth));
  std::vector<std::vector<bool>> written(n_rep, std::vector<bool>(n_meth, false));
  std::mutex log_mutex;
  auto say = [&](const std::string& line) {
    std::lock_guard<std::mutex> lock(log_mutex);
    log << line << std::endl;
  };

  auto job = [&](std::size_t r) {
    const std::uint64_t seed = config.seed + r;
    const auto started = std::chrono::steady_clock::now();
    const Rng base = replicate_rng(seed);
    std::unique_ptr<pipeline::Replicate> rep;
    std::string setup_error;
    try {
      Rng obs_rng = base.split("observation");
      const SummaryVector obs = task->observe(obs_rng);
      rep = std::make_unique<pipeline::Replicate>(*task, obs, config.pipeline, base.split("inference"));
    } catch (const std::exception& e) {
      setup_error = e.what();
    }
    for (std::size_t m = 0; m < n_meth; ++m) {
      const pipeline::Method method = config.methods[m];
      const std::string path = report_path(config, method, seed);
      Json report;
      std::string error = setup_error;
      try {
        if (!rep) throw Error(setup_error);
        const auto t0 = std::chrono::steady_clock::now();
        const pipeline::PosteriorResult result = rep->run(method);
        Rng ppd_rng = base.split("ppd").split(pipeline::method_name(method));
        Index ppd_calls = 0;
        pipeline::ReplicateOutcome out =
            pipeline::summarise(result, *task, config.pipeline.ppd_draws, ppd_rng, &ppd_calls);
        report = replicate_report(config, *task, seed, method, &result, &out, ppd_calls);
        outcomes[r][m] = std::move(out);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[160];
        std::snprintf(buf, sizeof buf, "[%s seed %llu] %s ok (%.1fs)", config.task.c_str(),
                      static_cast<unsigned long long>(seed), pipeline::method_name(method).c_str(), secs);
        say(buf);
      } catch (const std::exception& e) {
        error = e.what();
        outcomes[r][m].reset();
        report = replicate_report(config, *task, seed, method, nullptr, nullptr, 0, error);
        say("[" + config.task + " seed " + std::to_string(seed) + "] " + pipeline::method_name(method) +
            " FAILED: " + error);
      }
      try {
        write_file(path, report.dump(1) + "\n");
        paths[r][m] = path;
        written[r][m] = true;
      } catch (const std::exception& e) {
        outcomes[r][m].reset();
        say("cannot write " + path + ": " + e.what());
      }
    }
    const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    char buf[96];
    std::snprintf(buf, sizeof buf, "[%s seed %llu] replicate done (%.1fs)", config.task.c_str(),
                  static_cast<unsigned long long>(seed), total);
    say(buf);
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(config.workers), n_rep);
  if (workers <= 1) {
    for (std::size_t r = 0; r < n_rep; ++r) job(r);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t r = next++; r < n_rep; r = next++) job(r);
      });
    }
    for (auto& t : pool) t.join();
  }

  RunStatus status;
  std::vector<MethodRow> table;
  for (std::size_t m = 0; m < n_meth; ++m) {
    MethodRow row{config.methods[m], 0, std::nullopt};
    std::vector<pipeline::ReplicateOutcome> ok;
    for (std::size_t r = 0; r < n_rep; ++r) {
      if (written[r][m]) status.reports.push_back(paths[r][m]);
      if (outcomes[r][m]) {
        ok.push_back(*outcomes[r][m]);
        ++status.succeeded;
      } else {
        ++row.failed;
        ++status.failed;
      }
    }
    if (!ok.empty()) row.metrics = pipeline::metrics(ok, task->pseudo_truth());
    table.push_back(std::move(row));
  }
  const fs::path dir = fs::path(config.outdir) / config.task;
  status.summary_path = (dir / "summary.csv").string();
  write_file(status.summary_path, summary_csv(config.task, table, task->focus_parameter(), task->param_names()));
  write_file((dir / "summary_all.csv").string(), summary_all_csv(config.task, table, task->param_names()));
  return status;
}

nlohmann::ordered_json diagnostics(const RunConfig& config, std::uint64_t seed, const std::vector<double>& radii) {
  validate(config);
  const auto task = make_task(config);
  const Rng base = replicate_rng(seed);
  Rng obs_rng = base.split("observation");
  const SummaryVector obs = task->observe(obs_rng);
  pipeline::Replicate rep(*task, obs, config.pipeline, base.split("inference"));
  const SimDataset& pp = rep.prior_predictive();
  const double kappa = config.pipeline.kappa;

  Json out;
  out["task"] = config.task;
  out["seed"] = seed;
  out["observed"] = vec(obs);
  out["prior_predictive_rows"] = pp.size();
  auto entry = [&](const SimDataset& d, const Vector& w, double e) {
    Json j = gap(pipeline::gap_diagnostics(d, w, obs, kappa));
    j["ess"] = number(e);
    return j;
  };
  const Vector uniform = Vector::Ones(pp.size());
  out["uniform"] = entry(pp, uniform, static_cast<double>(pp.size()));
  out["forest"] = entry(pp, rep.forest_weights(), rep.forest_ess());
  try {
    const smc::SmcResult& s = rep.smc_result();
    const SimDataset pop = smc::smc_to_dataset(s.population);
    Json j = entry(pop, Vector::Ones(pop.size()), static_cast<double>(pop.size()));
    j["simulations"] = s.ledger.calls;
    j["final_tolerance"] = number(s.population.epsilon);
    out["smc"] = j;
  } catch (const Error& e) {
    out["smc"] = Json{{"error", e.what()}};
  }

  // Indicator balls on the compatible summaries.
  const std::vector<Index> keep = task->compatible_summaries();
  SimDataset proj;
  proj.thetas = pp.thetas;
  proj.summaries.resize(pp.size(), static_cast<Index>(keep.size()));
  SummaryVector obs_proj(static_cast<Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) {
    proj.summaries.col(static_cast<Index>(c)) = pp.summaries.col(keep[c]);
    obs_proj[static_cast<Index>(c)] = obs[keep[c]];
  }
  Json balls = Json::array();
  for (double eps : radii) {
    Vector w(proj.size());
    for (Index i = 0; i < proj.size(); ++i) {
      w[i] = (proj.summaries.row(i).transpose() - obs_proj).norm() <= eps ? 1.0 : 0.0;
    }
    Json b{{"radius", number(eps)}, {"members", static_cast<Index>(w.sum())}};
    if (w.sum() > 0.0) {
      const pipeline::GapDiagnostics g = pipeline::gap_diagnostics(proj, w, obs_proj, kappa);
      b["gap"] = gap(g);
      b["first_within_radius"] = g.first <= eps;
      b["kappa_moment_within_bound"] = g.kappa_moment <= std::pow(eps, kappa);
    }
    balls.push_back(b);
  }
  out["indicator_balls"] = balls;
  return out;
}

}  // namespace prnpe::cli
