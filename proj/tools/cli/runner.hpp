#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cli/config.hpp"

namespace prnpe::cli {

/// Rounds to 12 significant digits; non-finite values pass through.
double round12(double v);
/// Finite numbers as JSON numbers rounded to 12 digits; ±inf and nan as strings.
nlohmann::ordered_json number(double v);

/// Writes `text` to `path` through a temporary file, creating directories.
void write_file(const std::string& path, const std::string& text);

/// Per-replicate report for one method. `error` is set for failed runs.
nlohmann::ordered_json replicate_report(const RunConfig& config, const models::Task& task, std::uint64_t seed,
                                        pipeline::Method method, const pipeline::PosteriorResult* result,
                                        const pipeline::ReplicateOutcome* outcome, Index ppd_calls,
                                        const std::string& error = {});

struct MethodRow {
  pipeline::Method method;
  Index failed = 0;
  std::optional<pipeline::MetricRow> metrics;  // empty when every replicate failed
};

/// One row per method for the focus parameter.
std::string summary_csv(const std::string& task, const std::vector<MethodRow>& rows, Index focus,
                        const std::vector<std::string>& param_names);
/// One row per method and parameter.
std::string summary_all_csv(const std::string& task, const std::vector<MethodRow>& rows,
                            const std::vector<std::string>& param_names);

struct RunStatus {
  int succeeded = 0;
  int failed = 0;
  std::vector<std::string> reports;  // paths written
  std::string summary_path;
};

/// Runs every method on every replicate, writing reports and summaries.
/// Progress lines go to `log`.
RunStatus run_experiment(const RunConfig& config, std::ostream& log);

std::string report_path(const RunConfig& config, pipeline::Method method, std::uint64_t seed);

/// Gap moments and ESS of the uniform, forest and SMC training sets for one
/// seed, plus indicator-ball weights of each radius on the prior-predictive set.
/// Ball diagnostics use the compatible summaries.
nlohmann::ordered_json diagnostics(const RunConfig& config, std::uint64_t seed, const std::vector<double>& radii);

}  // namespace prnpe::cli
