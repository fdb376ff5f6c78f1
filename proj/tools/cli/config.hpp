#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "prnpe/models.hpp"
#include "prnpe/pipeline.hpp"

namespace prnpe::cli {

/// Everything a `run` needs, fully resolved.
struct RunConfig {
  std::string task = "weibull";
  std::vector<pipeline::Method> methods = pipeline::all_methods();
  std::uint64_t seed = 1;  // replicate r uses seed + r
  int replicates = 1;
  int workers = 1;
  std::string outdir;  // defaults to $PRNPE_OUTDIR, else "results"
  bool save_draws = true;

  pipeline::PipelineConfig pipeline;
  models::WeibullTask weibull;
  models::SvarTask svar;
  models::LinearGaussianTask toy;
};

/// Error naming the offending key.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& key, const std::string& message)
      : Error("config key '" + key + "': " + message), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

std::string default_outdir();

/// Defaults, then the file (INI, or JSON when the name ends in .json; empty path
/// for none), then `key=value` overrides in order.
RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides = {});
/// Applies one `key=value` assignment.
void apply_override(RunConfig& config, const std::string& assignment);
void set_value(RunConfig& config, const std::string& key, const std::string& value);
/// Checks every field and the cross-field constraints.
void validate(const RunConfig& config);

/// Resolved configuration as nested JSON, in table order.
nlohmann::ordered_json echo(const RunConfig& config);
/// Rebuilds a configuration from echo().
RunConfig from_echo(const nlohmann::json& j);

/// One line per key: name, default, description.
std::string key_reference();

std::unique_ptr<models::Task> make_task(const RunConfig& config);

}  // namespace prnpe::cli
