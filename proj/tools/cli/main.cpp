#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cli/config.hpp"
#include "cli/plot.hpp"
#include "cli/runner.hpp"

namespace {

using namespace prnpe;
using namespace prnpe::cli;

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

std::vector<double> parse_radii(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size() || !(v > 0.0)) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw Error("--radii: expected positive numbers, got '" + item + "'");
    }
  }
  return out;
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides, bool print_only) {
  RunConfig config = parse_config(config_path, overrides);
  if (print_only) {
    std::cout << echo(config).dump(2) << '\n';
    return 0;
  }
  const RunStatus status = run_experiment(config, std::cerr);
  std::cout << "reports: " << status.reports.size() << ", succeeded: " << status.succeeded
            << ", failed: " << status.failed << '\n';
  std::cout << "summary: " << status.summary_path << '\n';
  return status.failed == 0 ? 0 : kExitFailure;
}

int cmd_pseudo_truth(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig config = parse_config(config_path, overrides);
  const auto t0 = std::chrono::steady_clock::now();
  nlohmann::ordered_json out;
  out["task"] = config.task;
  if (config.task == "weibull") {
    const models::PseudoTruth p = models::weibull_pseudo_true(config.weibull);
    out["theta_star"] = {number(p.theta_star[0])};
    out["objective"] = number(p.objective);
    out["at_boundary"] = p.at_boundary;
  } else {
    const auto task = make_task(config);
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    const ParamVector t = task->pseudo_truth();
    for (Index i = 0; i < t.size(); ++i) a.push_back(number(t[i]));
    out["theta_star"] = a;
  }
  out["param_names"] = make_task(config)->param_names();
  out["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_diagnostics(const std::string& config_path, const std::vector<std::string>& overrides,
                    const std::string& radii) {
  RunConfig config = parse_config(config_path, overrides);
  std::cout << diagnostics(config, config.seed, parse_radii(radii)).dump(2) << '\n';
  return 0;
}

int cmd_plot(const std::vector<std::string>& reports, const std::string& outdir) {
  int failures = 0;
  for (const auto& r : reports) {
    try {
      for (const auto& path : plot_report(r, outdir)) std::cout << path << '\n';
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      ++failures;
    }
  }
  return failures == 0 ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preconditioned robust neural posterior estimation benchmarks"};
  app.require_subcommand(1);
  app.footer("Default output directory: $PRNPE_OUTDIR, else ./results");

  std::string config_path;
  std::vector<std::string> overrides;
  bool print_config = false;
  std::string radii = "0.1,0.5,1.0";
  std::vector<std::string> reports;
  std::string plot_outdir;

  auto* run = app.add_subcommand("run", "Run methods over replicates and write reports");
  run->add_option("-c,--config", config_path, "INI or JSON config file")->check(CLI::ExistingFile);
  run->add_option("overrides", overrides, "key=value settings applied after the file");
  run->add_flag("--print-config", print_config, "Print the resolved configuration and exit");
  run->footer("Configuration keys (INI sections map to the prefix before the dot):\n" + key_reference());

  auto* pt = app.add_subcommand("pseudo-truth", "Print the task's pseudo-true parameter");
  pt->add_option("-c,--config", config_path, "INI or JSON config file")->check(CLI::ExistingFile);
  pt->add_option("overrides", overrides, "key=value settings");

  auto* diag = app.add_subcommand("diagnostics", "Print gap moments and ESS for one seed's training sets");
  diag->add_option("-c,--config", config_path, "INI or JSON config file")->check(CLI::ExistingFile);
  diag->add_option("overrides", overrides, "key=value settings");
  diag->add_option("--radii", radii, "Indicator-ball radii on the compatible summaries")->capture_default_str();

  auto* plot = app.add_subcommand("plot", "Write density and predictive SVG plots for reports");
  plot->add_option("reports", reports, "Replicate report files")->required();
  plot->add_option("-o,--outdir", plot_outdir, "Output directory (default: next to each report)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, overrides, print_config);
    if (*pt) return cmd_pseudo_truth(config_path, overrides);
    if (*diag) return cmd_diagnostics(config_path, overrides, radii);
    if (*plot) return cmd_plot(reports, plot_outdir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
