#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "prnpe/core.hpp"

namespace prnpe::cli {

struct Kde {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;
};

/// Gaussian kernel density on an even grid, Silverman's bandwidth.
Kde kernel_density(const std::vector<double>& samples, double lo, double hi, int points = 256);

/// One panel per parameter: density curve and a vertical pseudo-truth line.
std::string density_svg(const std::string& title, const std::vector<std::string>& names, const Matrix& draws,
                        const Vector& truth);

/// Predictive summaries against the first two columns, observed value marked.
std::string predictive_svg(const std::string& title, const std::vector<std::string>& labels, const Matrix& points,
                           const Vector& observed);

/// Reads a replicate report and writes <stem>_density.svg and
/// <stem>_predictive.svg into `outdir` (the report's directory when empty).
std::vector<std::string> plot_report(const std::string& report_path, const std::string& outdir = {});

}  // namespace prnpe::cli
