#include "cli/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cli/runner.hpp"

namespace prnpe::cli {
namespace {

namespace fs = std::filesystem;

constexpr double kWidth = 560.0;
constexpr double kPanelHeight = 260.0;
constexpr double kLeft = 64.0;
constexpr double kRight = 20.0;
constexpr double kTop = 34.0;
constexpr double kBottom = 40.0;
constexpr double kPlotW = kWidth - kLeft - kRight;
constexpr double kPlotH = kPanelHeight - kTop - kBottom;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string px(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo;
  double hi;
};

Range padded(double lo, double hi) {
  if (!(hi > lo)) {
    const double w = std::max(1e-3, 1e-3 * std::abs(lo));
    return {lo - w, hi + w};
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

double map(double v, Range r, double origin, double length) { return origin + (v - r.lo) / (r.hi - r.lo) * length; }

void axes(std::ostringstream& out, double y0, Range xr, Range yr, const std::string& xlabel, bool y_ticks) {
  const double bottom = y0 + kTop + kPlotH;
  out << "<rect x=\"" << px(kLeft) << "\" y=\"" << px(y0 + kTop) << "\" width=\"" << px(kPlotW) << "\" height=\""
      << px(kPlotH) << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    const double x = map(v, xr, kLeft, kPlotW);
    out << "<line x1=\"" << px(x) << "\" y1=\"" << px(bottom) << "\" x2=\"" << px(x) << "\" y2=\"" << px(bottom + 5)
        << "\" stroke=\"#444\"/>\n";
    out << "<text x=\"" << px(x) << "\" y=\"" << px(bottom + 18) << "\" font-size=\"11\" text-anchor=\"middle\">"
        << tick_label(v) << "</text>\n";
    if (y_ticks) {
      const double w = yr.lo + (yr.hi - yr.lo) * i / 4.0;
      const double y = y0 + kTop + kPlotH - (w - yr.lo) / (yr.hi - yr.lo) * kPlotH;
      out << "<text x=\"" << px(kLeft - 6) << "\" y=\"" << px(y + 4)
          << "\" font-size=\"11\" text-anchor=\"end\">" << tick_label(w) << "</text>\n";
    }
  }
  out << "<text x=\"" << px(kLeft + kPlotW / 2) << "\" y=\"" << px(bottom + 34)
      << "\" font-size=\"12\" text-anchor=\"middle\">" << escape(xlabel) << "</text>\n";
}

std::vector<double> column(const Matrix& m, Index j) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) {
    if (std::isfinite(m(i, j))) v.push_back(m(i, j));
  }
  return v;
}

double json_number(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw Error("report: expected a number");
}

Matrix json_rows(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) return Matrix();
  const auto cols = static_cast<Index>(j.front().size());
  Matrix m(static_cast<Index>(j.size()), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (static_cast<Index>(j[i].size()) != cols) throw Error("report: ragged draw matrix");
    for (std::size_t c = 0; c < j[i].size(); ++c) m(static_cast<Index>(i), static_cast<Index>(c)) = json_number(j[i][c]);
  }
  return m;
}

Vector json_vector(const nlohmann::json& j) {
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Index>(i)] = json_number(j[i]);
  return v;
}

}  // namespace

Kde kernel_density(const std::vector<double>& samples, double lo, double hi, int points) {
  if (samples.empty()) throw Error("kde: no samples");
  if (points < 2 || !(hi > lo)) throw Error("kde: invalid grid");
  const auto n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double x : samples) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : samples) var += (x - mean) * (x - mean);
  const double sd = samples.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  std::vector<double> sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  const auto q = [&](double p) {
    const double pos = p * (n - 1.0);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double f = pos - static_cast<double>(i);
    return i + 1 < sorted.size() ? sorted[i] * (1.0 - f) + sorted[i + 1] * f : sorted[i];
  };
  const double iqr = q(0.75) - q(0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(spread, iqr / 1.34);
  double h = 0.9 * spread * std::pow(n, -0.2);
  if (!(h > 0.0)) h = 1e-3 * (hi - lo);

  Kde k;
  k.bandwidth = h;
  k.x.resize(static_cast<std::size_t>(points));
  k.density.assign(static_cast<std::size_t>(points), 0.0);
  const double norm = 1.0 / (n * h * std::sqrt(2.0 * std::numbers::pi));
  for (int g = 0; g < points; ++g) {
    const double x = lo + (hi - lo) * g / (points - 1);
    k.x[static_cast<std::size_t>(g)] = x;
    double s = 0.0;
    for (double v : sorted) {
      const double z = (x - v) / h;
      if (std::abs(z) < 8.0) s += std::exp(-0.5 * z * z);
    }
    k.density[static_cast<std::size_t>(g)] = s * norm;
  }
  return k;
}

std::string density_svg(const std::string& title, const std::vector<std::string>& names, const Matrix& draws,
                        const Vector& truth) {
  if (draws.rows() == 0 || draws.cols() == 0) throw Error("plot: no posterior samples");
  if (truth.size() != draws.cols()) throw Error("plot: pseudo-truth dimension mismatch");
  const Index d = draws.cols();
  std::ostringstream out;
  const double height = kPanelHeight * static_cast<double>(d);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << px(kWidth) << "\" height=\"" << px(height)
      << "\" viewBox=\"0 0 " << px(kWidth) << ' ' << px(height) << "\">\n";
  out << "<title>" << escape(title) << "</title>\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (Index j = 0; j < d; ++j) {
    const std::vector<double> s = column(draws, j);
    if (s.empty()) throw Error("plot: no finite samples for " + names[static_cast<std::size_t>(j)]);
    const auto [mn, mx] = std::minmax_element(s.begin(), s.end());
    const Range xr = padded(std::min(*mn, truth[j]), std::max(*mx, truth[j]));
    const Kde k = kernel_density(s, xr.lo, xr.hi);
    const double top = *std::max_element(k.density.begin(), k.density.end());
    const Range yr{0.0, top > 0.0 ? top * 1.05 : 1.0};
    const double y0 = kPanelHeight * static_cast<double>(j);
    const std::string name = j < static_cast<Index>(names.size()) ? names[static_cast<std::size_t>(j)] : "theta";

    out << "<g class=\"panel\" data-parameter=\"" << escape(name) << "\" data-xmin=\"" << fmt(xr.lo)
        << "\" data-xmax=\"" << fmt(xr.hi) << "\" data-left=\"" << fmt(kLeft) << "\" data-width=\"" << fmt(kPlotW)
        << "\">\n";
    out << "<text x=\"" << px(kLeft) << "\" y=\"" << px(y0 + 20) << "\" font-size=\"13\">" << escape(title) << " : "
        << escape(name) << "</text>\n";
    axes(out, y0, xr, yr, name, true);
    out << "<polyline class=\"density\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
    for (std::size_t g = 0; g < k.x.size(); ++g) {
      const double x = map(k.x[g], xr, kLeft, kPlotW);
      const double y = y0 + kTop + kPlotH - (k.density[g] - yr.lo) / (yr.hi - yr.lo) * kPlotH;
      out << (g ? " " : "") << px(x) << ',' << px(y);
    }
    out << "\"/>\n";
    const double tx = map(truth[j], xr, kLeft, kPlotW);
    out << "<line class=\"truth\" data-value=\"" << fmt(truth[j]) << "\" x1=\"" << fmt(tx) << "\" y1=\""
        << px(y0 + kTop) << "\" x2=\"" << fmt(tx) << "\" y2=\"" << px(y0 + kTop + kPlotH)
        << "\" stroke=\"#d62728\" stroke-dasharray=\"5,3\"/>\n";
    out << "</g>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string predictive_svg(const std::string& title, const std::vector<std::string>& labels, const Matrix& points,
                           const Vector& observed) {
  if (points.rows() == 0 || points.cols() == 0) throw Error("plot: no predictive samples");
  if (observed.size() != points.cols()) throw Error("plot: observation dimension mismatch");
  const bool two_d = points.cols() >= 2;
  std::vector<double> xs, ys;
  for (Index i = 0; i < points.rows(); ++i) {
    const double x = points(i, 0);
    const double y = two_d ? points(i, 1) : static_cast<double>(i);
    if (std::isfinite(x) && std::isfinite(y)) {
      xs.push_back(x);
      ys.push_back(y);
    }
  }
  if (xs.empty()) throw Error("plot: no finite predictive samples");
  const double oy = two_d ? observed[1] : -1.0;
  const Range xr = padded(std::min(*std::min_element(xs.begin(), xs.end()), observed[0]),
                          std::max(*std::max_element(xs.begin(), xs.end()), observed[0]));
  const Range yr = padded(std::min(*std::min_element(ys.begin(), ys.end()), oy),
                          std::max(*std::max_element(ys.begin(), ys.end()), oy));
  std::ostringstream out;
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << px(kWidth) << "\" height=\"" << px(kPanelHeight)
      << "\" viewBox=\"0 0 " << px(kWidth) << ' ' << px(kPanelHeight) << "\">\n";
  out << "<title>" << escape(title) << "</title>\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << px(kLeft) << "\" y=\"20\" font-size=\"13\">" << escape(title) << "</text>\n";
  axes(out, 0.0, xr, yr, labels.empty() ? "s1" : labels[0], two_d);
  if (two_d && labels.size() > 1) {
    out << "<text x=\"14\" y=\"" << px(kTop + kPlotH / 2) << "\" font-size=\"12\" transform=\"rotate(-90 14 "
        << px(kTop + kPlotH / 2) << ")\" text-anchor=\"middle\">" << escape(labels[1]) << "</text>\n";
  }
  out << "<g class=\"predictive\" fill=\"#1f77b4\" fill-opacity=\"0.35\">\n";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out << "<circle cx=\"" << px(map(xs[i], xr, kLeft, kPlotW)) << "\" cy=\""
        << px(kTop + kPlotH - (ys[i] - yr.lo) / (yr.hi - yr.lo) * kPlotH) << "\" r=\"2\"/>\n";
  }
  out << "</g>\n";
  const double cx = map(observed[0], xr, kLeft, kPlotW);
  const double cy = kTop + kPlotH - (oy - yr.lo) / (yr.hi - yr.lo) * kPlotH;
  out << "<g class=\"observed\" data-x=\"" << fmt(observed[0]) << "\" data-y=\"" << fmt(oy) << "\">\n";
  out << "<line x1=\"" << px(cx - 7) << "\" y1=\"" << px(cy - 7) << "\" x2=\"" << px(cx + 7) << "\" y2=\""
      << px(cy + 7) << "\" stroke=\"#d62728\" stroke-width=\"2.5\"/>\n";
  out << "<line x1=\"" << px(cx - 7) << "\" y1=\"" << px(cy + 7) << "\" x2=\"" << px(cx + 7) << "\" y2=\""
      << px(cy - 7) << "\" stroke=\"#d62728\" stroke-width=\"2.5\"/>\n";
  out << "</g>\n</svg>\n";
  return out.str();
}

std::vector<std::string> plot_report(const std::string& report_path, const std::string& outdir) {
  std::ifstream in(report_path);
  if (!in) throw Error("plot: cannot read '" + report_path + "'");
  nlohmann::json r;
  try {
    in >> r;
  } catch (const nlohmann::json::exception& e) {
    throw Error("plot: '" + report_path + "' is not valid JSON: " + e.what());
  }
  if (r.value("status", "") != "ok") throw Error("plot: '" + report_path + "' is not a successful run");
  if (!r.contains("draws") || !r["draws"].contains("theta")) {
    throw Error("plot: '" + report_path + "' holds no posterior draws");
  }
  const Matrix theta = json_rows(r["draws"]["theta"]);
  if (theta.rows() == 0) throw Error("plot: '" + report_path + "' has empty samples");
  const Vector truth = json_vector(r.at("pseudo_truth"));
  std::vector<std::string> names = r.at("param_names").get<std::vector<std::string>>();

  const std::string task = r.at("task").get<std::string>();
  const std::string method = r.at("method").get<std::string>();
  const std::string seed = std::to_string(r.at("seed").get<std::uint64_t>());
  const fs::path dir = outdir.empty() ? fs::path(report_path).parent_path() : fs::path(outdir);
  const std::string stem = task + "_" + method + "_" + seed;
  const std::string title = task + " " + method + " seed " + seed;

  std::vector<std::string> written;
  const std::string density_path = (dir / (stem + "_density.svg")).string();
  write_file(density_path, density_svg(title, names, theta, truth));
  written.push_back(density_path);

  if (r["draws"].contains("predictive")) {
    const Matrix pred = json_rows(r["draws"]["predictive"]);
    if (pred.rows() > 0) {
      const Vector observed = json_vector(r.at("observed"));
      const auto compat = r.at("compatible_summaries").get<std::vector<Index>>();
      Vector obs(static_cast<Index>(compat.size()));
      std::vector<std::string> labels;
      for (std::size_t c = 0; c < compat.size(); ++c) {
        obs[static_cast<Index>(c)] = observed[compat[c]];
        labels.push_back("s" + std::to_string(compat[c] + 1));
      }
      const std::string pred_path = (dir / (stem + "_predictive.svg")).string();
      write_file(pred_path, predictive_svg(title + " predictive", labels, pred, obs));
      written.push_back(pred_path);
    }
  }
  return written;
}

}  // namespace prnpe::cli
