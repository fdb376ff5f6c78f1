#include "prnpe/core.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace prnpe {
namespace {

void stderr_sink(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

void (*g_warning_sink)(const std::string&) = &stderr_sink;

}  // namespace

void warn(const std::string& message) {
  if (g_warning_sink != nullptr) g_warning_sink(message);
}

void set_warning_sink(void (*sink)(const std::string&)) { g_warning_sink = sink; }

double stable_sum(const double* values, std::size_t count) {
  // Neumaier summation.
  double sum = 0.0;
  double comp = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double v = values[i];
    const double t = sum + v;
    if (std::abs(sum) >= std::abs(v)) {
      comp += (sum - t) + v;
    } else {
      comp += (v - t) + sum;
    }
    sum = t;
  }
  return sum + comp;
}

Vector normalise_weights(const Vector& weights) {
  if (weights.size() == 0) throw Error("weights: empty vector");
  for (Index i = 0; i < weights.size(); ++i) {
    if (!std::isfinite(weights[i]) || weights[i] < 0.0) {
      throw Error("weights: entry " + std::to_string(i) + " is negative or non-finite");
    }
  }
  const double total = stable_sum(weights.data(), static_cast<std::size_t>(weights.size()));
  if (!(total > 0.0)) throw Error("weights: all weights are zero");
  return weights / total;
}

Vector SimDataset::normalised_weights() const {
  if (!weights) return Vector::Constant(size(), 1.0 / static_cast<double>(size()));
  return normalise_weights(*weights);
}

void SimDataset::validate() const {
  if (summaries.rows() != thetas.rows()) {
    throw Error("dataset: " + std::to_string(thetas.rows()) + " parameter rows but " +
                std::to_string(summaries.rows()) + " summary rows");
  }
  if (weights) {
    if (weights->size() != thetas.rows()) throw Error("dataset: weight count mismatch");
    normalise_weights(*weights);
  }
}

SimDataset SimDataset::select(const std::vector<Index>& rows) const {
  SimDataset out;
  const auto n = static_cast<Index>(rows.size());
  out.thetas.resize(n, theta_dim());
  out.summaries.resize(n, summary_dim());
  if (weights) out.weights = Vector(n);
  for (Index r = 0; r < n; ++r) {
    const Index src = rows[static_cast<std::size_t>(r)];
    out.thetas.row(r) = thetas.row(src);
    out.summaries.row(r) = summaries.row(src);
    if (weights) (*out.weights)[r] = (*weights)[src];
  }
  return out;
}

Vector Standardiser::transform(const Vector& s) const {
  return ((s - mean).array() / sd.array()).matrix();
}

Vector Standardiser::inverse(const Vector& z) const {
  return (z.array() * sd.array()).matrix() + mean;
}

Matrix Standardiser::transform_rows(const Matrix& rows) const {
  Matrix out = rows.rowwise() - mean.transpose();
  out.array().rowwise() /= sd.transpose().array();
  return out;
}

Matrix Standardiser::inverse_rows(const Matrix& rows) const {
  Matrix out = rows;
  out.array().rowwise() *= sd.transpose().array();
  out.rowwise() += mean.transpose();
  return out;
}

Standardiser Standardiser::identity(Index dim) {
  return {Vector::Zero(dim), Vector::Ones(dim)};
}

Standardiser fit_standardiser(const Matrix& rows, const Vector& weights) {
  if (rows.rows() != weights.size()) throw Error("standardiser: weight count mismatch");
  const Vector w = normalise_weights(weights);
  if ((w.array() > 0.0).count() < 2) {
    throw Error("standardiser: need at least two rows with positive weight");
  }
  Standardiser st{Vector(rows.cols()), Vector(rows.cols())};
  std::vector<double> terms(static_cast<std::size_t>(rows.rows()));
  for (Index k = 0; k < rows.cols(); ++k) {
    for (Index i = 0; i < rows.rows(); ++i) terms[static_cast<std::size_t>(i)] = w[i] * rows(i, k);
    const double mu = stable_sum(terms.data(), terms.size());
    // Deviations are scaled by the largest weighted one so squares cannot overflow.
    double scale = 0.0;
    for (Index i = 0; i < rows.rows(); ++i) {
      if (w[i] > 0.0) scale = std::max(scale, std::abs(rows(i, k) - mu));
    }
    double var = 0.0;
    if (scale > 0.0 && std::isfinite(scale)) {
      for (Index i = 0; i < rows.rows(); ++i) {
        const double d = (rows(i, k) - mu) / scale;
        terms[static_cast<std::size_t>(i)] = w[i] * d * d;
      }
      var = stable_sum(terms.data(), terms.size());
    }
    const double sd = scale * std::sqrt(var);
    if (!(sd > 1e-150) || !std::isfinite(sd)) {
      throw Error("standardiser: degenerate coordinate " + std::to_string(k) +
                  " (weighted sd " + std::to_string(sd) + ")");
    }
    st.mean[k] = mu;
    st.sd[k] = sd;
  }
  return st;
}

double ess(const Vector& weights) {
  const Vector w = normalise_weights(weights);
  return 1.0 / w.squaredNorm();
}

std::vector<Index> categorical_resample(const Vector& weights, Index count, Rng& rng) {
  if (count < 1) throw Error("categorical_resample: count must be at least 1");
  const Vector w = normalise_weights(weights);
  std::vector<double> cdf(static_cast<std::size_t>(w.size()));
  double acc = 0.0;
  for (Index i = 0; i < w.size(); ++i) {
    acc += w[i];
    cdf[static_cast<std::size_t>(i)] = acc;
  }
  // The last positive-weight index absorbs rounding in the cumulative sum.
  Index last_positive = w.size() - 1;
  while (last_positive > 0 && w[last_positive] == 0.0) --last_positive;

  std::vector<Index> out(static_cast<std::size_t>(count));
  for (auto& idx : out) {
    const double u = rng.uniform() * acc;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    idx = std::min<Index>(static_cast<Index>(it - cdf.begin()), last_positive);
  }
  return out;
}

FilterResult filter_invalid(const SimDataset& dataset) {
  dataset.validate();
  std::vector<Index> keep;
  keep.reserve(static_cast<std::size_t>(dataset.size()));
  for (Index i = 0; i < dataset.size(); ++i) {
    if (dataset.summaries.row(i).allFinite() && dataset.thetas.row(i).allFinite()) {
      keep.push_back(i);
    }
  }
  if (keep.empty()) throw Error("filter_invalid: every simulation is invalid");
  FilterResult out;
  out.removed = dataset.size() - static_cast<Index>(keep.size());
  out.dataset = out.removed == 0 ? dataset : dataset.select(keep);
  return out;
}

}  // namespace prnpe
