#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prnpe/rng.hpp"

namespace prnpe {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// θ: one parameter draw (length d_θ).
using ParamVector = Eigen::VectorXd;
/// s: one summary vector (length d_s).
using SummaryVector = Eigen::VectorXd;

/// Raised for any violated precondition or numerical failure in the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Paired simulations {(θ_i, s_i)} stored one simulation per row.
///
/// Weights are kept unnormalised; consumers normalise at point of use.
struct SimDataset {
  Matrix thetas;                  // N × d_θ
  Matrix summaries;               // N × d_s
  std::optional<Vector> weights;  // N, nonnegative

  Index size() const noexcept { return thetas.rows(); }
  Index theta_dim() const noexcept { return thetas.cols(); }
  Index summary_dim() const noexcept { return summaries.cols(); }

  /// Weights normalised to sum 1 (uniform when absent).
  Vector normalised_weights() const;
  /// Throws on row-count mismatch or invalid weights.
  void validate() const;
  /// Rows selected by index, in the given order (duplicates allowed).
  SimDataset select(const std::vector<Index>& rows) const;
};

/// Affine whitening s ↦ (s − mean) / sd, coordinate-wise.
struct Standardiser {
  Vector mean;
  Vector sd;

  Vector transform(const Vector& s) const;
  Vector inverse(const Vector& z) const;
  /// Row-wise transform of an N × d matrix.
  Matrix transform_rows(const Matrix& rows) const;
  Matrix inverse_rows(const Matrix& rows) const;
  /// Σ_k log sd_k: log-Jacobian of inverse().
  double log_scale() const { return sd.array().log().sum(); }

  static Standardiser identity(Index dim);
};

/// Weighted mean and population (no Bessel correction) standard deviation of
/// each column. Throws naming the first coordinate whose sd is not above 1e-150.
/// Deviations are rescaled before squaring, so huge finite values do not overflow.
Standardiser fit_standardiser(const Matrix& rows, const Vector& weights);

/// w / Σw; throws when weights are negative, non-finite, or all zero.
Vector normalise_weights(const Vector& weights);

/// Effective sample size 1 / Σ w̃² of the normalised weights.
double ess(const Vector& weights);

/// M i.i.d. draws from Categorical(w̃).
std::vector<Index> categorical_resample(const Vector& weights, Index count, Rng& rng);

struct FilterResult {
  SimDataset dataset;
  Index removed = 0;
};

/// Drops rows whose summary (or θ) holds NaN/±∞, preserving order.
FilterResult filter_invalid(const SimDataset& dataset);

/// Compensated sum, used wherever reductions must stay reproducible.
double stable_sum(const double* values, std::size_t count);

/// Non-fatal diagnostics go through one sink (stderr unless replaced).
void warn(const std::string& message);
void set_warning_sink(void (*sink)(const std::string&));

inline bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace prnpe
