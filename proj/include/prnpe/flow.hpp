#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "prnpe/core.hpp"
#include "prnpe/models.hpp"

namespace prnpe::flow {

// ---------------------------------------------------------------------------
// Rational-quadratic spline on [−bound, bound], identity outside.

struct RqsKnots {
  Vector widths;       // K, positive, sum 2·bound
  Vector heights;      // K, positive, sum 2·bound
  Vector derivatives;  // K − 1 interior knots, positive; boundary slopes are 1
  double bound = 8.0;

  int bins() const { return static_cast<int>(widths.size()); }
  /// Throws on non-positive or inconsistent knot parameters.
  void validate() const;
  static RqsKnots identity(int bins, double bound = 8.0);
};

struct SplineResult {
  double value = 0.0;
  double logdet = 0.0;  // log |d value / d input|
};

SplineResult rqs_forward(double x, const RqsKnots& knots);
SplineResult rqs_inverse(double y, const RqsKnots& knots);

/// Raw conditioner outputs → knots: softmax widths/heights with a minimum bin
/// fraction, shifted softplus derivatives (raw 0 gives slope 1).
RqsKnots knots_from_raw(const double* raw, int bins, double bound, double min_bin = 1e-3,
                        double min_derivative = 1e-3);
inline int raw_per_coordinate(int bins) { return 3 * bins - 1; }

// ---------------------------------------------------------------------------

struct FlowArchitecture {
  Index target_dim = 1;
  Index condition_dim = 0;  // 0 for an unconditional flow
  int layers = 8;
  int hidden = 128;
  int bins = 10;
  double bound = 8.0;
  double min_bin = 1e-3;
  double min_derivative = 1e-3;

  void validate() const;
  /// Leading coordinates passed through unchanged (after the layer's permutation).
  Index identity_dim() const { return target_dim / 2; }
  Index transformed_dim() const { return target_dim - identity_dim(); }
  Index conditioner_inputs() const { return identity_dim() + condition_dim; }
  Index conditioner_outputs() const { return transformed_dim() * raw_per_coordinate(bins); }
  Index layer_param_count() const;
  Index param_count() const { return layer_param_count() * layers; }
};

/// Learnable values of a coupling-spline flow, stored in one flat vector.
///
/// Per layer: W1 (hidden × inputs), b1, W2 (outputs × hidden), b2, column-major.
/// Each layer maps x ↦ reverse(x_a, spline(x_b; MLP(x_a, s))) in the density
/// direction; the base is standard normal.
class FlowParams {
 public:
  FlowParams() = default;
  FlowParams(FlowArchitecture arch, Vector values);

  /// Glorot-uniform first layer, zero output layer: the flow starts as the identity.
  static FlowParams identity(const FlowArchitecture& arch, Rng& rng);
  /// Every value N(0, scale²); used to exercise nontrivial splines.
  static FlowParams random(const FlowArchitecture& arch, Rng& rng, double scale = 0.3);

  const FlowArchitecture& arch() const noexcept { return arch_; }
  const Vector& values() const noexcept { return values_; }
  Vector& values() noexcept { return values_; }
  bool conditional() const noexcept { return arch_.condition_dim > 0; }

 private:
  FlowArchitecture arch_;
  Vector values_;
};

/// Per-row log densities; `conditions` is N × C (ignored when C = 0).
Vector flow_logpdf_batch(const FlowParams& params, const Matrix& targets, const Matrix& conditions);
double flow_logpdf(const FlowParams& params, const Vector& target,
                   const std::optional<Vector>& condition = std::nullopt);

struct FlowGradient {
  Vector logpdf;          // N
  Vector params;          // Σ_i c_i ∇_params log q(x_i | s_i)
  Matrix targets;         // N × D, ∇_x log q per row
  Matrix conditions;      // N × C, ∇_s log q per row
};

/// Reverse-mode pass. `coefficients` (length N) weight the parameter gradient
/// sum; input gradients are per row and unweighted.
FlowGradient flow_logpdf_grad(const FlowParams& params, const Matrix& targets,
                              const Matrix& conditions, const Vector& coefficients,
                              bool want_params = true, bool want_inputs = true);

/// Gradient of log q(target | condition) wrt the condition, or wrt the target
/// when the flow is unconditional.
Vector flow_logpdf_grad_condition(const FlowParams& params, const Vector& target,
                                  const std::optional<Vector>& condition = std::nullopt);

/// Data → base with log|det|; base → data with log|det|.
Matrix flow_to_base(const FlowParams& params, const Matrix& targets, const Matrix& conditions,
                    Vector* logdet = nullptr);
Matrix flow_from_base(const FlowParams& params, const Matrix& base, const Matrix& conditions,
                      Vector* logdet = nullptr);

/// M draws; for a conditional flow, every draw uses `condition`.
Matrix flow_sample(const FlowParams& params, const std::optional<Vector>& condition, Index count,
                   Rng& rng);
/// One draw per row of `conditions`.
Matrix flow_sample_rows(const FlowParams& params, const Matrix& conditions, Rng& rng);

// ---------------------------------------------------------------------------

/// Maps bounded parameters to ℝ: logit for (a, b), log for (a, ∞), identity otherwise.
class BoundTransform {
 public:
  enum class Kind { Identity, Logit, Log };
  struct Component {
    Kind kind = Kind::Identity;
    double lower = 0.0;
    double upper = 0.0;
  };

  BoundTransform() = default;
  explicit BoundTransform(std::vector<Component> components);
  static BoundTransform identity(Index dim);
  static BoundTransform from_prior(const models::Prior& prior);

  Index dim() const noexcept { return static_cast<Index>(components_.size()); }
  const std::vector<Component>& components() const noexcept { return components_; }

  /// Throws when θ is on or outside the support boundary.
  Vector apply(const Vector& theta, double* log_jacobian = nullptr) const;
  Vector invert(const Vector& z) const;
  /// log |dz/dθ|.
  double log_jacobian(const Vector& theta) const;
  Matrix apply_rows(const Matrix& thetas) const;
  Matrix invert_rows(const Matrix& z) const;

 private:
  std::vector<Component> components_;
};

Vector bound_transform_apply(const BoundTransform& bt, const Vector& theta, double* log_jacobian);
Vector bound_transform_invert(const BoundTransform& bt, const Vector& z);

// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 5e-4;
  Index batch_size = 512;
  int patience = 10;
  int max_epochs = 500;
  double validation_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct TrainResult {
  FlowParams params;
  int epochs = 0;
  int best_epoch = 0;  // 0 = initial parameters
  double best_validation_nll = 0.0;
  double initial_train_nll = 0.0;
  double final_train_nll = 0.0;
  Index train_rows = 0;
  Index validation_rows = 0;
  std::vector<double> validation_history;
};

/// Weighted maximum likelihood with Adam and early stopping. Rows with zero
/// weight are dropped; a uniformly drawn `validation_fraction` of the rest is
/// held out and scored with its weights. `arch` supplies the layer shape; its
/// dimensions are taken from the data.
TrainResult train_flow(const Matrix& targets, const Matrix& conditions, const Vector& weights,
                       const FlowArchitecture& arch, const TrainConfig& config, Rng& rng);

/// Conditional q(θ|s) when `conditional`, else marginal h(s).
TrainResult train_flow(const SimDataset& dataset, bool conditional, const FlowArchitecture& arch,
                       const TrainConfig& config, Rng& rng);

/// Σ w·(−log q) / Σ w over the rows.
double weighted_nll(const FlowParams& params, const Matrix& targets, const Matrix& conditions,
                    const Vector& weights);

// ---------------------------------------------------------------------------

/// A trained flow with the maps that put raw inputs on its scale.
struct FlowBundle {
  FlowParams flow;
  Standardiser target_standardiser;
  std::optional<Standardiser> condition_standardiser;
  BoundTransform bounds;  // identity for summary-space flows
};

nlohmann::json to_json(const FlowBundle& bundle);
FlowBundle flow_bundle_from_json(const nlohmann::json& j);
void save_flow_bundle(const FlowBundle& bundle, const std::string& path);
FlowBundle load_flow_bundle(const std::string& path);

}  // namespace prnpe::flow
