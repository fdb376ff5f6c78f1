#pragma once

#include <cstdint>
#include <vector>

#include "prnpe/core.hpp"

namespace prnpe::forest {

struct TreeConfig {
  int trees = 800;                     // B, per parameter component
  int max_depth = 10;
  Index min_leaf = 40;
  Index min_split = 80;
  double min_impurity_decrease = 1e-6;
  bool bootstrap = true;
  double fit_fraction = 1.0;           // ρ_fit ∈ (0, 1]
  /// Keep the in-bag row list on every leaf (memory heavy for large forests).
  bool keep_leaf_members = false;

  void validate() const;
};

/// Axis-aligned regression tree stored as a flat node array; node 0 is the root.
class RegressionTree {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    int depth = 0;
    Index samples = 0;           // in-bag entries reaching the node
    double value = 0.0;          // mean target over those entries
    std::vector<Index> members;  // leaf only, when kept
  };

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  std::vector<Node>& nodes() noexcept { return nodes_; }

  bool is_leaf(int node) const { return nodes_[static_cast<std::size_t>(node)].feature < 0; }
  /// Leaf node index reached by x (x_j ≤ τ goes left).
  int leaf_of(const double* x, Index stride = 1) const;
  int leaf_of(const Vector& x) const { return leaf_of(x.data()); }
  double predict(const Vector& x) const;
  int depth() const;
  int leaf_count() const;

 private:
  std::vector<Node> nodes_;
};

/// Best CART split Δ = |I|Var_I − |I_L|Var_L − |I_R|Var_R over all features,
/// thresholds at midpoints of consecutive distinct values. Fits on every row of
/// `features` (N × d_s) with `targets` (N).
RegressionTree fit_tree(const Matrix& features, const Vector& targets, const TreeConfig& config);

/// Fit on an index sample (duplicates allowed, as produced by a bootstrap).
RegressionTree fit_tree(const Matrix& features, const Vector& targets,
                        const std::vector<Index>& sample, const TreeConfig& config);

/// d_θ independent forests of B trees each.
class Forest {
 public:
  Index theta_dim() const noexcept { return static_cast<Index>(trees_.size()); }
  int trees_per_parameter() const noexcept {
    return trees_.empty() ? 0 : static_cast<int>(trees_.front().size());
  }
  const RegressionTree& tree(Index parameter, int b) const {
    return trees_[static_cast<std::size_t>(parameter)][static_cast<std::size_t>(b)];
  }
  /// Rows of the fit dataset not drawn for tree (parameter, b); regenerated
  /// from the tree's sampling stream.
  std::vector<Index> out_of_bag(Index parameter, int b) const;
  /// The rows (with multiplicity) used to grow tree (parameter, b).
  std::vector<Index> in_bag(Index parameter, int b) const;

 private:
  friend Forest fit_forests(const SimDataset&, const TreeConfig&, Rng&);
  std::vector<std::vector<RegressionTree>> trees_;
  std::vector<std::vector<Rng>> sample_streams_;
  TreeConfig config_;
  Index rows_ = 0;
};

Forest fit_forests(const SimDataset& dataset, const TreeConfig& config, Rng& rng);

/// Multiplicity-free leaf co-occurrence weights around s_y, normalised to sum 1.
/// Each tree spreads unit mass uniformly over the dataset rows routed to the
/// leaf containing s_y.
Vector proximity_weights(const Forest& forest, const SimDataset& dataset,
                         const SummaryVector& s_y);

/// Same as proximity_weights before normalisation (sums to d_θ·B).
Vector raw_proximity_weights(const Forest& forest, const SimDataset& dataset,
                             const SummaryVector& s_y);

struct PreconditionResult {
  Vector weights;  // normalised
  SimDataset resampled;
  double ess = 0.0;
};

PreconditionResult forest_precondition(const SimDataset& dataset, const SummaryVector& s_y,
                                       const TreeConfig& config, Index resample_size, Rng& rng);

}  // namespace prnpe::forest
