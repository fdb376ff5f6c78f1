#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "prnpe/forest.hpp"

using namespace prnpe;
using namespace prnpe::forest;
using Catch::Approx;

namespace {

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double gain = -1.0;
};

double sse(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s;
}

// Exhaustive search: every feature, every midpoint between distinct values,
// impurity computed from scratch on each side.
Split brute_force_split(const Matrix& x, const Vector& t, Index min_leaf) {
  Split best;
  std::vector<double> all(t.data(), t.data() + t.size());
  const double parent = sse(all);
  for (Index f = 0; f < x.cols(); ++f) {
    std::vector<double> values(x.col(f).data(), x.col(f).data() + x.rows());
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    for (std::size_t k = 0; k + 1 < values.size(); ++k) {
      const double tau = 0.5 * values[k] + 0.5 * values[k + 1];
      std::vector<double> l, r;
      for (Index i = 0; i < x.rows(); ++i) (x(i, f) <= tau ? l : r).push_back(t[i]);
      if (static_cast<Index>(l.size()) < min_leaf || static_cast<Index>(r.size()) < min_leaf) continue;
      const double gain = parent - sse(l) - sse(r);
      if (gain > best.gain + 1e-12) best = {static_cast<int>(f), tau, gain};
    }
  }
  return best;
}

// Independent routing straight off the node array.
int route(const RegressionTree& tree, const Vector& x) {
  const auto& nodes = tree.nodes();
  std::size_t k = 0;
  while (nodes[k].left >= 0) {
    k = static_cast<std::size_t>(x[nodes[k].feature] <= nodes[k].threshold ? nodes[k].left
                                                                            : nodes[k].right);
  }
  return static_cast<int>(k);
}

Vector brute_force_weights(const Forest& forest, const SimDataset& data, const Vector& s_y) {
  Vector w = Vector::Zero(data.size());
  for (Index j = 0; j < forest.theta_dim(); ++j) {
    for (int b = 0; b < forest.trees_per_parameter(); ++b) {
      const RegressionTree& tree = forest.tree(j, b);
      const int target = route(tree, s_y);
      std::vector<Index> members;
      for (Index i = 0; i < data.size(); ++i) {
        if (route(tree, data.summaries.row(i).transpose()) == target) members.push_back(i);
      }
      for (Index i : members) w[i] += 1.0 / static_cast<double>(members.size());
    }
  }
  return w / (static_cast<double>(forest.theta_dim()) * forest.trees_per_parameter());
}

SimDataset random_dataset(Index n, Index d_theta, Index d_s, Rng& rng) {
  SimDataset d;
  d.thetas.resize(n, d_theta);
  d.summaries.resize(n, d_s);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d_theta; ++j) d.thetas(i, j) = rng.normal();
    for (Index k = 0; k < d_s; ++k) {
      d.summaries(i, k) = d.thetas(i, k % d_theta) + 0.5 * rng.normal();
    }
  }
  return d;
}

TreeConfig small_config() {
  TreeConfig c;
  c.trees = 5;
  c.min_leaf = 3;
  c.min_split = 6;
  c.max_depth = 4;
  return c;
}

}  // namespace

TEST_CASE("fit_tree: indicator target splits at zero with gain 25") {
  Rng rng(1, 0);
  Matrix x(100, 3);
  Vector t(100);
  for (Index i = 0; i < 100; ++i) {
    x(i, 0) = i < 50 ? -1.0 : 1.0;
    x(i, 1) = rng.normal();
    x(i, 2) = rng.normal();
    t[i] = x(i, 0) > 0.0 ? 1.0 : 0.0;
  }
  TreeConfig c;
  c.min_leaf = 5;
  c.min_split = 10;
  const RegressionTree tree = fit_tree(x, t, c);
  const auto& root = tree.nodes()[0];
  CHECK(root.feature == 0);
  CHECK(root.threshold == 0.0);
  CHECK(brute_force_split(x, t, 5).gain == Approx(25.0));
  // Pure children stop.
  CHECK(tree.leaf_count() == 2);
}

TEST_CASE("fit_tree: constant targets give a single leaf") {
  Matrix x = Matrix::Random(100, 2);
  const RegressionTree tree = fit_tree(x, Vector::Constant(100, 3.0), TreeConfig{});
  CHECK(tree.nodes().size() == 1);
  CHECK(tree.nodes()[0].value == Approx(3.0));
}

TEST_CASE("fit_tree: fewer rows than min leaf give a single leaf") {
  Matrix x = Matrix::Random(10, 2);
  Vector t = Vector::LinSpaced(10, 0.0, 1.0);
  CHECK(fit_tree(x, t, TreeConfig{}).nodes().size() == 1);
}

TEST_CASE("fit_tree: root split agrees with brute force on random data") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, 11);
    Matrix x(50, 3);
    Vector t(50);
    for (Index i = 0; i < 50; ++i) {
      for (Index k = 0; k < 3; ++k) x(i, k) = rng.normal();
      t[i] = std::sin(2.0 * x(i, 1)) + 0.3 * x(i, 0) + 0.2 * rng.normal();
    }
    TreeConfig c;
    c.min_leaf = 5;
    c.min_split = 10;
    c.max_depth = 1;
    const RegressionTree tree = fit_tree(x, t, c);
    const Split oracle = brute_force_split(x, t, 5);
    REQUIRE(tree.nodes()[0].feature == oracle.feature);
    REQUIRE(tree.nodes()[0].threshold == oracle.threshold);
  }
}

TEST_CASE("fit_tree: structural invariants") {
  Rng rng(2, 2);
  Matrix x(600, 2);
  Vector t(600);
  for (Index i = 0; i < 600; ++i) {
    x(i, 0) = rng.normal();
    x(i, 1) = std::floor(4.0 * rng.uniform());  // heavy ties
    t[i] = x(i, 0) * x(i, 1) + 0.1 * rng.normal();
  }
  TreeConfig c;
  c.min_leaf = 20;
  c.min_split = 40;
  c.max_depth = 6;
  c.keep_leaf_members = true;
  const RegressionTree tree = fit_tree(x, t, c);
  CHECK(tree.depth() <= 6);
  std::vector<int> hits(tree.nodes().size(), 0);
  for (Index i = 0; i < 600; ++i) ++hits[static_cast<std::size_t>(tree.leaf_of(Vector(x.row(i).transpose())))];
  Index total = 0;
  for (std::size_t k = 0; k < tree.nodes().size(); ++k) {
    const auto& n = tree.nodes()[k];
    if (n.feature >= 0) {
      CHECK(hits[k] == 0);
      continue;
    }
    CHECK(n.samples >= 20);
    CHECK(hits[k] == n.samples);
    CHECK(static_cast<Index>(n.members.size()) == n.samples);
    for (Index r : n.members) CHECK(tree.leaf_of(Vector(x.row(r).transpose())) == static_cast<int>(k));
    total += n.samples;
  }
  CHECK(total == 600);
}

TEST_CASE("fit_forests: counts, degenerate ensemble, determinism") {
  Rng rng(3, 0);
  const SimDataset data = random_dataset(120, 2, 3, rng);
  TreeConfig c = small_config();
  Rng a(10, 0), b(10, 0);
  const Forest fa = fit_forests(data, c, a);
  const Forest fb = fit_forests(data, c, b);
  CHECK(fa.theta_dim() == 2);
  CHECK(fa.trees_per_parameter() == 5);
  for (Index j = 0; j < 2; ++j) {
    for (int t = 0; t < 5; ++t) {
      const auto& na = fa.tree(j, t).nodes();
      const auto& nb = fb.tree(j, t).nodes();
      REQUIRE(na.size() == nb.size());
      for (std::size_t k = 0; k < na.size(); ++k) {
        CHECK(na[k].feature == nb[k].feature);
        CHECK(na[k].threshold == nb[k].threshold);
      }
      const auto oob = fa.out_of_bag(j, t);
      const auto bag = fa.in_bag(j, t);
      CHECK(bag.size() == 120);
      for (Index r : oob) CHECK(std::find(bag.begin(), bag.end(), r) == bag.end());
    }
  }

  c.trees = 1;
  c.bootstrap = false;
  Rng r(1, 1);
  const Forest single = fit_forests(data, c, r);
  CHECK(single.out_of_bag(0, 0).empty());
  // Same tree as fitting directly on the standardised targets.
  const Vector col = data.thetas.col(1);
  const double m = col.mean();
  const double sd = std::sqrt((col.array() - m).square().mean());
  const RegressionTree direct = fit_tree(data.summaries, (col.array() - m) / sd, c);
  REQUIRE(direct.nodes().size() == single.tree(1, 0).nodes().size());
  for (std::size_t k = 0; k < direct.nodes().size(); ++k) {
    CHECK(direct.nodes()[k].feature == single.tree(1, 0).nodes()[k].feature);
    CHECK(direct.nodes()[k].threshold == single.tree(1, 0).nodes()[k].threshold);
  }
}

TEST_CASE("fit_forests: bootstrap presort matches generic fit on the same sample") {
  Rng rng(4, 0);
  const SimDataset data = random_dataset(200, 1, 3, rng);
  TreeConfig c = small_config();
  c.trees = 3;
  Rng f(2, 0);
  const Forest forest = fit_forests(data, c, f);
  const Vector col = data.thetas.col(0);
  const double m = col.mean();
  const double sd = std::sqrt((col.array() - m).square().mean());
  const Vector targets = (col.array() - m) / sd;
  for (int b = 0; b < 3; ++b) {
    const RegressionTree direct = fit_tree(data.summaries, targets, forest.in_bag(0, b), c);
    REQUIRE(direct.nodes().size() == forest.tree(0, b).nodes().size());
    for (std::size_t k = 0; k < direct.nodes().size(); ++k) {
      CHECK(direct.nodes()[k].feature == forest.tree(0, b).nodes()[k].feature);
      CHECK(direct.nodes()[k].threshold == forest.tree(0, b).nodes()[k].threshold);
      CHECK(direct.nodes()[k].samples == forest.tree(0, b).nodes()[k].samples);
    }
  }
}

TEST_CASE("proximity_weights: single-leaf and hand-routed examples") {
  SimDataset data;
  data.summaries = Matrix(4, 1);
  data.summaries << -2.0, -1.0, 1.0, 2.0;
  data.thetas = Matrix::Zero(4, 1);
  TreeConfig c;
  c.trees = 1;
  c.bootstrap = false;
  Rng rng(0, 0);
  // Constant θ: no split.
  const Forest flat = fit_forests(data, c, rng);
  const Vector w = proximity_weights(flat, data, SummaryVector::Constant(1, 0.3));
  for (Index i = 0; i < 4; ++i) CHECK(w[i] == 0.25);

  data.thetas << 0.0, 0.0, 1.0, 1.0;
  c.min_leaf = 1;
  c.min_split = 2;
  const Forest split = fit_forests(data, c, rng);
  REQUIRE(split.tree(0, 0).nodes()[0].threshold == 0.0);
  const Vector w2 = proximity_weights(split, data, SummaryVector::Constant(1, 1.5));
  CHECK(w2[0] == 0.0);
  CHECK(w2[1] == 0.0);
  CHECK(w2[2] == 0.5);
  CHECK(w2[3] == 0.5);
}

TEST_CASE("proximity_weights: brute-force oracle, pmf and invariance") {
  Rng rng(7, 0);
  const SimDataset data = random_dataset(30, 2, 3, rng);
  const SummaryVector s_y = data.summaries.row(4).transpose() + 0.1 * SummaryVector::Ones(3);
  Rng fit(99, 0);
  const Forest forest = fit_forests(data, small_config(), fit);
  const Vector w = proximity_weights(forest, data, s_y);
  const Vector oracle = brute_force_weights(forest, data, s_y);
  for (Index i = 0; i < 30; ++i) REQUIRE(w[i] == oracle[i]);
  CHECK(std::abs(w.sum() - 1.0) < 1e-12);
  CHECK(w.minCoeff() >= 0.0);
  CHECK(raw_proximity_weights(forest, data, s_y).sum() == Approx(10.0).epsilon(1e-12));

  // Weights depend on summaries only, given the trees.
  SimDataset permuted = data;
  for (Index i = 0; i < 30; ++i) permuted.thetas.row(i) = data.thetas.row(29 - i);
  const Vector wp = proximity_weights(forest, permuted, s_y);
  CHECK(wp == w);
}

TEST_CASE("proximity_weights: per-tree mass and extremity on 1D data") {
  Rng rng(8, 0);
  SimDataset data;
  data.thetas.resize(400, 1);
  data.summaries.resize(400, 1);
  for (Index i = 0; i < 400; ++i) {
    data.thetas(i, 0) = rng.normal();
    data.summaries(i, 0) = data.thetas(i, 0) + 0.3 * rng.normal();
  }
  const Index anchor = 17;
  const SummaryVector s_y = data.summaries.row(anchor).transpose();
  TreeConfig c = small_config();
  c.trees = 20;
  Rng fit(5, 0);
  const Forest forest = fit_forests(data, c, fit);
  const Vector w = proximity_weights(forest, data, s_y);
  // Rows never sharing a leaf with s_y get exactly zero.
  for (Index i = 0; i < 400; ++i) {
    bool shared = false;
    for (int b = 0; b < 20; ++b) {
      const auto& tree = forest.tree(0, b);
      shared |= tree.leaf_of(Vector(data.summaries.row(i).transpose())) == tree.leaf_of(s_y);
    }
    if (!shared) CHECK(w[i] == 0.0);
  }
  CHECK(w[anchor] == w.maxCoeff());

  // Per-tree contributions sum to one.
  TreeConfig one = c;
  one.trees = 1;
  Rng f1(6, 0);
  const Forest single = fit_forests(data, one, f1);
  CHECK(raw_proximity_weights(single, data, s_y).sum() == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("forest_precondition: ESS, verbatim rows, determinism") {
  Rng rng(9, 0);
  const SimDataset data = random_dataset(300, 1, 2, rng);
  const SummaryVector s_y = SummaryVector::Zero(2);
  TreeConfig c = small_config();
  c.min_leaf = 10;
  c.min_split = 20;
  Rng a(1, 0), b(1, 0);
  const PreconditionResult r = forest_precondition(data, s_y, c, 500, a);
  const PreconditionResult r2 = forest_precondition(data, s_y, c, 500, b);
  CHECK(r.weights == r2.weights);
  CHECK(r.resampled.thetas == r2.resampled.thetas);
  CHECK(r.ess >= 1.0);
  CHECK(r.ess <= 300.0);
  CHECK(r.ess < 300.0);
  CHECK(r.resampled.size() == 500);
  for (Index i = 0; i < r.resampled.size(); ++i) {
    bool found = false;
    for (Index k = 0; k < data.size() && !found; ++k) {
      found = data.summaries.row(k) == r.resampled.summaries.row(i) &&
              data.thetas.row(k) == r.resampled.thetas.row(i);
    }
    REQUIRE(found);
  }
}

TEST_CASE("forest_precondition: large resample matches the weighted moments") {
  Rng rng(12, 0);
  const SimDataset data = random_dataset(400, 2, 3, rng);
  const SummaryVector s_y = SummaryVector::Constant(3, 0.3);
  TreeConfig c = small_config();
  c.trees = 20;
  c.min_leaf = 10;
  c.min_split = 20;
  const Index m = 200000;
  Rng f(3, 0);
  const PreconditionResult r = forest_precondition(data, s_y, c, m, f);
  REQUIRE(r.resampled.size() == m);
  for (Index j = 0; j < 2; ++j) {
    const Vector col = data.thetas.col(j);
    const double wmean = r.weights.dot(col);
    const double wvar = r.weights.dot((col.array() - wmean).square().matrix());
    const Vector rcol = r.resampled.thetas.col(j);
    const double rmean = rcol.mean();
    const double rvar = (rcol.array() - rmean).square().mean();
    // Five multinomial standard errors.
    CHECK(std::abs(rmean - wmean) <= 5.0 * std::sqrt(wvar / static_cast<double>(m)));
    CHECK(rvar == Approx(wvar).epsilon(0.02));
  }
  for (Index k = 0; k < 3; ++k) {
    const Vector col = data.summaries.col(k);
    const double wmean = r.weights.dot(col);
    const double wvar = r.weights.dot((col.array() - wmean).square().matrix());
    CHECK(std::abs(r.resampled.summaries.col(k).mean() - wmean) <= 5.0 * std::sqrt(wvar / static_cast<double>(m)));
  }
}
