#include "prnpe/forest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace prnpe::forest {

void TreeConfig::validate() const {
  if (trees < 1) throw Error("forest: trees must be positive");
  if (max_depth < 1) throw Error("forest: max_depth must be at least 1");
  if (min_leaf < 1) throw Error("forest: min_leaf must be at least 1");
  if (min_split < 2) throw Error("forest: min_split must be at least 2");
  if (!(min_impurity_decrease >= 0.0)) throw Error("forest: min_impurity_decrease must be nonnegative");
  if (!(fit_fraction > 0.0 && fit_fraction <= 1.0)) throw Error("forest: fit_fraction must lie in (0, 1]");
}

int RegressionTree::leaf_of(const double* x, Index stride) const {
  if (nodes_.empty()) throw Error("forest: empty tree");
  int node = 0;
  while (nodes_[static_cast<std::size_t>(node)].feature >= 0) {
    const Node& n = nodes_[static_cast<std::size_t>(node)];
    node = x[n.feature * stride] <= n.threshold ? n.left : n.right;
  }
  return node;
}

double RegressionTree::predict(const Vector& x) const {
  return nodes_[static_cast<std::size_t>(leaf_of(x))].value;
}

int RegressionTree::depth() const {
  int d = 0;
  for (const auto& n : nodes_) d = std::max(d, n.depth);
  return d;
}

int RegressionTree::leaf_count() const {
  return static_cast<int>(std::count_if(nodes_.begin(), nodes_.end(),
                                        [](const Node& n) { return n.feature < 0; }));
}

namespace {

// Entries are positions in the sample (one per drawn row, duplicates included).
// sorted[f] lists entries ordered by feature f, ties by entry id.
RegressionTree grow(const Matrix& features, const Vector& targets,
                    const std::vector<Index>& sample, std::vector<std::vector<Index>> sorted,
                    const TreeConfig& config) {
  const Index n = static_cast<Index>(sample.size());
  const Index d = features.cols();
  RegressionTree tree;
  auto& nodes = tree.nodes();

  std::vector<char> goes_left(static_cast<std::size_t>(n));
  std::vector<Index> buffer(static_cast<std::size_t>(n));
  std::vector<double> vbuf(static_cast<std::size_t>(n));
  std::vector<double> tbuf(static_cast<std::size_t>(n));

  // Per feature, the sorted entries' values and targets, kept contiguous.
  std::vector<std::vector<double>> values(static_cast<std::size_t>(d));
  std::vector<std::vector<double>> tvals(static_cast<std::size_t>(d));
  for (Index f = 0; f < d; ++f) {
    const auto& order = sorted[static_cast<std::size_t>(f)];
    auto& v = values[static_cast<std::size_t>(f)];
    auto& t = tvals[static_cast<std::size_t>(f)];
    v.resize(static_cast<std::size_t>(n));
    t.resize(static_cast<std::size_t>(n));
    for (Index p = 0; p < n; ++p) {
      const Index row = sample[static_cast<std::size_t>(order[static_cast<std::size_t>(p)])];
      v[static_cast<std::size_t>(p)] = features(row, f);
      t[static_cast<std::size_t>(p)] = targets[row];
    }
  }

  struct Task {
    int node;
    Index begin;
    Index end;
  };
  std::vector<Task> stack;
  nodes.emplace_back();
  stack.push_back({0, 0, n});

  while (!stack.empty()) {
    const Task task = stack.back();
    stack.pop_back();
    const Index count = task.end - task.begin;
    const auto& first = sorted[0];
    const double* t0 = tvals[0].data();

    double sum = 0.0;
    for (Index p = task.begin; p < task.end; ++p) sum += t0[p];
    const double mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
    {
      auto& node = nodes[static_cast<std::size_t>(task.node)];
      node.samples = count;
      node.value = mean;
    }
    const int depth = nodes[static_cast<std::size_t>(task.node)].depth;

    int best_feature = -1;
    double best_threshold = 0.0;
    double best_gain = -1.0;
    if (depth < config.max_depth && count >= config.min_split && count >= 2 * config.min_leaf) {
      const double cnt = static_cast<double>(count);
      for (Index f = 0; f < d; ++f) {
        const double* v = values[static_cast<std::size_t>(f)].data() + task.begin;
        const double* t = tvals[static_cast<std::size_t>(f)].data() + task.begin;
        // Δ = S_L² n / (n_L n_R) with S_L the centred left sum.
        double left = 0.0;
        const Index lo = std::max<Index>(config.min_leaf, 1);
        const Index hi = count - config.min_leaf;
        for (Index i = 1; i < lo; ++i) left += t[i - 1] - mean;
        for (Index i = lo; i <= hi; ++i) {
          left += t[i - 1] - mean;
          const double a = v[i - 1];
          const double b = v[i];
          if (!(a < b)) continue;
          const double gain = left * left * cnt / (static_cast<double>(i) * static_cast<double>(count - i));
          if (gain > best_gain) {
            best_gain = gain;
            best_feature = static_cast<int>(f);
            double mid = 0.5 * a + 0.5 * b;
            if (mid >= b) mid = a;
            best_threshold = mid;
          }
        }
      }
    }

    if (best_feature < 0 || !(best_gain >= config.min_impurity_decrease)) {
      if (config.keep_leaf_members) {
        auto& members = nodes[static_cast<std::size_t>(task.node)].members;
        members.reserve(static_cast<std::size_t>(count));
        for (Index p = task.begin; p < task.end; ++p) {
          members.push_back(sample[static_cast<std::size_t>(first[static_cast<std::size_t>(p)])]);
        }
        std::sort(members.begin(), members.end());
      }
      continue;
    }

    Index n_left = 0;
    for (Index p = task.begin; p < task.end; ++p) {
      const Index e = first[static_cast<std::size_t>(p)];
      const bool left = features(sample[static_cast<std::size_t>(e)], best_feature) <= best_threshold;
      goes_left[static_cast<std::size_t>(e)] = left ? 1 : 0;
      n_left += left ? 1 : 0;
    }
    for (Index f = 0; f < d; ++f) {
      auto& order = sorted[static_cast<std::size_t>(f)];
      auto& v = values[static_cast<std::size_t>(f)];
      auto& t = tvals[static_cast<std::size_t>(f)];
      Index l = task.begin;
      Index r = 0;
      for (Index p = task.begin; p < task.end; ++p) {
        const auto up = static_cast<std::size_t>(p);
        const Index e = order[up];
        if (goes_left[static_cast<std::size_t>(e)]) {
          const auto ul = static_cast<std::size_t>(l++);
          order[ul] = e;
          v[ul] = v[up];
          t[ul] = t[up];
        } else {
          const auto ur = static_cast<std::size_t>(r++);
          buffer[ur] = e;
          vbuf[ur] = v[up];
          tbuf[ur] = t[up];
        }
      }
      std::copy(buffer.begin(), buffer.begin() + r, order.begin() + l);
      std::copy(vbuf.begin(), vbuf.begin() + r, v.begin() + l);
      std::copy(tbuf.begin(), tbuf.begin() + r, t.begin() + l);
    }

    const int left_id = static_cast<int>(nodes.size());
    const int right_id = left_id + 1;
    nodes.emplace_back();
    nodes.emplace_back();
    nodes[static_cast<std::size_t>(left_id)].depth = depth + 1;
    nodes[static_cast<std::size_t>(right_id)].depth = depth + 1;
    auto& node = nodes[static_cast<std::size_t>(task.node)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = left_id;
    node.right = right_id;
    // Right pushed first so the left subtree is grown first.
    stack.push_back({right_id, task.begin + n_left, task.end});
    stack.push_back({left_id, task.begin, task.begin + n_left});
  }
  return tree;
}

std::vector<Index> column_order(const Matrix& features, Index f) {
  std::vector<Index> order(static_cast<std::size_t>(features.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return features(a, f) < features(b, f); });
  return order;
}

void check_inputs(const Matrix& features, const Vector& targets) {
  if (features.cols() == 0) throw Error("forest: no features");
  if (features.rows() != targets.size()) throw Error("forest: feature/target row mismatch");
  if (!features.allFinite() || !targets.allFinite()) throw Error("forest: non-finite input");
}

// Draws the rows a tree is grown on.
std::vector<Index> draw_sample(Rng rng, Index rows, const TreeConfig& config) {
  const auto m = static_cast<Index>(std::ceil(config.fit_fraction * static_cast<double>(rows)));
  std::vector<Index> sample;
  if (config.bootstrap) {
    sample.resize(static_cast<std::size_t>(m));
    for (auto& s : sample) s = static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(rows)));
    std::sort(sample.begin(), sample.end());
  } else {
    sample.resize(static_cast<std::size_t>(rows));
    std::iota(sample.begin(), sample.end(), Index{0});
    if (m < rows) {
      // Partial Fisher-Yates.
      for (Index i = 0; i < m; ++i) {
        const auto j = i + static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(rows - i)));
        std::swap(sample[static_cast<std::size_t>(i)], sample[static_cast<std::size_t>(j)]);
      }
      sample.resize(static_cast<std::size_t>(m));
      std::sort(sample.begin(), sample.end());
    }
  }
  return sample;
}

}  // namespace

RegressionTree fit_tree(const Matrix& features, const Vector& targets,
                        const std::vector<Index>& sample, const TreeConfig& config) {
  config.validate();
  check_inputs(features, targets);
  for (Index r : sample) {
    if (r < 0 || r >= features.rows()) throw Error("forest: sample index out of range");
  }
  const Index n = static_cast<Index>(sample.size());
  std::vector<std::vector<Index>> sorted(static_cast<std::size_t>(features.cols()));
  for (Index f = 0; f < features.cols(); ++f) {
    auto& order = sorted[static_cast<std::size_t>(f)];
    order.resize(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
      return features(sample[static_cast<std::size_t>(a)], f) <
             features(sample[static_cast<std::size_t>(b)], f);
    });
  }
  return grow(features, targets, sample, std::move(sorted), config);
}

RegressionTree fit_tree(const Matrix& features, const Vector& targets, const TreeConfig& config) {
  std::vector<Index> all(static_cast<std::size_t>(features.rows()));
  std::iota(all.begin(), all.end(), Index{0});
  return fit_tree(features, targets, all, config);
}

std::vector<Index> Forest::in_bag(Index parameter, int b) const {
  return draw_sample(sample_streams_.at(static_cast<std::size_t>(parameter)).at(static_cast<std::size_t>(b)),
                     rows_, config_);
}

std::vector<Index> Forest::out_of_bag(Index parameter, int b) const {
  const std::vector<Index> used = in_bag(parameter, b);
  std::vector<char> seen(static_cast<std::size_t>(rows_), 0);
  for (Index r : used) seen[static_cast<std::size_t>(r)] = 1;
  std::vector<Index> oob;
  for (Index r = 0; r < rows_; ++r) {
    if (!seen[static_cast<std::size_t>(r)]) oob.push_back(r);
  }
  return oob;
}

Forest fit_forests(const SimDataset& dataset, const TreeConfig& config, Rng& rng) {
  config.validate();
  dataset.validate();
  const Matrix& features = dataset.summaries;
  const Index rows = dataset.size();
  const Index d = features.cols();
  if (rows < 1) throw Error("forest: empty dataset");
  check_inputs(features, Vector::Zero(rows));

  std::vector<std::vector<Index>> global(static_cast<std::size_t>(d));
  for (Index f = 0; f < d; ++f) global[static_cast<std::size_t>(f)] = column_order(features, f);

  Forest forest;
  forest.config_ = config;
  forest.rows_ = rows;
  forest.trees_.resize(static_cast<std::size_t>(dataset.theta_dim()));
  forest.sample_streams_.resize(static_cast<std::size_t>(dataset.theta_dim()));

  std::vector<Index> counts(static_cast<std::size_t>(rows));
  std::vector<Index> first_entry(static_cast<std::size_t>(rows));
  for (Index j = 0; j < dataset.theta_dim(); ++j) {
    // Standardised targets keep the impurity threshold scale-free.
    const Vector col = dataset.thetas.col(j);
    const double mean = col.mean();
    const double var = (col.array() - mean).square().mean();
    const Vector targets = var > 1e-300 ? Vector((col.array() - mean) / std::sqrt(var))
                                        : Vector(Vector::Zero(rows));
    Rng param_rng = rng.split(static_cast<std::uint64_t>(j));
    auto& trees = forest.trees_[static_cast<std::size_t>(j)];
    auto& streams = forest.sample_streams_[static_cast<std::size_t>(j)];
    trees.reserve(static_cast<std::size_t>(config.trees));
    streams.reserve(static_cast<std::size_t>(config.trees));
    for (int b = 0; b < config.trees; ++b) {
      const Rng stream = param_rng.split(static_cast<std::uint64_t>(b));
      streams.push_back(stream);
      const std::vector<Index> drawn = draw_sample(stream, rows, config);

      // Entries ordered by row; per-feature orders expand the global presort.
      std::fill(counts.begin(), counts.end(), Index{0});
      for (Index r : drawn) ++counts[static_cast<std::size_t>(r)];
      Index next = 0;
      for (Index r = 0; r < rows; ++r) {
        first_entry[static_cast<std::size_t>(r)] = next;
        next += counts[static_cast<std::size_t>(r)];
      }
      std::vector<std::vector<Index>> sorted(static_cast<std::size_t>(d));
      for (Index f = 0; f < d; ++f) {
        auto& order = sorted[static_cast<std::size_t>(f)];
        order.reserve(drawn.size());
        for (Index k = 0; k < rows; ++k) {
          const Index r = global[static_cast<std::size_t>(f)][static_cast<std::size_t>(k)];
          for (Index c = 0; c < counts[static_cast<std::size_t>(r)]; ++c) {
            order.push_back(first_entry[static_cast<std::size_t>(r)] + c);
          }
        }
      }
      trees.push_back(grow(features, targets, drawn, std::move(sorted), config));
    }
  }
  return forest;
}

Vector raw_proximity_weights(const Forest& forest, const SimDataset& dataset,
                             const SummaryVector& s_y) {
  const Matrix& features = dataset.summaries;
  if (s_y.size() != features.cols()) throw Error("forest: observation dimension mismatch");
  const Index rows = dataset.size();
  Vector w = Vector::Zero(rows);
  const Matrix by_row = features.transpose();  // column-major rows for routing
  std::vector<Index> members;
  struct Step {
    int feature;
    double threshold;
    bool left;
  };
  std::vector<Step> path;
  for (Index j = 0; j < forest.theta_dim(); ++j) {
    for (int b = 0; b < forest.trees_per_parameter(); ++b) {
      const auto& nodes = forest.tree(j, b).nodes();
      path.clear();
      int node = 0;
      while (nodes[static_cast<std::size_t>(node)].feature >= 0) {
        const auto& n = nodes[static_cast<std::size_t>(node)];
        const bool left = s_y[n.feature] <= n.threshold;
        path.push_back({n.feature, n.threshold, left});
        node = left ? n.left : n.right;
      }
      members.clear();
      for (Index i = 0; i < rows; ++i) {
        const double* x = by_row.col(i).data();
        bool same = true;
        for (const Step& s : path) {
          if ((x[s.feature] <= s.threshold) != s.left) {
            same = false;
            break;
          }
        }
        if (same) members.push_back(i);
      }
      if (members.empty()) throw Error("forest: observation leaf has no dataset rows");
      const double share = 1.0 / static_cast<double>(members.size());
      for (Index i : members) w[i] += share;
    }
  }
  return w;
}

Vector proximity_weights(const Forest& forest, const SimDataset& dataset,
                         const SummaryVector& s_y) {
  const Vector raw = raw_proximity_weights(forest, dataset, s_y);
  const double total = static_cast<double>(forest.theta_dim()) * forest.trees_per_parameter();
  return raw / total;
}

PreconditionResult forest_precondition(const SimDataset& dataset, const SummaryVector& s_y,
                                       const TreeConfig& config, Index resample_size, Rng& rng) {
  if (resample_size < 1) throw Error("forest: resample size must be positive");
  Rng fit_rng = rng.split("fit");
  const Forest forest = fit_forests(dataset, config, fit_rng);
  PreconditionResult out;
  out.weights = proximity_weights(forest, dataset, s_y);
  out.ess = ess(out.weights);
  Rng draw_rng = rng.split("resample");
  out.resampled = dataset.select(categorical_resample(out.weights, resample_size, draw_rng));
  out.resampled.weights.reset();
  return out;
}

}  // namespace prnpe::forest
